// Versioned JSON checkpoints: configs, counters, parameters, buffers and
// optimizer moments of both agents. Matrices are stored column-major.
#pragma once

#include "srcomm/config.hpp"
#include "srcomm/layers.hpp"
#include "srcomm/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

namespace srcomm {

using json = nlohmann::json;

inline constexpr const char* kCheckpointFormat = "srcomm-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline json to_json(const ChannelConfig& c) {
  return {{"n", c.interval_n}, {"k", c.length_k}, {"vocab", c.vocab_size}};
}

inline ChannelConfig channel_from_json(const json& j) {
  ChannelConfig c;
  c.interval_n = j.at("n").get<int>();
  c.length_k = j.at("k").get<int>();
  c.vocab_size = j.at("vocab").get<int>();
  return c;
}

inline json to_json(const ModelConfig& m) {
  return {{"word_dim", m.word_dim},       {"instr_dim", m.instr_dim},       {"message_dim", m.message_dim},
          {"conv_channels", m.conv_channels}, {"image_dim", m.image_dim},   {"memory_dim", m.memory_dim},
          {"head_hidden", m.head_hidden}, {"decoder_dim", m.decoder_dim},   {"sender_cond_dim", m.sender_cond_dim},
          {"sender_side", m.sender_side}, {"num_actions", m.num_actions},   {"symbol_gain", m.symbol_gain},
          {"channel", to_json(m.channel)}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  m.word_dim = j.at("word_dim").get<int>();
  m.instr_dim = j.at("instr_dim").get<int>();
  m.message_dim = j.at("message_dim").get<int>();
  m.conv_channels = j.at("conv_channels").get<int>();
  m.image_dim = j.at("image_dim").get<int>();
  m.memory_dim = j.at("memory_dim").get<int>();
  m.head_hidden = j.at("head_hidden").get<int>();
  m.decoder_dim = j.at("decoder_dim").get<int>();
  m.sender_cond_dim = j.at("sender_cond_dim").get<int>();
  m.sender_side = j.at("sender_side").get<int>();
  m.num_actions = j.at("num_actions").get<int>();
  m.symbol_gain = j.value("symbol_gain", 1.0);
  m.channel = channel_from_json(j.at("channel"));
  return m;
}

template <typename T>
json matrix_to_json(const Mat<T>& m) {
  std::vector<double> data(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) data[static_cast<std::size_t>(i)] = static_cast<double>(m.data()[i]);
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

template <typename T>
Mat<T> matrix_from_json(const json& j, const std::string& what) {
  const auto rows = j.at("rows").get<Eigen::Index>(), cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw std::invalid_argument("checkpoint matrix " + what + " is malformed");
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(data[static_cast<std::size_t>(i)].get<double>());
  return m;
}

template <typename T>
json store_to_json(const nn::ParamStore<T>& store) {
  json params = json::object(), buffers = json::object();
  for (const auto& p : store.params()) params[p.name] = matrix_to_json(p.value);
  for (const auto& b : store.buffers()) buffers[b.name] = matrix_to_json(b.value);
  return {{"params", std::move(params)}, {"buffers", std::move(buffers)}};
}

/// Loads every parameter and buffer; names and shapes must match exactly.
template <typename T>
void store_from_json(nn::ParamStore<T>& store, const json& j) {
  auto load = [](auto& entries, const json& src, const char* kind) {
    if (src.size() != entries.size())
      throw std::invalid_argument(std::string("checkpoint ") + kind + " count differs from the model (" +
                                  std::to_string(src.size()) + " vs " + std::to_string(entries.size()) + ")");
    for (auto& p : entries) {
      if (!src.contains(p.name)) throw std::invalid_argument("checkpoint is missing " + p.name);
      Mat<T> m = matrix_from_json<T>(src.at(p.name), p.name);
      if (m.rows() != p.value.rows() || m.cols() != p.value.cols())
        throw std::invalid_argument("shape mismatch for " + p.name + ": checkpoint " + std::to_string(m.rows()) + "x" +
                                    std::to_string(m.cols()) + ", model " + std::to_string(p.value.rows()) + "x" +
                                    std::to_string(p.value.cols()));
      p.value = std::move(m);
    }
  };
  load(store.params(), j.at("params"), "parameter");
  load(store.buffers(), j.at("buffers"), "buffer");
}

template <typename T>
json adam_to_json(nn::Adam<T>& opt) {
  json m = json::array(), v = json::array();
  for (const auto& x : opt.first_moments()) m.push_back(matrix_to_json(x));
  for (const auto& x : opt.second_moments()) v.push_back(matrix_to_json(x));
  return {{"steps", opt.steps()}, {"m", std::move(m)}, {"v", std::move(v)}};
}

template <typename T>
void adam_from_json(nn::Adam<T>& opt, const json& j) {
  auto& m = opt.first_moments();
  auto& v = opt.second_moments();
  if (j.at("m").size() != m.size() || j.at("v").size() != v.size())
    throw std::invalid_argument("optimizer state does not match the model");
  for (std::size_t i = 0; i < m.size(); ++i) {
    Mat<T> a = matrix_from_json<T>(j.at("m")[i], "adam.m"), b = matrix_from_json<T>(j.at("v")[i], "adam.v");
    if (a.rows() != m[i].rows() || a.cols() != m[i].cols() || b.rows() != v[i].rows() || b.cols() != v[i].cols())
      throw std::invalid_argument("optimizer state shape mismatch");
    m[i] = std::move(a);
    v[i] = std::move(b);
  }
  opt.set_steps(j.at("steps").get<long long>());
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    f << j.dump();
  }
  std::filesystem::rename(tmp, path);
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return json::parse(f);
}

/// Header fields common to every checkpoint.
struct CheckpointInfo {
  EnvFamily env = EnvFamily::GoToObj;
  BaselineMode mode = BaselineMode::Communicating;
  ModelConfig model;
  long long frames = 0;
  long long batches = 0;
  std::uint64_t seed = 0;
};

inline CheckpointInfo checkpoint_info(const json& j) {
  if (j.value("format", "") != kCheckpointFormat) throw std::invalid_argument("not a checkpoint file");
  const int version = j.at("version").get<int>();
  if (version != kCheckpointVersion)
    throw std::invalid_argument("unsupported checkpoint version " + std::to_string(version));
  CheckpointInfo info;
  info.env = parse_family(j.at("env").get<std::string>());
  info.mode = parse_mode(j.at("mode").get<std::string>());
  info.model = model_config_from_json(j.at("model"));
  info.frames = j.at("frames").get<long long>();
  info.batches = j.at("batches").get<long long>();
  info.seed = j.at("seed").get<std::uint64_t>();
  return info;
}

/// Throws when a checkpoint cannot initialize models of the given shape.
inline void check_compatible(const CheckpointInfo& info, const ModelConfig& model, BaselineMode mode) {
  if (info.mode != mode)
    throw std::invalid_argument("checkpoint mode " + std::string(mode_name(info.mode)) + " does not match run mode " +
                                std::string(mode_name(mode)));
  ModelConfig a = info.model, b = model;
  // The interval does not change any parameter shape.
  a.channel.interval_n = b.channel.interval_n = 1;
  a.symbol_gain = b.symbol_gain = 1.0;
  if (!(a == b)) throw std::invalid_argument("checkpoint model/channel shape does not match the configuration");
}

/// Models restored from a checkpoint, for evaluation.
template <typename T>
struct LoadedAgents {
  CheckpointInfo info;
  std::unique_ptr<ReceiverModel<T>> receiver;
  std::unique_ptr<SenderModel<T>> sender;  // null unless communicating
};

template <typename T>
LoadedAgents<T> load_agents(const json& j) {
  LoadedAgents<T> out;
  out.info = checkpoint_info(j);
  out.receiver = std::make_unique<ReceiverModel<T>>(out.info.model, out.info.mode, 0);
  store_from_json(out.receiver->store(), j.at("receiver"));
  if (out.info.mode == BaselineMode::Communicating) {
    out.sender = std::make_unique<SenderModel<T>>(out.info.model, 0);
    store_from_json(out.sender->store(), j.at("sender"));
  }
  return out;
}

}  // namespace srcomm
