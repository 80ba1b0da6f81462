// Experiment configuration: a flat `key = value` text format.
//
//   # comment
//   env = GoToObj
//   mode = communicating        # communicating | no_communication | archimedean
//   n = 8
//   ppo.lr = 1e-4
//
// Unknown keys are rejected. Every key has a default; see apply_setting().
#pragma once

#include "srcomm/channel.hpp"
#include "srcomm/gridworld.hpp"
#include "srcomm/model.hpp"
#include "srcomm/ppo.hpp"

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace srcomm {

struct ExperimentConfig {
  EnvFamily env = EnvFamily::GoToObj;
  int max_steps = 64;
  BaselineMode mode = BaselineMode::Communicating;
  ChannelConfig channel;
  PPOConfig ppo;
  ModelConfig model;
  std::vector<std::uint64_t> seeds{1};
  long long frame_budget = 1'000'000;
  int metric_window = 75;  // collection batches per metric row
  int checkpoint_every = 0;  // batches; 0 keeps only the final checkpoint
  std::string pretrained;  // checkpoint to initialize from
  std::string output_dir = "runs";
  std::string label;  // curve label; derived from mode / n (and pretraining) when empty

  /// Model config with the channel and observation side filled in.
  ModelConfig resolved_model() const {
    ModelConfig m = model;
    m.channel = channel;
    m.sender_side = sender_side_for(env);
    return m;
  }

  std::string resolved_label() const {
    if (!label.empty()) return label;
    std::string base = "run";
    switch (mode) {
      case BaselineMode::Communicating: base = "n=" + std::to_string(channel.interval_n); break;
      case BaselineMode::NoCommunication: base = "no_communication"; break;
      case BaselineMode::ArchimedeanReceiver: base = "archimedean"; break;
    }
    return pretrained.empty() ? base : base + " pretrained";
  }

  void validate() const {
    if (max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
    channel.validate();
    ppo.validate();
    resolved_model().validate();
    if (seeds.empty()) throw std::invalid_argument("at least one seed is required");
    if (frame_budget < 0) throw std::invalid_argument("frame budget must be non-negative");
    if (metric_window < 1) throw std::invalid_argument("metric window must be >= 1");
    if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  if constexpr (std::is_floating_point_v<N>) {
    std::size_t used = 0;
    try {
      out = static_cast<N>(std::stod(v, &used));
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) throw std::invalid_argument("bad number for " + key + ": '" + v + "'");
  } else {
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size())
      throw std::invalid_argument("bad integer for " + key + ": '" + v + "'");
  }
  return out;
}

inline std::vector<std::uint64_t> parse_seed_list(const std::string& v) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (!part.empty()) out.push_back(parse_number<std::uint64_t>("seeds", part));
  }
  return out;
}

}  // namespace detail

/// Applies one `key = value` setting.
inline void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_number;
  const std::string& v = value;
  if (key == "env") c.env = parse_family(v);
  else if (key == "max_steps") c.max_steps = parse_number<int>(key, v);
  else if (key == "mode") c.mode = parse_mode(v);
  else if (key == "n") c.channel.interval_n = parse_number<int>(key, v);
  else if (key == "k") c.channel.length_k = parse_number<int>(key, v);
  else if (key == "vocab") c.channel.vocab_size = parse_number<int>(key, v);
  else if (key == "seeds") c.seeds = detail::parse_seed_list(v);
  else if (key == "frames") c.frame_budget = static_cast<long long>(parse_number<double>(key, v));
  else if (key == "window") c.metric_window = parse_number<int>(key, v);
  else if (key == "checkpoint_every") c.checkpoint_every = parse_number<int>(key, v);
  else if (key == "pretrained") c.pretrained = v;
  else if (key == "output_dir") c.output_dir = v;
  else if (key == "label") c.label = v;
  else if (key == "ppo.gamma") c.ppo.gamma = parse_number<double>(key, v);
  else if (key == "ppo.lambda") c.ppo.lambda = parse_number<double>(key, v);
  else if (key == "ppo.clip") c.ppo.clip_eps = parse_number<double>(key, v);
  else if (key == "ppo.epochs") c.ppo.epochs = parse_number<int>(key, v);
  else if (key == "ppo.minibatch") c.ppo.minibatch_size = parse_number<int>(key, v);
  else if (key == "ppo.lr") c.ppo.lr = parse_number<double>(key, v);
  else if (key == "ppo.entropy") c.ppo.entropy_coef = parse_number<double>(key, v);
  else if (key == "ppo.value_coef") c.ppo.value_coef = parse_number<double>(key, v);
  else if (key == "ppo.frames_per_env") c.ppo.frames_per_env = parse_number<int>(key, v);
  else if (key == "ppo.envs") c.ppo.num_envs = parse_number<int>(key, v);
  else if (key == "ppo.max_grad_norm") c.ppo.max_grad_norm = parse_number<double>(key, v);
  else if (key == "ppo.recurrence") c.ppo.recurrence = parse_number<int>(key, v);
  else if (key == "ppo.adam_eps") c.ppo.adam_eps = parse_number<double>(key, v);
  else if (key == "ppo.sender_lr") c.ppo.sender_lr = parse_number<double>(key, v);
  else if (key == "ppo.sender_entropy") c.ppo.sender_entropy_coef = parse_number<double>(key, v);
  else if (key == "model.word_dim") c.model.word_dim = parse_number<int>(key, v);
  else if (key == "model.instr_dim") c.model.instr_dim = parse_number<int>(key, v);
  else if (key == "model.message_dim") c.model.message_dim = parse_number<int>(key, v);
  else if (key == "model.channels") c.model.conv_channels = parse_number<int>(key, v);
  else if (key == "model.image_dim") c.model.image_dim = parse_number<int>(key, v);
  else if (key == "model.memory_dim") c.model.memory_dim = parse_number<int>(key, v);
  else if (key == "model.head_hidden") c.model.head_hidden = parse_number<int>(key, v);
  else if (key == "model.decoder_dim") c.model.decoder_dim = parse_number<int>(key, v);
  else if (key == "model.sender_cond_dim") c.model.sender_cond_dim = parse_number<int>(key, v);
  else if (key == "model.symbol_gain") c.model.symbol_gain = parse_number<double>(key, v);
  else throw std::invalid_argument("unknown config key: " + key);
}

/// Parses `key = value` lines; '#' starts a comment.
inline void apply_config_text(ExperimentConfig& c, std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    apply_setting(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline ExperimentConfig load_config_file(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  apply_config_text(base, ss.str());
  return base;
}

/// Full resolved configuration in the same format it is read from.
inline std::string to_config_text(const ExperimentConfig& c) {
  std::ostringstream o;
  o.precision(17);
  o << "env = " << family_name(c.env) << "\n"
    << "max_steps = " << c.max_steps << "\n"
    << "mode = " << mode_name(c.mode) << "\n"
    << "n = " << c.channel.interval_n << "\n"
    << "k = " << c.channel.length_k << "\n"
    << "vocab = " << c.channel.vocab_size << "\n";
  o << "seeds = ";
  for (std::size_t i = 0; i < c.seeds.size(); ++i) o << (i ? "," : "") << c.seeds[i];
  o << "\n"
    << "frames = " << c.frame_budget << "\n"
    << "window = " << c.metric_window << "\n"
    << "checkpoint_every = " << c.checkpoint_every << "\n";
  if (!c.pretrained.empty()) o << "pretrained = " << c.pretrained << "\n";
  o << "output_dir = " << c.output_dir << "\n";
  if (!c.label.empty()) o << "label = " << c.label << "\n";
  o << "ppo.gamma = " << c.ppo.gamma << "\n"
    << "ppo.lambda = " << c.ppo.lambda << "\n"
    << "ppo.clip = " << c.ppo.clip_eps << "\n"
    << "ppo.epochs = " << c.ppo.epochs << "\n"
    << "ppo.minibatch = " << c.ppo.minibatch_size << "\n"
    << "ppo.lr = " << c.ppo.lr << "\n"
    << "ppo.entropy = " << c.ppo.entropy_coef << "\n"
    << "ppo.value_coef = " << c.ppo.value_coef << "\n"
    << "ppo.frames_per_env = " << c.ppo.frames_per_env << "\n"
    << "ppo.envs = " << c.ppo.num_envs << "\n"
    << "ppo.max_grad_norm = " << c.ppo.max_grad_norm << "\n"
    << "ppo.recurrence = " << c.ppo.recurrence << "\n"
    << "ppo.adam_eps = " << c.ppo.adam_eps << "\n"
    << "ppo.sender_lr = " << c.ppo.sender_lr << "\n"
    << "ppo.sender_entropy = " << c.ppo.sender_entropy_coef << "\n"
    << "model.word_dim = " << c.model.word_dim << "\n"
    << "model.instr_dim = " << c.model.instr_dim << "\n"
    << "model.message_dim = " << c.model.message_dim << "\n"
    << "model.channels = " << c.model.conv_channels << "\n"
    << "model.image_dim = " << c.model.image_dim << "\n"
    << "model.memory_dim = " << c.model.memory_dim << "\n"
    << "model.head_hidden = " << c.model.head_hidden << "\n"
    << "model.decoder_dim = " << c.model.decoder_dim << "\n"
    << "model.sender_cond_dim = " << c.model.sender_cond_dim << "\n"
    << "model.symbol_gain = " << c.model.symbol_gain << "\n";
  return o.str();
}

}  // namespace srcomm
