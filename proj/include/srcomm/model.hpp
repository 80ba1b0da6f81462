// Recurrent actor-critic networks for the receiver and the sender.
//
// Both agents share the same observation pipeline: per-cell one-hot codes, a
// 1x1 stem, two FiLM blocks and a flattening projection feeding an LSTM
// memory. The receiver conditions its FiLM blocks on the instruction
// embedding concatenated with the message embedding; the sender, which never
// sees the instruction, conditions on a learned constant and decodes its
// memory into k symbol distributions.
#pragma once

#include "srcomm/channel.hpp"
#include "srcomm/gridworld.hpp"
#include "srcomm/layers.hpp"

#include <cmath>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace srcomm {

using ad::ColVec;
using ad::Mat;
using ad::RowVec;
using ad::Tape;
using ad::Var;

/// Width of the per-cell one-hot code: kinds, colors, states.
inline constexpr int kCellFeatures = cell_code::kNumKinds + kNumColors + cell_code::kNumStates;

enum class BaselineMode : std::uint8_t { Communicating = 0, NoCommunication = 1, ArchimedeanReceiver = 2 };

inline std::string_view mode_name(BaselineMode m) {
  switch (m) {
    case BaselineMode::Communicating: return "communicating";
    case BaselineMode::NoCommunication: return "no_communication";
    case BaselineMode::ArchimedeanReceiver: return "archimedean";
  }
  return "?";
}

inline BaselineMode parse_mode(std::string_view s) {
  if (s == "communicating" || s == "comm") return BaselineMode::Communicating;
  if (s == "no_communication" || s == "nocomm" || s == "none") return BaselineMode::NoCommunication;
  if (s == "archimedean" || s == "arch") return BaselineMode::ArchimedeanReceiver;
  throw std::invalid_argument("unknown baseline mode: " + std::string(s));
}

struct ModelConfig {
  int word_dim = 16;
  int instr_dim = 32;
  int message_dim = 32;
  int conv_channels = 16;
  int image_dim = 64;
  int memory_dim = 64;
  int head_hidden = 64;
  int decoder_dim = 32;
  int sender_cond_dim = 16;
  int sender_side = 8;  // side of the square sender observation
  int num_actions = kNumActions;
  double symbol_gain = 1.0;  // initialization gain of the sender's symbol layer
  ChannelConfig channel;

  void validate() const {
    for (int v : {word_dim, instr_dim, message_dim, conv_channels, image_dim, memory_dim, head_hidden, decoder_dim,
                  sender_cond_dim, sender_side})
      if (v <= 0) throw std::invalid_argument("model widths must be positive");
    if (num_actions != kNumActions) throw std::invalid_argument("action head must have 7 outputs");
    if (!(symbol_gain > 0.0)) throw std::invalid_argument("symbol gain must be positive");
    channel.validate();
  }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline int sender_side_for(EnvFamily f) { return f == EnvFamily::GoToObj ? 8 : 9; }

/// Recurrent state of one agent for a batch (rows) of environments.
template <typename T>
struct AgentMemory {
  Mat<T> h;
  Mat<T> c;

  static AgentMemory zeros(int batch, int width) {
    return {Mat<T>::Zero(batch, width), Mat<T>::Zero(batch, width)};
  }
  nn::LstmState<T> on(Tape<T>& tape) const { return {tape.constant(h), tape.constant(c)}; }
  static AgentMemory from(const nn::LstmState<T>& s) { return {s.h.value(), s.c.value()}; }
};

// ---------------------------------------------------------------------------
// Input encoding
// ---------------------------------------------------------------------------

inline void write_cell_one_hot(const CellCode& code, auto&& row) {
  row.setZero();
  row(code[0]) = 1;
  row(cell_code::kNumKinds + code[1]) = 1;
  row(cell_code::kNumKinds + kNumColors + code[2]) = 1;
}

template <typename T>
Mat<T> encode_receiver_obs(std::span<const ReceiverObs> batch) {
  Mat<T> out(static_cast<Eigen::Index>(batch.size()) * 4, kCellFeatures);
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (int i = 0; i < 4; ++i) write_cell_one_hot(batch[b].cells[static_cast<std::size_t>(i)], out.row(b * 4 + i));
  return out;
}

template <typename T>
Mat<T> encode_sender_obs(std::span<const SenderObs> batch, int side) {
  const Eigen::Index cells = static_cast<Eigen::Index>(side) * side;
  Mat<T> out(static_cast<Eigen::Index>(batch.size()) * cells, kCellFeatures);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].side != side) throw std::invalid_argument("sender observation side does not match the model");
    for (Eigen::Index i = 0; i < cells; ++i)
      write_cell_one_hot(batch[b].cells[static_cast<std::size_t>(i)], out.row(static_cast<Eigen::Index>(b) * cells + i));
  }
  return out;
}

/// One (B x vocab) one-hot matrix per token position.
template <typename T>
std::vector<Mat<T>> encode_instructions(std::span<const Instruction> batch) {
  std::vector<Mat<T>> steps;
  for (int j = 0; j < instruction_vocab::kLength; ++j) {
    Mat<T> m = Mat<T>::Zero(static_cast<Eigen::Index>(batch.size()), instruction_vocab::kSize);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const int tok = batch[b].tokens[static_cast<std::size_t>(j)];
      if (tok < 0 || tok >= instruction_vocab::kSize) throw std::invalid_argument("unknown instruction token id");
      m(static_cast<Eigen::Index>(b), tok) = 1;
    }
    steps.push_back(std::move(m));
  }
  return steps;
}

/// One (B x |V|) matrix per symbol slot; a missing message is all zeros.
template <typename T>
std::vector<Mat<T>> encode_messages(std::span<const Message* const> batch, const ChannelConfig& channel) {
  std::vector<Mat<T>> steps;
  for (int j = 0; j < channel.length_k; ++j) {
    Mat<T> m = Mat<T>::Zero(static_cast<Eigen::Index>(batch.size()), channel.vocab_size);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      if (!batch[b]) continue;
      if (static_cast<int>(batch[b]->symbols.size()) != channel.length_k)
        throw std::invalid_argument("message length does not match the channel");
      const int s = batch[b]->symbols[static_cast<std::size_t>(j)];
      if (s < 0 || s >= channel.vocab_size) throw std::invalid_argument("message symbol out of range");
      m(static_cast<Eigen::Index>(b), s) = 1;
    }
    steps.push_back(std::move(m));
  }
  return steps;
}

// ---------------------------------------------------------------------------
// Observation encoder
// ---------------------------------------------------------------------------

template <typename T>
struct ObsEncoder {
  nn::Linear<T> stem;
  nn::FilmBlock<T> block1;
  nn::FilmBlock<T> block2;
  nn::Linear<T> project;
  int side = 0;

  ObsEncoder() = default;
  ObsEncoder(nn::ParamStore<T>& store, const std::string& name, int side_cells, int channels, int cond_dim,
             int out_dim, std::mt19937_64& rng)
      : stem(store, name + ".stem", kCellFeatures, channels, rng),
        block1(store, name + ".film1", channels, channels, cond_dim, rng),
        block2(store, name + ".film2", channels, channels, cond_dim, rng),
        project(store, name + ".project", side_cells * side_cells * channels, out_dim, rng),
        side(side_cells) {}

  Var<T> operator()(Tape<T>& tape, const Mat<T>& cells_one_hot, Var<T> cond, bool training,
                    const ColVec<T>* sample_weight = nullptr) const {
    const int positions = side * side;
    if (cells_one_hot.rows() % positions != 0) throw std::invalid_argument("observation encoder: row mismatch");
    const int batch = static_cast<int>(cells_one_hot.rows() / positions);
    Var<T> x = ad::relu(stem(tape, tape.constant(cells_one_hot)));
    x = block1(tape, x, cond, batch, side, side, training, sample_weight);
    x = block2(tape, x, cond, batch, side, side, training, sample_weight);
    return ad::relu(project(tape, ad::flatten_positions(x, batch, positions)));
  }
};

/// Two-layer head: Linear -> tanh -> Linear.
template <typename T>
struct Head {
  nn::Linear<T> hidden;
  nn::Linear<T> out;

  Head() = default;
  Head(nn::ParamStore<T>& store, const std::string& name, int in, int width, int outputs, std::mt19937_64& rng,
       double out_gain)
      : hidden(store, name + ".hidden", in, width, rng), out(store, name + ".out", width, outputs, rng, out_gain) {}

  Var<T> operator()(Tape<T>& tape, Var<T> x) const { return out(tape, ad::tanh(hidden(tape, x))); }
};

// ---------------------------------------------------------------------------
// Receiver
// ---------------------------------------------------------------------------

/// Result of one receiver frame on the tape.
template <typename T>
struct ReceiverStep {
  Var<T> log_probs;  // B x num_actions
  Var<T> value;  // B x 1
  nn::LstmState<T> memory;
};

template <typename T>
class ReceiverModel {
 public:
  ReceiverModel(const ModelConfig& config, BaselineMode mode, std::uint64_t seed) : config_(config), mode_(mode) {
    config.validate();
    std::mt19937_64 rng(seed);
    const int cond_dim = config.instr_dim + config.message_dim;
    word_embedding_ = &store_.add("receiver.instr.embedding",
                                  nn::orthogonal<T>(instruction_vocab::kSize, config.word_dim, rng));
    instr_gru_ = nn::GruCell<T>(store_, "receiver.instr.gru", config.word_dim, config.instr_dim, rng);
    if (mode == BaselineMode::ArchimedeanReceiver) {
      world_cond_ = &store_.add("receiver.world.cond", random_row(config.sender_cond_dim, rng));
      world_encoder_ = ObsEncoder<T>(store_, "receiver.world", config.sender_side, config.conv_channels,
                                     config.sender_cond_dim, config.message_dim, rng);
    } else {
      message_lstm_ = nn::LstmCell<T>(store_, "receiver.message.lstm", config.channel.vocab_size,
                                      config.message_dim, rng);
    }
    encoder_ = ObsEncoder<T>(store_, "receiver.obs", ReceiverObs::kSide, config.conv_channels, cond_dim,
                             config.image_dim, rng);
    memory_ = nn::LstmCell<T>(store_, "receiver.memory", config.image_dim, config.memory_dim, rng);
    actor_ = Head<T>(store_, "receiver.actor", config.memory_dim, config.head_hidden, config.num_actions, rng, 0.01);
    critic_ = Head<T>(store_, "receiver.critic", config.memory_dim, config.head_hidden, 1, rng, 1.0);
  }
  ReceiverModel(const ReceiverModel&) = delete;
  ReceiverModel& operator=(const ReceiverModel&) = delete;

  const ModelConfig& config() const { return config_; }
  BaselineMode mode() const { return mode_; }
  nn::ParamStore<T>& store() { return store_; }
  const nn::ParamStore<T>& store() const { return store_; }
  const Head<T>& actor() const { return actor_; }

  /// Final GRU state over the instruction tokens.
  Var<T> encode_instruction(Tape<T>& tape, const std::vector<Mat<T>>& token_one_hots) const {
    if (token_one_hots.empty()) throw std::invalid_argument("empty instruction");
    const auto batch = token_one_hots[0].rows();
    Var<T> h = tape.constant(Mat<T>::Zero(batch, config_.instr_dim));
    Var<T> table = tape.param(*word_embedding_);
    for (const auto& tok : token_one_hots) h = instr_gru_(tape, ad::matmul(tape.constant(tok), table), h);
    return h;
  }

  /// Normalized final LSTM hidden state over the k symbol vectors.
  Var<T> encode_message(Tape<T>& tape, const std::vector<Mat<T>>& symbol_one_hots) const {
    if (mode_ == BaselineMode::ArchimedeanReceiver)
      throw std::logic_error("the Archimedean receiver does not read messages");
    if (static_cast<int>(symbol_one_hots.size()) != config_.channel.length_k)
      throw std::invalid_argument("message length does not match the channel");
    const auto batch = symbol_one_hots[0].rows();
    nn::LstmState<T> s{tape.constant(Mat<T>::Zero(batch, config_.message_dim)),
                       tape.constant(Mat<T>::Zero(batch, config_.message_dim))};
    for (const auto& sym : symbol_one_hots) s = message_lstm_(tape, tape.constant(sym), s);
    return ad::layer_norm(s.h, T(1e-5));
  }

  /// Stand-in for the message embedding: the sender's full view encoded directly.
  Var<T> encode_world(Tape<T>& tape, const Mat<T>& sender_cells, bool training,
                      const ColVec<T>* sample_weight = nullptr) const {
    if (mode_ != BaselineMode::ArchimedeanReceiver) throw std::logic_error("world encoder requires Archimedean mode");
    const auto batch = sender_cells.rows() / (config_.sender_side * config_.sender_side);
    Var<T> cond = ad::repeat_rows(tape.param(*world_cond_), batch);
    return world_encoder_(tape, sender_cells, cond, training, sample_weight);
  }

  ReceiverStep<T> forward(Tape<T>& tape, const Mat<T>& obs_cells, Var<T> instruction, Var<T> message,
                          nn::LstmState<T> memory, bool training, const ColVec<T>* sample_weight = nullptr) const {
    Var<T> cond = ad::concat_cols<T>({instruction, message});
    Var<T> image = encoder_(tape, obs_cells, cond, training, sample_weight);
    nn::LstmState<T> next = memory_(tape, image, memory);
    return {ad::log_softmax(actor_(tape, next.h)), critic_(tape, next.h), next};
  }

 private:
  static Mat<T> random_row(int width, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(width)));
    Mat<T> m(1, width);
    for (int i = 0; i < width; ++i) m(0, i) = static_cast<T>(normal(rng));
    return m;
  }

  ModelConfig config_;
  BaselineMode mode_;
  nn::ParamStore<T> store_;
  ad::Parameter<T>* word_embedding_ = nullptr;
  nn::GruCell<T> instr_gru_;
  nn::LstmCell<T> message_lstm_;
  ad::Parameter<T>* world_cond_ = nullptr;
  ObsEncoder<T> world_encoder_;
  ObsEncoder<T> encoder_;
  nn::LstmCell<T> memory_;
  Head<T> actor_;
  Head<T> critic_;
};

// ---------------------------------------------------------------------------
// Sender
// ---------------------------------------------------------------------------

template <typename T>
struct SenderStep {
  std::vector<Var<T>> symbol_log_probs;  // k entries of B x |V|
  Var<T> value;  // B x 1
  nn::LstmState<T> memory;
};

template <typename T>
class SenderModel {
 public:
  SenderModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(config.sender_cond_dim)));
    Mat<T> cond(1, config.sender_cond_dim);
    for (int i = 0; i < config.sender_cond_dim; ++i) cond(0, i) = static_cast<T>(normal(rng));
    cond_ = &store_.add("sender.cond", cond);
    encoder_ = ObsEncoder<T>(store_, "sender.obs", config.sender_side, config.conv_channels, config.sender_cond_dim,
                             config.image_dim, rng);
    memory_ = nn::LstmCell<T>(store_, "sender.memory", config.image_dim, config.memory_dim, rng);
    decoder_ = nn::LstmCell<T>(store_, "sender.decoder.lstm", config.memory_dim, config.decoder_dim, rng);
    symbol_out_ = nn::Linear<T>(store_, "sender.decoder.out", config.decoder_dim, config.channel.vocab_size, rng,
                                config.symbol_gain);
    critic_ = Head<T>(store_, "sender.critic", config.memory_dim, config.head_hidden, 1, rng, 1.0);
  }
  SenderModel(const SenderModel&) = delete;
  SenderModel& operator=(const SenderModel&) = delete;

  const ModelConfig& config() const { return config_; }
  nn::ParamStore<T>& store() { return store_; }
  const nn::ParamStore<T>& store() const { return store_; }
  const nn::Linear<T>& symbol_out() const { return symbol_out_; }

  SenderStep<T> forward(Tape<T>& tape, const Mat<T>& obs_cells, nn::LstmState<T> memory, bool training,
                        const ColVec<T>* sample_weight = nullptr) const {
    const auto batch = obs_cells.rows() / (config_.sender_side * config_.sender_side);
    Var<T> cond = ad::repeat_rows(tape.param(*cond_), batch);
    Var<T> image = encoder_(tape, obs_cells, cond, training, sample_weight);
    nn::LstmState<T> next = memory_(tape, image, memory);
    // The decoder reads the normalized memory state at every unroll step.
    Var<T> dec_in = ad::layer_norm(next.h, T(1e-5));
    nn::LstmState<T> dec{tape.constant(Mat<T>::Zero(batch, config_.decoder_dim)),
                         tape.constant(Mat<T>::Zero(batch, config_.decoder_dim))};
    SenderStep<T> out;
    for (int j = 0; j < config_.channel.length_k; ++j) {
      dec = decoder_(tape, dec_in, dec);
      out.symbol_log_probs.push_back(ad::log_softmax(symbol_out_(tape, ad::layer_norm(dec.h, T(1e-5)))));
    }
    out.value = critic_(tape, next.h);
    out.memory = next;
    return out;
  }

 private:
  ModelConfig config_;
  nn::ParamStore<T> store_;
  ad::Parameter<T>* cond_ = nullptr;
  ObsEncoder<T> encoder_;
  nn::LstmCell<T> memory_;
  nn::LstmCell<T> decoder_;
  nn::Linear<T> symbol_out_;
  Head<T> critic_;
};

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Inverse-CDF draw from a row of log-probabilities.
template <typename Derived>
int sample_categorical(const Eigen::MatrixBase<Derived>& log_probs_row, std::mt19937_64& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  const Eigen::Index n = log_probs_row.size();
  for (Eigen::Index i = 0; i < n; ++i) {
    acc += std::exp(static_cast<double>(log_probs_row(i)));
    if (u < acc) return static_cast<int>(i);
  }
  // Rounding left u beyond the accumulated mass: take the last supported entry.
  for (Eigen::Index i = n - 1; i >= 0; --i)
    if (std::exp(static_cast<double>(log_probs_row(i))) > 0) return static_cast<int>(i);
  return static_cast<int>(n - 1);
}

/// Lowest index of the maximum.
template <typename Derived>
int argmax_row(const Eigen::MatrixBase<Derived>& row) {
  int best = 0;
  for (Eigen::Index i = 1; i < row.size(); ++i)
    if (row(i) > row(best)) best = static_cast<int>(i);
  return best;
}

struct SampledMessage {
  Message message;
  double log_prob = 0.0;
};

/// Independent draw per symbol slot; log-probability is the slot sum.
template <typename T>
SampledMessage sample_message(const std::vector<Mat<T>>& symbol_log_probs, Eigen::Index row, std::mt19937_64& rng) {
  SampledMessage out;
  for (const auto& lp : symbol_log_probs) {
    const int s = sample_categorical(lp.row(row), rng);
    out.message.symbols.push_back(s);
    out.log_prob += static_cast<double>(lp(row, s));
  }
  return out;
}

template <typename T>
Message argmax_message(const std::vector<Mat<T>>& symbol_log_probs, Eigen::Index row) {
  Message m;
  for (const auto& lp : symbol_log_probs) m.symbols.push_back(argmax_row(lp.row(row)));
  return m;
}

template <typename T>
std::vector<Mat<T>> values_of(const std::vector<Var<T>>& vars) {
  std::vector<Mat<T>> out;
  out.reserve(vars.size());
  for (const auto& v : vars) out.push_back(v.value());
  return out;
}

}  // namespace srcomm
