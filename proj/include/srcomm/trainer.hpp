// Training loop: alternates rollout collection with PPO updates of the
// receiver and (when communicating) the sender, logs windowed metrics and
// produces checkpoints.
#pragma once

#include "srcomm/checkpoint.hpp"
#include "srcomm/config.hpp"
#include "srcomm/ppo.hpp"
#include "srcomm/rollout.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace srcomm {

/// Independent stream derived from a run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

struct MetricsRow {
  long long frames = 0;
  long long batches = 0;
  int window_batches = 0;
  int episodes = 0;
  double mean_episode_length = std::numeric_limits<double>::quiet_NaN();
  double success_rate = std::numeric_limits<double>::quiet_NaN();
  LossStats receiver;
  LossStats sender;
  std::string label;
  std::uint64_t seed = 0;
};

inline constexpr const char* kMetricsHeader =
    "frames,batches,window_batches,episodes,mean_episode_length,success_rate,receiver_policy_loss,"
    "receiver_value_loss,receiver_entropy,sender_policy_loss,sender_value_loss,sender_entropy,label,seed";

inline std::string format_metrics_row(const MetricsRow& r) {
  std::ostringstream o;
  o << std::setprecision(8);
  auto num = [&](double v) -> std::ostream& {
    if (std::isnan(v)) return o << "nan";
    return o << v;
  };
  o << r.frames << ',' << r.batches << ',' << r.window_batches << ',' << r.episodes << ',';
  num(r.mean_episode_length) << ',';
  num(r.success_rate) << ',';
  num(r.receiver.policy_loss) << ',';
  num(r.receiver.value_loss) << ',';
  num(r.receiver.entropy) << ',';
  num(r.sender.policy_loss) << ',';
  num(r.sender.value_loss) << ',';
  num(r.sender.entropy) << ',' << r.label << ',' << r.seed;
  return o.str();
}

/// Append-only CSV; the header is written when the file is new or empty.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    out_.open(path, std::ios::app);
    if (!out_) throw std::runtime_error("cannot open metrics file " + path.string());
    if (fresh) out_ << kMetricsHeader << '\n';
    out_.flush();
  }
  void write(const MetricsRow& r) {
    out_ << format_metrics_row(r) << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

/// Sums over the batches of one metric window.
struct WindowAccumulator {
  int batches = 0;
  int episodes = 0;
  int successes = 0;
  double length_sum = 0.0;
  LossStats receiver, sender;

  void add(const RolloutBatch<float>& b, const LossStats& r, const LossStats& s) { add_impl(b.completed, r, s); }
  void add(const RolloutBatch<double>& b, const LossStats& r, const LossStats& s) { add_impl(b.completed, r, s); }

  MetricsRow row() const {
    MetricsRow m;
    m.window_batches = batches;
    m.episodes = episodes;
    if (episodes > 0) {
      m.mean_episode_length = length_sum / episodes;
      m.success_rate = static_cast<double>(successes) / episodes;
    }
    m.receiver = receiver.averaged();
    m.sender = sender.averaged();
    if (sender.minibatches == 0) {
      const double nan = std::numeric_limits<double>::quiet_NaN();
      m.sender.policy_loss = m.sender.value_loss = m.sender.entropy = nan;
    }
    return m;
  }

 private:
  void add_impl(const std::vector<EpisodeStats>& eps, const LossStats& r, const LossStats& s) {
    ++batches;
    for (const auto& e : eps) {
      ++episodes;
      length_sum += e.length;
      successes += e.success ? 1 : 0;
    }
    // Losses enter as per-batch averages.
    LossStats rr = r, ss = s;
    if (rr.minibatches > 0) rr.minibatches = 1;
    if (ss.minibatches > 0) ss.minibatches = 1;
    receiver.accumulate(rr);
    sender.accumulate(ss);
  }
};

struct TrainHooks {
  std::function<void(const MetricsRow&)> on_window;
  std::function<void(const json& checkpoint, bool final)> on_checkpoint;
  std::function<void(const std::string&)> log;
};

template <typename T = float>
class Trainer {
 public:
  Trainer(const ExperimentConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    cfg_.validate();
    if (cfg_.mode == BaselineMode::ArchimedeanReceiver && !(cfg_.channel == ChannelConfig{}))
      std::cerr << "warning: channel settings are ignored by the archimedean receiver\n";
    const ModelConfig model = cfg_.resolved_model();
    receiver_ = std::make_unique<ReceiverModel<T>>(model, cfg_.mode, derive_seed(seed, 1));
    receiver_opt_ = nn::Adam<T>(receiver_->store(), adam_options(cfg_.ppo));
    if (cfg_.mode == BaselineMode::Communicating) {
      sender_ = std::make_unique<SenderModel<T>>(model, derive_seed(seed, 2));
      sender_opt_ = nn::Adam<T>(sender_->store(), adam_options(cfg_.ppo.for_sender()));
    }
    EnvConfig env{cfg_.env, cfg_.max_steps, seed};
    collector_ = std::make_unique<RolloutCollector<T>>(env, cfg_.ppo.num_envs, cfg_.channel, cfg_.mode,
                                                       derive_seed(seed, 3), model.memory_dim);
    ppo_rng_.seed(derive_seed(seed, 4));
  }

  const ExperimentConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  long long frames() const { return frames_; }
  long long batches() const { return batches_; }
  ReceiverModel<T>& receiver() { return *receiver_; }
  SenderModel<T>* sender() { return sender_.get(); }

  json checkpoint() {
    json j = {{"format", kCheckpointFormat},
              {"version", kCheckpointVersion},
              {"env", std::string(family_name(cfg_.env))},
              {"mode", std::string(mode_name(cfg_.mode))},
              {"model", to_json(cfg_.resolved_model())},
              {"frames", frames_},
              {"batches", batches_},
              {"seed", seed_},
              {"label", cfg_.resolved_label()}};
    j["receiver"] = store_to_json(receiver_->store());
    j["sender"] = sender_ ? store_to_json(sender_->store()) : json(nullptr);
    json opt = {{"receiver", adam_to_json(receiver_opt_)}};
    if (sender_) opt["sender"] = adam_to_json(sender_opt_);
    j["optimizer"] = std::move(opt);
    return j;
  }

  /// Loads weights from a checkpoint. With `resume` the frame/batch counters
  /// and optimizer moments are restored too; otherwise they start from zero
  /// (initialization from a pretrained run).
  void restore(const json& j, bool resume) {
    const CheckpointInfo info = checkpoint_info(j);
    check_compatible(info, cfg_.resolved_model(), cfg_.mode);
    store_from_json(receiver_->store(), j.at("receiver"));
    if (sender_) store_from_json(sender_->store(), j.at("sender"));
    if (resume) {
      frames_ = info.frames;
      batches_ = info.batches;
      if (j.contains("optimizer")) {
        adam_from_json(receiver_opt_, j.at("optimizer").at("receiver"));
        if (sender_) adam_from_json(sender_opt_, j.at("optimizer").at("sender"));
      }
    }
  }

  /// Trains until the total frame count reaches the budget.
  void train(const TrainHooks& hooks = {}) {
    const long long per_batch = static_cast<long long>(cfg_.ppo.num_envs) * cfg_.ppo.frames_per_env;
    WindowAccumulator window;
    auto flush = [&] {
      if (window.batches == 0) return;
      MetricsRow row = window.row();
      row.frames = frames_;
      row.batches = batches_;
      row.label = cfg_.resolved_label();
      row.seed = seed_;
      if (hooks.on_window) hooks.on_window(row);
      window = {};
    };
    while (frames_ < cfg_.frame_budget) {
      auto batch = collector_->collect(sender_.get(), *receiver_, cfg_.ppo.frames_per_env, cfg_.ppo.gamma);
      const PreparedTargets targets = prepare_targets(batch, cfg_.ppo);
      LossStats r = ppo_update_receiver(*receiver_, receiver_opt_, batch, targets, cfg_.ppo, ppo_rng_);
      LossStats s;
      if (sender_) s = ppo_update_sender(*sender_, sender_opt_, batch, targets, cfg_.ppo.for_sender(), ppo_rng_);
      frames_ += per_batch;
      ++batches_;
      window.add(batch, r, s);
      if (window.batches == cfg_.metric_window) flush();
      if (cfg_.checkpoint_every > 0 && batches_ % cfg_.checkpoint_every == 0 && hooks.on_checkpoint &&
          frames_ < cfg_.frame_budget)
        hooks.on_checkpoint(checkpoint(), false);
    }
    flush();
    if (hooks.on_checkpoint) hooks.on_checkpoint(checkpoint(), true);
  }

 private:
  static typename nn::Adam<T>::Options adam_options(const PPOConfig& ppo) {
    typename nn::Adam<T>::Options o;
    o.lr = ppo.lr;
    o.eps = ppo.adam_eps;
    return o;
  }

  ExperimentConfig cfg_;
  std::uint64_t seed_;
  std::unique_ptr<ReceiverModel<T>> receiver_;
  std::unique_ptr<SenderModel<T>> sender_;
  nn::Adam<T> receiver_opt_;
  nn::Adam<T> sender_opt_;
  std::unique_ptr<RolloutCollector<T>> collector_;
  std::mt19937_64 ppo_rng_;
  long long frames_ = 0;
  long long batches_ = 0;
};

}  // namespace srcomm
