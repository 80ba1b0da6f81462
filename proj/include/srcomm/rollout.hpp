// Rollout collection with the sender/receiver frame cadence.
//
// At every environment step t: if the sender is due to speak (t mod n == 0)
// it observes, updates its memory and writes a message into the buffer; then
// the receiver observes, reads the buffer, updates its memory and acts. The
// receiver's value estimate at an emission step is V_r(S_i | m_i), the
// sender's one-step bootstrap target.
#pragma once

#include "srcomm/channel.hpp"
#include "srcomm/gridworld.hpp"
#include "srcomm/model.hpp"
#include "srcomm/returns.hpp"

#include <iostream>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

namespace srcomm {

/// One receiver frame r_t of one environment.
template <typename T>
struct ReceiverTransition {
  ReceiverObs obs;
  Instruction instruction;
  std::optional<Message> message;  // buffer content; empty reads as the all-zeros placeholder
  SenderObs world;  // only filled for the Archimedean receiver
  int action = 0;
  double log_prob = 0.0;
  double value = 0.0;  // V_r(S_t | buffered message)
  double reward = 0.0;  // R_{t+1}
  bool done = false;
  bool episode_start = false;
  RowVec<T> memory_h, memory_c;  // memory entering the frame
};

/// One sender frame s_i of one environment.
template <typename T>
struct SenderEmission {
  SenderObs obs;
  Message message;
  double log_prob = 0.0;
  double value = 0.0;  // V_s(S_i)
  double receiver_value = 0.0;  // V_r(S_i | m_i)
  double target = 0.0;  // gamma * V_r(S_i | m_i)
  bool episode_start = false;
  int frame = 0;  // index of the paired receiver frame within the segment
  RowVec<T> memory_h, memory_c;
};

struct EpisodeStats {
  int length = 0;
  double total_return = 0.0;
  bool success = false;
  int emissions = 0;
};

template <typename T>
struct RolloutBatch {
  int num_envs = 0;
  int frames_per_env = 0;
  std::vector<ReceiverTransition<T>> frames;  // index t * num_envs + e
  std::vector<std::vector<SenderEmission<T>>> emissions;  // per environment, in time order
  std::vector<double> bootstrap_values;  // V_r(S_T) per environment
  std::vector<EpisodeStats> completed;  // episodes that ended inside this batch

  ReceiverTransition<T>& frame(int t, int e) { return frames[static_cast<std::size_t>(t * num_envs + e)]; }
  const ReceiverTransition<T>& frame(int t, int e) const {
    return frames[static_cast<std::size_t>(t * num_envs + e)];
  }
  std::size_t emission_count() const {
    std::size_t n = 0;
    for (const auto& v : emissions) n += v.size();
    return n;
  }
};

/// Keeps per-environment state (episode, memories, buffer, RNG stream)
/// across successive collection batches.
template <typename T>
class RolloutCollector {
 public:
  RolloutCollector(const EnvConfig& env, int num_envs, const ChannelConfig& channel, BaselineMode mode,
                   std::uint64_t seed, int memory_dim)
      : env_(env), channel_(channel), mode_(mode), memory_dim_(memory_dim) {
    if (num_envs < 1) throw std::invalid_argument("need at least one environment");
    channel.validate();
    // One root seed derives an independent stream per worker.
    for (int e = 0; e < num_envs; ++e) {
      std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                        static_cast<std::uint32_t>(e), 0x5eedu};
      Worker w;
      w.rng.seed(seq);
      w.state = reset(env_, w.rng);
      w.receiver = AgentMemory<T>::zeros(1, memory_dim);
      w.sender = AgentMemory<T>::zeros(1, memory_dim);
      workers_.push_back(std::move(w));
    }
  }

  int num_envs() const { return static_cast<int>(workers_.size()); }
  BaselineMode mode() const { return mode_; }

  /// Collects frames_per_env synchronized steps from every environment.
  RolloutBatch<T> collect(const SenderModel<T>* sender, const ReceiverModel<T>& receiver, int frames_per_env,
                          double gamma) {
    if (mode_ == BaselineMode::Communicating && sender == nullptr)
      throw std::invalid_argument("communicating rollouts need a sender");
    if (receiver.mode() != mode_) throw std::invalid_argument("receiver model built for a different baseline mode");
    const int E = num_envs();
    RolloutBatch<T> batch;
    batch.num_envs = E;
    batch.frames_per_env = frames_per_env;
    batch.frames.resize(static_cast<std::size_t>(frames_per_env * E));
    batch.emissions.resize(static_cast<std::size_t>(E));

    for (int t = 0; t < frames_per_env; ++t) {
      std::vector<int> emitters;
      if (mode_ == BaselineMode::Communicating)
        for (int e = 0; e < E; ++e)
          if (should_emit(workers_[static_cast<std::size_t>(e)].t, channel_)) emitters.push_back(e);

      // Sender frames.
      std::vector<std::size_t> emission_slot(static_cast<std::size_t>(E), SIZE_MAX);
      if (!emitters.empty()) {
        auto out = sender_frame(*sender, emitters);
        for (std::size_t i = 0; i < emitters.size(); ++i) {
          const int e = emitters[i];
          Worker& w = workers_[static_cast<std::size_t>(e)];
          SenderEmission<T> em;
          em.obs = std::move(out.obs[i]);
          em.memory_h = w.sender.h.row(0);
          em.memory_c = w.sender.c.row(0);
          auto sampled = sample_message(out.log_probs, static_cast<Eigen::Index>(i), w.rng);
          em.message = sampled.message;
          em.log_prob = sampled.log_prob;
          em.value = static_cast<double>(out.values(static_cast<Eigen::Index>(i), 0));
          em.episode_start = w.t == 0;
          em.frame = t;
          w.sender.h = out.memory.h.row(static_cast<Eigen::Index>(i));
          w.sender.c = out.memory.c.row(static_cast<Eigen::Index>(i));
          w.buffer.write(sampled.message);
          ++w.emissions;
          emission_slot[static_cast<std::size_t>(e)] = batch.emissions[static_cast<std::size_t>(e)].size();
          batch.emissions[static_cast<std::size_t>(e)].push_back(std::move(em));
        }
      }

      // Receiver frames.
      std::vector<int> all(static_cast<std::size_t>(E));
      for (int e = 0; e < E; ++e) all[static_cast<std::size_t>(e)] = e;
      auto rout = receiver_frame(receiver, all, nullptr);
      for (int e = 0; e < E; ++e) {
        Worker& w = workers_[static_cast<std::size_t>(e)];
        ReceiverTransition<T>& fr = batch.frame(t, e);
        fr.obs = receiver_observation(w.state);
        fr.instruction = w.state.goal;
        if (mode_ == BaselineMode::Communicating) fr.message = w.buffer.latest();
        if (mode_ == BaselineMode::ArchimedeanReceiver) fr.world = sender_observation(w.state);
        fr.episode_start = w.t == 0;
        fr.memory_h = w.receiver.h.row(0);
        fr.memory_c = w.receiver.c.row(0);
        fr.action = sample_categorical(rout.log_probs.row(e), w.rng);
        fr.log_prob = static_cast<double>(rout.log_probs(e, fr.action));
        fr.value = static_cast<double>(rout.values(e, 0));
        w.receiver.h = rout.memory.h.row(e);
        w.receiver.c = rout.memory.c.row(e);

        if (auto slot = emission_slot[static_cast<std::size_t>(e)]; slot != SIZE_MAX) {
          auto& em = batch.emissions[static_cast<std::size_t>(e)][slot];
          em.receiver_value = fr.value;
          em.target = compute_sender_target(fr.value, em.value, gamma).target;
        }

        StepResult r = step(w.state, static_cast<Action>(fr.action));
        fr.reward = r.reward;
        fr.done = r.done;
        w.episode_return += r.reward;
        ++w.t;
        if (r.done) {
          batch.completed.push_back({w.state.step_count, w.episode_return, r.reward > 0, w.emissions});
          begin_episode(w);
        }
      }
    }
    batch.bootstrap_values = bootstrap_values(sender, receiver);
    return batch;
  }

 private:
  struct Worker {
    EnvState state;
    std::mt19937_64 rng;
    MessageBuffer buffer;
    AgentMemory<T> receiver;
    AgentMemory<T> sender;
    int t = 0;
    int emissions = 0;
    double episode_return = 0.0;
  };

  struct SenderOut {
    std::vector<SenderObs> obs;
    std::vector<Mat<T>> log_probs;
    Mat<T> values;
    AgentMemory<T> memory;
  };
  struct ReceiverOut {
    Mat<T> log_probs;
    Mat<T> values;
    AgentMemory<T> memory;
  };

  void begin_episode(Worker& w) {
    w.state = reset(env_, w.rng);
    w.receiver = AgentMemory<T>::zeros(1, memory_dim_);
    w.sender = AgentMemory<T>::zeros(1, memory_dim_);
    w.buffer.clear();
    w.t = 0;
    w.emissions = 0;
    w.episode_return = 0.0;
  }

  AgentMemory<T> gather_memory(const std::vector<int>& rows, bool sender) const {
    AgentMemory<T> m = AgentMemory<T>::zeros(static_cast<int>(rows.size()), memory_dim_);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Worker& w = workers_[static_cast<std::size_t>(rows[i])];
      const AgentMemory<T>& src = sender ? w.sender : w.receiver;
      m.h.row(static_cast<Eigen::Index>(i)) = src.h.row(0);
      m.c.row(static_cast<Eigen::Index>(i)) = src.c.row(0);
    }
    return m;
  }

  SenderOut sender_frame(const SenderModel<T>& sender, const std::vector<int>& rows) const {
    SenderOut out;
    for (int e : rows) out.obs.push_back(sender_observation(workers_[static_cast<std::size_t>(e)].state));
    Tape<T> tape(false);
    AgentMemory<T> mem = gather_memory(rows, true);
    auto step_out = sender.forward(tape, encode_sender_obs<T>(out.obs, sender.config().sender_side), mem.on(tape),
                                   /*training=*/false);
    out.log_probs = values_of(step_out.symbol_log_probs);
    out.values = step_out.value.value();
    out.memory = AgentMemory<T>::from(step_out.memory);
    return out;
  }

  /// Receiver forward for the given rows. `override_messages`, when set,
  /// replaces the buffer content per row.
  ReceiverOut receiver_frame(const ReceiverModel<T>& receiver, const std::vector<int>& rows,
                             const std::vector<const Message*>* override_messages) const {
    std::vector<ReceiverObs> obs;
    std::vector<Instruction> instr;
    for (int e : rows) {
      const Worker& w = workers_[static_cast<std::size_t>(e)];
      obs.push_back(receiver_observation(w.state));
      instr.push_back(w.state.goal);
    }
    Tape<T> tape(false);
    Var<T> instr_emb = receiver.encode_instruction(tape, encode_instructions<T>(instr));
    Var<T> msg_emb;
    if (mode_ == BaselineMode::ArchimedeanReceiver) {
      std::vector<SenderObs> world;
      for (int e : rows) world.push_back(sender_observation(workers_[static_cast<std::size_t>(e)].state));
      msg_emb = receiver.encode_world(tape, encode_sender_obs<T>(world, receiver.config().sender_side), false);
    } else {
      std::vector<const Message*> msgs;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const Worker& w = workers_[static_cast<std::size_t>(rows[i])];
        if (override_messages) msgs.push_back((*override_messages)[i]);
        else msgs.push_back(mode_ == BaselineMode::Communicating && w.buffer.latest() ? &*w.buffer.latest() : nullptr);
      }
      msg_emb = receiver.encode_message(tape, encode_messages<T>(msgs, receiver.config().channel));
    }
    AgentMemory<T> mem = gather_memory(rows, false);
    auto r = receiver.forward(tape, encode_receiver_obs<T>(obs), instr_emb, msg_emb, mem.on(tape), false);
    return {r.log_probs.value(), r.value.value(), AgentMemory<T>::from(r.memory)};
  }

  /// V_r(S_T) for truncated segments. When an emission is due at S_T the
  /// sender's arg-max message stands in for the sample; nothing is committed.
  std::vector<double> bootstrap_values(const SenderModel<T>* sender, const ReceiverModel<T>& receiver) const {
    const int E = num_envs();
    std::vector<int> all(static_cast<std::size_t>(E));
    for (int e = 0; e < E; ++e) all[static_cast<std::size_t>(e)] = e;
    std::vector<Message> tentative(static_cast<std::size_t>(E));
    std::vector<const Message*> msgs(static_cast<std::size_t>(E), nullptr);
    if (mode_ == BaselineMode::Communicating) {
      std::vector<int> emitters;
      for (int e = 0; e < E; ++e) {
        const Worker& w = workers_[static_cast<std::size_t>(e)];
        if (should_emit(w.t, channel_)) emitters.push_back(e);
        else if (w.buffer.latest()) msgs[static_cast<std::size_t>(e)] = &*w.buffer.latest();
      }
      if (!emitters.empty()) {
        auto out = sender_frame(*sender, emitters);
        for (std::size_t i = 0; i < emitters.size(); ++i) {
          tentative[static_cast<std::size_t>(emitters[i])] = argmax_message(out.log_probs, static_cast<Eigen::Index>(i));
          msgs[static_cast<std::size_t>(emitters[i])] = &tentative[static_cast<std::size_t>(emitters[i])];
        }
      }
    }
    auto r = receiver_frame(receiver, all, &msgs);
    std::vector<double> v(static_cast<std::size_t>(E));
    for (int e = 0; e < E; ++e) v[static_cast<std::size_t>(e)] = static_cast<double>(r.values(e, 0));
    return v;
  }

  EnvConfig env_;
  ChannelConfig channel_;
  BaselineMode mode_;
  int memory_dim_;
  std::vector<Worker> workers_;
};

}  // namespace srcomm
