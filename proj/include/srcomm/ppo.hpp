// Proximal policy optimization for the receiver and the sender.
//
// Recurrent replay: frames (or emissions) of one environment are cut into
// chunks of `recurrence` items. Each chunk is replayed from the memory stored
// at its first item, with memories zeroed at episode starts; no gradient flows
// across chunk boundaries. Sender and receiver have separate losses and
// separate optimizer states.
#pragma once

#include "srcomm/model.hpp"
#include "srcomm/returns.hpp"
#include "srcomm/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace srcomm {

struct PPOConfig {
  double gamma = 0.99;
  double lambda = 0.99;
  double clip_eps = 0.2;
  int epochs = 4;
  int minibatch_size = 1280;  // items per minibatch
  double lr = 1e-4;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  int frames_per_env = 40;
  int num_envs = 64;
  double max_grad_norm = 0.5;
  int recurrence = 20;
  double adam_eps = 1e-5;
  double sender_lr = 0.0;  // 0: same as lr
  double sender_entropy_coef = -1.0;  // negative: same as entropy_coef

  /// Settings the sender update runs with.
  PPOConfig for_sender() const {
    PPOConfig c = *this;
    if (sender_lr > 0.0) c.lr = sender_lr;
    if (sender_entropy_coef >= 0.0) c.entropy_coef = sender_entropy_coef;
    return c;
  }

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("discount must lie in (0, 1]");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("GAE lambda must lie in [0, 1]");
    if (!(clip_eps > 0.0)) throw std::invalid_argument("clip range must be positive");
    if (epochs < 1 || minibatch_size < 1 || frames_per_env < 1 || num_envs < 1 || recurrence < 1)
      throw std::invalid_argument("PPO counts must be positive");
    if (!(lr > 0.0) || sender_lr < 0.0) throw std::invalid_argument("learning rate must be positive");
    if (entropy_coef < 0.0 || value_coef < 0.0 || max_grad_norm < 0.0)
      throw std::invalid_argument("PPO coefficients must be non-negative");
  }
};

struct LossStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;
  int minibatches = 0;

  void accumulate(const LossStats& o) {
    policy_loss += o.policy_loss;
    value_loss += o.value_loss;
    entropy += o.entropy;
    approx_kl += o.approx_kl;
    clip_fraction += o.clip_fraction;
    grad_norm += o.grad_norm;
    minibatches += o.minibatches;
  }
  LossStats averaged() const {
    LossStats s = *this;
    if (minibatches > 0) {
      const double n = minibatches;
      s.policy_loss /= n;
      s.value_loss /= n;
      s.entropy /= n;
      s.approx_kl /= n;
      s.clip_fraction /= n;
      s.grad_norm /= n;
    }
    return s;
  }
};

/// Items (frame or emission indices) of one environment replayed together.
struct ReplaySequence {
  int env = 0;
  std::vector<int> items;
};

/// Advantages and value targets aligned with the batch layout.
struct PreparedTargets {
  std::vector<double> receiver_advantages;  // per frame, index t * E + e
  std::vector<double> receiver_returns;
  std::vector<std::vector<double>> sender_advantages;  // per env, per emission
  std::vector<std::vector<double>> sender_targets;
};

template <typename T>
PreparedTargets prepare_targets(const RolloutBatch<T>& batch, const PPOConfig& cfg, bool normalize = true) {
  const int E = batch.num_envs, Tn = batch.frames_per_env;
  PreparedTargets p;
  p.receiver_advantages.assign(batch.frames.size(), 0.0);
  p.receiver_returns.assign(batch.frames.size(), 0.0);
  for (int e = 0; e < E; ++e) {
    std::vector<double> r(static_cast<std::size_t>(Tn)), v(static_cast<std::size_t>(Tn));
    auto d = std::make_unique<bool[]>(static_cast<std::size_t>(Tn));
    for (int t = 0; t < Tn; ++t) {
      const auto& f = batch.frame(t, e);
      r[static_cast<std::size_t>(t)] = f.reward;
      v[static_cast<std::size_t>(t)] = f.value;
      d[static_cast<std::size_t>(t)] = f.done;
    }
    auto res = compute_receiver_returns(r, v, std::span<const bool>(d.get(), static_cast<std::size_t>(Tn)),
                                        batch.bootstrap_values[static_cast<std::size_t>(e)], cfg.gamma, cfg.lambda);
    for (int t = 0; t < Tn; ++t) {
      p.receiver_advantages[static_cast<std::size_t>(t * E + e)] = res.advantages[static_cast<std::size_t>(t)];
      p.receiver_returns[static_cast<std::size_t>(t * E + e)] = res.returns[static_cast<std::size_t>(t)];
    }
  }
  p.sender_advantages.resize(static_cast<std::size_t>(E));
  p.sender_targets.resize(static_cast<std::size_t>(E));
  std::vector<double> flat;
  for (int e = 0; e < E; ++e) {
    for (const auto& em : batch.emissions[static_cast<std::size_t>(e)]) {
      auto st = compute_sender_target(em.receiver_value, em.value, cfg.gamma);
      p.sender_targets[static_cast<std::size_t>(e)].push_back(st.target);
      p.sender_advantages[static_cast<std::size_t>(e)].push_back(st.advantage);
      flat.push_back(st.advantage);
    }
  }
  if (normalize) {
    normalize_advantages(p.receiver_advantages);
    normalize_advantages(flat);
    std::size_t k = 0;
    for (auto& v : p.sender_advantages)
      for (double& a : v) a = flat[k++];
  }
  return p;
}

inline std::vector<ReplaySequence> chunk_sequences(const std::vector<std::vector<int>>& items_per_env, int recurrence) {
  std::vector<ReplaySequence> out;
  for (std::size_t e = 0; e < items_per_env.size(); ++e) {
    const auto& items = items_per_env[e];
    for (std::size_t s = 0; s < items.size(); s += static_cast<std::size_t>(recurrence)) {
      ReplaySequence seq;
      seq.env = static_cast<int>(e);
      const std::size_t end = std::min(items.size(), s + static_cast<std::size_t>(recurrence));
      seq.items.assign(items.begin() + static_cast<std::ptrdiff_t>(s), items.begin() + static_cast<std::ptrdiff_t>(end));
      out.push_back(std::move(seq));
    }
  }
  return out;
}

template <typename T>
std::vector<ReplaySequence> receiver_sequences(const RolloutBatch<T>& batch, int recurrence) {
  std::vector<std::vector<int>> items(static_cast<std::size_t>(batch.num_envs));
  for (int e = 0; e < batch.num_envs; ++e)
    for (int t = 0; t < batch.frames_per_env; ++t) items[static_cast<std::size_t>(e)].push_back(t);
  return chunk_sequences(items, recurrence);
}

template <typename T>
std::vector<ReplaySequence> sender_sequences(const RolloutBatch<T>& batch, int recurrence) {
  std::vector<std::vector<int>> items(static_cast<std::size_t>(batch.num_envs));
  for (int e = 0; e < batch.num_envs; ++e)
    for (std::size_t i = 0; i < batch.emissions[static_cast<std::size_t>(e)].size(); ++i)
      items[static_cast<std::size_t>(e)].push_back(static_cast<int>(i));
  return chunk_sequences(items, recurrence);
}

namespace detail {

inline std::size_t longest(std::span<const ReplaySequence> seqs) {
  std::size_t n = 0;
  for (const auto& s : seqs) n = std::max(n, s.items.size());
  return n;
}

/// Row mask that zeroes the memory of rows starting a new episode.
template <typename T>
ColVec<T> carry_mask(const std::vector<bool>& starts) {
  ColVec<T> m(static_cast<Eigen::Index>(starts.size()));
  for (std::size_t i = 0; i < starts.size(); ++i) m(static_cast<Eigen::Index>(i)) = starts[i] ? T(0) : T(1);
  return m;
}

/// Clipped surrogate, entropy and value terms of one replay step, each as a
/// weighted sum over rows.
template <typename T>
struct StepTerms {
  Var<T> surrogate;
  Var<T> entropy;
  Var<T> value_error;
};

template <typename T>
StepTerms<T> step_terms(Var<T> new_log_prob, Var<T> entropy_rows, Var<T> value, const Mat<T>& old_log_prob,
                        const Mat<T>& advantage, const Mat<T>& target, const Mat<T>& weight, double clip_eps,
                        LossStats& stats) {
  Tape<T>& tape = *new_log_prob.tape;
  Var<T> ratio = ad::exp(ad::sub(new_log_prob, tape.constant(old_log_prob)));
  Var<T> surr1 = ad::mul_const(ratio, advantage);
  Var<T> surr2 = ad::mul_const(ad::clamp(ratio, T(1.0 - clip_eps), T(1.0 + clip_eps)), advantage);
  Var<T> surr = ad::minimum(surr1, surr2);
  Var<T> verr = ad::square(ad::sub(value, tape.constant(target)));
  for (Eigen::Index i = 0; i < weight.rows(); ++i) {
    if (weight(i, 0) == T(0)) continue;
    const double r = static_cast<double>(ratio.value()(i, 0));
    stats.approx_kl += static_cast<double>(old_log_prob(i, 0) - new_log_prob.value()(i, 0));
    stats.clip_fraction += std::abs(r - 1.0) > clip_eps ? 1.0 : 0.0;
  }
  return {ad::sum(ad::mul_const(surr, weight)), ad::sum(ad::mul_const(entropy_rows, weight)),
          ad::sum(ad::mul_const(verr, weight))};
}

template <typename T>
Var<T> entropy_of(Var<T> log_probs) {
  return ad::scale(ad::row_sum(ad::mul(ad::exp(log_probs), log_probs)), T(-1));
}

template <typename T>
Var<T> combine(Tape<T>& tape, const std::vector<StepTerms<T>>& terms, double total_weight, const PPOConfig& cfg,
               LossStats& stats) {
  Var<T> surr = terms[0].surrogate, ent = terms[0].entropy, verr = terms[0].value_error;
  for (std::size_t j = 1; j < terms.size(); ++j) {
    surr = ad::add(surr, terms[j].surrogate);
    ent = ad::add(ent, terms[j].entropy);
    verr = ad::add(verr, terms[j].value_error);
  }
  const T inv = static_cast<T>(1.0 / total_weight);
  Var<T> policy_loss = ad::scale(surr, -inv);
  Var<T> entropy = ad::scale(ent, inv);
  Var<T> value_loss = ad::scale(verr, inv);
  stats.policy_loss = static_cast<double>(policy_loss.value()(0, 0));
  stats.entropy = static_cast<double>(entropy.value()(0, 0));
  stats.value_loss = static_cast<double>(value_loss.value()(0, 0));
  stats.approx_kl /= total_weight;
  stats.clip_fraction /= total_weight;
  stats.minibatches = 1;
  (void)tape;
  return ad::add(ad::add(policy_loss, ad::scale(entropy, static_cast<T>(-cfg.entropy_coef))),
                 ad::scale(value_loss, static_cast<T>(cfg.value_coef)));
}

}  // namespace detail

/// PPO objective of the receiver over the given replay sequences.
template <typename T>
Var<T> receiver_ppo_loss(Tape<T>& tape, const ReceiverModel<T>& model, const RolloutBatch<T>& batch,
                         const PreparedTargets& targets, std::span<const ReplaySequence> seqs, const PPOConfig& cfg,
                         LossStats* stats_out = nullptr) {
  if (seqs.empty()) throw std::invalid_argument("empty minibatch");
  const int E = batch.num_envs;
  const auto rows = static_cast<Eigen::Index>(seqs.size());
  const std::size_t steps = detail::longest(seqs);
  LossStats stats;
  std::vector<detail::StepTerms<T>> terms;
  nn::LstmState<T> memory;
  double total_weight = 0.0;
  for (std::size_t j = 0; j < steps; ++j) {
    std::vector<const ReceiverTransition<T>*> fr(seqs.size());
    std::vector<int> flat(seqs.size());
    Mat<T> weight(rows, 1);
    for (std::size_t r = 0; r < seqs.size(); ++r) {
      const auto& items = seqs[r].items;
      const bool valid = j < items.size();
      const int t = valid ? items[j] : items.back();
      flat[r] = t * E + seqs[r].env;
      fr[r] = &batch.frames[static_cast<std::size_t>(flat[r])];
      weight(static_cast<Eigen::Index>(r), 0) = valid ? T(1) : T(0);
    }
    total_weight += static_cast<double>(weight.sum());
    if (j == 0) {
      AgentMemory<T> init = AgentMemory<T>::zeros(static_cast<int>(rows), model.config().memory_dim);
      for (std::size_t r = 0; r < seqs.size(); ++r) {
        init.h.row(static_cast<Eigen::Index>(r)) = fr[r]->memory_h;
        init.c.row(static_cast<Eigen::Index>(r)) = fr[r]->memory_c;
      }
      memory = init.on(tape);
    } else {
      std::vector<bool> starts(seqs.size());
      for (std::size_t r = 0; r < seqs.size(); ++r) starts[r] = fr[r]->episode_start;
      ColVec<T> mask = detail::carry_mask<T>(starts);
      memory = {ad::scale_rows(memory.h, mask), ad::scale_rows(memory.c, mask)};
    }
    std::vector<ReceiverObs> obs;
    std::vector<Instruction> instr;
    std::vector<int> actions;
    Mat<T> old_lp(rows, 1), adv(rows, 1), ret(rows, 1);
    for (std::size_t r = 0; r < seqs.size(); ++r) {
      obs.push_back(fr[r]->obs);
      instr.push_back(fr[r]->instruction);
      actions.push_back(fr[r]->action);
      old_lp(static_cast<Eigen::Index>(r), 0) = static_cast<T>(fr[r]->log_prob);
      adv(static_cast<Eigen::Index>(r), 0) = static_cast<T>(targets.receiver_advantages[static_cast<std::size_t>(flat[r])]);
      ret(static_cast<Eigen::Index>(r), 0) = static_cast<T>(targets.receiver_returns[static_cast<std::size_t>(flat[r])]);
    }
    ColVec<T> sample_weight = weight.col(0);
    Var<T> instr_emb = model.encode_instruction(tape, encode_instructions<T>(instr));
    Var<T> msg_emb;
    if (model.mode() == BaselineMode::ArchimedeanReceiver) {
      std::vector<SenderObs> world;
      for (const auto* f : fr) world.push_back(f->world);
      msg_emb = model.encode_world(tape, encode_sender_obs<T>(world, model.config().sender_side), true, &sample_weight);
    } else {
      std::vector<const Message*> msgs;
      for (const auto* f : fr)
        msgs.push_back(model.mode() == BaselineMode::Communicating && f->message ? &*f->message : nullptr);
      msg_emb = model.encode_message(tape, encode_messages<T>(msgs, model.config().channel));
    }
    auto out = model.forward(tape, encode_receiver_obs<T>(obs), instr_emb, msg_emb, memory, true, &sample_weight);
    memory = out.memory;
    Var<T> new_lp = ad::pick(out.log_probs, actions);
    terms.push_back(detail::step_terms(new_lp, detail::entropy_of(out.log_probs), out.value, old_lp, adv, ret, weight,
                                       cfg.clip_eps, stats));
  }
  Var<T> loss = detail::combine(tape, terms, total_weight, cfg, stats);
  if (stats_out) *stats_out = stats;
  return loss;
}

/// PPO objective of the sender. The action log-probability of an emission is
/// the sum of its k symbol log-probabilities.
template <typename T>
Var<T> sender_ppo_loss(Tape<T>& tape, const SenderModel<T>& model, const RolloutBatch<T>& batch,
                       const PreparedTargets& targets, std::span<const ReplaySequence> seqs, const PPOConfig& cfg,
                       LossStats* stats_out = nullptr) {
  if (seqs.empty()) throw std::invalid_argument("empty minibatch");
  const auto rows = static_cast<Eigen::Index>(seqs.size());
  const std::size_t steps = detail::longest(seqs);
  const int k = model.config().channel.length_k;
  LossStats stats;
  std::vector<detail::StepTerms<T>> terms;
  nn::LstmState<T> memory;
  double total_weight = 0.0;
  for (std::size_t j = 0; j < steps; ++j) {
    std::vector<const SenderEmission<T>*> em(seqs.size());
    Mat<T> weight(rows, 1), old_lp(rows, 1), adv(rows, 1), tgt(rows, 1);
    for (std::size_t r = 0; r < seqs.size(); ++r) {
      const auto& items = seqs[r].items;
      const bool valid = j < items.size();
      const int i = valid ? items[j] : items.back();
      const auto env = static_cast<std::size_t>(seqs[r].env);
      em[r] = &batch.emissions[env][static_cast<std::size_t>(i)];
      const auto row = static_cast<Eigen::Index>(r);
      weight(row, 0) = valid ? T(1) : T(0);
      old_lp(row, 0) = static_cast<T>(em[r]->log_prob);
      adv(row, 0) = static_cast<T>(targets.sender_advantages[env][static_cast<std::size_t>(i)]);
      tgt(row, 0) = static_cast<T>(targets.sender_targets[env][static_cast<std::size_t>(i)]);
    }
    total_weight += static_cast<double>(weight.sum());
    if (j == 0) {
      AgentMemory<T> init = AgentMemory<T>::zeros(static_cast<int>(rows), model.config().memory_dim);
      for (std::size_t r = 0; r < seqs.size(); ++r) {
        init.h.row(static_cast<Eigen::Index>(r)) = em[r]->memory_h;
        init.c.row(static_cast<Eigen::Index>(r)) = em[r]->memory_c;
      }
      memory = init.on(tape);
    } else {
      std::vector<bool> starts(seqs.size());
      for (std::size_t r = 0; r < seqs.size(); ++r) starts[r] = em[r]->episode_start;
      ColVec<T> mask = detail::carry_mask<T>(starts);
      memory = {ad::scale_rows(memory.h, mask), ad::scale_rows(memory.c, mask)};
    }
    std::vector<SenderObs> obs;
    for (const auto* e : em) obs.push_back(e->obs);
    ColVec<T> sample_weight = weight.col(0);
    auto out = model.forward(tape, encode_sender_obs<T>(obs, model.config().sender_side), memory, true, &sample_weight);
    memory = out.memory;
    Var<T> new_lp, entropy;
    for (int s = 0; s < k; ++s) {
      std::vector<int> sym;
      for (const auto* e : em) sym.push_back(e->message.symbols[static_cast<std::size_t>(s)]);
      Var<T> lp = ad::pick(out.symbol_log_probs[static_cast<std::size_t>(s)], sym);
      Var<T> h = detail::entropy_of(out.symbol_log_probs[static_cast<std::size_t>(s)]);
      new_lp = s == 0 ? lp : ad::add(new_lp, lp);
      entropy = s == 0 ? h : ad::add(entropy, h);
    }
    terms.push_back(detail::step_terms(new_lp, entropy, out.value, old_lp, adv, tgt, weight, cfg.clip_eps, stats));
  }
  Var<T> loss = detail::combine(tape, terms, total_weight, cfg, stats);
  if (stats_out) *stats_out = stats;
  return loss;
}

/// Splits shuffled sequences into minibatches of roughly minibatch_size items.
inline std::vector<std::vector<ReplaySequence>> make_minibatches(std::vector<ReplaySequence> seqs, int minibatch_size,
                                                                 std::mt19937_64& rng) {
  std::shuffle(seqs.begin(), seqs.end(), rng);
  std::vector<std::vector<ReplaySequence>> out;
  std::vector<ReplaySequence> current;
  std::size_t count = 0;
  for (auto& s : seqs) {
    count += s.items.size();
    current.push_back(std::move(s));
    if (count >= static_cast<std::size_t>(minibatch_size)) {
      out.push_back(std::move(current));
      current.clear();
      count = 0;
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

namespace detail {

template <typename T>
void check_finite(const Var<T>& loss, const LossStats& s, const char* who) {
  const double v = static_cast<double>(loss.value()(0, 0));
  if (!std::isfinite(v)) {
    std::ostringstream os;
    os << who << " PPO loss is not finite (policy " << s.policy_loss << ", value " << s.value_loss << ", entropy "
       << s.entropy << ", approx_kl " << s.approx_kl << ")";
    throw std::runtime_error(os.str());
  }
}

template <typename T, typename LossFn>
LossStats run_epochs(nn::ParamStore<T>& store, nn::Adam<T>& opt, std::vector<ReplaySequence> seqs,
                     const PPOConfig& cfg, std::mt19937_64& rng, LossFn&& loss_fn, const char* who) {
  LossStats total;
  if (seqs.empty()) return total;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (auto& mb : make_minibatches(seqs, cfg.minibatch_size, rng)) {
      Tape<T> tape(true);
      LossStats s;
      Var<T> loss = loss_fn(tape, std::span<const ReplaySequence>(mb), &s);
      check_finite(loss, s, who);
      store.zero_grad();
      tape.backward(loss);
      s.grad_norm = nn::clip_grad_norm(store, cfg.max_grad_norm);
      opt.step();
      total.accumulate(s);
    }
  }
  return total.averaged();
}

}  // namespace detail

template <typename T>
LossStats ppo_update_receiver(ReceiverModel<T>& model, nn::Adam<T>& opt, const RolloutBatch<T>& batch,
                              const PreparedTargets& targets, const PPOConfig& cfg, std::mt19937_64& rng) {
  return detail::run_epochs(
      model.store(), opt, receiver_sequences(batch, cfg.recurrence), cfg, rng,
      [&](Tape<T>& tape, std::span<const ReplaySequence> mb, LossStats* s) {
        return receiver_ppo_loss(tape, model, batch, targets, mb, cfg, s);
      },
      "receiver");
}

template <typename T>
LossStats ppo_update_sender(SenderModel<T>& model, nn::Adam<T>& opt, const RolloutBatch<T>& batch,
                            const PreparedTargets& targets, const PPOConfig& cfg, std::mt19937_64& rng) {
  return detail::run_epochs(
      model.store(), opt, sender_sequences(batch, cfg.recurrence), cfg, rng,
      [&](Tape<T>& tape, std::span<const ReplaySequence> mb, LossStats* s) {
        return sender_ppo_loss(tape, model, batch, targets, mb, cfg, s);
      },
      "sender");
}

}  // namespace srcomm
