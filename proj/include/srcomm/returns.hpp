// Advantage and value-target computation for both agents.
#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace srcomm {

struct AdvantageResult {
  std::vector<double> advantages;
  std::vector<double> returns;  // lambda-returns, used as value targets
};

/// Generalized advantage estimation over one environment's frames.
/// done[t] marks that the episode ended with the transition out of frame t;
/// bootstrap_value is V(S_T) used when the final frame is not terminal.
inline AdvantageResult compute_receiver_returns(std::span<const double> rewards, std::span<const double> values,
                                                std::span<const bool> done, double bootstrap_value, double gamma,
                                                double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || done.size() != n) throw std::invalid_argument("return computation: length mismatch");
  AdvantageResult out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double gae = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double not_done = done[i] ? 0.0 : 1.0;
    const double next_value = i + 1 < n ? values[i + 1] : bootstrap_value;
    const double delta = rewards[i] + gamma * next_value * not_done - values[i];
    gae = delta + gamma * lambda * not_done * gae;
    out.advantages[i] = gae;
    out.returns[i] = gae + values[i];
  }
  return out;
}

struct SenderTarget {
  double target = 0.0;
  double advantage = 0.0;
};

/// Each emission is a one-step task whose value target is the discounted
/// receiver value after reading the message: target = gamma * V_r(S_i | m_i).
inline SenderTarget compute_sender_target(double receiver_value_given_message, double sender_value, double gamma) {
  const double target = gamma * receiver_value_given_message;
  return {target, target - sender_value};
}

/// In-place standardization to zero mean and unit standard deviation.
inline void normalize_advantages(std::vector<double>& a) {
  if (a.size() < 2) return;
  double mean = 0.0;
  for (double v : a) mean += v;
  mean /= static_cast<double>(a.size());
  double var = 0.0;
  for (double v : a) var += (v - mean) * (v - mean);
  var /= static_cast<double>(a.size() - 1);
  const double sd = std::sqrt(var) + 1e-8;
  for (double& v : a) v = (v - mean) / sd;
}

}  // namespace srcomm
