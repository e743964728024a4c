#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dare/error.hpp"
#include "dare/rng.hpp"
#include "dare/world.hpp"

namespace dare {

enum class SamplerMode { kBeta, kEntropySoftmax, kUniform };

inline std::string_view to_string(SamplerMode m) {
  switch (m) {
    case SamplerMode::kBeta: return "beta";
    case SamplerMode::kEntropySoftmax: return "entropy_softmax";
    case SamplerMode::kUniform: return "uniform";
  }
  return "?";
}

inline std::optional<SamplerMode> parse_sampler_mode(std::string_view s) {
  for (auto m : {SamplerMode::kBeta, SamplerMode::kEntropySoftmax, SamplerMode::kUniform})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

struct SamplingWeights {
  std::vector<double> weight;  ///< indexed by prompt id
  SamplerMode mode = SamplerMode::kBeta;
};

/// Unnormalized symmetric Beta(1 + kappa/2, 1 + kappa/2) density at d:
/// [d (1 - d)]^{kappa/2}, evaluated in log space. d is folded onto
/// [0, 0.5] first (1 - d is exact there), so mirrored inputs agree bitwise.
inline double beta_weight(double d, double kappa) {
  if (kappa == 0.0) return 1.0;
  if (d <= 0.0 || d >= 1.0) return 0.0;
  const double m = d > 0.5 ? 1.0 - d : d;
  return std::exp(0.5 * kappa * (std::log(m) + std::log1p(-m)));
}

inline SamplingWeights beta_weights(std::span<const double> difficulty, double kappa) {
  SamplingWeights w;
  w.mode = SamplerMode::kBeta;
  w.weight.reserve(difficulty.size());
  for (double d : difficulty) w.weight.push_back(beta_weight(d, kappa));
  return w;
}

/// p(q) proportional to exp(H_q / tau_ent), shifted by the max score.
inline SamplingWeights entropy_softmax_weights(std::span<const double> scores, double tau_ent) {
  SamplingWeights w;
  w.mode = SamplerMode::kEntropySoftmax;
  double mx = -std::numeric_limits<double>::infinity();
  for (double s : scores) mx = std::max(mx, s);
  for (double s : scores) w.weight.push_back(std::exp((s - mx) / tau_ent));
  return w;
}

inline SamplingWeights uniform_weights(std::size_t n) {
  return {std::vector<double>(n, 1.0), SamplerMode::kUniform};
}

/// Rescales weights so that untracked prompts jointly receive `mass` of the
/// total probability (when both groups are non-empty and positive).
inline void reserve_exploration_mass(SamplingWeights& w, const std::vector<bool>& tracked, double mass) {
  double t_sum = 0.0;
  double u_sum = 0.0;
  for (std::size_t i = 0; i < w.weight.size(); ++i) (tracked[i] ? t_sum : u_sum) += w.weight[i];
  if (!(t_sum > 0.0) || !(u_sum > 0.0)) return;
  for (std::size_t i = 0; i < w.weight.size(); ++i)
    w.weight[i] *= tracked[i] ? (1.0 - mass) / t_sum : mass / u_sum;
}

struct BatchSelection {
  std::vector<PromptId> prompts;  ///< in draw order
  std::size_t shortfall = 0;      ///< requested minus returned
};

/// Sequential weighted sampling without replacement: draw proportionally to
/// weight, remove, renormalize. Only positive-weight prompts are eligible.
inline BatchSelection sample_batch(const SamplingWeights& weights, std::size_t B, Stream& rng) {
  std::vector<double> w = weights.weight;
  std::size_t positive = 0;
  for (double& x : w) {
    if (!(x > 0.0) || !std::isfinite(x)) x = 0.0;
    positive += x > 0.0;
  }
  if (positive == 0) throw SelectionError("all sampling weights are zero");
  BatchSelection out;
  const std::size_t n = std::min(B, positive);
  out.shortfall = B - n;
  out.prompts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pick = rng.categorical(w);
    out.prompts.push_back(static_cast<PromptId>(pick));
    w[pick] = 0.0;
  }
  return out;
}

}  // namespace dare
