#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dare/buffer.hpp"
#include "dare/error.hpp"
#include "dare/parallel.hpp"
#include "dare/rng.hpp"
#include "dare/world.hpp"

namespace dare {

enum class EstimateSource { kSnis, kColdStart, kBayes, kPrevFr, kCurrentFr, kEntropy, kRandom };

inline std::string_view to_string(EstimateSource s) {
  switch (s) {
    case EstimateSource::kSnis: return "snis";
    case EstimateSource::kColdStart: return "coldstart";
    case EstimateSource::kBayes: return "bayes";
    case EstimateSource::kPrevFr: return "prev_fr";
    case EstimateSource::kCurrentFr: return "current_fr";
    case EstimateSource::kEntropy: return "entropy";
    case EstimateSource::kRandom: return "random";
  }
  return "?";
}

inline std::optional<EstimateSource> parse_source(std::string_view s) {
  for (auto v : {EstimateSource::kSnis, EstimateSource::kColdStart, EstimateSource::kBayes, EstimateSource::kPrevFr,
                 EstimateSource::kCurrentFr, EstimateSource::kEntropy, EstimateSource::kRandom})
    if (to_string(v) == s) return v;
  return std::nullopt;
}

struct DifficultyEstimate {
  double value = 0.5;
  EstimateSource source = EstimateSource::kRandom;
  std::optional<double> ess;
  std::size_t k = 0;
  std::optional<double> mc_stderr;
};

struct ReferenceEntry {
  PromptId prompt_id = 0;
  double difficulty = 0.0;
  std::vector<double> embedding;
};

struct ReferenceSet {
  std::vector<ReferenceEntry> entries;
};

struct SnisConfig {
  double clip = 4.0;           ///< c: log-ratio clip
  double ess_threshold = 3.0;  ///< tau_ESS
  double delta = 0.05;
  double b_min = 1.0;

  bool operator==(const SnisConfig&) const = default;
};

// --- SNIS ------------------------------------------------------------------

/// Clipped importance weights exp(clip(log pi(o) - log pi_beh(o), -c, c)),
/// with current log-probs recomputed on the stored tokens. Hint-forced
/// positions are skipped in both sums.
inline std::vector<double> snis_weights(std::span<const BufferEntry> entries, const ToyPolicy& policy,
                                        const PromptSpec& prompt, double c) {
  std::vector<double> w;
  w.reserve(entries.size());
  for (const BufferEntry& e : entries) {
    const Rollout& r = e.rollout;
    if (r.behavior_logprobs.size() != r.tokens.size()) throw DataError("behavior log-prob count mismatch");
    const std::size_t skip = forced_prefix_length(r, prompt);
    const double current = sequence_logprob(policy, prompt.id, r.tokens, skip);
    double behavior = 0.0;
    for (std::size_t t = skip; t < r.behavior_logprobs.size(); ++t) behavior += r.behavior_logprobs[t];
    const double log_ratio = std::clamp(current - behavior, -c, c);
    w.push_back(std::exp(log_ratio));
  }
  return w;
}

/// Self-normalized failure rate sum w (1 - r) / sum w.
inline double snis_difficulty(std::span<const double> weights, std::span<const int> rewards) {
  if (weights.size() != rewards.size() || weights.empty())
    throw DataError("weights and rewards must have equal, non-zero length");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (weights[k] < 0.0) throw DataError("negative importance weight");
    num += weights[k] * static_cast<double>(1 - rewards[k]);
    den += weights[k];
  }
  if (!(den > 0.0)) throw DegenerateWeightsError("weight sum is zero");
  return std::clamp(num / den, 0.0, 1.0);
}

/// Effective sample size (sum w)^2 / sum w^2.
inline double ess(std::span<const double> weights) {
  double s = 0.0;
  double s2 = 0.0;
  for (double w : weights) {
    s += w;
    s2 += w * w;
  }
  if (!(s > 0.0)) throw DegenerateWeightsError("weight sum is zero");
  return s * s / s2;
}

// --- cold start -------------------------------------------------------------

/// Similarity-weighted reference difficulty with softmax(z_q . z_i / sqrt(h)).
inline double cold_start(std::span<const double> features, const ReferenceSet& reference) {
  if (reference.entries.empty()) throw DataError("empty reference set");
  const double scale = 1.0 / std::sqrt(static_cast<double>(features.size()));
  std::vector<double> logits;
  logits.reserve(reference.entries.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (const ReferenceEntry& e : reference.entries) {
    if (e.embedding.size() != features.size())
      throw DataError("embedding dimension " + std::to_string(e.embedding.size()) + " != " +
                      std::to_string(features.size()));
    double dot = 0.0;
    for (std::size_t j = 0; j < features.size(); ++j) dot += features[j] * e.embedding[j];
    logits.push_back(dot * scale);
    mx = std::max(mx, logits.back());
  }
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double a = std::exp(logits[i] - mx);
    num += a * reference.entries[i].difficulty;
    den += a;
  }
  return num / den;
}

/// Reference difficulties d = 1 - mean reward over G fresh rollouts each.
inline ReferenceSet build_reference(const World& world, const ToyPolicy& policy, std::span<const PromptId> ids,
                                    std::size_t G, std::uint64_t seed) {
  ReferenceSet ref;
  ref.entries.resize(ids.size());
  parallel_for(ids.size(), [&](std::size_t i) {
    const PromptSpec& p = world.prompt(ids[i]);
    std::size_t fails = 0;
    for (std::size_t k = 0; k < G; ++k) {
      Stream rng = make_stream(seed, StreamTag::kReference, {static_cast<std::uint64_t>(p.id), k});
      fails += rollout(policy, p, world.layout, rng).reward == 0;
    }
    ref.entries[i] = {p.id, static_cast<double>(fails) / static_cast<double>(G), p.features};
  });
  return ref;
}

/// Samples N reference prompts uniformly without replacement, then rolls
/// them out.
inline ReferenceSet build_reference(const World& world, const ToyPolicy& policy, std::size_t N, std::size_t G,
                                    std::uint64_t seed) {
  std::vector<PromptId> ids(world.prompts.size());
  std::iota(ids.begin(), ids.end(), PromptId{0});
  Stream rng = make_stream(seed, StreamTag::kReference, {0x5e1ec7});
  N = std::min(N, ids.size());
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform() * static_cast<double>(ids.size() - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(N);
  std::sort(ids.begin(), ids.end());
  return build_reference(world, policy, ids, G, seed);
}

// --- gated SNIS estimate ----------------------------------------------------

/// Buffered entries usable for difficulty estimation: hinted rollouts are
/// excluded because their forced prefix inflates the success rate.
inline std::vector<BufferEntry> estimation_entries(const ReplayBuffer& buffer, PromptId id) {
  std::vector<BufferEntry> all = buffer.entries(id);
  std::erase_if(all, [](const BufferEntry& e) { return e.rollout.hinted; });
  return all;
}

/// SNIS estimate when the prompt has history and ESS >= tau, else the cold
/// start prediction (recording the rejected ESS).
inline DifficultyEstimate estimate(const PromptSpec& prompt, const ReplayBuffer& buffer, const ToyPolicy& policy,
                                   const ReferenceSet& reference, const SnisConfig& cfg) {
  DifficultyEstimate out;
  const std::vector<BufferEntry> entries = estimation_entries(buffer, prompt.id);
  if (entries.empty()) {
    out.value = cold_start(prompt.features, reference);
    out.source = EstimateSource::kColdStart;
    return out;
  }
  const std::vector<double> w = snis_weights(entries, policy, prompt, cfg.clip);
  std::vector<int> rewards;
  rewards.reserve(entries.size());
  for (const BufferEntry& e : entries) rewards.push_back(e.rollout.reward);
  out.k = entries.size();
  double e = 0.0;
  try {
    e = ess(w);
    out.ess = e;
  } catch (const DegenerateWeightsError&) {
    e = 0.0;
  }
  if (e >= cfg.ess_threshold) {
    out.value = snis_difficulty(w, rewards);
    out.source = EstimateSource::kSnis;
  } else {
    out.value = cold_start(prompt.features, reference);
    out.source = EstimateSource::kColdStart;
  }
  return out;
}

// --- finite-sample bound ------------------------------------------------------

struct BoundRadius {
  double epsilon = 0.0;  ///< concentration radius C_w sqrt(ln(4/delta) / 2K)
  double radius = 0.0;   ///< 2 eps / (b_min - eps) + bias / b_min
};

inline double bound_epsilon(double clip, double delta, std::size_t K) {
  return std::exp(clip) * std::sqrt(std::log(4.0 / delta) / (2.0 * static_cast<double>(K)));
}

/// Right-hand side of the clipped-SNIS finite-sample error bound. Throws
/// BoundInapplicableError when eps >= b_min.
inline BoundRadius bound_radius(const SnisConfig& cfg, std::size_t K, double clip_bias_term) {
  if (K == 0) throw DataError("bound needs K >= 1");
  BoundRadius b;
  b.epsilon = bound_epsilon(cfg.clip, cfg.delta, K);
  if (b.epsilon >= cfg.b_min) throw BoundInapplicableError(b.epsilon, cfg.b_min);
  b.radius = 2.0 * b.epsilon / (cfg.b_min - b.epsilon) + clip_bias_term / cfg.b_min;
  return b;
}

// --- baselines ----------------------------------------------------------------

inline constexpr double kDefaultDifficulty = 0.5;

/// Raw buffered failure rate (all weights 1); 0.5 without history.
inline double previous_fr(std::span<const BufferEntry> entries) {
  if (entries.empty()) return kDefaultDifficulty;
  double fails = 0.0;
  for (const BufferEntry& e : entries) fails += 1.0 - e.rollout.reward;
  return fails / static_cast<double>(entries.size());
}

/// Failure rate of G fresh rollouts with the current policy.
inline double current_fr(const ToyPolicy& policy, const PromptSpec& prompt, const VocabLayout& layout,
                         std::size_t G, std::uint64_t seed, std::uint64_t step = 0) {
  if (G == 0) throw DataError("current_fr needs G >= 1");
  std::size_t fails = 0;
  for (std::size_t k = 0; k < G; ++k) {
    Stream rng = make_stream(seed, StreamTag::kCurrentFr, {step, static_cast<std::uint64_t>(prompt.id), k});
    fails += rollout(policy, prompt, layout, rng).reward == 0;
  }
  return static_cast<double>(fails) / static_cast<double>(G);
}

struct BayesConfig {
  double alpha0 = 1.0;
  double beta0 = 1.0;
  double decay = 0.5;    ///< lambda
  double explore = 0.3;  ///< probability mass reserved for untracked prompts

  bool operator==(const BayesConfig&) const = default;
};

/// Per-prompt Beta posterior over the success rate with temporal discounting.
struct BayesState {
  struct Arm {
    double alpha = 1.0;
    double beta = 1.0;
    bool operator==(const Arm&) const = default;
  };
  BayesConfig config;
  std::map<PromptId, Arm> arms;

  bool tracked(PromptId id) const { return arms.contains(id); }
};

/// alpha <- lambda alpha + (1 - lambda) alpha0 + s; beta likewise with k - s.
inline BayesState bayes_update(BayesState state, PromptId id, std::size_t successes, std::size_t count) {
  if (successes > count) throw DataError("successes exceed count");
  auto [it, inserted] = state.arms.try_emplace(id, BayesState::Arm{state.config.alpha0, state.config.beta0});
  auto& arm = it->second;
  const double lam = state.config.decay;
  arm.alpha = lam * arm.alpha + (1.0 - lam) * state.config.alpha0 + static_cast<double>(successes);
  arm.beta = lam * arm.beta + (1.0 - lam) * state.config.beta0 + static_cast<double>(count - successes);
  return state;
}

/// Thompson draw 1 - gamma with gamma ~ Beta(alpha, beta); 0.5 if untracked.
inline double bayes_estimate(const BayesState& state, PromptId id, Stream& rng) {
  const auto it = state.arms.find(id);
  if (it == state.arms.end()) return kDefaultDifficulty;
  return 1.0 - rng.beta(it->second.alpha, it->second.beta);
}

/// Mean per-position entropy of the decode distribution along a sampled
/// prefix of `prefix_len` tokens (EOS does not stop the prefix).
inline double entropy_score(const ToyPolicy& policy, const PromptSpec& prompt, std::size_t prefix_len, Stream& rng) {
  prefix_len = std::min(prefix_len, policy.t_max);
  if (prefix_len == 0) return 0.0;
  std::vector<TokenId> prefix;
  double total = 0.0;
  for (std::size_t t = 0; t < prefix_len; ++t) {
    const TokenDist d = decode_distribution(policy, prompt.id, t, prefix);
    double h = 0.0;
    for (std::size_t v = 0; v < d.size; ++v)
      if (d.prob[v] > 0.0) h -= d.prob[v] * d.logprob[v];
    total += h;
    prefix.push_back(static_cast<TokenId>(rng.categorical(d.probs())));
  }
  return total / static_cast<double>(prefix_len);
}

inline double random_estimate() { return kDefaultDifficulty; }

}  // namespace dare
