#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dare/error.hpp"
#include "dare/rng.hpp"

namespace dare {

using TokenId = std::int32_t;
using PromptId = std::int64_t;

inline constexpr std::size_t kMaxVocab = 16;
inline constexpr std::size_t kMaxLength = 12;
/// Below this temperature decoding switches to the argmax limit.
inline constexpr double kGreedyTemperature = 1e-6;

/// Token roles. Answer tokens occupy [0, n_answer); in variable-length mode
/// the last id is EOS and, when enabled, the one before it is a "think"
/// token that is emitted freely but never counted as part of the answer.
struct VocabLayout {
  std::size_t vocab = 0;
  std::size_t n_answer = 0;
  std::optional<TokenId> eos;
  std::optional<TokenId> think;

  bool is_answer(TokenId t) const { return t >= 0 && static_cast<std::size_t>(t) < n_answer; }
  bool is_eos(TokenId t) const { return eos && *eos == t; }
  bool is_think(TokenId t) const { return think && *think == t; }
};

inline VocabLayout make_layout(std::size_t vocab, bool eos_enabled, bool think_enabled) {
  VocabLayout layout;
  layout.vocab = vocab;
  std::size_t special = 0;
  if (eos_enabled) {
    layout.eos = static_cast<TokenId>(vocab - 1);
    ++special;
    if (think_enabled) {
      layout.think = static_cast<TokenId>(vocab - 2);
      ++special;
    }
  }
  layout.n_answer = vocab - special;
  return layout;
}

struct PromptSpec {
  PromptId id = 0;
  std::vector<TokenId> target;
  std::vector<double> features;
  int group_label = 0;

  std::size_t length() const { return target.size(); }
};

struct WorldConfig {
  std::size_t n_prompts = 64;
  std::size_t vocab = 6;
  std::size_t t_max = 6;
  std::size_t n_reference = 16;
  std::vector<double> family_weights{1.0, 1.0, 1.0};
  bool eos_enabled = true;
  bool think_enabled = true;
  std::uint64_t seed = 0;
  double temperature = 1.0;
  /// Standard deviation of the initial shared logits.
  double init_scale = 1.0;
  /// Standard deviation of the initial per-prompt logits.
  double prompt_init_scale = 1.0;
  /// Initial logit offset of the think token (verbosity of the start policy).
  double think_bias = 0.5;
  /// Target initial failure rate per family; empty means evenly spread
  /// between 0.15 and 0.93.
  std::vector<double> family_difficulty;
  /// Target candidates scored per prompt when matching a family's difficulty.
  std::size_t candidates = 48;
  bool prompt_logits = true;
  /// Probability that a target token equals the world's canonical token at
  /// that position (prior-based worlds only).
  double target_agreement = 0.75;

  bool operator==(const WorldConfig&) const = default;
};

inline void validate(const WorldConfig& c) {
  if (c.n_prompts < 8) throw ConfigError("world.n_prompts", "must be >= 8");
  if (c.vocab < 2 || c.vocab > kMaxVocab) throw ConfigError("world.vocab", "must lie in [2, 16]");
  if (c.t_max < 2 || c.t_max > kMaxLength) throw ConfigError("world.t_max", "must lie in [2, 12]");
  if (c.n_reference < 1 || c.n_reference > c.n_prompts)
    throw ConfigError("world.n_reference", "must lie in [1, n_prompts]");
  if (c.family_weights.empty()) throw ConfigError("world.family_weights", "must be non-empty");
  double sum = 0.0;
  for (double w : c.family_weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("world.family_weights", "weights must be finite and >= 0");
    sum += w;
  }
  if (!(sum > 0.0)) throw ConfigError("world.family_weights", "weights must not all be zero");
  if (c.think_enabled && !c.eos_enabled) throw ConfigError("world.think_enabled", "requires eos_enabled");
  const std::size_t special = (c.eos_enabled ? 1 : 0) + (c.think_enabled ? 1 : 0);
  if (c.vocab < special + 1) throw ConfigError("world.vocab", "no answer tokens left after EOS/think");
  if (!(c.temperature > 0.0) || !std::isfinite(c.temperature)) throw ConfigError("world.temperature", "must be > 0");
  if (!(c.init_scale >= 0.0)) throw ConfigError("world.init_scale", "must be >= 0");
  if (!(c.target_agreement >= 0.0 && c.target_agreement <= 1.0))
    throw ConfigError("world.target_agreement", "must lie in [0, 1]");
  if (!(c.prompt_init_scale >= 0.0)) throw ConfigError("world.prompt_init_scale", "must be >= 0");
  if (c.prompt_init_scale > 0.0 && !c.prompt_logits)
    throw ConfigError("world.prompt_init_scale", "requires prompt_logits");
  if (!std::isfinite(c.think_bias)) throw ConfigError("world.think_bias", "must be finite");
  if (!c.family_difficulty.empty()) {
    if (c.family_difficulty.size() != c.family_weights.size())
      throw ConfigError("world.family_difficulty", "must have one entry per family");
    for (double d : c.family_difficulty)
      if (!(d >= 0.0 && d <= 1.0)) throw ConfigError("world.family_difficulty", "entries must lie in [0, 1]");
  }
  if (c.candidates < 1) throw ConfigError("world.candidates", "must be >= 1");
}

/// Tabular softmax sequence policy. Logits at (prompt, position) are the sum
/// of a shared row and an optional per-prompt row.
struct ToyPolicy {
  std::size_t t_max = 0;
  std::size_t vocab = 0;
  std::size_t n_prompts = 0;
  std::vector<double> shared_logits;  ///< t_max * vocab
  std::vector<double> prompt_logits;  ///< n_prompts * t_max * vocab, empty when disabled
  double temperature = 1.0;
  std::optional<TokenId> eos_token;
  std::uint64_t snapshot_id = 0;

  bool has_prompt_logits() const { return !prompt_logits.empty(); }

  std::size_t shared_index(std::size_t position, std::size_t token) const {
    return position * vocab + token;
  }
  std::size_t prompt_index(PromptId prompt, std::size_t position, std::size_t token) const {
    return (static_cast<std::size_t>(prompt) * t_max + position) * vocab + token;
  }

  double logit(PromptId prompt, std::size_t position, std::size_t token) const {
    double v = shared_logits[shared_index(position, token)];
    if (has_prompt_logits()) v += prompt_logits[prompt_index(prompt, position, token)];
    return v;
  }
};

/// Decode distribution over at most kMaxVocab tokens, with log-probabilities.
struct TokenDist {
  std::size_t size = 0;
  std::array<double, kMaxVocab> prob{};
  std::array<double, kMaxVocab> logprob{};

  std::span<const double> probs() const { return {prob.data(), size}; }
};

/// softmax(logits / temperature) at (prompt, position). The tabular policy
/// is position-indexed, so `prefix` does not change the result; it is part
/// of the signature because the decoding rule is defined per prefix.
inline TokenDist decode_distribution(const ToyPolicy& policy, PromptId prompt, std::size_t position,
                                     std::span<const TokenId> prefix = {}) {
  (void)prefix;
  TokenDist d;
  d.size = policy.vocab;
  std::array<double, kMaxVocab> z{};
  double zmax = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < d.size; ++v) {
    z[v] = policy.logit(prompt, position, v);
    zmax = std::max(zmax, z[v]);
  }
  if (policy.temperature < kGreedyTemperature) {
    std::size_t ties = 0;
    for (std::size_t v = 0; v < d.size; ++v) ties += (z[v] == zmax);
    const double p = 1.0 / static_cast<double>(ties);
    for (std::size_t v = 0; v < d.size; ++v) {
      d.prob[v] = z[v] == zmax ? p : 0.0;
      d.logprob[v] = z[v] == zmax ? std::log(p) : -std::numeric_limits<double>::infinity();
    }
    return d;
  }
  double sum = 0.0;
  for (std::size_t v = 0; v < d.size; ++v) {
    z[v] = (z[v] - zmax) / policy.temperature;
    sum += std::exp(z[v]);
  }
  const double log_norm = std::log(sum);
  for (std::size_t v = 0; v < d.size; ++v) {
    d.logprob[v] = z[v] - log_norm;
    d.prob[v] = std::exp(d.logprob[v]);
  }
  return d;
}

struct Rollout {
  std::vector<TokenId> tokens;
  std::size_t length = 0;
  int reward = 0;
  std::vector<double> behavior_logprobs;
  std::uint64_t behavior_snapshot = 0;
  bool hinted = false;
  std::int64_t step = 0;

  bool operator==(const Rollout&) const = default;
};

/// Number of hint-forced leading positions of a rollout for this prompt.
inline std::size_t forced_prefix_length(const PromptSpec& prompt) {
  return (prompt.length() + 1) / 2;
}
inline std::size_t forced_prefix_length(const Rollout& r, const PromptSpec& prompt) {
  return r.hinted ? std::min(forced_prefix_length(prompt), r.tokens.size()) : 0;
}

/// Answer extracted from a token sequence: everything except think and EOS.
inline bool answer_matches(std::span<const TokenId> tokens, const PromptSpec& prompt,
                           const VocabLayout& layout) {
  std::size_t k = 0;
  for (const TokenId t : tokens) {
    if (layout.is_eos(t)) break;
    if (layout.is_think(t)) continue;
    if (k >= prompt.target.size() || prompt.target[k] != t) return false;
    ++k;
  }
  return k == prompt.target.size();
}

/// Generation length cap: fixed at the target length without EOS, otherwise
/// T_max (or a tighter budget).
inline std::size_t generation_limit(const PromptSpec& prompt, const VocabLayout& layout, std::size_t t_max,
                                    std::size_t budget = 0) {
  if (!layout.eos) return budget > 0 ? std::min(budget, prompt.length()) : prompt.length();
  return budget > 0 ? std::min(budget, t_max) : t_max;
}

enum class Decoding { kSample, kGreedy };

struct RolloutRequest {
  const Rollout* hint = nullptr;
  std::size_t budget = 0;  ///< 0 = no budget beyond T_max
  std::int64_t step = 0;
  Decoding decoding = Decoding::kSample;
};

/// Autoregressive generation until EOS or the length cap. With a hint, the
/// first ceil(L/2) tokens are copied from the hint trajectory and recorded
/// with log-probability 0.
inline Rollout rollout(const ToyPolicy& policy, const PromptSpec& prompt, const VocabLayout& layout,
                       Stream& rng, const RolloutRequest& req = {}) {
  const std::size_t limit = generation_limit(prompt, layout, policy.t_max, req.budget);
  std::size_t forced = 0;
  if (req.hint != nullptr) {
    forced = forced_prefix_length(prompt);
    if (req.hint->tokens.size() < forced)
      throw HintFormatError("hint has " + std::to_string(req.hint->tokens.size()) +
                            " tokens, forced prefix needs " + std::to_string(forced));
  }
  Rollout out;
  out.behavior_snapshot = policy.snapshot_id;
  out.hinted = req.hint != nullptr;
  out.step = req.step;
  out.tokens.reserve(limit);
  out.behavior_logprobs.reserve(limit);
  for (std::size_t t = 0; t < limit; ++t) {
    TokenId tok;
    double lp;
    if (t < forced) {
      tok = req.hint->tokens[t];
      lp = 0.0;
    } else {
      const TokenDist dist = decode_distribution(policy, prompt.id, t, out.tokens);
      if (req.decoding == Decoding::kGreedy) {
        const auto it = std::max_element(dist.prob.begin(), dist.prob.begin() + dist.size);
        tok = static_cast<TokenId>(it - dist.prob.begin());
      } else {
        tok = static_cast<TokenId>(rng.categorical(dist.probs()));
      }
      lp = dist.logprob[tok];
    }
    out.tokens.push_back(tok);
    out.behavior_logprobs.push_back(lp);
    if (layout.is_eos(tok)) break;
  }
  out.length = out.tokens.size();
  out.reward = answer_matches(out.tokens, prompt, layout) ? 1 : 0;
  return out;
}

/// Greedy (argmax, lowest index on ties) decode.
inline Rollout greedy_rollout(const ToyPolicy& policy, const PromptSpec& prompt, const VocabLayout& layout) {
  Stream unused = make_stream(0, StreamTag::kTest);
  RolloutRequest req;
  req.decoding = Decoding::kGreedy;
  return rollout(policy, prompt, layout, unused, req);
}

/// Log-probability of a stored token sequence under `policy`, skipping the
/// first `skip` positions. Tokens outside the vocabulary raise DataError.
inline double sequence_logprob(const ToyPolicy& policy, PromptId prompt, std::span<const TokenId> tokens,
                               std::size_t skip = 0) {
  double total = 0.0;
  for (std::size_t t = skip; t < tokens.size(); ++t) {
    const TokenId tok = tokens[t];
    if (tok < 0 || static_cast<std::size_t>(tok) >= policy.vocab || t >= policy.t_max)
      throw DataError("token " + std::to_string(tok) + " at position " + std::to_string(t) +
                      " outside the policy's vocabulary or horizon");
    total += decode_distribution(policy, prompt, t, tokens.first(t)).logprob[tok];
  }
  return total;
}

struct DifficultyTruth {
  double value = 0.0;
  bool exact = true;
  std::optional<double> mc_stderr;
};

/// Exact failure probability 1 - P(answer == target) under the decoding
/// distribution, including EOS stopping. Because the decode distribution
/// depends only on position, all terminating sequences collapse onto a
/// lattice of (position, matched answer prefix) states and the sum over
/// sequences is evaluated on that lattice.
inline DifficultyTruth true_difficulty(const ToyPolicy& policy, const PromptSpec& prompt,
                                       const VocabLayout& layout, std::size_t budget = 0) {
  const std::size_t L = prompt.length();
  const std::size_t limit = generation_limit(prompt, layout, policy.t_max, budget);
  std::array<double, kMaxLength + 2> mass{};
  std::array<double, kMaxLength + 2> next{};
  mass[0] = 1.0;
  double success = 0.0;
  for (std::size_t t = 0; t < limit; ++t) {
    const TokenDist dist = decode_distribution(policy, prompt.id, t);
    next.fill(0.0);
    for (std::size_t p = 0; p <= L; ++p) {
      if (mass[p] == 0.0) continue;
      if (p < L) next[p + 1] += mass[p] * dist.prob[prompt.target[p]];
      if (layout.think) next[p] += mass[p] * dist.prob[*layout.think];
      if (p == L && layout.eos) success += mass[p] * dist.prob[*layout.eos];
    }
    mass = next;
  }
  success += mass[L];
  DifficultyTruth out;
  out.value = std::clamp(1.0 - success, 0.0, 1.0);
  return out;
}

/// Exact expected generated length (EOS included) under the decoding
/// distribution: sum over positions of the probability of still running.
inline double expected_length(const ToyPolicy& policy, const PromptSpec& prompt, const VocabLayout& layout,
                              std::size_t budget = 0) {
  const std::size_t limit = generation_limit(prompt, layout, policy.t_max, budget);
  if (!layout.eos) return static_cast<double>(limit);
  double alive = 1.0;
  double total = 0.0;
  for (std::size_t t = 0; t < limit; ++t) {
    total += alive;
    alive *= 1.0 - decode_distribution(policy, prompt.id, t).prob[*layout.eos];
  }
  return total;
}

/// Visits every terminating sequence with its log-probability under
/// `policy`. Returns false (after visiting nothing further) when more than
/// `cap` sequences would be produced.
inline bool enumerate_outcomes(const ToyPolicy& policy, const PromptSpec& prompt, const VocabLayout& layout,
                               const std::function<void(std::span<const TokenId>, double)>& visit,
                               std::size_t cap = 1'000'000) {
  const std::size_t limit = generation_limit(prompt, layout, policy.t_max);
  // Sequences: for EOS worlds, sum_{t<limit} (V-1)^t EOS-terminated plus
  // (V-1)^limit capped; otherwise V^limit.
  double count = 0.0;
  if (layout.eos) {
    const double base = static_cast<double>(layout.vocab - 1);
    for (std::size_t t = 0; t < limit; ++t) count += std::pow(base, static_cast<double>(t));
    count += std::pow(base, static_cast<double>(limit));
  } else {
    count = std::pow(static_cast<double>(layout.vocab), static_cast<double>(limit));
  }
  if (count > static_cast<double>(cap)) return false;

  std::vector<TokenId> seq;
  seq.reserve(limit);
  std::function<void(double)> dfs = [&](double lp) {
    if (seq.size() == limit) {
      visit(seq, lp);
      return;
    }
    const TokenDist dist = decode_distribution(policy, prompt.id, seq.size(), seq);
    for (std::size_t v = 0; v < dist.size; ++v) {
      seq.push_back(static_cast<TokenId>(v));
      if (layout.is_eos(static_cast<TokenId>(v)))
        visit(seq, lp + dist.logprob[v]);
      else
        dfs(lp + dist.logprob[v]);
      seq.pop_back();
    }
  };
  dfs(0.0);
  return true;
}

struct World {
  WorldConfig config;
  VocabLayout layout;
  std::vector<PromptSpec> prompts;
  std::vector<PromptId> reference_ids;
  std::vector<double> initial_shared_logits;
  std::vector<double> initial_prompt_logits;  ///< empty when per-prompt logits are disabled

  const PromptSpec& prompt(PromptId id) const { return prompts.at(static_cast<std::size_t>(id)); }
  std::size_t t_max() const { return config.t_max; }
  std::size_t vocab() const { return config.vocab; }
  std::size_t feature_dim() const { return layout.n_answer + 1 + config.family_weights.size(); }
};

/// Policy with the world's initial shared and per-prompt logits.
inline ToyPolicy make_initial_policy(const World& world) {
  ToyPolicy p;
  p.t_max = world.config.t_max;
  p.vocab = world.config.vocab;
  p.n_prompts = world.prompts.size();
  p.shared_logits = world.initial_shared_logits;
  p.prompt_logits = world.initial_prompt_logits;
  p.temperature = world.config.temperature;
  p.eos_token = world.layout.eos;
  p.snapshot_id = 0;
  return p;
}

/// Policy with every logit zero: uniform decoding.
inline ToyPolicy make_uniform_policy(std::size_t t_max, std::size_t vocab, std::size_t n_prompts,
                                     std::optional<TokenId> eos = std::nullopt) {
  ToyPolicy p;
  p.t_max = t_max;
  p.vocab = vocab;
  p.n_prompts = n_prompts;
  p.shared_logits.assign(t_max * vocab, 0.0);
  p.eos_token = eos;
  return p;
}

inline std::vector<double> prompt_features(std::span<const TokenId> target, int family, const VocabLayout& layout,
                                           std::size_t t_max, std::size_t n_families) {
  std::vector<double> f(layout.n_answer + 1 + n_families, 0.0);
  for (const TokenId t : target) f[static_cast<std::size_t>(t)] += 1.0 / static_cast<double>(target.size());
  f[layout.n_answer] = static_cast<double>(target.size()) / static_cast<double>(t_max);
  f[layout.n_answer + 1 + static_cast<std::size_t>(family)] = 1.0;
  double norm = 0.0;
  for (double x : f) norm += x * x;
  norm = std::sqrt(norm);
  for (double& x : f) x /= norm;
  return f;
}

/// Half-width of the uniform jitter around a family's difficulty level.
inline constexpr double kFamilySpread = 0.05;
/// Stream key of the canonical answer shared by prior-based worlds.
inline constexpr std::uint64_t kCanonicalKey = 0xc0de;

namespace detail {

/// Direction of "prior knowledge" for a target: the target token at each
/// answer position, then EOS and think at every later position.
inline void add_prior(std::span<double> row, const PromptSpec& p, const VocabLayout& layout, std::size_t t_max,
                      double strength) {
  const std::size_t V = layout.vocab;
  for (std::size_t t = 0; t < t_max; ++t) {
    if (t < p.length()) {
      row[t * V + static_cast<std::size_t>(p.target[t])] += strength;
    } else {
      if (layout.eos) row[t * V + static_cast<std::size_t>(*layout.eos)] += strength;
      if (layout.think) row[t * V + static_cast<std::size_t>(*layout.think)] += strength;
    }
  }
}

}  // namespace detail

/// Targets agree with a seeded canonical answer token by token with
/// probability target_agreement; each prompt's initial logits are seeded noise plus a
/// prior toward its own target whose strength is bisected so the exact
/// initial failure rate matches the prompt's (jittered) family level.
inline void make_prompts_with_prior(World& w, const std::vector<double>& levels) {
  const WorldConfig& config = w.config;
  const std::size_t row = config.t_max * config.vocab;
  const std::size_t n_fam = config.family_weights.size();
  const std::size_t max_len = w.layout.eos ? config.t_max - 1 : config.t_max;
  w.initial_prompt_logits.assign(config.n_prompts * row, 0.0);
  ToyPolicy probe = make_uniform_policy(config.t_max, config.vocab, 1, w.layout.eos);
  probe.shared_logits = w.initial_shared_logits;
  probe.temperature = config.temperature;
  probe.prompt_logits.assign(row, 0.0);
  auto answer_token = [&](Stream& rng) {
    return static_cast<TokenId>(std::min(w.layout.n_answer - 1, static_cast<std::size_t>(rng.uniform() * static_cast<double>(w.layout.n_answer))));
  };
  Stream canon_rng = make_stream(config.seed, StreamTag::kWorld, {kCanonicalKey, 0});
  std::vector<TokenId> canonical(config.t_max);
  for (TokenId& t : canonical) t = answer_token(canon_rng);
  for (std::size_t i = 0; i < config.n_prompts; ++i) {
    Stream rng = make_stream(config.seed, StreamTag::kWorld, {i});
    PromptSpec p;
    p.id = 0;
    p.group_label = static_cast<int>(rng.categorical(config.family_weights));
    const std::size_t len = 1 + std::min(max_len - 1, static_cast<std::size_t>(rng.uniform() * static_cast<double>(max_len)));
    for (std::size_t k = 0; k < len; ++k) {
      const bool agree = rng.uniform() < config.target_agreement;
      const TokenId other = answer_token(rng);
      p.target.push_back(agree ? canonical[k] : other);
    }
    const double level = std::clamp(levels[static_cast<std::size_t>(p.group_label)] +
                                        kFamilySpread * (2.0 * rng.uniform() - 1.0),
                                    0.005, 0.995);
    std::vector<double> noise(row);
    for (double& x : noise) x = rng.normal(0.0, 1.0) * config.prompt_init_scale;

    auto difficulty_at = [&](double strength) {
      std::copy(noise.begin(), noise.end(), probe.prompt_logits.begin());
      detail::add_prior(probe.prompt_logits, p, w.layout, config.t_max, strength);
      return true_difficulty(probe, p, w.layout).value;
    };
    double lo = -10.0;  // high difficulty end
    double hi = 40.0;   // low difficulty end
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (lo + hi);
      (difficulty_at(mid) > level ? lo : hi) = mid;
    }
    difficulty_at(0.5 * (lo + hi));
    std::copy(probe.prompt_logits.begin(), probe.prompt_logits.end(),
              w.initial_prompt_logits.begin() + static_cast<std::ptrdiff_t>(i * row));
    p.id = static_cast<PromptId>(i);
    p.features = prompt_features(p.target, p.group_label, w.layout, config.t_max, n_fam);
    w.prompts.push_back(std::move(p));
  }
}

/// Shared-logit worlds: score candidate targets under the initial policy and
/// keep the one whose exact failure rate is closest to the family level.
inline void make_prompts_by_search(World& w, const std::vector<double>& levels) {
  const WorldConfig& config = w.config;
  const std::size_t n_fam = config.family_weights.size();
  ToyPolicy probe = make_uniform_policy(config.t_max, config.vocab, 1, w.layout.eos);
  probe.shared_logits = w.initial_shared_logits;
  probe.temperature = config.temperature;
  const std::size_t max_len = config.t_max;
  for (std::size_t i = 0; i < config.n_prompts; ++i) {
    Stream rng = make_stream(config.seed, StreamTag::kWorld, {i});
    const int family = static_cast<int>(rng.categorical(config.family_weights));
    PromptSpec best;
    double best_gap = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < config.candidates; ++c) {
      PromptSpec cand;
      if (c % 2 == 0) {
        Rollout r = rollout(probe, PromptSpec{0, std::vector<TokenId>(max_len, 0), {}, 0}, w.layout, rng);
        for (TokenId t : r.tokens)
          if (w.layout.is_answer(t) && cand.target.size() < max_len) cand.target.push_back(t);
      }
      if (cand.target.empty()) {
        const std::size_t len = 1 + static_cast<std::size_t>(rng.uniform() * static_cast<double>(max_len));
        for (std::size_t k = 0; k < std::min(len, max_len); ++k)
          cand.target.push_back(static_cast<TokenId>(rng.uniform() * static_cast<double>(w.layout.n_answer)));
      }
      const double gap = std::abs(true_difficulty(probe, cand, w.layout).value - levels[static_cast<std::size_t>(family)]);
      if (gap < best_gap) {
        best_gap = gap;
        best = std::move(cand);
      }
    }
    best.id = static_cast<PromptId>(i);
    best.group_label = family;
    best.features = prompt_features(best.target, family, w.layout, config.t_max, n_fam);
    w.prompts.push_back(std::move(best));
  }
}

/// Builds the synthetic task universe. Each prompt draws a difficulty family
/// from the mixture and is placed near that family's initial failure rate.
inline World make_world(const WorldConfig& config) {
  validate(config);
  World w;
  w.config = config;
  w.layout = make_layout(config.vocab, config.eos_enabled, config.think_enabled);

  Stream init = make_stream(config.seed, StreamTag::kInitPolicy);
  w.initial_shared_logits.assign(config.t_max * config.vocab, 0.0);
  for (std::size_t t = 0; t < config.t_max; ++t) {
    for (std::size_t v = 0; v < config.vocab; ++v) {
      double x = init.normal(0.0, 1.0) * config.init_scale;
      if (w.layout.is_think(static_cast<TokenId>(v))) x += config.think_bias;
      w.initial_shared_logits[t * config.vocab + v] = x;
    }
  }

  const std::size_t n_fam = config.family_weights.size();
  std::vector<double> levels = config.family_difficulty;
  if (levels.empty()) {
    for (std::size_t f = 0; f < n_fam; ++f)
      levels.push_back(n_fam == 1 ? 0.5 : 0.15 + 0.78 * static_cast<double>(f) / static_cast<double>(n_fam - 1));
  }

  w.prompts.reserve(config.n_prompts);
  if (config.prompt_logits) {
    make_prompts_with_prior(w, levels);
  } else {
    make_prompts_by_search(w, levels);
  }

  // Reference prompts for the cold start: a seeded uniform subset.
  std::vector<PromptId> ids(config.n_prompts);
  std::iota(ids.begin(), ids.end(), PromptId{0});
  Stream ref = make_stream(config.seed, StreamTag::kReference, {0xfeed});
  for (std::size_t i = 0; i < config.n_reference; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(ref.uniform() * static_cast<double>(ids.size() - i));
    std::swap(ids[i], ids[j]);
  }
  w.reference_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(config.n_reference));
  std::sort(w.reference_ids.begin(), w.reference_ids.end());
  return w;
}

}  // namespace dare
