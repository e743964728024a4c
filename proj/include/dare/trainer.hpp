#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dare/buffer.hpp"
#include "dare/error.hpp"
#include "dare/parallel.hpp"
#include "dare/rng.hpp"
#include "dare/world.hpp"

namespace dare {

enum class Tier { kEasy, kMedium, kHard };

inline std::string_view to_string(Tier t) {
  switch (t) {
    case Tier::kEasy: return "easy";
    case Tier::kMedium: return "medium";
    case Tier::kHard: return "hard";
  }
  return "?";
}

struct TierConfig {
  bool tiered = true;  ///< false: every prompt is treated as medium (plain GRPO)
  double d_easy = 0.3;
  double d_hard = 0.8;
  std::size_t g = 8;
  std::size_t g_easy = 4;
  std::size_t g_hard = 16;
  double lambda_easy = 1e-4;
  double lambda_hard = 1e-4;
  double eps = 0.2;
  double eps_plus_easy = 0.6;
  std::size_t t_budget_easy = 0;  ///< 0: no budget beyond T_max
  double beta_kl = 0.0;
  double sigma = 0.5;
  double lr = 0.05;

  bool operator==(const TierConfig&) const = default;
};

inline void validate(const TierConfig& c, std::size_t t_max) {
  if (!(c.d_easy > 0.0 && c.d_easy < 1.0)) throw ConfigError("trainer.d_easy", "must lie in (0, 1)");
  if (!(c.d_hard > 0.0 && c.d_hard < 1.0)) throw ConfigError("trainer.d_hard", "must lie in (0, 1)");
  if (!(c.d_easy < c.d_hard)) throw ConfigError("trainer.d_easy", "must be below d_hard");
  if (c.g_easy < 2) throw ConfigError("trainer.g_easy", "must be >= 2");
  if (c.g_easy > c.g) throw ConfigError("trainer.g_easy", "must be <= g");
  if (c.g > c.g_hard) throw ConfigError("trainer.g_hard", "must be >= g");
  if (!(c.lambda_easy >= 0.0)) throw ConfigError("trainer.lambda_easy", "must be >= 0");
  if (!(c.lambda_hard >= 0.0 && c.lambda_hard < 1.0)) throw ConfigError("trainer.lambda_hard", "must lie in [0, 1)");
  if (!(c.eps >= 0.0 && c.eps < 1.0)) throw ConfigError("trainer.eps", "must lie in [0, 1)");
  if (!(c.eps_plus_easy >= c.eps)) throw ConfigError("trainer.eps_plus_easy", "must be >= eps");
  if (c.t_budget_easy > t_max) throw ConfigError("trainer.t_budget_easy", "must be <= t_max");
  if (!(c.beta_kl >= 0.0)) throw ConfigError("trainer.beta_kl", "must be >= 0");
  if (!(c.sigma >= 0.0 && c.sigma <= 1.0)) throw ConfigError("trainer.sigma", "must lie in [0, 1]");
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw ConfigError("trainer.lr", "must be > 0");
}

/// Boundaries belong to the medium tier.
inline Tier assign_tier(double d_hat, const TierConfig& c) {
  if (!c.tiered) return Tier::kMedium;
  if (d_hat < c.d_easy) return Tier::kEasy;
  if (d_hat > c.d_hard) return Tier::kHard;
  return Tier::kMedium;
}

struct TierBudget {
  std::size_t g = 0;
  std::size_t length_budget = 0;
  double eps_minus = 0.0;
  double eps_plus = 0.0;

  bool operator==(const TierBudget&) const = default;
};

inline TierBudget tier_budget(Tier tier, const TierConfig& c, std::size_t t_max) {
  switch (tier) {
    case Tier::kEasy:
      return {c.g_easy, c.t_budget_easy > 0 ? c.t_budget_easy : t_max, c.eps, c.eps_plus_easy};
    case Tier::kMedium: return {c.g, t_max, c.eps, c.eps};
    case Tier::kHard: return {c.g_hard, t_max, c.eps, c.eps};
  }
  return {};
}

/// Easy tier: length penalty on correct rollouts. Hard tier: bounded length
/// bonus on incorrect rollouts. Everything else passes through.
inline double shape_reward(Tier tier, double d_hat, int r, std::size_t length, std::size_t t_max_group,
                           const TierConfig& c) {
  const double rel = t_max_group > 0 ? static_cast<double>(length) / static_cast<double>(t_max_group) : 0.0;
  if (tier == Tier::kEasy && r == 1) {
    const double w = std::clamp((c.d_easy - d_hat) / c.d_easy, 0.0, 1.0);
    return 1.0 - c.lambda_easy * w * rel;
  }
  if (tier == Tier::kHard && r == 0) {
    const double w = std::clamp((d_hat - c.d_hard) / (1.0 - c.d_hard), 0.0, 1.0);
    return c.lambda_hard * w * rel;
  }
  return static_cast<double>(r);
}

inline constexpr double kStdFloor = 1e-6;

/// (r - mean) / max(population std, 1e-6).
inline std::vector<double> group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw GroupingError("group needs at least 2 rollouts, got " + std::to_string(rewards.size()));
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> a;
  a.reserve(rewards.size());
  if (sd < kStdFloor) {
    a.assign(rewards.size(), 0.0);
    return a;
  }
  for (double r : rewards) a.push_back((r - mean) / sd);
  return a;
}

struct TrainGroup {
  PromptId prompt_id = 0;
  Tier tier = Tier::kMedium;
  double d_hat = 0.5;
  std::vector<Rollout> rollouts;
  std::vector<double> shaped_rewards;
  std::vector<double> advantages;
  double eps_minus = 0.2;
  double eps_plus = 0.2;
  std::size_t n_replay = 0;
  std::size_t n_hinted = 0;
};

/// Fills shaped rewards (with t_max_group = longest rollout) and advantages.
inline void finalize_group(TrainGroup& g, const TierConfig& c) {
  std::size_t t_max_group = 0;
  for (const Rollout& r : g.rollouts) t_max_group = std::max(t_max_group, r.length);
  g.shaped_rewards.clear();
  for (const Rollout& r : g.rollouts)
    g.shaped_rewards.push_back(shape_reward(g.tier, g.d_hat, r.reward, r.length, t_max_group, c));
  g.advantages = group_advantages(g.shaped_rewards);
}

struct BatchItem {
  PromptId prompt_id = 0;
  double d_hat = 0.5;
};

inline std::size_t fresh_count(double sigma, std::size_t g) {
  return static_cast<std::size_t>(std::ceil(sigma * static_cast<double>(g) - 1e-12));
}

/// Builds one group per batch prompt: tier and budget from d_hat, a sigma
/// fraction of fresh rollouts with the rest replayed from the newest buffered
/// entries (topped up with fresh ones), and for hard prompts G_hard - G
/// extra hint-augmented rollouts when a buffered success exists. Every fresh
/// rollout is pushed to the buffer afterwards, in batch order.
inline std::vector<TrainGroup> build_groups(std::span<const BatchItem> batch, ReplayBuffer& buffer,
                                            const ToyPolicy& policy, const World& world, const TierConfig& c,
                                            std::uint64_t seed, std::int64_t step) {
  std::vector<TrainGroup> groups(batch.size());
  std::vector<std::vector<Rollout>> fresh(batch.size());
  parallel_for(batch.size(), [&](std::size_t b) {
    const BatchItem& item = batch[b];
    const PromptSpec& prompt = world.prompt(item.prompt_id);
    TrainGroup& g = groups[b];
    g.prompt_id = item.prompt_id;
    g.d_hat = item.d_hat;
    g.tier = assign_tier(item.d_hat, c);
    const TierBudget budget = tier_budget(g.tier, c, world.t_max());
    g.eps_minus = budget.eps_minus;
    g.eps_plus = budget.eps_plus;

    const std::size_t standard = g.tier == Tier::kHard ? c.g : budget.g;
    const std::size_t n_fresh = std::min(standard, fresh_count(c.sigma, standard));
    const std::vector<BufferEntry> stored = buffer.entries(item.prompt_id);
    const std::size_t n_replay = std::min(standard - n_fresh, stored.size());

    std::uint64_t index = 0;
    auto generate = [&](const Rollout* hint) {
      const StreamTag tag = hint ? StreamTag::kHintRollout : StreamTag::kRollout;
      Stream rng = make_stream(seed, tag, {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(item.prompt_id), index++});
      RolloutRequest req;
      req.hint = hint;
      req.budget = budget.length_budget < world.t_max() ? budget.length_budget : 0;
      req.step = step;
      Rollout r = rollout(policy, prompt, world.layout, rng, req);
      fresh[b].push_back(r);
      g.rollouts.push_back(std::move(r));
    };

    for (std::size_t i = 0; i < standard - n_replay; ++i) generate(nullptr);
    for (std::size_t i = 0; i < n_replay; ++i) g.rollouts.push_back(stored[stored.size() - 1 - i].rollout);
    g.n_replay = n_replay;

    if (g.tier == Tier::kHard) {
      const std::optional<Rollout> hint = buffer.select_hint(item.prompt_id);
      const bool usable = hint && hint->tokens.size() >= forced_prefix_length(prompt);
      for (std::size_t i = standard; i < budget.g; ++i) generate(usable ? &*hint : nullptr);
      g.n_hinted = usable ? budget.g - standard : 0;
    }
    finalize_group(g, c);
  });
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (Rollout& r : fresh[b]) buffer.push(BufferEntry{batch[b].prompt_id, std::move(r)});
  return groups;
}

// --- objective ----------------------------------------------------------------

struct ObjectiveResult {
  double objective = 0.0;  ///< surrogate - beta * kl
  double surrogate = 0.0;
  double kl = 0.0;
  double mean_ratio = 0.0;
  double clip_frac = 0.0;
  std::size_t tokens = 0;
  std::vector<double> grad_shared;  ///< d objective / d shared logits
  std::vector<double> grad_prompt;  ///< d objective / d per-prompt logits (empty when disabled)
  std::vector<double> group_kl;     ///< per-group averaged KL
  std::vector<double> group_clip_frac;
};

/// Difficulty-conditioned clipped surrogate with exact per-state KL to
/// `reference`, averaged per rollout (over unforced tokens), per group and
/// over the batch, with its analytic gradient on the logits.
inline ObjectiveResult objective_and_gradient(const ToyPolicy& policy, const ToyPolicy& reference,
                                              std::span<const TrainGroup> groups, const World& world,
                                              const TierConfig& c) {
  if (groups.empty()) throw GroupingError("no groups to optimize");
  if (policy.temperature < kGreedyTemperature) throw NumericalError(-1, "training needs temperature > 0");
  ObjectiveResult out;
  out.grad_shared.assign(policy.shared_logits.size(), 0.0);
  if (policy.has_prompt_logits()) out.grad_prompt.assign(policy.prompt_logits.size(), 0.0);
  const double inv_tau = 1.0 / policy.temperature;
  const double batch_w = 1.0 / static_cast<double>(groups.size());
  std::size_t clipped = 0;
  double ratio_sum = 0.0;

  std::array<double, kMaxVocab> dz{};
  for (const TrainGroup& g : groups) {
    if (g.rollouts.size() != g.advantages.size()) throw GroupingError("advantage count mismatch");
    const PromptSpec& prompt = world.prompt(g.prompt_id);
    const double group_w = batch_w / static_cast<double>(g.rollouts.size());
    double g_sur = 0.0;
    double g_kl = 0.0;
    std::size_t g_tokens = 0;
    std::size_t g_clipped = 0;
    for (std::size_t i = 0; i < g.rollouts.size(); ++i) {
      const Rollout& r = g.rollouts[i];
      const double A = g.advantages[i];
      const std::size_t skip = forced_prefix_length(r, prompt);
      if (r.tokens.size() <= skip) continue;
      const double w = group_w / static_cast<double>(r.tokens.size() - skip);
      for (std::size_t t = skip; t < r.tokens.size(); ++t) {
        const TokenId tok = r.tokens[t];
        if (tok < 0 || static_cast<std::size_t>(tok) >= policy.vocab || t >= policy.t_max)
          throw DataError("rollout token outside the policy's vocabulary or horizon");
        const TokenDist p = decode_distribution(policy, g.prompt_id, t);
        const double ratio = std::exp(p.logprob[tok] - r.behavior_logprobs[t]);
        const double clipped_ratio = std::clamp(ratio, 1.0 - g.eps_minus, 1.0 + g.eps_plus);
        const double unclipped_term = ratio * A;
        const double clipped_term = clipped_ratio * A;
        const bool use_clipped = clipped_term < unclipped_term;
        const double sur = use_clipped ? clipped_term : unclipped_term;
        ratio_sum += ratio;
        ++out.tokens;
        ++g_tokens;
        if (use_clipped) {
          ++clipped;
          ++g_clipped;
        }
        dz.fill(0.0);
        if (!use_clipped && A != 0.0) {
          const double s = w * unclipped_term * inv_tau;
          for (std::size_t v = 0; v < p.size; ++v) dz[v] += s * ((static_cast<std::size_t>(tok) == v ? 1.0 : 0.0) - p.prob[v]);
        }
        // KL(pi || pi_ref) at this visited state.
        const TokenDist q = decode_distribution(reference, g.prompt_id, t);
        double kl = 0.0;
        for (std::size_t v = 0; v < p.size; ++v)
          if (p.prob[v] > 0.0) kl += p.prob[v] * (p.logprob[v] - q.logprob[v]);
        if (c.beta_kl > 0.0) {
          const double s = -c.beta_kl * w * inv_tau;
          for (std::size_t v = 0; v < p.size; ++v) dz[v] += s * p.prob[v] * ((p.logprob[v] - q.logprob[v]) - kl);
        }
        out.surrogate += w * sur;
        out.kl += w * kl;
        g_sur += sur / static_cast<double>(r.tokens.size() - skip) / static_cast<double>(g.rollouts.size());
        g_kl += kl / static_cast<double>(r.tokens.size() - skip) / static_cast<double>(g.rollouts.size());
        for (std::size_t v = 0; v < p.size; ++v) {
          if (dz[v] == 0.0) continue;
          out.grad_shared[policy.shared_index(t, v)] += dz[v];
          if (policy.has_prompt_logits()) out.grad_prompt[policy.prompt_index(g.prompt_id, t, v)] += dz[v];
        }
      }
    }
    if (!std::isfinite(g_sur) || !std::isfinite(g_kl))
      throw NumericalError(g.prompt_id, "non-finite objective for prompt " + std::to_string(g.prompt_id));
    out.group_kl.push_back(g_kl);
    out.group_clip_frac.push_back(g_tokens ? static_cast<double>(g_clipped) / static_cast<double>(g_tokens) : 0.0);
  }
  out.objective = out.surrogate - c.beta_kl * out.kl;
  out.mean_ratio = out.tokens ? ratio_sum / static_cast<double>(out.tokens) : 1.0;
  out.clip_frac = out.tokens ? static_cast<double>(clipped) / static_cast<double>(out.tokens) : 0.0;
  if (!std::isfinite(out.objective)) throw NumericalError(groups.front().prompt_id, "non-finite objective");
  return out;
}

struct StepStats {
  double objective = 0.0;
  double surrogate = 0.0;
  double kl = 0.0;
  double mean_ratio = 1.0;
  double clip_frac = 0.0;
  double grad_norm = 0.0;
  std::vector<double> group_kl;
  std::vector<double> group_clip_frac;
};

/// One gradient-ascent step of size lr on shared and per-prompt logits.
inline StepStats grpo_step(ToyPolicy& policy, const ToyPolicy& reference, std::span<const TrainGroup> groups,
                           const World& world, const TierConfig& c) {
  ObjectiveResult res = objective_and_gradient(policy, reference, groups, world, c);
  double sq = 0.0;
  for (double g : res.grad_shared) sq += g * g;
  for (double g : res.grad_prompt) sq += g * g;
  for (std::size_t i = 0; i < policy.shared_logits.size(); ++i) policy.shared_logits[i] += c.lr * res.grad_shared[i];
  for (std::size_t i = 0; i < res.grad_prompt.size(); ++i) policy.prompt_logits[i] += c.lr * res.grad_prompt[i];
  ++policy.snapshot_id;
  StepStats s;
  s.objective = res.objective;
  s.surrogate = res.surrogate;
  s.kl = res.kl;
  s.mean_ratio = res.mean_ratio;
  s.clip_frac = res.clip_frac;
  s.grad_norm = std::sqrt(sq);
  s.group_kl = std::move(res.group_kl);
  s.group_clip_frac = std::move(res.group_clip_frac);
  return s;
}

}  // namespace dare
