#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "dare/trainer.hpp"
#include "support/gradcheck.hpp"

using namespace dare;

namespace {

World small_world(std::uint64_t seed = 1) {
  WorldConfig c;
  c.n_prompts = 16;
  c.n_reference = 4;
  c.seed = seed;
  return make_world(c);
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

double pop_std(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / v.size());
}

// One-rollout group whose single token has ratio `ratio` under `policy`.
TrainGroup ratio_group(const World& w, const ToyPolicy& policy, Tier tier, double ratio, double advantage,
                       const TierConfig& c) {
  TrainGroup g;
  g.prompt_id = 0;
  g.tier = tier;
  const TierBudget b = tier_budget(tier, c, w.t_max());
  g.eps_minus = b.eps_minus;
  g.eps_plus = b.eps_plus;
  Rollout r;
  r.tokens = {0};
  r.length = 1;
  r.behavior_logprobs = {decode_distribution(policy, 0, 0).logprob[0] - std::log(ratio)};
  g.rollouts.push_back(r);
  g.advantages.push_back(advantage);
  return g;
}

}  // namespace

TEST(AssignTier, ThresholdExamples) {
  const TierConfig c;
  EXPECT_EQ(assign_tier(0.2, c), Tier::kEasy);
  EXPECT_EQ(assign_tier(0.3, c), Tier::kMedium);
  EXPECT_EQ(assign_tier(0.8, c), Tier::kMedium);
  EXPECT_EQ(assign_tier(0.85, c), Tier::kHard);
  EXPECT_EQ(assign_tier(0.0, c), Tier::kEasy);
  EXPECT_EQ(assign_tier(1.0, c), Tier::kHard);
}

TEST(AssignTier, UntieredIsAlwaysMedium) {
  TierConfig c;
  c.tiered = false;
  for (double d : {0.0, 0.2, 0.5, 0.95}) EXPECT_EQ(assign_tier(d, c), Tier::kMedium);
}

TEST(TierBudget, DefaultBudgets) {
  TierConfig c;
  c.t_budget_easy = 4;
  EXPECT_EQ(tier_budget(Tier::kEasy, c, 6), (TierBudget{4, 4, 0.2, 0.6}));
  EXPECT_EQ(tier_budget(Tier::kMedium, c, 6), (TierBudget{8, 6, 0.2, 0.2}));
  EXPECT_EQ(tier_budget(Tier::kHard, c, 6), (TierBudget{16, 6, 0.2, 0.2}));
  c.t_budget_easy = 0;
  EXPECT_EQ(tier_budget(Tier::kEasy, c, 6).length_budget, 6u);
}

TEST(ShapeReward, EasyPenaltyExample) {
  const TierConfig c;
  EXPECT_NEAR(shape_reward(Tier::kEasy, 0.15, 1, 1, 6, c), 1.0 - 1e-4 * 0.5 / 6.0, 1e-16);
  EXPECT_NEAR(1.0 - shape_reward(Tier::kEasy, 0.15, 1, 1, 6, c), 8.3333e-6, 1e-10);
}

TEST(ShapeReward, HardBonusExample) {
  const TierConfig c;
  EXPECT_NEAR(shape_reward(Tier::kHard, 0.9, 0, 6, 6, c), 5.0e-5, 1e-18);
}

TEST(ShapeReward, PassThroughCases) {
  const TierConfig c;
  for (int r : {0, 1}) EXPECT_EQ(shape_reward(Tier::kMedium, 0.5, r, 3, 6, c), r);
  EXPECT_EQ(shape_reward(Tier::kEasy, 0.1, 0, 3, 6, c), 0.0);
  EXPECT_EQ(shape_reward(Tier::kHard, 0.95, 1, 3, 6, c), 1.0);
}

TEST(ShapeReward, WeightsClampAtTierEdges) {
  const TierConfig c;
  EXPECT_EQ(shape_reward(Tier::kEasy, 0.3, 1, 6, 6, c), 1.0);
  EXPECT_NEAR(shape_reward(Tier::kEasy, 0.0, 1, 6, 6, c), 1.0 - 1e-4, 1e-16);
  EXPECT_EQ(shape_reward(Tier::kHard, 0.8, 0, 6, 6, c), 0.0);
  EXPECT_NEAR(shape_reward(Tier::kHard, 1.0, 0, 6, 6, c), 1e-4, 1e-18);
}

TEST(ShapeReward, HardTierKeepsCorrectAboveIncorrectOnRandomGroups) {
  Stream rng = make_stream(21, StreamTag::kTest);
  for (int trial = 0; trial < 10000; ++trial) {
    TierConfig c;
    c.lambda_hard = rng.uniform() * 0.999999;
    TrainGroup g;
    g.tier = Tier::kHard;
    g.d_hat = c.d_hard + (1.0 - c.d_hard) * rng.uniform();
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform() * 15);
    for (std::size_t i = 0; i < n; ++i) {
      Rollout r;
      r.length = 1 + static_cast<std::size_t>(rng.uniform() * 12);
      r.reward = rng.uniform() < 0.5;
      g.rollouts.push_back(r);
    }
    finalize_group(g, c);
    double min_correct = 2.0, max_incorrect = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (g.rollouts[i].reward == 1) min_correct = std::min(min_correct, g.shaped_rewards[i]);
      else max_incorrect = std::max(max_incorrect, g.shaped_rewards[i]);
    }
    if (min_correct <= 1.0 && max_incorrect >= 0.0) ASSERT_GT(min_correct, max_incorrect) << trial;
  }
}

TEST(ShapeReward, EasyPenaltyStrictlyDecreasesWithLength) {
  TierConfig c;
  c.lambda_easy = 1e-4;
  double prev = 2.0;
  for (std::size_t len = 1; len <= 12; ++len) {
    const double r = shape_reward(Tier::kEasy, 0.1, 1, len, 12, c);
    EXPECT_LT(r, prev);
    prev = r;
  }
}

TEST(GroupAdvantages, Examples) {
  const std::vector<double> a = group_advantages(std::vector<double>{1, 1, 0, 0});
  EXPECT_EQ(a, (std::vector<double>{1, 1, -1, -1}));
  EXPECT_EQ(group_advantages(std::vector<double>{0.7, 0.7, 0.7}), (std::vector<double>{0, 0, 0}));
  const std::vector<double> b = group_advantages(std::vector<double>{1, 0, 0, 0});
  EXPECT_NEAR(b[0], std::sqrt(3.0), 1e-12);
  for (int i = 1; i < 4; ++i) EXPECT_NEAR(b[i], -1.0 / std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(b[0], 1.7321, 5e-5);
  EXPECT_NEAR(b[1], -0.5774, 5e-5);
}

TEST(GroupAdvantages, SingletonGroupIsGroupingError) {
  EXPECT_THROW(group_advantages(std::vector<double>{1.0}), GroupingError);
  EXPECT_THROW(group_advantages(std::vector<double>{}), GroupingError);
}

TEST(GroupAdvantages, StandardizedOnRandomGroups) {
  Stream rng = make_stream(22, StreamTag::kTest);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> r(2 + static_cast<std::size_t>(rng.uniform() * 15));
    for (double& x : r) x = rng.uniform() < 0.5 ? rng.uniform() : static_cast<double>(rng.uniform() < 0.5);
    const std::vector<double> a = group_advantages(r);
    ASSERT_EQ(a.size(), r.size());
    EXPECT_NEAR(mean_of(a), 0.0, 1e-9);
    if (pop_std(r) >= kStdFloor) EXPECT_NEAR(pop_std(a), 1.0, 1e-6);
  }
}

TEST(Objective, AsymmetricClipLetsEasyRatiosThrough) {
  const World w = small_world();
  const ToyPolicy p = make_initial_policy(w);
  const TierConfig c;
  const double ratio = 1.0 + c.eps_plus_easy - 1e-6;
  const std::vector<TrainGroup> easy{ratio_group(w, p, Tier::kEasy, ratio, 1.0, c)};
  const std::vector<TrainGroup> medium{ratio_group(w, p, Tier::kMedium, ratio, 1.0, c)};
  EXPECT_EQ(objective_and_gradient(p, p, easy, w, c).clip_frac, 0.0);
  EXPECT_EQ(objective_and_gradient(p, p, medium, w, c).clip_frac, 1.0);
}

TEST(Objective, MinFormClipsNegativeAdvantagesBelowTheLowerBound) {
  const World w = small_world();
  const ToyPolicy p = make_initial_policy(w);
  const TierConfig c;
  // A < 0: ratio below 1 - eps is clipped, ratio above 1 + eps is not.
  const std::vector<TrainGroup> low{ratio_group(w, p, Tier::kMedium, 0.5, -1.0, c)};
  const std::vector<TrainGroup> high{ratio_group(w, p, Tier::kMedium, 1.5, -1.0, c)};
  const ObjectiveResult lo = objective_and_gradient(p, p, low, w, c);
  const ObjectiveResult hi = objective_and_gradient(p, p, high, w, c);
  EXPECT_EQ(lo.clip_frac, 1.0);
  EXPECT_NEAR(lo.surrogate, -0.8, 1e-12);
  EXPECT_EQ(hi.clip_frac, 0.0);
  EXPECT_NEAR(hi.surrogate, -1.5, 1e-12);
}

TEST(Objective, AnalyticGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    for (double beta : {0.0, 0.25}) {
      for (double eps_plus : {0.2, 0.6}) {
        gradcheck::GradInstance inst = gradcheck::make_grad_instance(seed, beta, 0.2, eps_plus);
        const gradcheck::GradCheck r = gradcheck::check_gradient(inst);
        EXPECT_LE(r.max_rel_error, 1e-4) << "seed " << seed << " beta " << beta << " eps+ " << eps_plus;
        EXPECT_GT(r.parameters, 30u);
      }
    }
  }
}

TEST(Objective, GradientChecksExerciseClipping) {
  double clipped = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    gradcheck::GradInstance inst = gradcheck::make_grad_instance(seed, 0.0, 0.2, 0.2);
    clipped += objective_and_gradient(inst.policy, inst.reference, inst.groups, inst.world, inst.config).clip_frac;
  }
  EXPECT_GT(clipped, 0.0);
}

TEST(GrpoStep, ZeroAdvantagesWithoutKlLeaveParametersUnchanged) {
  gradcheck::GradInstance inst = gradcheck::make_grad_instance(3, 0.0, 0.2, 0.2);
  for (TrainGroup& g : inst.groups) std::fill(g.advantages.begin(), g.advantages.end(), 0.0);
  const ToyPolicy before = inst.policy;
  const StepStats s = grpo_step(inst.policy, inst.reference, inst.groups, inst.world, inst.config);
  EXPECT_EQ(inst.policy.shared_logits, before.shared_logits);
  EXPECT_EQ(inst.policy.prompt_logits, before.prompt_logits);
  EXPECT_EQ(s.grad_norm, 0.0);
  EXPECT_EQ(inst.policy.snapshot_id, before.snapshot_id + 1);
}

TEST(GrpoStep, PositiveAdvantageRaisesRolloutLogProb) {
  const World w = small_world(2);
  ToyPolicy p = make_initial_policy(w);
  Stream rng = make_stream(4, StreamTag::kTest);
  const PromptSpec& q = w.prompt(1);
  TrainGroup g;
  g.prompt_id = 1;
  g.rollouts.push_back(rollout(p, q, w.layout, rng));
  g.advantages = {1.0};
  const double before = sequence_logprob(p, 1, g.rollouts[0].tokens);
  TierConfig c;
  grpo_step(p, p, std::vector<TrainGroup>{g}, w, c);
  EXPECT_GT(sequence_logprob(p, 1, g.rollouts[0].tokens), before);
}

TEST(GrpoStep, KlAtReferenceHasZeroGradient) {
  const World w = small_world(3);
  ToyPolicy p = make_initial_policy(w);
  const ToyPolicy ref = p;
  TierConfig c;
  c.beta_kl = 0.5;
  Stream rng = make_stream(5, StreamTag::kTest);
  std::vector<TrainGroup> groups;
  for (PromptId id : {0, 2, 7}) {
    TrainGroup g;
    g.prompt_id = id;
    for (int i = 0; i < 4; ++i) g.rollouts.push_back(rollout(p, w.prompt(id), w.layout, rng));
    g.advantages.assign(4, 0.0);
    groups.push_back(g);
  }
  const StepStats s = grpo_step(p, ref, groups, w, c);
  EXPECT_EQ(s.kl, 0.0);
  EXPECT_EQ(s.grad_norm, 0.0);
  EXPECT_EQ(p.shared_logits, ref.shared_logits);
  EXPECT_EQ(p.prompt_logits, ref.prompt_logits);
  EXPECT_EQ(objective_and_gradient(p, ref, groups, w, c).kl, 0.0);
}

TEST(GrpoStep, EmptyBatchIsGroupingError) {
  const World w = small_world();
  ToyPolicy p = make_initial_policy(w);
  EXPECT_THROW(grpo_step(p, p, std::vector<TrainGroup>{}, w, TierConfig{}), GroupingError);
}

TEST(GrpoStep, NonFiniteObjectiveNamesTheGroup) {
  const World w = small_world();
  ToyPolicy p = make_initial_policy(w);
  TrainGroup g = ratio_group(w, p, Tier::kMedium, 1.0, 1.0, TierConfig{});
  g.prompt_id = 0;
  g.advantages = {std::numeric_limits<double>::infinity()};
  try {
    grpo_step(p, p, std::vector<TrainGroup>{g}, w, TierConfig{});
    ADD_FAILURE() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.prompt_id(), 0);
  }
}

TEST(BuildGroups, FullyOnPolicyHasNoReplay) {
  const World w = small_world();
  const ToyPolicy p = make_initial_policy(w);
  ReplayBuffer buf(8, 4096, w.prompts.size());
  TierConfig c;
  c.sigma = 1.0;
  const std::vector<BatchItem> batch{{0, 0.1}, {1, 0.5}, {2, 0.9}};
  build_groups(batch, buf, p, w, c, 1, 0);
  const auto groups = build_groups(batch, buf, p, w, c, 1, 1);
  for (const TrainGroup& g : groups) EXPECT_EQ(g.n_replay, 0u);
}

TEST(BuildGroups, TierSizesAndEasyBudget) {
  const World w = small_world();
  const ToyPolicy p = make_initial_policy(w);
  ReplayBuffer buf(8, 4096, w.prompts.size());
  TierConfig c;
  c.t_budget_easy = 2;
  const std::vector<BatchItem> batch{{0, 0.1}, {1, 0.5}, {2, 0.9}};
  const auto groups = build_groups(batch, buf, p, w, c, 1, 0);
  ASSERT_EQ(groups.size(), 3u);
  EXPECT_EQ(groups[0].tier, Tier::kEasy);
  EXPECT_EQ(groups[0].rollouts.size(), 4u);
  for (const Rollout& r : groups[0].rollouts) EXPECT_LE(r.length, 2u);
  EXPECT_EQ(groups[0].eps_plus, c.eps_plus_easy);
  EXPECT_EQ(groups[1].rollouts.size(), 8u);
  EXPECT_EQ(groups[2].rollouts.size(), 16u);
  for (const TrainGroup& g : groups) {
    EXPECT_EQ(g.shaped_rewards.size(), g.rollouts.size());
    EXPECT_EQ(g.advantages.size(), g.rollouts.size());
  }
}

TEST(BuildGroups, HardPromptWithoutSuccessUsesStandardRollouts) {
  const World w = small_world();
  const ToyPolicy p = make_initial_policy(w);
  ReplayBuffer buf(8, 4096, w.prompts.size());
  const std::vector<BatchItem> batch{{4, 0.95}};
  const TrainGroup g = build_groups(batch, buf, p, w, TierConfig{}, 1, 0)[0];
  EXPECT_EQ(g.rollouts.size(), 16u);
  EXPECT_EQ(g.n_hinted, 0u);
  for (const Rollout& r : g.rollouts) EXPECT_FALSE(r.hinted);
}

TEST(BuildGroups, HardPromptWithBufferedSuccessAddsHintedRollouts) {
  const World w = small_world();
  const ToyPolicy p = make_initial_policy(w);
  ReplayBuffer buf(8, 4096, w.prompts.size());
  const PromptSpec& q = w.prompt(4);
  Rollout success;
  success.tokens = q.target;
  success.tokens.push_back(*w.layout.eos);
  success.length = success.tokens.size();
  success.reward = 1;
  success.behavior_logprobs.assign(success.length, -1.0);
  buf.push({4, success});
  const TrainGroup g = build_groups(std::vector<BatchItem>{{4, 0.95}}, buf, p, w, TierConfig{}, 1, 0)[0];
  EXPECT_EQ(g.rollouts.size(), 16u);
  EXPECT_EQ(g.n_hinted, 8u);
  std::size_t hinted = 0;
  for (const Rollout& r : g.rollouts) {
    if (!r.hinted) continue;
    ++hinted;
    const std::size_t f = forced_prefix_length(q);
    EXPECT_TRUE(std::equal(r.tokens.begin(), r.tokens.begin() + f, q.target.begin()));
  }
  EXPECT_EQ(hinted, 8u);
}

TEST(BuildGroups, ReplayTakesNewestEntriesAndFreshOnesArePushed) {
  const World w = small_world();
  const ToyPolicy p = make_initial_policy(w);
  ReplayBuffer buf(8, 4096, w.prompts.size());
  Stream rng = make_stream(6, StreamTag::kTest);
  for (std::int64_t s = 0; s < 6; ++s) {
    RolloutRequest req;
    req.step = s;
    buf.push({1, rollout(p, w.prompt(1), w.layout, rng, req)});
  }
  const TrainGroup g = build_groups(std::vector<BatchItem>{{1, 0.5}}, buf, p, w, TierConfig{}, 1, 10)[0];
  EXPECT_EQ(g.n_replay, 4u);
  std::vector<std::int64_t> replayed;
  for (const Rollout& r : g.rollouts)
    if (r.step != 10) replayed.push_back(r.step);
  std::sort(replayed.begin(), replayed.end());
  EXPECT_EQ(replayed, (std::vector<std::int64_t>{2, 3, 4, 5}));
  const auto stored = buf.entries(1);
  EXPECT_EQ(stored.size(), 8u);
  EXPECT_EQ(std::count_if(stored.begin(), stored.end(), [](const BufferEntry& e) { return e.rollout.step == 10; }), 4);
}

TEST(BuildGroups, ShortBufferIsToppedUpWithFreshRollouts) {
  const World w = small_world();
  const ToyPolicy p = make_initial_policy(w);
  ReplayBuffer buf(8, 4096, w.prompts.size());
  Stream rng = make_stream(7, StreamTag::kTest);
  buf.push({1, rollout(p, w.prompt(1), w.layout, rng)});
  const TrainGroup g = build_groups(std::vector<BatchItem>{{1, 0.5}}, buf, p, w, TierConfig{}, 1, 3)[0];
  EXPECT_EQ(g.rollouts.size(), 8u);
  EXPECT_EQ(g.n_replay, 1u);
}

TEST(BuildGroups, IndependentOfThreadCount) {
  const World w = small_world();
  const ToyPolicy p = make_initial_policy(w);
  std::vector<BatchItem> batch;
  for (PromptId id = 0; id < 12; ++id) batch.push_back({id, id / 12.0});
  auto run = [&](std::size_t threads) {
    set_thread_count(threads);
    ReplayBuffer buf(8, 4096, w.prompts.size());
    build_groups(batch, buf, p, w, TierConfig{}, 9, 0);
    const auto groups = build_groups(batch, buf, p, w, TierConfig{}, 9, 1);
    set_thread_count(0);
    return std::make_pair(groups, buf);
  };
  const auto [g1, b1] = run(1);
  const auto [g4, b4] = run(4);
  EXPECT_EQ(b1, b4);
  ASSERT_EQ(g1.size(), g4.size());
  for (std::size_t i = 0; i < g1.size(); ++i) {
    EXPECT_EQ(g1[i].rollouts, g4[i].rollouts);
    EXPECT_EQ(g1[i].advantages, g4[i].advantages);
  }
}

TEST(TierConfigValidation, RejectsInconsistentSettings) {
  auto key_of = [](TierConfig c) {
    try {
      validate(c, 6);
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string();
  };
  EXPECT_EQ(key_of(TierConfig{}), "");
  TierConfig c;
  c.d_easy = 0.9;
  EXPECT_EQ(key_of(c), "trainer.d_easy");
  c = {};
  c.lambda_hard = 1.0;
  EXPECT_EQ(key_of(c), "trainer.lambda_hard");
  c = {};
  c.g_easy = 1;
  EXPECT_EQ(key_of(c), "trainer.g_easy");
  c = {};
  c.g_hard = 4;
  EXPECT_EQ(key_of(c), "trainer.g_hard");
  c = {};
  c.eps_plus_easy = 0.1;
  EXPECT_EQ(key_of(c), "trainer.eps_plus_easy");
  c = {};
  c.t_budget_easy = 7;
  EXPECT_EQ(key_of(c), "trainer.t_budget_easy");
  c = {};
  c.sigma = 1.5;
  EXPECT_EQ(key_of(c), "trainer.sigma");
}
