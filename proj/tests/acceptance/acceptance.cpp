// Acceptance runner: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "../support/gradcheck.hpp"
#include "dare/harness.hpp"

using namespace dare;
namespace fs = std::filesystem;

namespace {

constexpr int kSeeds = 5;
constexpr double kSigmas = 3.0;
constexpr std::size_t kFrReps = 1000;
constexpr double kSnisOnPolicyTol = 1e-12;
constexpr double kBoundThreshold = 0.0707;
constexpr std::size_t kSamplerTrials = 100000;
constexpr std::size_t kHardGroups = 10000;
constexpr double kGradTol = 1e-4;
constexpr double kMinSpeedup = 1.2;
constexpr double kAccuracyMatch = 0.02;
constexpr double kLengthPenalty = 1e-4;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string f4(double x) {
  char b[32];
  std::snprintf(b, sizeof b, "%.4f", x);
  return b;
}

fs::path out_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "dare_acceptance" / name;
  fs::remove_all(p);
  return p;
}

ExperimentConfig preset(const std::string& file, int seed, const std::string& out) {
  ExperimentConfig c = load_config(fs::path(DARE_LAB_CONFIGS) / file);
  c.run.seed = static_cast<std::uint64_t>(seed);
  c.world.seed = static_cast<std::uint64_t>(seed);
  c.run.output_dir = out_dir(out).string();
  return c;
}

// --- AC1 ----------------------------------------------------------------------

Verdict exact_oracle() {
  WorldConfig wc;
  wc.n_prompts = 24;
  wc.n_reference = 4;
  wc.seed = 11;
  if (std::pow(static_cast<double>(wc.vocab), static_cast<double>(wc.t_max)) > 1e5) return {false, "world too large"};
  const World w = make_world(wc);
  const ToyPolicy p = make_initial_policy(w);
  const std::size_t g = 8;
  std::size_t outside = 0;
  double worst_z = 0.0;
  double worst_snis = 0.0;
  for (const PromptSpec& q : w.prompts) {
    const double d = true_difficulty(p, q, w.layout).value;
    double mean = 0.0;
    for (std::size_t r = 0; r < kFrReps; ++r) mean += current_fr(p, q, w.layout, g, 77, r);
    mean /= static_cast<double>(kFrReps);
    const double sigma = std::sqrt(d * (1.0 - d) / static_cast<double>(kFrReps * g));
    const double gap = std::abs(mean - d);
    if (sigma > 0.0) worst_z = std::max(worst_z, gap / sigma);
    if (sigma == 0.0 ? gap != 0.0 : gap > kSigmas * sigma) ++outside;

    std::vector<BufferEntry> entries;
    std::vector<int> rewards;
    for (std::uint64_t k = 0; k < 32; ++k) {
      Stream rng = make_stream(78, StreamTag::kTest, {static_cast<std::uint64_t>(q.id), k});
      entries.push_back({q.id, rollout(p, q, w.layout, rng)});
      rewards.push_back(entries.back().rollout.reward);
    }
    const double fails = std::accumulate(rewards.begin(), rewards.end(), 0.0, [](double a, int r) { return a + (1 - r); });
    const double snis = snis_difficulty(snis_weights(entries, p, q, 4.0), rewards);
    worst_snis = std::max(worst_snis, std::abs(snis - fails / static_cast<double>(rewards.size())));
  }
  return {outside == 0 && worst_snis <= kSnisOnPolicyTol,
          "prompts outside 3 sigma " + std::to_string(outside) + "/" + std::to_string(w.prompts.size()) +
              ", max |z| " + f4(worst_z) + ", max snis gap " + std::to_string(worst_snis)};
}

// --- AC2 ----------------------------------------------------------------------

Verdict bound_validation() {
  const ExperimentConfig c = preset("bound_check.json", 1, "bound");
  const bool pinned = c.run.bound.replications == 1000 && c.run.bound.k == 512 && c.estimator.snis.delta == 0.05 &&
                      std::abs(c.estimator.snis.clip - std::log(2.0)) < 1e-15 && !c.run.bound.b_min;
  const RunReport r = run_bound_check(c);
  const auto& s = r.summary;
  if (!s.at("applicable").get<bool>()) return {false, "bound inapplicable for the configured (c, K, delta)"};
  const double rate = s.at("max_violation_rate").get<double>();
  return {pinned && rate <= kBoundThreshold,
          "max violation rate " + f4(rate) + " vs threshold " + f4(kBoundThreshold) + " over " +
              std::to_string(s.at("prompts").size()) + " prompts" + (pinned ? "" : " (config not pinned)")};
}

// --- AC3 / AC4 ------------------------------------------------------------------

struct BenchSeeds {
  std::map<std::string, std::vector<double>> mae;
  std::map<std::string, std::vector<double>> coverage;
  std::size_t prompts = 0;
};

BenchSeeds drift_bench() {
  BenchSeeds b;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    const ExperimentConfig c = preset("drift_world.json", seed, "drift" + std::to_string(seed));
    b.prompts = c.world.n_prompts;
    const RunReport r = run_estimator_bench(c);
    for (const auto& [name, j] : r.summary.at("estimators").items()) {
      b.mae[name].push_back(j.at("mae").get<double>());
      if (j.contains("coverage")) b.coverage[name].push_back(j.at("coverage").get<double>());
    }
  }
  return b;
}

Verdict estimator_ordering(const BenchSeeds& b) {
  const double snis = median(b.mae.at("snis"));
  const double prev = median(b.mae.at("prev_fr"));
  const double rnd = median(b.mae.at("random"));
  return {b.prompts >= 200 && snis < prev && snis < rnd,
          "median MAE snis " + f4(snis) + ", prev_fr " + f4(prev) + ", random " + f4(rnd) + " (" +
              std::to_string(b.prompts) + " prompts)"};
}

Verdict ess_sweep(const BenchSeeds& b) {
  std::vector<double> mae, cov;
  bool monotone = true;
  for (int tau = 1; tau <= 5; ++tau) {
    const std::string name = "snis_tau" + std::to_string(tau);
    mae.push_back(median(b.mae.at(name)));
    cov.push_back(median(b.coverage.at(name)));
  }
  for (int seed = 0; seed < kSeeds; ++seed)
    for (int tau = 2; tau <= 5; ++tau) {
      const auto& hi = b.coverage.at("snis_tau" + std::to_string(tau));
      const auto& lo = b.coverage.at("snis_tau" + std::to_string(tau - 1));
      monotone = monotone && hi[static_cast<std::size_t>(seed)] <= lo[static_cast<std::size_t>(seed)];
    }
  const double best_interior = std::min({mae[1], mae[2], mae[3]});
  const bool interior = best_interior <= mae[0] && best_interior <= mae[4];
  std::string detail = "median MAE by tau 1..5:";
  for (double m : mae) detail += " " + f4(m);
  detail += "; coverage:";
  for (double c : cov) detail += " " + f4(c);
  detail += monotone ? "; coverage monotone" : "; coverage NOT monotone";
  detail += interior ? "; interior optimum holds" : "; interior optimum fails";
  return {monotone && interior, detail};
}

// --- AC5 ----------------------------------------------------------------------

Verdict sampler_statistics() {
  bool exact = true;
  Stream gen = make_stream(5, StreamTag::kTest);
  for (double kappa : {0.5, 2.0, 100.0})
    for (int i = 0; i < 1000; ++i) {
      const double y = 0.5 + 0.5 * gen.uniform();
      exact = exact && beta_weight(y, kappa) == beta_weight(1.0 - y, kappa);
    }
  for (double d : {0.0, 1e-9, 0.3, 0.5, 1.0}) exact = exact && beta_weight(d, 0.0) == 1.0;

  const std::vector<double> d{0.1, 0.35, 0.5, 0.7, 0.95};
  const SamplingWeights w = beta_weights(d, 4.0);
  const double total = std::accumulate(w.weight.begin(), w.weight.end(), 0.0);
  std::vector<double> count(d.size(), 0.0);
  for (std::uint64_t t = 0; t < kSamplerTrials; ++t) {
    Stream rng = make_stream(6, StreamTag::kTest, {t});
    count[static_cast<std::size_t>(sample_batch(w, 3, rng).prompts[0])] += 1.0;
  }
  double worst = 0.0;
  bool within = true;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double p = w.weight[i] / total;
    const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(kSamplerTrials));
    const double z = std::abs(count[i] / static_cast<double>(kSamplerTrials) - p) / sigma;
    worst = std::max(worst, z);
    within = within && z <= kSigmas;
  }
  return {exact && within, std::string(exact ? "symmetry and kappa=0 exact" : "exactness violated") +
                               ", max first-draw |z| " + f4(worst) + " over " + std::to_string(kSamplerTrials) +
                               " trials"};
}

// --- AC6 ----------------------------------------------------------------------

Verdict shaping_arithmetic() {
  const TierConfig c;
  std::vector<std::string> failed;
  auto check = [&](bool ok, const char* what) {
    if (!ok) failed.push_back(what);
  };
  check(assign_tier(0.2, c) == Tier::kEasy, "tier 0.2");
  check(assign_tier(0.3, c) == Tier::kMedium, "tier 0.3");
  check(assign_tier(0.85, c) == Tier::kHard, "tier 0.85");
  check(tier_budget(Tier::kEasy, c, 6).g == 4, "G_easy");
  check(tier_budget(Tier::kHard, c, 6).g == 16, "G_hard");
  const TierBudget med = tier_budget(Tier::kMedium, c, 6);
  check(med.g == 8 && med.eps_minus == med.eps_plus, "medium budget");
  check(shape_reward(Tier::kEasy, 0.15, 1, 1, 6, c) == 1.0 - 1e-4 * 0.5 * (1.0 / 6.0), "easy penalty");
  check(shape_reward(Tier::kHard, 0.9, 0, 6, 6, c) == 1e-4 * ((0.9 - 0.8) / (1.0 - 0.8)) * 1.0, "hard bonus");
  check(std::abs(shape_reward(Tier::kHard, 0.9, 0, 6, 6, c) - 5.0e-5) < 1e-18, "hard bonus value");
  check(shape_reward(Tier::kMedium, 0.5, 1, 3, 6, c) == 1.0 && shape_reward(Tier::kMedium, 0.5, 0, 3, 6, c) == 0.0,
        "medium passthrough");
  check(group_advantages(std::vector<double>{1, 1, 0, 0}) == std::vector<double>{1, 1, -1, -1}, "adv [1,1,0,0]");
  check(group_advantages(std::vector<double>{0.4, 0.4}) == std::vector<double>{0, 0}, "adv equal");
  const auto a = group_advantages(std::vector<double>{1, 0, 0, 0});
  check(a[0] == 0.75 / std::sqrt(0.1875) && a[1] == -0.25 / std::sqrt(0.1875), "adv [1,0,0,0]");

  Stream rng = make_stream(7, StreamTag::kTest);
  std::size_t violations = 0;
  for (std::size_t trial = 0; trial < kHardGroups; ++trial) {
    TierConfig tc;
    tc.lambda_hard = rng.uniform() * 0.999999;
    TrainGroup g;
    g.tier = Tier::kHard;
    g.d_hat = tc.d_hard + (1.0 - tc.d_hard) * rng.uniform();
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform() * 15);
    for (std::size_t i = 0; i < n; ++i) {
      Rollout r;
      r.length = 1 + static_cast<std::size_t>(rng.uniform() * 12);
      r.reward = rng.uniform() < 0.5;
      g.rollouts.push_back(r);
    }
    finalize_group(g, tc);
    double lo = 2.0, hi = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (g.rollouts[i].reward) lo = std::min(lo, g.shaped_rewards[i]);
      else hi = std::max(hi, g.shaped_rewards[i]);
    }
    violations += lo <= hi;
  }
  std::string detail = std::to_string(13 - failed.size()) + "/13 examples exact, hard-tier ordering violations " +
                       std::to_string(violations) + "/" + std::to_string(kHardGroups);
  for (const auto& f : failed) detail += "; failed: " + f;
  return {failed.empty() && violations == 0, detail};
}

// --- AC7 ----------------------------------------------------------------------

Verdict gradient_check() {
  double worst = 0.0;
  std::size_t instances = 0;
  double clipped = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed)
    for (double beta : {0.0, 0.25})
      for (double eps_plus : {0.2, 0.6}) {
        gradcheck::GradInstance inst = gradcheck::make_grad_instance(seed, beta, 0.2, eps_plus);
        const gradcheck::GradCheck r = gradcheck::check_gradient(inst);
        worst = std::max(worst, r.max_rel_error);
        clipped += r.clip_frac;
        ++instances;
      }
  return {worst <= kGradTol && clipped > 0.0,
          "max relative error " + std::to_string(worst) + " over " + std::to_string(instances) +
              " instances (KL on/off, symmetric/asymmetric clip)"};
}

// --- AC8 ----------------------------------------------------------------------

Verdict end_to_end() {
  std::vector<double> speedups, auc_gap;
  std::size_t prompts = 0, steps = 0, families = 0;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    const ExperimentConfig c = preset("toy_suite.json", seed, "toy" + std::to_string(seed));
    prompts = c.world.n_prompts;
    steps = c.run.n_steps;
    families = c.world.family_weights.size();
    const RunReport r = run_train(c);
    const auto& m = r.summary.at("efficiency").at("methods");
    const auto& mid = m.at("dare").at("speedup").back();
    speedups.push_back(mid.at("speedup").is_null() ? 0.0 : mid.at("speedup").get<double>());
    auc_gap.push_back(m.at("dare").at("auc").get<double>() - m.at("grpo").at("auc").get<double>());
  }
  const double s = median(speedups);
  const double a = median(auc_gap);
  const bool suite = prompts >= 64 && families == 3 && steps == 200;
  return {suite && s >= kMinSpeedup && a > 0.0,
          "median mid-range speedup " + f4(s) + ", median AUC(dare) - AUC(grpo) " + f4(a)};
}

// --- AC9 ----------------------------------------------------------------------

struct LengthOutcome {
  double length = 0.0;
  double accuracy = 0.0;
};

// Exact expected length and success rate at the final policy, averaged over
// trainable prompts that start in the easy tier.
LengthOutcome length_run(ExperimentConfig c, double lambda) {
  c.trainer.lambda_easy = lambda;
  const World w = make_world(c.world);
  Trajectory t(c, w, method_spec("dare", c));
  const ToyPolicy start = make_initial_policy(w);
  std::vector<PromptId> easy;
  for (const PromptSpec& q : w.prompts)
    if (t.trainable()[static_cast<std::size_t>(q.id)] && true_difficulty(start, q, w.layout).value < c.trainer.d_easy)
      easy.push_back(q.id);
  for (std::int64_t s = 1; s <= static_cast<std::int64_t>(c.run.n_steps); ++s) t.step(s);
  LengthOutcome o;
  for (PromptId id : easy) {
    o.length += expected_length(t.policy(), w.prompt(id), w.layout);
    o.accuracy += 1.0 - true_difficulty(t.policy(), w.prompt(id), w.layout).value;
  }
  o.length /= static_cast<double>(easy.size());
  o.accuracy /= static_cast<double>(easy.size());
  return o;
}

Verdict length_adaptation() {
  std::vector<double> dlen, dacc;
  bool eos = true;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    const ExperimentConfig c = preset("length_world.json", seed, "length" + std::to_string(seed));
    eos = eos && c.world.eos_enabled;
    const LengthOutcome pen = length_run(c, kLengthPenalty);
    const LengthOutcome ctl = length_run(c, 0.0);
    dlen.push_back(pen.length - ctl.length);
    dacc.push_back(std::abs(pen.accuracy - ctl.accuracy));
  }
  const double l = median(dlen);
  const double a = median(dacc);
  return {eos && l < 0.0 && a <= kAccuracyMatch,
          "median easy-tier length change " + f4(l) + " tokens, median |accuracy gap| " + f4(a)};
}

// --- AC10 ---------------------------------------------------------------------

Verdict determinism() {
  std::size_t compared = 0;
  std::vector<std::string> diffs;
  auto csvs = [](const RunReport& r) {
    std::map<std::string, std::string> out;
    for (const auto& [name, text] : r.files)
      if (name.ends_with(".csv")) out[name] = text;
    return out;
  };
  for (const char* file : {"toy_suite.json", "drift_world.json", "bound_check.json"}) {
    std::map<std::string, std::string> first;
    for (std::size_t threads : {1u, 4u}) {
      set_thread_count(threads);
      ExperimentConfig c = preset(file, 2, std::string("det_") + file + std::to_string(threads));
      if (std::string(file) == "bound_check.json") c.run.bound.replications = 200;
      const RunReport r = std::string(file) == "drift_world.json" ? run_estimator_bench(c)
                          : std::string(file) == "bound_check.json" ? run_bound_check(c)
                                                                    : run_train(c);
      set_thread_count(0);
      const auto files = csvs(r);
      if (first.empty()) {
        first = files;
        continue;
      }
      for (const auto& [name, text] : files) {
        ++compared;
        if (first.at(name) != text) diffs.push_back(std::string(file) + ":" + name);
      }
    }
  }
  std::string detail = std::to_string(compared) + " CSV files compared at 1 vs 4 threads";
  for (const auto& d : diffs) detail += "; differs: " + d;
  return {diffs.empty() && compared > 0, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> only(argv + 1, argv + argc);
  int failures = 0;
  int ran = 0;
  auto report = [&](const char* id, const char* title, const std::function<Verdict()>& fn) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) return;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %s  %s: %s [%.1fs]\n", id, v.pass ? "PASS" : "FAIL", title, v.detail.c_str(), secs);
    std::fflush(stdout);
    failures += v.pass ? 0 : 1;
  };
  std::optional<BenchSeeds> bench;
  auto shared_bench = [&]() -> const BenchSeeds& {
    if (!bench) bench = drift_bench();
    return *bench;
  };
  report("AC1", "exact oracle agreement", exact_oracle);
  report("AC2", "finite-sample bound", bound_validation);
  report("AC3", "estimator ordering under drift", [&] { return estimator_ordering(shared_bench()); });
  report("AC4", "ESS gate sweep", [&] { return ess_sweep(shared_bench()); });
  report("AC5", "sampler statistics", sampler_statistics);
  report("AC6", "shaping and advantages", shaping_arithmetic);
  report("AC7", "objective gradient", gradient_check);
  report("AC8", "end-to-end speedup", end_to_end);
  report("AC9", "length adaptation", length_adaptation);
  report("AC10", "determinism", determinism);
  if (ran == 0) {
    std::fprintf(stderr, "no criterion matched\n");
    return 1;
  }
  std::printf("%d of %d criteria failed\n", failures, ran);
  return failures;
}
