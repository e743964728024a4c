#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "dare/buffer.hpp"
#include "dare/config.hpp"
#include "dare/error.hpp"
#include "dare/estimators.hpp"
#include "dare/metrics.hpp"
#include "dare/parallel.hpp"
#include "dare/rng.hpp"
#include "dare/sampler.hpp"
#include "dare/trainer.hpp"
#include "dare/world.hpp"

namespace dare {

/// Failure inside a run, tagged with the loop phase and step.
class RunError : public Error {
 public:
  RunError(std::string phase, std::int64_t step, std::string method, const std::string& what)
      : Error("run error [method " + method + ", phase " + phase + ", step " + std::to_string(step) + "]: " + what),
        phase_(std::move(phase)),
        step_(step),
        method_(std::move(method)) {}
  const std::string& phase() const noexcept { return phase_; }
  std::int64_t step() const noexcept { return step_; }
  const std::string& method() const noexcept { return method_; }

 private:
  std::string phase_;
  std::int64_t step_;
  std::string method_;
};

// --- formatting and hashing ---------------------------------------------------

/// Shortest round-trip decimal form.
inline std::string fmt(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return {buf, res.ptr};
}

inline std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 computation failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

class Csv {
 public:
  explicit Csv(std::initializer_list<std::string_view> header) { add_row(header); }

  template <typename... Ts>
  void row(const Ts&... cells) {
    bool first = true;
    ((text_ += (first ? "" : ","), text_ += cell(cells), first = false), ...);
    text_ += '\n';
  }

  const std::string& str() const { return text_; }

 private:
  void add_row(std::initializer_list<std::string_view> cells) {
    bool first = true;
    for (auto c : cells) {
      if (!first) text_ += ',';
      text_ += c;
      first = false;
    }
    text_ += '\n';
  }
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(std::string_view s) { return std::string(s); }
  static std::string cell(const char* s) { return s; }
  static std::string cell(double x) { return fmt(x); }
  static std::string cell(const std::optional<double>& x) { return x ? fmt(*x) : std::string{}; }
  template <typename T>
    requires std::is_integral_v<T>
  static std::string cell(T x) { return std::to_string(x); }

  std::string text_;
};

/// Files emitted by a run, written together with a hash manifest.
struct RunReport {
  ExperimentConfig config;
  nlohmann::json summary;
  std::map<std::string, std::string> manifest;  ///< file name -> sha256
  std::filesystem::path dir;
  std::map<std::string, std::string> files;     ///< file name -> contents
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes every file plus config.json, summary.json and manifest.json.
inline void emit(RunReport& report) {
  report.files["config.json"] = to_json(report.config).dump(2) + "\n";
  report.files["summary.json"] = report.summary.dump(2) + "\n";
  report.dir = report.config.run.output_dir;
  std::filesystem::create_directories(report.dir);
  nlohmann::json files = nlohmann::json::object();
  for (const auto& [name, text] : report.files) {
    write_text(report.dir / name, text);
    report.manifest[name] = sha256_hex(text);
    files[name] = report.manifest[name];
  }
  const nlohmann::json manifest{{"files", files}};
  write_text(report.dir / "manifest.json", manifest.dump(2) + "\n");
}

// --- method presets -----------------------------------------------------------

struct MethodSpec {
  std::string name;
  EstimateSource estimator = EstimateSource::kSnis;
  SamplerMode sampler = SamplerMode::kBeta;
  bool tiered = true;
};

/// "dare" follows the estimator/sampler/trainer sections, "grpo" is uniform
/// untiered GRPO, and an estimator name alone is difficulty filtering with
/// that estimator and no tiering.
inline MethodSpec method_spec(const std::string& name, const ExperimentConfig& c) {
  MethodSpec m;
  m.name = name;
  if (name == "dare") {
    m.estimator = *parse_source(c.estimator.method);
    m.sampler = *parse_sampler_mode(c.sampler.mode);
    m.tiered = c.trainer.tiered;
  } else if (name == "grpo") {
    m.estimator = EstimateSource::kRandom;
    m.sampler = SamplerMode::kUniform;
    m.tiered = false;
  } else if (const auto src = parse_source(name)) {
    m.estimator = *src;
    m.sampler = *src == EstimateSource::kEntropy ? SamplerMode::kEntropySoftmax : SamplerMode::kBeta;
    m.tiered = false;
  } else {
    throw ConfigError("run.methods", "unknown method '" + name + "'");
  }
  return m;
}

/// Seeded in-pool evaluation panel, sorted by id.
inline std::vector<PromptId> eval_panel(const World& world, std::size_t size, std::uint64_t seed) {
  std::vector<PromptId> ids(world.prompts.size());
  std::iota(ids.begin(), ids.end(), PromptId{0});
  Stream rng = make_stream(seed, StreamTag::kPanel);
  size = std::min(size, ids.size());
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform() * static_cast<double>(ids.size() - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(size);
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// Adds N(0, scale^2) to every shared logit.
inline void apply_drift(ToyPolicy& policy, double scale, std::uint64_t seed, std::uint64_t event) {
  Stream rng = make_stream(seed, StreamTag::kDrift, {event});
  for (double& z : policy.shared_logits) z += rng.normal(0.0, scale);
  ++policy.snapshot_id;
}

struct TrainRow {
  std::int64_t step = 0;
  PromptId prompt_id = 0;
  Tier tier = Tier::kMedium;
  double d_hat = 0.0;
  EstimateSource source = EstimateSource::kRandom;
  std::size_t g_q = 0;
  std::size_t n_replay = 0;
  std::size_t n_hinted = 0;
  double mean_reward = 0.0;
  double mean_shaped = 0.0;
  double mean_len = 0.0;
  double clip_frac = 0.0;
  double kl = 0.0;
};

/// Mutable state of one training trajectory.
class Trajectory {
 public:
  Trajectory(const ExperimentConfig& cfg, const World& world, MethodSpec spec)
      : cfg_(cfg),
        world_(world),
        spec_(std::move(spec)),
        policy_(make_initial_policy(world)),
        reference_policy_(policy_),
        buffer_(cfg.buffer.k_cap, cfg.buffer.capacity, world.prompts.size()),
        trainable_(world.prompts.size(), true) {
    for (PromptId id : eval_panel(world, cfg.run.eval_set_size, cfg.run.seed))
      trainable_[static_cast<std::size_t>(id)] = false;
    bayes_.config = cfg.estimator.bayes;
    reference_ = build_reference(world, policy_, world.reference_ids, cfg.estimator.reference_g, cfg.run.seed);
  }

  const ToyPolicy& policy() const { return policy_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  const MethodSpec& spec() const { return spec_; }
  const BayesState& bayes() const { return bayes_; }
  const std::vector<TrainRow>& log() const { return log_; }
  const std::vector<DifficultyEstimate>& last_estimates() const { return estimates_; }
  /// False for held-out evaluation prompts.
  const std::vector<bool>& trainable() const { return trainable_; }

  /// One estimate per prompt with the given estimator. `tau` overrides the
  /// ESS threshold for SNIS.
  std::vector<DifficultyEstimate> estimate_all(EstimateSource src, std::int64_t step,
                                               std::optional<double> tau = std::nullopt,
                                               const std::vector<bool>* mask = nullptr) const {
    std::vector<DifficultyEstimate> out(world_.prompts.size());
    SnisConfig snis = cfg_.estimator.snis;
    if (tau) snis.ess_threshold = *tau;
    parallel_for(out.size(), [&](std::size_t i) {
      if (mask && !(*mask)[i]) return;
      out[i] = estimate_one(src, world_.prompts[i], step, snis);
    });
    return out;
  }

  DifficultyEstimate estimate_one(EstimateSource src, const PromptSpec& p, std::int64_t step,
                                  const SnisConfig& snis) const {
    const auto id = static_cast<std::uint64_t>(p.id);
    const auto s = static_cast<std::uint64_t>(step);
    DifficultyEstimate e;
    e.source = src;
    switch (src) {
      case EstimateSource::kSnis:
        return estimate(p, buffer_, policy_, reference_, snis);
      case EstimateSource::kColdStart:
        e.value = cold_start(p.features, reference_);
        break;
      case EstimateSource::kBayes: {
        Stream rng = make_stream(cfg_.run.seed, StreamTag::kBayes, {s, id});
        e.value = bayes_estimate(bayes_, p.id, rng);
        break;
      }
      case EstimateSource::kPrevFr: {
        const auto entries = estimation_entries(buffer_, p.id);
        e.value = previous_fr(entries);
        e.k = entries.size();
        break;
      }
      case EstimateSource::kCurrentFr:
        e.value = current_fr(policy_, p, world_.layout, cfg_.estimator.current_fr_g, cfg_.run.seed, s);
        e.k = cfg_.estimator.current_fr_g;
        break;
      case EstimateSource::kEntropy: {
        Stream rng = make_stream(cfg_.run.seed, StreamTag::kEntropy, {s, id});
        const double h = entropy_score(policy_, p, cfg_.estimator.l_prefix, rng);
        e.value = std::clamp(h / std::log(static_cast<double>(world_.vocab())), 0.0, 1.0);
        break;
      }
      case EstimateSource::kRandom:
        e.value = random_estimate();
        break;
    }
    return e;
  }

  /// Exact current failure rates of every prompt.
  std::vector<double> truths() const {
    std::vector<double> t(world_.prompts.size());
    parallel_for(t.size(), [&](std::size_t i) { t[i] = true_difficulty(policy_, world_.prompts[i], world_.layout).value; });
    return t;
  }

  SamplingWeights weights(const std::vector<DifficultyEstimate>& est) const {
    std::vector<double> v;
    v.reserve(est.size());
    for (const auto& e : est) v.push_back(e.value);
    SamplingWeights w;
    switch (spec_.sampler) {
      case SamplerMode::kBeta:
        w = beta_weights(v, cfg_.sampler.kappa);
        break;
      case SamplerMode::kEntropySoftmax: {
        // Softmax over raw entropies (nats), undoing the [0, 1] scaling.
        const double ln_v = std::log(static_cast<double>(world_.vocab()));
        for (double& x : v) x *= ln_v;
        w = entropy_softmax_weights(v, cfg_.sampler.tau_ent);
        break;
      }
      case SamplerMode::kUniform:
        w = uniform_weights(v.size());
        break;
    }
    if (spec_.estimator == EstimateSource::kBayes) {
      std::vector<bool> tracked(est.size());
      for (std::size_t i = 0; i < est.size(); ++i) tracked[i] = bayes_.tracked(static_cast<PromptId>(i));
      reserve_exploration_mass(w, tracked, cfg_.estimator.bayes.explore);
    }
    for (std::size_t i = 0; i < w.weight.size(); ++i)
      if (!trainable_[i]) w.weight[i] = 0.0;
    return w;
  }

  /// Drift events scheduled for this step, applied before estimation.
  void drift(std::int64_t step) {
    const auto& events = cfg_.run.drift;
    for (std::size_t i = 0; i < events.size(); ++i)
      if (events[i].step == step) apply_drift(policy_, events[i].scale, cfg_.run.seed, i);
  }

  /// Phase 1 (estimate), phase 2 (sample) and phase 3 (group, update).
  void step(std::int64_t step) {
    std::string phase = "drift";
    try {
      drift(step);
      phase = "estimate";
      const std::size_t stride = cfg_.run.estimate_stride;
      if (estimates_.empty() || stride <= 1) {
        estimates_ = estimate_all(spec_.estimator, step);
      } else {
        std::vector<bool> mask(world_.prompts.size());
        for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = i % stride == static_cast<std::size_t>(step) % stride;
        const auto fresh = estimate_all(spec_.estimator, step, std::nullopt, &mask);
        for (std::size_t i = 0; i < mask.size(); ++i)
          if (mask[i]) estimates_[i] = fresh[i];
      }

      phase = "sample";
      SamplingWeights w = weights(estimates_);
      Stream rng = make_stream(cfg_.run.seed, StreamTag::kSampler, {static_cast<std::uint64_t>(step)});
      BatchSelection sel;
      try {
        sel = sample_batch(w, cfg_.sampler.batch_size, rng);
      } catch (const SelectionError&) {
        SamplingWeights u = uniform_weights(w.weight.size());
        for (std::size_t i = 0; i < u.weight.size(); ++i)
          if (!trainable_[i]) u.weight[i] = 0.0;
        sel = sample_batch(u, cfg_.sampler.batch_size, rng);
      }
      std::vector<PromptId> ids = sel.prompts;
      std::sort(ids.begin(), ids.end());
      std::vector<BatchItem> batch;
      for (PromptId id : ids) batch.push_back({id, estimates_[static_cast<std::size_t>(id)].value});

      phase = "group";
      TierConfig tc = cfg_.trainer;
      tc.tiered = spec_.tiered;
      const std::vector<TrainGroup> groups =
          build_groups(batch, buffer_, policy_, world_, tc, cfg_.run.seed, step);

      phase = "update";
      const StepStats stats = grpo_step(policy_, reference_policy_, groups, world_, tc);

      phase = "log";
      for (std::size_t b = 0; b < groups.size(); ++b) {
        const TrainGroup& g = groups[b];
        TrainRow row;
        row.step = step;
        row.prompt_id = g.prompt_id;
        row.tier = g.tier;
        row.d_hat = g.d_hat;
        row.source = estimates_[static_cast<std::size_t>(g.prompt_id)].source;
        row.g_q = g.rollouts.size();
        row.n_replay = g.n_replay;
        row.n_hinted = g.n_hinted;
        std::size_t successes = 0;
        std::size_t fresh = 0;
        for (std::size_t i = 0; i < g.rollouts.size(); ++i) {
          row.mean_reward += g.rollouts[i].reward;
          row.mean_shaped += g.shaped_rewards[i];
          row.mean_len += static_cast<double>(g.rollouts[i].length);
          if (g.rollouts[i].step == step && !g.rollouts[i].hinted) {
            successes += static_cast<std::size_t>(g.rollouts[i].reward);
            ++fresh;
          }
        }
        const double n = static_cast<double>(g.rollouts.size());
        row.mean_reward /= n;
        row.mean_shaped /= n;
        row.mean_len /= n;
        row.clip_frac = stats.group_clip_frac[b];
        row.kl = stats.group_kl[b];
        log_.push_back(row);
        bayes_ = bayes_update(std::move(bayes_), g.prompt_id, successes, fresh);
      }
    } catch (const RunError&) {
      throw;
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw RunError(phase, step, spec_.name, e.what());
    }
  }

  /// Greedy success rate over the panel.
  double greedy_accuracy(const std::vector<PromptId>& panel) const {
    std::vector<int> ok(panel.size());
    parallel_for(panel.size(), [&](std::size_t i) {
      ok[i] = greedy_rollout(policy_, world_.prompt(panel[i]), world_.layout).reward;
    });
    return static_cast<double>(std::accumulate(ok.begin(), ok.end(), 0)) / static_cast<double>(panel.size());
  }

  /// Sampled evaluation rollouts tagged with current true difficulty.
  std::vector<EvalRecord> eval_records(const std::vector<PromptId>& panel, std::int64_t step) const {
    const std::size_t n = cfg_.run.length_samples;
    std::vector<EvalRecord> recs(panel.size() * n);
    parallel_for(panel.size(), [&](std::size_t i) {
      const PromptSpec& p = world_.prompt(panel[i]);
      const double d = true_difficulty(policy_, p, world_.layout).value;
      for (std::size_t k = 0; k < n; ++k) {
        Stream rng = make_stream(cfg_.run.seed, StreamTag::kPanel,
                                 {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(p.id), k});
        const Rollout r = rollout(policy_, p, world_.layout, rng);
        recs[i * n + k] = {d, r.length, r.reward};
      }
    });
    return recs;
  }

 private:
  const ExperimentConfig& cfg_;
  const World& world_;
  MethodSpec spec_;
  ToyPolicy policy_;
  ToyPolicy reference_policy_;
  ReplayBuffer buffer_;
  std::vector<bool> trainable_;
  ReferenceSet reference_;
  BayesState bayes_;
  std::vector<DifficultyEstimate> estimates_;
  std::vector<TrainRow> log_;
};

inline bool is_eval_step(std::int64_t step, const RunConfig& r) {
  return step == 0 || step % static_cast<std::int64_t>(r.eval_every) == 0 ||
         step == static_cast<std::int64_t>(r.n_steps);
}

inline void append_train_rows(Csv& csv, const Trajectory& t) {
  for (const TrainRow& r : t.log())
    csv.row(r.step, r.prompt_id, to_string(r.tier), r.d_hat, to_string(r.source), r.g_q, r.n_replay, r.n_hinted,
            r.mean_reward, r.mean_shaped, r.mean_len, r.clip_frac, r.kl, t.spec().name);
}

inline Csv train_csv() {
  return Csv{"step", "prompt_id", "tier", "d_hat", "source", "g_q", "n_replay", "n_hinted",
             "mean_reward", "mean_shaped", "mean_len", "clip_frac", "kl", "method"};
}
inline Csv estimator_csv() {
  return Csv{"step", "prompt_id", "method", "estimate", "ess", "k", "true_difficulty", "abs_err"};
}
inline Csv tiers_csv() {
  return Csv{"method", "step", "bin", "lo", "hi", "mean_tokens", "accuracy", "count"};
}

inline void append_tier_rows(Csv& csv, const std::string& method, std::int64_t step,
                             const std::vector<EvalRecord>& recs, const TierConfig& tc) {
  if (recs.empty()) return;
  const std::vector<double> edges{0.0, tc.d_easy, tc.d_hard, 1.0};
  for (const TierTokenRow& row : tier_token_report(recs, edges))
    csv.row(method, step, row.bin, row.lo, row.hi, row.mean_tokens, row.accuracy, row.count);
}

inline void append_estimate_rows(Csv& csv, std::int64_t step, const std::string& method,
                                 const std::vector<DifficultyEstimate>& est, const std::vector<double>& truth) {
  for (std::size_t i = 0; i < est.size(); ++i)
    csv.row(step, i, method, est[i].value, est[i].ess, est[i].k, truth[i], std::abs(est[i].value - truth[i]));
}

inline nlohmann::json optional_json(const std::optional<double>& x) {
  return x ? nlohmann::json(*x) : nlohmann::json(nullptr);
}
inline nlohmann::json optional_json(const std::optional<std::int64_t>& x) {
  return x ? nlohmann::json(*x) : nlohmann::json(nullptr);
}

/// Mid-range target: halfway from the shared start accuracy to the lowest
/// peak accuracy among the compared methods.
inline double mid_range_target(const std::map<std::string, AccuracyCurve>& curves) {
  double acc0 = 0.0;
  double lowest_peak = 1.0;
  bool first = true;
  for (const auto& [name, c] : curves) {
    double peak = 0.0;
    for (const auto& p : c.points) peak = std::max(peak, p.accuracy);
    if (first) acc0 = c.points.front().accuracy;
    lowest_peak = std::min(lowest_peak, peak);
    first = false;
  }
  return acc0 + 0.5 * std::max(0.0, lowest_peak - acc0);
}

inline nlohmann::json efficiency_summary(const std::map<std::string, AccuracyCurve>& curves, const RunConfig& r) {
  using nlohmann::json;
  std::vector<double> targets = r.targets;
  const double tau_mid = mid_range_target(curves);
  targets.push_back(tau_mid);
  json methods = json::object();
  const auto base = curves.find(r.baseline);
  for (const auto& [name, c] : curves) {
    json m;
    double peak = 0.0;
    for (const auto& p : c.points) peak = std::max(peak, p.accuracy);
    m["final_accuracy"] = c.points.back().accuracy;
    m["max_accuracy"] = peak;
    m["auc"] = c.points.size() >= 2 && c.horizon > c.points.front().step ? json(auc(c)) : json(nullptr);
    json stt = json::array();
    json spd = json::array();
    for (double tau : targets) {
      stt.push_back({{"tau", tau}, {"step", optional_json(steps_to_target(c, tau))}});
      if (base != curves.end())
        spd.push_back({{"tau", tau}, {"speedup", optional_json(speedup(base->second, c, tau))}});
    }
    m["steps_to_target"] = stt;
    if (base != curves.end()) m["speedup"] = spd;
    methods[name] = m;
  }
  return {{"tau_mid", tau_mid}, {"targets", targets}, {"baseline", r.baseline}, {"methods", methods}};
}

// --- train ----------------------------------------------------------------------

/// The full loop for every configured method on one shared world and panel.
inline RunReport run_train(const ExperimentConfig& cfg) {
  validate(cfg);
  const World world = make_world(cfg.world);
  const std::vector<PromptId> panel = eval_panel(world, cfg.run.eval_set_size, cfg.run.seed);
  Csv curves{"step", "method", "accuracy"};
  Csv estimators = estimator_csv();
  Csv tiers = tiers_csv();
  Csv train = train_csv();
  std::map<std::string, AccuracyCurve> curve_map;
  std::optional<ReplayBuffer> first_buffer;

  for (const std::string& name : cfg.run.methods) {
    Trajectory traj(cfg, world, method_spec(name, cfg));
    AccuracyCurve curve;
    curve.horizon = static_cast<std::int64_t>(cfg.run.n_steps);
    auto evaluate = [&](std::int64_t step) {
      try {
        const double acc = traj.greedy_accuracy(panel);
        curve.points.push_back({step, acc});
        curves.row(step, name, acc);
        append_tier_rows(tiers, name, step, traj.eval_records(panel, step), cfg.trainer);
        const auto est = step == 0 ? traj.estimate_all(traj.spec().estimator, step) : traj.last_estimates();
        append_estimate_rows(estimators, step, name, est, traj.truths());
      } catch (const Error& e) {
        throw RunError("evaluate", step, name, e.what());
      }
    };
    evaluate(0);
    for (std::int64_t step = 1; step <= static_cast<std::int64_t>(cfg.run.n_steps); ++step) {
      traj.step(step);
      if (is_eval_step(step, cfg.run)) evaluate(step);
    }
    append_train_rows(train, traj);
    curve_map[name] = curve;
    if (!first_buffer) first_buffer = traj.buffer();
  }

  RunReport report;
  report.config = cfg;
  report.files["curves.csv"] = curves.str();
  report.files["estimators.csv"] = estimators.str();
  report.files["tiers.csv"] = tiers.str();
  report.files["train_log.csv"] = train.str();
  report.files["buffer_snapshot.json"] = first_buffer->to_json().dump() + "\n";
  report.summary = {{"command", "train"}, {"efficiency", efficiency_summary(curve_map, cfg.run)}};
  emit(report);
  return report;
}

// --- estimator benchmark -------------------------------------------------------

inline nlohmann::json report_json(const EstimatorReport& r) {
  using nlohmann::json;
  json bins = json::array();
  for (const CalibrationBin& b : r.calibration)
    bins.push_back({{"lo", b.lo},
                    {"hi", b.hi},
                    {"count", b.count},
                    {"mean_estimate", b.count ? json(b.mean_estimate) : json(nullptr)},
                    {"mean_truth", b.count ? json(b.mean_truth) : json(nullptr)},
                    {"ci_half_width", optional_json(b.ci_half_width)}});
  return {{"mae", r.mae}, {"mse", r.mse}, {"count", r.count}, {"calibration", bins}};
}

inline std::string sweep_name(double tau) { return "snis_tau" + fmt(tau); }

/// Trains one trajectory with the bench's training method and, at every
/// evaluation step, scores each benchmarked estimator on every prompt
/// against the exact difficulty. MAE pools all evaluation steps after 0.
inline RunReport run_estimator_bench(const ExperimentConfig& cfg) {
  validate(cfg);
  const BenchConfig& bench = cfg.run.bench;
  if (bench.methods.size() + bench.ess_sweep.size() < 2)
    throw ConfigError("run.bench.methods", "benchmark needs at least 2 estimators");
  const World world = make_world(cfg.world);
  const std::vector<PromptId> panel = eval_panel(world, cfg.run.eval_set_size, cfg.run.seed);
  Trajectory traj(cfg, world, method_spec(bench.train_method, cfg));

  struct Column {
    std::string name;
    EstimateSource source;
    std::optional<double> tau;
    std::vector<double> est;
    std::vector<double> truth;
    std::size_t snis_hits = 0;
  };
  std::vector<Column> cols;
  for (const auto& m : bench.methods) cols.push_back({m, *parse_source(m), std::nullopt, {}, {}, 0});
  for (double tau : bench.ess_sweep) cols.push_back({sweep_name(tau), EstimateSource::kSnis, tau, {}, {}, 0});

  Csv curves{"step", "method", "accuracy"};
  Csv estimators = estimator_csv();
  Csv tiers = tiers_csv();
  Csv train = train_csv();
  AccuracyCurve curve;
  curve.horizon = static_cast<std::int64_t>(cfg.run.n_steps);

  auto evaluate = [&](std::int64_t step) {
    try {
      const double acc = traj.greedy_accuracy(panel);
      curve.points.push_back({step, acc});
      curves.row(step, bench.train_method, acc);
      append_tier_rows(tiers, bench.train_method, step, traj.eval_records(panel, step), cfg.trainer);
      const std::vector<double> truth = traj.truths();
      for (Column& col : cols) {
        const auto est = traj.estimate_all(col.source, step, col.tau);
        append_estimate_rows(estimators, step, col.name, est, truth);
        if (step == 0) continue;
        for (std::size_t i = 0; i < est.size(); ++i) {
          col.est.push_back(est[i].value);
          col.truth.push_back(truth[i]);
          col.snis_hits += est[i].source == EstimateSource::kSnis;
        }
      }
    } catch (const Error& e) {
      throw RunError("evaluate", step, bench.train_method, e.what());
    }
  };
  evaluate(0);
  for (std::int64_t step = 1; step <= static_cast<std::int64_t>(cfg.run.n_steps); ++step) {
    traj.step(step);
    if (is_eval_step(step, cfg.run)) evaluate(step);
  }
  append_train_rows(train, traj);

  nlohmann::json reports = nlohmann::json::object();
  for (const Column& col : cols) {
    if (col.est.empty()) continue;
    nlohmann::json j = report_json(estimator_report(col.est, col.truth, col.name));
    if (col.source == EstimateSource::kSnis)
      j["coverage"] = static_cast<double>(col.snis_hits) / static_cast<double>(col.est.size());
    if (col.tau) j["tau"] = *col.tau;
    reports[col.name] = j;
  }

  RunReport report;
  report.config = cfg;
  report.files["curves.csv"] = curves.str();
  report.files["estimators.csv"] = estimators.str();
  report.files["tiers.csv"] = tiers.str();
  report.files["train_log.csv"] = train.str();
  report.files["buffer_snapshot.json"] = traj.buffer().to_json().dump() + "\n";
  report.summary = {{"command", "bench-estimators"}, {"train_method", bench.train_method}, {"estimators", reports}};
  emit(report);
  return report;
}

// --- bound check ----------------------------------------------------------------

struct BoundPromptResult {
  PromptId prompt_id = 0;
  double truth = 0.0;
  double b_mean = 0.0;  ///< exact behavior mean of the clipped weight
  double b_min = 0.0;
  double bias = 0.0;
  double epsilon = 0.0;
  std::optional<double> radius;
  std::size_t violations = 0;
  std::size_t replications = 0;
  double mean_abs_err = 0.0;
  std::optional<double> rate;
};

/// Exact outcome-level quantities for a (current, behavior) pair.
struct OutcomeMoments {
  double truth = 0.0;   ///< failure probability under the current policy
  double b_mean = 0.0;  ///< E_beh[clip(rho)]
  double bias = 0.0;    ///< E_beh[(rho - e^c)_+ + (e^-c - rho)_+]
};

inline OutcomeMoments outcome_moments(const ToyPolicy& current, const ToyPolicy& behavior, const PromptSpec& p,
                                      const VocabLayout& layout, double c) {
  OutcomeMoments m;
  const double hi = std::exp(c);
  const double lo = std::exp(-c);
  const bool ok = enumerate_outcomes(behavior, p, layout, [&](std::span<const TokenId> tokens, double lb) {
    const double lc = sequence_logprob(current, p.id, tokens);
    const double pb = std::exp(lb);
    const double rho = std::exp(lc - lb);
    const double fail = answer_matches(tokens, p, layout) ? 0.0 : 1.0;
    m.truth += std::exp(lc) * fail;
    m.b_mean += pb * std::clamp(rho, lo, hi);
    m.bias += pb * (std::max(0.0, rho - hi) + std::max(0.0, lo - rho));
  });
  if (!ok) throw ConfigError("world", "bound check needs an enumerable world");
  return m;
}

/// Frozen current and drifted behavior policies; R independent K-rollout
/// behavior buffers per prompt; counts |snis - truth| > radius.
inline RunReport run_bound_check(const ExperimentConfig& cfg) {
  validate(cfg);
  const BoundConfig& bc = cfg.run.bound;
  const World world = make_world(cfg.world);
  const ToyPolicy current = make_initial_policy(world);
  ToyPolicy behavior = current;
  apply_drift(behavior, bc.drift_scale, cfg.run.seed, 0xb0);
  const double c = cfg.estimator.snis.clip;
  const double delta = cfg.estimator.snis.delta;
  const double threshold = delta + 3.0 * std::sqrt(delta * (1.0 - delta) / static_cast<double>(bc.replications));

  std::vector<BoundPromptResult> results;
  for (std::size_t q = 0; q < bc.prompts; ++q) {
    const PromptSpec& p = world.prompts[q];
    BoundPromptResult res;
    res.prompt_id = p.id;
    res.replications = bc.replications;
    const OutcomeMoments m = outcome_moments(current, behavior, p, world.layout, c);
    res.truth = m.truth;
    res.b_mean = m.b_mean;
    res.bias = m.bias;
    res.b_min = bc.b_min.value_or(std::min(1.0, m.b_mean));
    SnisConfig sc = cfg.estimator.snis;
    sc.b_min = res.b_min;
    res.epsilon = bound_epsilon(c, delta, bc.k);
    try {
      res.radius = bound_radius(sc, bc.k, m.bias).radius;
    } catch (const BoundInapplicableError&) {
      res.radius.reset();
    }
    if (res.radius) {
      std::vector<double> err(bc.replications);
      parallel_for(bc.replications, [&](std::size_t r) {
        Stream rng = make_stream(cfg.run.seed, StreamTag::kBound, {static_cast<std::uint64_t>(p.id), r});
        std::vector<BufferEntry> entries;
        entries.reserve(bc.k);
        std::vector<int> rewards;
        rewards.reserve(bc.k);
        for (std::size_t k = 0; k < bc.k; ++k) {
          entries.push_back({p.id, rollout(behavior, p, world.layout, rng)});
          rewards.push_back(entries.back().rollout.reward);
        }
        const auto w = snis_weights(entries, current, p, c);
        err[r] = std::abs(snis_difficulty(w, rewards) - m.truth);
      });
      for (double e : err) {
        res.violations += e > *res.radius;
        res.mean_abs_err += e / static_cast<double>(err.size());
      }
      res.rate = static_cast<double>(res.violations) / static_cast<double>(bc.replications);
    }
    results.push_back(res);
  }

  Csv csv{"prompt_id", "true_difficulty", "b_mean", "b_min", "clip_bias", "epsilon", "radius", "violations",
          "replications", "violation_rate", "mean_abs_err"};
  nlohmann::json prompts = nlohmann::json::array();
  std::optional<double> worst;
  bool applicable = true;
  for (const auto& r : results) {
    csv.row(r.prompt_id, r.truth, r.b_mean, r.b_min, r.bias, r.epsilon, r.radius, r.violations, r.replications,
            r.rate, r.mean_abs_err);
    prompts.push_back({{"prompt_id", r.prompt_id},
                       {"true_difficulty", r.truth},
                       {"b_mean", r.b_mean},
                       {"b_min", r.b_min},
                       {"clip_bias", r.bias},
                       {"epsilon", r.epsilon},
                       {"radius", optional_json(r.radius)},
                       {"violation_rate", optional_json(r.rate)},
                       {"applicable", r.radius.has_value()}});
    if (r.rate) worst = std::max(worst.value_or(0.0), *r.rate);
    applicable = applicable && r.radius.has_value();
  }
  RunReport report;
  report.config = cfg;
  report.files["bound.csv"] = csv.str();
  report.summary = {{"command", "bound-check"},
                    {"delta", delta},
                    {"clip", c},
                    {"k", bc.k},
                    {"replications", bc.replications},
                    {"threshold", threshold},
                    {"applicable", applicable},
                    {"max_violation_rate", optional_json(worst)},
                    {"within_threshold", worst ? nlohmann::json(*worst <= threshold) : nlohmann::json(nullptr)},
                    {"prompts", prompts}};
  emit(report);
  return report;
}

// --- report ---------------------------------------------------------------------

/// Verifies the manifest of a finished run and returns its summary.
inline nlohmann::json load_report(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw DataError("no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_text(manifest_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw IntegrityError(e.byte, "manifest.json: " + std::string(e.what()));
  }
  for (const auto& [name, hash] : manifest.at("files").items()) {
    const std::string actual = sha256_hex(read_text(dir / name));
    if (actual != hash.get<std::string>()) throw IntegrityError(IntegrityError::npos, "hash mismatch for " + name);
  }
  try {
    return nlohmann::json::parse(read_text(dir / "summary.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw IntegrityError(e.byte, "summary.json: " + std::string(e.what()));
  }
}

}  // namespace dare
