#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dare/error.hpp"
#include "dare/estimators.hpp"
#include "dare/sampler.hpp"
#include "dare/trainer.hpp"
#include "dare/world.hpp"

namespace dare {

struct BufferConfig {
  std::size_t k_cap = 8;
  std::size_t capacity = 4096;

  bool operator==(const BufferConfig&) const = default;
};

struct EstimatorConfig {
  std::string method = "snis";
  SnisConfig snis;
  BayesConfig bayes;
  std::size_t l_prefix = 64;
  std::size_t reference_g = 8;
  std::size_t current_fr_g = 8;

  bool operator==(const EstimatorConfig&) const = default;
};

struct SamplerConfig {
  std::string mode = "beta";
  double kappa = 100.0;
  std::size_t batch_size = 16;
  double tau_ent = 1.0;

  bool operator==(const SamplerConfig&) const = default;
};

/// Adds N(0, scale^2) noise to every shared logit before the given step.
struct DriftEvent {
  std::int64_t step = 0;
  double scale = 0.0;

  bool operator==(const DriftEvent&) const = default;
};

struct BenchConfig {
  std::string train_method = "dare";
  std::vector<std::string> methods{"snis", "prev_fr", "random"};
  std::vector<double> ess_sweep;  ///< extra snis_tau<t> columns

  bool operator==(const BenchConfig&) const = default;
};

struct BoundConfig {
  std::size_t replications = 1000;
  std::size_t k = 512;
  std::size_t prompts = 4;
  double drift_scale = 0.3;
  /// Lower bound on the mean clipped weight; absent means the exact
  /// behavior-policy mean of the clipped weight is used.
  std::optional<double> b_min;

  bool operator==(const BoundConfig&) const = default;
};

struct RunConfig {
  std::size_t n_steps = 200;
  std::size_t eval_every = 10;
  std::size_t eval_set_size = 32;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  std::vector<std::string> methods{"dare", "grpo"};
  std::string baseline = "grpo";
  std::vector<double> targets;
  std::size_t estimate_stride = 1;
  std::size_t length_samples = 8;
  std::vector<DriftEvent> drift;
  BenchConfig bench;
  BoundConfig bound;

  bool operator==(const RunConfig&) const = default;
};

struct ExperimentConfig {
  WorldConfig world;
  BufferConfig buffer;
  EstimatorConfig estimator;
  SamplerConfig sampler;
  TierConfig trainer;
  RunConfig run;

  bool operator==(const ExperimentConfig&) const = default;
};

/// Estimator names accepted as methods and bench columns.
inline const std::vector<std::string>& estimator_names() {
  static const std::vector<std::string> names{"snis", "coldstart", "bayes", "prev_fr", "current_fr", "entropy",
                                              "random"};
  return names;
}

inline bool is_estimator_name(const std::string& s) {
  for (const auto& n : estimator_names())
    if (n == s) return true;
  return false;
}

inline bool is_method_name(const std::string& s) { return s == "dare" || s == "grpo" || is_estimator_name(s); }

/// Throws ConfigError on the first invalid key; returns soft warnings.
inline std::vector<std::string> validate(const ExperimentConfig& c) {
  std::vector<std::string> warnings;
  validate(c.world);
  if (c.buffer.k_cap < 1) throw ConfigError("buffer.k_cap", "must be >= 1");
  if (c.buffer.capacity < 1) throw ConfigError("buffer.capacity", "must be >= 1");
  if (!parse_source(c.estimator.method))
    throw ConfigError("estimator.method", "unknown estimator '" + c.estimator.method + "'");
  const SnisConfig& s = c.estimator.snis;
  if (!(s.clip > 0.0) || !std::isfinite(s.clip)) throw ConfigError("estimator.clip", "must be > 0");
  if (!(s.ess_threshold >= 1.0)) throw ConfigError("estimator.ess_threshold", "must be >= 1");
  if (s.ess_threshold > static_cast<double>(c.buffer.k_cap))
    throw ConfigError("estimator.ess_threshold", "must not exceed buffer.k_cap");
  if (!(s.delta > 0.0 && s.delta < 1.0)) throw ConfigError("estimator.delta", "must lie in (0, 1)");
  if (!(s.b_min > 0.0 && s.b_min <= 1.0)) throw ConfigError("estimator.b_min", "must lie in (0, 1]");
  const BayesConfig& b = c.estimator.bayes;
  if (!(b.alpha0 > 0.0)) throw ConfigError("estimator.bayes.alpha0", "must be > 0");
  if (!(b.beta0 > 0.0)) throw ConfigError("estimator.bayes.beta0", "must be > 0");
  if (!(b.decay >= 0.0 && b.decay <= 1.0)) throw ConfigError("estimator.bayes.decay", "must lie in [0, 1]");
  if (!(b.explore >= 0.0 && b.explore < 1.0)) throw ConfigError("estimator.bayes.explore", "must lie in [0, 1)");
  if (c.estimator.reference_g < 1) throw ConfigError("estimator.reference_g", "must be >= 1");
  if (c.estimator.current_fr_g < 1) throw ConfigError("estimator.current_fr_g", "must be >= 1");
  if (!parse_sampler_mode(c.sampler.mode)) throw ConfigError("sampler.mode", "unknown mode '" + c.sampler.mode + "'");
  if (!(c.sampler.kappa >= 0.0) || !std::isfinite(c.sampler.kappa)) throw ConfigError("sampler.kappa", "must be >= 0");
  if (c.sampler.batch_size < 1) throw ConfigError("sampler.batch_size", "must be >= 1");
  if (c.sampler.batch_size > c.world.n_prompts) throw ConfigError("sampler.batch_size", "must be <= world.n_prompts");
  if (!(c.sampler.tau_ent > 0.0)) throw ConfigError("sampler.tau_ent", "must be > 0");
  validate(c.trainer, c.world.t_max);
  if (c.trainer.g_hard > 2 * c.buffer.k_cap)
    warnings.push_back("trainer.g_hard exceeds twice buffer.k_cap; hard-tier replay will top up with fresh rollouts");
  const RunConfig& r = c.run;
  if (r.eval_every < 1) throw ConfigError("run.eval_every", "must be >= 1");
  if (r.eval_set_size < 1 || r.eval_set_size >= c.world.n_prompts)
    throw ConfigError("run.eval_set_size", "must lie in [1, world.n_prompts)");
  if (c.sampler.batch_size > c.world.n_prompts - r.eval_set_size)
    throw ConfigError("sampler.batch_size", "exceeds the training pool (world.n_prompts - run.eval_set_size)");
  if (r.methods.empty()) throw ConfigError("run.methods", "must list at least one method");
  std::set<std::string> seen;
  for (const auto& m : r.methods) {
    if (!is_method_name(m)) throw ConfigError("run.methods", "unknown method '" + m + "'");
    if (!seen.insert(m).second) throw ConfigError("run.methods", "duplicate method '" + m + "'");
  }
  if (!r.baseline.empty() && !seen.contains(r.baseline))
    warnings.push_back("run.baseline '" + r.baseline + "' is not among run.methods; speedups omitted");
  for (double t : r.targets)
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("run.targets", "targets must lie in [0, 1]");
  if (r.estimate_stride < 1) throw ConfigError("run.estimate_stride", "must be >= 1");
  for (const DriftEvent& d : r.drift) {
    if (d.step < 1) throw ConfigError("run.drift", "event steps must be >= 1");
    if (!(d.scale >= 0.0) || !std::isfinite(d.scale)) throw ConfigError("run.drift", "scales must be >= 0");
  }
  if (!is_method_name(r.bench.train_method)) throw ConfigError("run.bench.train_method", "unknown method");
  for (const auto& m : r.bench.methods)
    if (!is_estimator_name(m)) throw ConfigError("run.bench.methods", "unknown estimator '" + m + "'");
  for (double t : r.bench.ess_sweep)
    if (!(t >= 1.0)) throw ConfigError("run.bench.ess_sweep", "thresholds must be >= 1");
  if (r.bound.replications < 1) throw ConfigError("run.bound.replications", "must be >= 1");
  if (r.bound.k < 1) throw ConfigError("run.bound.k", "must be >= 1");
  if (r.bound.prompts < 1 || r.bound.prompts > c.world.n_prompts)
    throw ConfigError("run.bound.prompts", "must lie in [1, world.n_prompts]");
  if (!(r.bound.drift_scale >= 0.0)) throw ConfigError("run.bound.drift_scale", "must be >= 0");
  if (r.bound.b_min && !(*r.bound.b_min > 0.0 && *r.bound.b_min <= 1.0))
    throw ConfigError("run.bound.b_min", "must lie in (0, 1]");
  return warnings;
}

// --- JSON mapping ---------------------------------------------------------------

namespace detail {

/// Reads known keys from one section and rejects anything else.
class SectionReader {
 public:
  SectionReader(const nlohmann::json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
    if (!obj_.is_object()) throw ConfigError(prefix_, "must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    used_.insert(key);
    const auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(name(key), std::string("wrong type: ") + e.what());
    }
  }

  template <typename T>
  void get_optional(const char* key, std::optional<T>& out) {
    used_.insert(key);
    const auto it = obj_.find(key);
    if (it == obj_.end()) return;
    if (it->is_null()) {
      out.reset();
      return;
    }
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(name(key), std::string("wrong type: ") + e.what());
    }
  }

  const nlohmann::json* sub(const char* key) {
    used_.insert(key);
    const auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  std::string name(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : obj_.items())
      if (!used_.contains(k)) throw ConfigError(name(k), "unknown key");
  }

 private:
  const nlohmann::json& obj_;
  std::string prefix_;
  std::set<std::string> used_;
};

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  const WorldConfig& w = c.world;
  json drift = json::array();
  for (const DriftEvent& d : c.run.drift) drift.push_back({{"step", d.step}, {"scale", d.scale}});
  return {
      {"world",
       {{"n_prompts", w.n_prompts},
        {"vocab", w.vocab},
        {"t_max", w.t_max},
        {"n_reference", w.n_reference},
        {"family_weights", w.family_weights},
        {"eos_enabled", w.eos_enabled},
        {"think_enabled", w.think_enabled},
        {"seed", w.seed},
        {"temperature", w.temperature},
        {"init_scale", w.init_scale},
        {"prompt_init_scale", w.prompt_init_scale},
        {"target_agreement", w.target_agreement},
        {"think_bias", w.think_bias},
        {"family_difficulty", w.family_difficulty},
        {"candidates", w.candidates},
        {"prompt_logits", w.prompt_logits}}},
      {"buffer", {{"k_cap", c.buffer.k_cap}, {"capacity", c.buffer.capacity}}},
      {"estimator",
       {{"method", c.estimator.method},
        {"clip", c.estimator.snis.clip},
        {"ess_threshold", c.estimator.snis.ess_threshold},
        {"delta", c.estimator.snis.delta},
        {"b_min", c.estimator.snis.b_min},
        {"bayes",
         {{"alpha0", c.estimator.bayes.alpha0},
          {"beta0", c.estimator.bayes.beta0},
          {"decay", c.estimator.bayes.decay},
          {"explore", c.estimator.bayes.explore}}},
        {"l_prefix", c.estimator.l_prefix},
        {"reference_g", c.estimator.reference_g},
        {"current_fr_g", c.estimator.current_fr_g}}},
      {"sampler",
       {{"mode", c.sampler.mode},
        {"kappa", c.sampler.kappa},
        {"batch_size", c.sampler.batch_size},
        {"tau_ent", c.sampler.tau_ent}}},
      {"trainer",
       {{"tiered", c.trainer.tiered},
        {"d_easy", c.trainer.d_easy},
        {"d_hard", c.trainer.d_hard},
        {"g", c.trainer.g},
        {"g_easy", c.trainer.g_easy},
        {"g_hard", c.trainer.g_hard},
        {"lambda_easy", c.trainer.lambda_easy},
        {"lambda_hard", c.trainer.lambda_hard},
        {"eps", c.trainer.eps},
        {"eps_plus_easy", c.trainer.eps_plus_easy},
        {"t_budget_easy", c.trainer.t_budget_easy},
        {"beta_kl", c.trainer.beta_kl},
        {"sigma", c.trainer.sigma},
        {"lr", c.trainer.lr}}},
      {"run",
       {{"n_steps", c.run.n_steps},
        {"eval_every", c.run.eval_every},
        {"eval_set_size", c.run.eval_set_size},
        {"seed", c.run.seed},
        {"output_dir", c.run.output_dir},
        {"methods", c.run.methods},
        {"baseline", c.run.baseline},
        {"targets", c.run.targets},
        {"estimate_stride", c.run.estimate_stride},
        {"length_samples", c.run.length_samples},
        {"drift", drift},
        {"bench",
         {{"train_method", c.run.bench.train_method},
          {"methods", c.run.bench.methods},
          {"ess_sweep", c.run.bench.ess_sweep}}},
        {"bound",
         {{"replications", c.run.bound.replications},
          {"k", c.run.bound.k},
          {"prompts", c.run.bound.prompts},
          {"drift_scale", c.run.bound.drift_scale},
          {"b_min", c.run.bound.b_min ? json(*c.run.bound.b_min) : json(nullptr)}}}}}};
}

/// Parses a config document. Missing keys keep their defaults; unknown keys
/// and wrong types raise ConfigError naming the key.
inline ExperimentConfig config_from_json(const nlohmann::json& doc) {
  ExperimentConfig c;
  detail::SectionReader root(doc, "");
  if (const auto* j = root.sub("world")) {
    detail::SectionReader r(*j, "world");
    WorldConfig& w = c.world;
    r.get("n_prompts", w.n_prompts);
    r.get("vocab", w.vocab);
    r.get("t_max", w.t_max);
    r.get("n_reference", w.n_reference);
    r.get("family_weights", w.family_weights);
    r.get("eos_enabled", w.eos_enabled);
    r.get("think_enabled", w.think_enabled);
    r.get("seed", w.seed);
    r.get("temperature", w.temperature);
    r.get("init_scale", w.init_scale);
    r.get("prompt_init_scale", w.prompt_init_scale);
    r.get("target_agreement", w.target_agreement);
    r.get("think_bias", w.think_bias);
    r.get("family_difficulty", w.family_difficulty);
    r.get("candidates", w.candidates);
    r.get("prompt_logits", w.prompt_logits);
    r.finish();
  }
  if (const auto* j = root.sub("buffer")) {
    detail::SectionReader r(*j, "buffer");
    r.get("k_cap", c.buffer.k_cap);
    r.get("capacity", c.buffer.capacity);
    r.finish();
  }
  if (const auto* j = root.sub("estimator")) {
    detail::SectionReader r(*j, "estimator");
    r.get("method", c.estimator.method);
    r.get("clip", c.estimator.snis.clip);
    r.get("ess_threshold", c.estimator.snis.ess_threshold);
    r.get("delta", c.estimator.snis.delta);
    r.get("b_min", c.estimator.snis.b_min);
    if (const auto* bj = r.sub("bayes")) {
      detail::SectionReader br(*bj, "estimator.bayes");
      br.get("alpha0", c.estimator.bayes.alpha0);
      br.get("beta0", c.estimator.bayes.beta0);
      br.get("decay", c.estimator.bayes.decay);
      br.get("explore", c.estimator.bayes.explore);
      br.finish();
    }
    r.get("l_prefix", c.estimator.l_prefix);
    r.get("reference_g", c.estimator.reference_g);
    r.get("current_fr_g", c.estimator.current_fr_g);
    r.finish();
  }
  if (const auto* j = root.sub("sampler")) {
    detail::SectionReader r(*j, "sampler");
    r.get("mode", c.sampler.mode);
    r.get("kappa", c.sampler.kappa);
    r.get("batch_size", c.sampler.batch_size);
    r.get("tau_ent", c.sampler.tau_ent);
    r.finish();
  }
  if (const auto* j = root.sub("trainer")) {
    detail::SectionReader r(*j, "trainer");
    TierConfig& t = c.trainer;
    r.get("tiered", t.tiered);
    r.get("d_easy", t.d_easy);
    r.get("d_hard", t.d_hard);
    r.get("g", t.g);
    r.get("g_easy", t.g_easy);
    r.get("g_hard", t.g_hard);
    r.get("lambda_easy", t.lambda_easy);
    r.get("lambda_hard", t.lambda_hard);
    r.get("eps", t.eps);
    r.get("eps_plus_easy", t.eps_plus_easy);
    r.get("t_budget_easy", t.t_budget_easy);
    r.get("beta_kl", t.beta_kl);
    r.get("sigma", t.sigma);
    r.get("lr", t.lr);
    r.finish();
  }
  if (const auto* j = root.sub("run")) {
    detail::SectionReader r(*j, "run");
    RunConfig& u = c.run;
    r.get("n_steps", u.n_steps);
    r.get("eval_every", u.eval_every);
    r.get("eval_set_size", u.eval_set_size);
    r.get("seed", u.seed);
    r.get("output_dir", u.output_dir);
    r.get("methods", u.methods);
    r.get("baseline", u.baseline);
    r.get("targets", u.targets);
    r.get("estimate_stride", u.estimate_stride);
    r.get("length_samples", u.length_samples);
    if (const auto* dj = r.sub("drift")) {
      if (!dj->is_array()) throw ConfigError("run.drift", "must be an array");
      u.drift.clear();
      for (const auto& e : *dj) {
        detail::SectionReader er(e, "run.drift[]");
        DriftEvent d;
        er.get("step", d.step);
        er.get("scale", d.scale);
        er.finish();
        u.drift.push_back(d);
      }
    }
    if (const auto* bj = r.sub("bench")) {
      detail::SectionReader br(*bj, "run.bench");
      br.get("train_method", u.bench.train_method);
      br.get("methods", u.bench.methods);
      br.get("ess_sweep", u.bench.ess_sweep);
      br.finish();
    }
    if (const auto* bj = r.sub("bound")) {
      detail::SectionReader br(*bj, "run.bound");
      br.get("replications", u.bound.replications);
      br.get("k", u.bound.k);
      br.get("prompts", u.bound.prompts);
      br.get("drift_scale", u.bound.drift_scale);
      br.get_optional("b_min", u.bound.b_min);
      br.finish();
    }
    r.finish();
  }
  root.finish();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("--config", "cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("--config", "invalid JSON in " + path.string() + ": " + e.what());
  }
  return config_from_json(doc);
}

}  // namespace dare
