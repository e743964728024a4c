// dare_lab: command-line front end for the difficulty-adaptive RL lab.
//
//   dare_lab train            --config c.json [--seed N] [--out DIR] [--threads N]
//   dare_lab bench-estimators --config c.json [--seed N] [--out DIR]
//   dare_lab bound-check      --config c.json [--seed N] [--out DIR]
//   dare_lab report <run_dir>
//
// Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.

#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dare/config.hpp"
#include "dare/error.hpp"
#include "dare/harness.hpp"
#include "dare/parallel.hpp"

namespace {

struct RunOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> threads;
};

void add_run_options(CLI::App* sub, RunOptions& o) {
  sub->add_option("--config", o.config, "Experiment config (JSON)")->required();
  sub->add_option("--seed", o.seed, "Overrides run.seed and world.seed");
  sub->add_option("--out", o.out, "Overrides run.output_dir");
  sub->add_option("--threads", o.threads, "Worker threads (default: DARE_LAB_THREADS or all cores)");
}

dare::ExperimentConfig prepare(const RunOptions& o) {
  dare::ExperimentConfig cfg = dare::load_config(o.config);
  if (o.seed) {
    cfg.run.seed = *o.seed;
    cfg.world.seed = *o.seed;
  }
  if (o.out) cfg.run.output_dir = *o.out;
  if (o.threads) dare::set_thread_count(*o.threads);
  for (const auto& w : dare::validate(cfg)) std::cerr << "warning: " << w << '\n';
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Difficulty-adaptive RL laboratory"};
  app.require_subcommand(1);
  RunOptions train_opts;
  RunOptions bench_opts;
  RunOptions bound_opts;
  std::string report_dir;
  auto* train = app.add_subcommand("train", "Run the training loop for every configured method");
  auto* bench = app.add_subcommand("bench-estimators", "Benchmark difficulty estimators along one trajectory");
  auto* bound = app.add_subcommand("bound-check", "Validate the clipped-SNIS finite-sample bound");
  auto* report = app.add_subcommand("report", "Verify a finished run and print its summary");
  add_run_options(train, train_opts);
  add_run_options(bench, bench_opts);
  add_run_options(bound, bound_opts);
  report->add_option("run_dir", report_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*train || *bench || *bound) {
      const RunOptions& o = *train ? train_opts : *bench ? bench_opts : bound_opts;
      const dare::ExperimentConfig cfg = prepare(o);
      const dare::RunReport r = *train ? dare::run_train(cfg) : *bench ? dare::run_estimator_bench(cfg)
                                                                        : dare::run_bound_check(cfg);
      std::cout << "wrote " << r.manifest.size() << " files to " << r.dir.string() << '\n';
      return 0;
    }
    if (*report) {
      std::cout << dare::load_report(report_dir).dump(2) << '\n';
      return 0;
    }
  } catch (const dare::ConfigError& e) {
    std::cerr << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return 2;
  }
  std::cerr << app.help();
  return 1;
}
