// maestro command-line driver: eval | train | simulate | gradcheck

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "maestro/maestro.hpp"

namespace {

using namespace maestro;
using runner::ExitCode;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string dataset;
  std::optional<int> parallel;
  bool multi_seed = false;
};

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--config", f.config, "JSON config file");
  sub->add_option("--seed", f.seed, "Base seed");
  sub->add_option("--out", f.out, "Output directory");
  sub->add_option("--dataset", f.dataset, "JSONL dataset {id, question, answer?}");
  sub->add_option("--parallel", f.parallel, "Questions evaluated concurrently")->check(CLI::PositiveNumber);
  sub->add_flag("--multi-seed", f.multi_seed, "Run seeds 25, 42, 99 and report the mean");
}

runner::RunConfig resolve(const CommonFlags& f, runner::Mode mode) {
  auto cfg = runner::load_config(f.config);
  cfg.mode = mode;
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out.empty()) cfg.output_dir = f.out;
  if (!f.dataset.empty()) cfg.dataset_path = f.dataset;
  if (f.parallel) cfg.parallel = *f.parallel;
  if (f.multi_seed) cfg.seeds.assign(std::begin(runner::kDefaultSeeds), std::end(runner::kDefaultSeeds));
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MAESTRO multi-agent orchestration and CLPO training"};
  app.require_subcommand(1);

  CommonFlags eval_f, train_f, sim_f, gc_f;
  auto* eval = app.add_subcommand("eval", "Run the protocol over a dataset and report metrics");
  add_common(eval, eval_f);
  int synthetic = 0;
  eval->add_option("--synthetic", synthetic, "Generate this many synthetic questions instead of a dataset");

  auto* train = app.add_subcommand("train", "Collect rollouts and train the central policy");
  add_common(train, train_f);
  std::vector<double> sweep;
  train->add_option("--rank-sweep", sweep, "Train once per rank weight");

  auto* simulate = app.add_subcommand("simulate", "Monte Carlo check of the reliability bound");
  add_common(simulate, sim_f);
  std::optional<double> p, q;
  std::optional<int> R;
  std::optional<std::int64_t> episodes;
  simulate->add_option("--p", p, "Per-round coverage")->check(CLI::Range(0.0, 1.0));
  simulate->add_option("--q", q, "Per-round identification")->check(CLI::Range(0.0, 1.0));
  simulate->add_option("--R", R, "Round budget")->check(CLI::PositiveNumber);
  simulate->add_option("--episodes", episodes, "Episodes to simulate")->check(CLI::PositiveNumber);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every loss gradient");
  add_common(gradcheck, gc_f);
  std::optional<int> instances;
  bool self_test = false;
  gradcheck->add_option("--instances", instances, "Random instances")->check(CLI::PositiveNumber);
  gradcheck->add_flag("--self-test", self_test, "Inject a sign error into the choice gradient");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? ExitCode::ok : ExitCode::config_error;
  }

  try {
    if (*eval) {
      auto cfg = resolve(eval_f, runner::Mode::eval);
      if (synthetic > 0) cfg.synthetic_questions = synthetic;
      const auto res = runner::run_eval(cfg);
      std::cout << res.report.dump(2) << '\n';
      if (!res.failures.empty()) std::cerr << res.failures.size() << " question(s) failed\n";
      return res.exit_code;
    }
    if (*train) {
      auto cfg = resolve(train_f, runner::Mode::train);
      if (!sweep.empty()) cfg.train.rank_sweep = sweep;
      const auto res = runner::run_train(cfg);
      std::cout << res.report.dump(2) << '\n';
      return res.exit_code;
    }
    if (*simulate) {
      auto cfg = resolve(sim_f, runner::Mode::simulate);
      if (p) cfg.simulate.p = *p;
      if (q) cfg.simulate.q = *q;
      if (R) cfg.simulate.R = *R;
      if (episodes) cfg.simulate.episodes = *episodes;
      const auto rep = runner::run_simulate(cfg.simulate, cfg.seed);
      std::cout << rep.dump(2) << '\n';
      return rep["within_3_sigma"].get<bool>() ? ExitCode::ok : ExitCode::verification_failure;
    }
    auto cfg = resolve(gc_f, runner::Mode::gradcheck);
    if (instances) cfg.gradcheck.instances = *instances;
    if (self_test) cfg.gradcheck.self_test = true;
    const auto rep = runner::run_gradcheck(cfg);
    std::cout << rep.table();
    return rep.all_passed() ? ExitCode::ok : ExitCode::verification_failure;
  } catch (const runner::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return ExitCode::config_error;
  } catch (const runner::DatasetError& e) {
    std::cerr << "dataset error: " << e.what() << '\n';
    return ExitCode::config_error;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return ExitCode::run_failures;
  }
}
