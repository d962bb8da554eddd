// Trains the central policy on simulated rollouts where feature 0 marks
// correctness, then compares held-out identification before and after.

#include <iostream>

#include "maestro/maestro.hpp"

int main(int argc, char** argv) {
  using namespace maestro;
  runner::RunConfig cfg;
  cfg.mode = runner::Mode::train;
  cfg.train.train_questions = 2400;
  cfg.train.holdout_questions = 200;
  cfg.train.subsample = runner::Subsample::one_correct;
  cfg.train.instances_per_episode = 3;
  cfg.schedule.max_steps = 2000;
  cfg.output_dir = argc > 1 ? argv[1] : "train_separable_out";

  const auto res = runner::run_train(cfg);
  for (const auto& run : res.runs)
    std::cout << "identification " << run.before.value << " -> " << run.after.value << " after " << run.steps
              << " steps\n";
  std::cout << "params and loss curve written to " << cfg.output_dir << '\n';
}
