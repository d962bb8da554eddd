#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "maestro/clpo.hpp"
#include "maestro/rng.hpp"
#include "maestro/selector.hpp"

namespace maestro::gradcheck {

// |a - n| / max(|a|, |n|, floor). The floor keeps coordinates whose true
// derivative is ~0 from turning round-off into huge ratios.
inline double relative_error(double analytic, double numeric, double floor) {
  const double diff = std::abs(analytic - numeric);
  if (diff == 0.0) return 0.0;
  return diff / std::max({std::abs(analytic), std::abs(numeric), floor});
}

using LossFn = std::function<double(const PolicyParams&)>;

// Central differences over every coordinate of (w, U).
inline clpo::Gradient finite_difference(const LossFn& f, const PolicyParams& at, double h = 1e-6) {
  auto g = clpo::Gradient::zeros_like(at);
  PolicyParams p = at;
  for (Eigen::Index i = 0; i < p.w.size(); ++i) {
    const double orig = p.w(i);
    p.w(i) = orig + h;
    const double up = f(p);
    p.w(i) = orig - h;
    const double down = f(p);
    p.w(i) = orig;
    g.dw(i) = (up - down) / (2 * h);
  }
  for (Eigen::Index i = 0; i < p.U.size(); ++i) {
    double& x = p.U.data()[i];
    const double orig = x;
    x = orig + h;
    const double up = f(p);
    x = orig - h;
    const double down = f(p);
    x = orig;
    g.dU.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

struct Comparison {
  double max_rel_error = 0;
  double max_abs_error = 0;
};

inline Comparison compare(const clpo::Gradient& analytic, const clpo::Gradient& numeric,
                          double floor) {
  Comparison c;
  auto visit = [&](const double* a, const double* n, Eigen::Index size) {
    for (Eigen::Index i = 0; i < size; ++i) {
      c.max_rel_error = std::max(c.max_rel_error, relative_error(a[i], n[i], floor));
      c.max_abs_error = std::max(c.max_abs_error, std::abs(a[i] - n[i]));
    }
  };
  visit(analytic.dw.data(), numeric.dw.data(), analytic.dw.size());
  visit(analytic.dU.data(), numeric.dU.data(), analytic.dU.size());
  return c;
}

struct InstanceShape {
  int min_candidates = 2;
  int max_candidates = 9;
  int feature_dim = kDefaultFeatureDim;
  int vocab_size = kDefaultVocabSize;
  int min_tokens = 1;
  int max_tokens = 8;
};

// Random instance: Gaussian features, uniform non-BOS tokens, and rewards that
// are binary half of the time and continuous otherwise.
inline clpo::TrainingInstance random_instance(Rng& rng, const InstanceShape& shape = {}) {
  clpo::TrainingInstance inst;
  const int n = static_cast<int>(rng.between(shape.min_candidates, shape.max_candidates));
  const bool binary = rng.bernoulli(0.5);
  for (int k = 0; k < n; ++k) {
    Candidate c;
    c.agent_index = k;
    c.features.resize(static_cast<std::size_t>(shape.feature_dim));
    for (auto& x : c.features) x = rng.normal();
    const int len = static_cast<int>(rng.between(shape.min_tokens, shape.max_tokens));
    for (int t = 0; t < len; ++t)
      c.rationale_tokens.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(shape.vocab_size - 1))));
    inst.candidates.push_back(std::move(c));
    inst.rewards.push_back(binary ? (rng.bernoulli(0.4) ? 1.0 : 0.0) : rng.uniform());
  }
  return inst;
}

struct Row {
  std::string term;
  Comparison worst;
  bool passed = true;
};

struct Report {
  std::vector<Row> rows;
  int instances = 0;
  double tolerance = 1e-4;
  bool all_passed() const {
    return std::all_of(rows.begin(), rows.end(), [](const Row& r) { return r.passed; });
  }
  std::string table() const {
    std::ostringstream os;
    os.precision(3);
    os << "term        max_rel_err   max_abs_err   status\n";
    for (const auto& r : rows) {
      os << r.term << std::string(12 - std::min<std::size_t>(11, r.term.size()), ' ')
         << std::scientific << r.worst.max_rel_error << "     " << r.worst.max_abs_error << "     "
         << (r.passed ? "PASS" : "FAIL") << '\n';
    }
    return os.str();
  }
};

struct Options {
  int instances = 100;
  double h = 1e-6;
  double tolerance = 1e-4;
  double floor = 1e-3;
  double param_scale = 0.5;
  std::uint64_t seed = 7;
  InstanceShape shape;
  bool inject_choice_sign_error = false;  // self-test of the checker
  bool zero_params = false;
};

// Finite-difference verification of every objective term.
inline Report run(const Options& opt) {
  Rng rng(mix_seed(opt.seed, 0x6772616463686bULL));
  Row choice{"L_choice", {}, true}, rank{"L_rank", {}, true}, kl{"L_KL", {}, true}, ent{"H", {}, true},
      total{"L_CLPO", {}, true}, grpo{"L_GRPO", {}, true};
  auto fold = [&](Row& row, const clpo::Gradient& a, const clpo::Gradient& n) {
    const auto c = compare(a, n, opt.floor);
    row.worst.max_rel_error = std::max(row.worst.max_rel_error, c.max_rel_error);
    row.worst.max_abs_error = std::max(row.worst.max_abs_error, c.max_abs_error);
  };

  for (int i = 0; i < opt.instances; ++i) {
    const int d = opt.shape.feature_dim, V = opt.shape.vocab_size;
    const PolicyParams params =
        opt.zero_params ? PolicyParams::zeros(d, V) : PolicyParams::random(rng, opt.param_scale, d, V);
    const PolicyParams ref = PolicyParams::random(rng, opt.param_scale, d, V);
    clpo::TrainingBatch batch;
    const int batch_size = 1 + static_cast<int>(rng.below(3));
    for (int b = 0; b < batch_size; ++b) batch.push_back(random_instance(rng, opt.shape));
    const auto& inst = batch.front();

    {
      auto a = clpo::Gradient::zeros_like(params);
      clpo::grad_choice(params, inst, 1.0, a);
      if (opt.inject_choice_sign_error) a.dw = -a.dw;
      fold(choice, a, finite_difference([&](const PolicyParams& p) { return clpo::loss_choice(p, inst); }, params, opt.h));
    }
    {
      auto a = clpo::Gradient::zeros_like(params);
      clpo::grad_reason_rank(params, inst, 1.0, a);
      fold(rank, a, finite_difference([&](const PolicyParams& p) { return clpo::loss_reason_rank(p, inst); }, params, opt.h));
    }
    {
      auto a = clpo::Gradient::zeros_like(params);
      clpo::grad_kl(params, ref, inst, 1.0, a);
      fold(kl, a, finite_difference([&](const PolicyParams& p) { return clpo::loss_kl(p, ref, inst); }, params, opt.h));
    }
    {
      auto a = clpo::Gradient::zeros_like(params);
      clpo::grad_entropy(params, inst, 1.0, a);
      fold(ent, a, finite_difference([&](const PolicyParams& p) { return clpo::loss_entropy(p, inst); }, params, opt.h));
    }
    {
      const clpo::LossWeights w{rng.uniform(), rng.uniform(), rng.uniform()};
      fold(total, clpo::grad_clpo(params, ref, batch, w),
           finite_difference([&](const PolicyParams& p) { return clpo::loss_clpo(p, ref, batch, w); }, params, opt.h));
    }
    fold(grpo, clpo::grad_grpo(params, batch),
         finite_difference([&](const PolicyParams& p) { return clpo::loss_grpo(p, batch); }, params, opt.h));
  }

  Report rep;
  rep.instances = opt.instances;
  rep.tolerance = opt.tolerance;
  for (Row* r : {&choice, &rank, &kl, &ent, &total, &grpo}) {
    r->passed = r->worst.max_rel_error < opt.tolerance;
    rep.rows.push_back(*r);
  }
  return rep;
}

}  // namespace maestro::gradcheck
