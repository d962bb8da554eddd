#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "maestro/core.hpp"
#include "maestro/math.hpp"
#include "maestro/rng.hpp"
#include "maestro/selector.hpp"

namespace maestro::clpo {

// One (q, C) pair: candidates carrying features and rationale tokens, and
// their rewards in the same order.
struct TrainingInstance {
  std::vector<Candidate> candidates;
  std::vector<double> rewards;

  double mean_reward() const { return math::mean<double>(rewards); }

  void validate() const {
    if (candidates.empty()) throw Error("TrainingInstance: empty candidate set");
    if (rewards.size() != candidates.size())
      throw Error("TrainingInstance: reward vector length differs from candidate count");
  }
};

using TrainingBatch = std::vector<TrainingInstance>;

struct LossWeights {
  double rank = 0.5;
  double kl = 0.1;
  double entropy = 0.01;

  void validate() const {
    if (rank < 0 || kl < 0 || entropy < 0) throw Error("LossWeights: weights must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"rank", w.rank}, {"kl", w.kl}, {"entropy", w.entropy}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
  LossWeights d;
  w.rank = j.value("rank", d.rank);
  w.kl = j.value("kl", d.kl);
  w.entropy = j.value("entropy", d.entropy);
}

// d(loss)/d(params), shaped like PolicyParams.
struct Gradient {
  Eigen::VectorXd dw;
  Eigen::MatrixXd dU;

  static Gradient zeros_like(const PolicyParams& p) {
    return {Eigen::VectorXd::Zero(p.w.size()), Eigen::MatrixXd::Zero(p.U.rows(), p.U.cols())};
  }

  double norm() const { return std::sqrt(dw.squaredNorm() + dU.squaredNorm()); }
  bool all_finite() const { return dw.allFinite() && dU.allFinite(); }

  Gradient& operator+=(const Gradient& o) {
    dw += o.dw;
    dU += o.dU;
    return *this;
  }
  Gradient& operator*=(double s) {
    dw *= s;
    dU *= s;
    return *this;
  }
};

// A_k = r_k - mean(r). No variance normalization.
inline std::vector<double> advantages(std::span<const double> rewards) {
  const double mean = math::mean<double>(rewards);
  std::vector<double> a;
  a.reserve(rewards.size());
  for (double r : rewards) a.push_back(r - mean);
  return a;
}

// Descending reward order; equal rewards keep the lower flat index first.
inline std::vector<std::size_t> reward_order(std::span<const double> rewards) {
  return math::descending_order<double>(rewards);
}

namespace detail {

// dw += sum_k coeff_k * x_k
inline void accumulate_choice_grad(const PolicyParams& params, std::span<const Candidate> cands,
                                   std::span<const double> dlogits, Eigen::VectorXd& dw) {
  for (std::size_t k = 0; k < cands.size(); ++k)
    dw += dlogits[k] * policy_detail::features_of(params, cands[k]);
}

// dU += coeff * sum_tau d log p(y_tau | y_<tau, x) / dU
inline void accumulate_token_logprob_grad(const PolicyParams& params, const Candidate& c,
                                          double coeff, Eigen::MatrixXd& dU) {
  if (coeff == 0.0) return;
  const auto x = policy_detail::features_of(params, c);
  const auto logits = rationale_logits(params, c);
  const Eigen::Index d = params.w.size();
  const Eigen::Index V = params.vocab_size();
  Eigen::VectorXd residual_sum = Eigen::VectorXd::Zero(V);
  int prev = params.bos_token;
  for (Eigen::Index tau = 0; tau < logits.cols(); ++tau) {
    const Eigen::VectorXd col = logits.col(tau);
    const auto probs = math::softmax<double>(std::span<const double>(col.data(), col.size()));
    Eigen::VectorXd residual = -Eigen::Map<const Eigen::VectorXd>(probs.data(), V);
    residual(c.rationale_tokens[static_cast<std::size_t>(tau)]) += 1.0;
    dU.col(prev) += coeff * residual;
    residual_sum += residual;
    prev = c.rationale_tokens[static_cast<std::size_t>(tau)];
  }
  dU.rightCols(d) += coeff * residual_sum * x.transpose();
}

}  // namespace detail

// ---- Strategic decision loss ------------------------------------------------

inline double loss_choice(const PolicyParams& params, const TrainingInstance& inst) {
  inst.validate();
  const auto logp = choice_log_probs(params, inst.candidates);
  const auto a = advantages(inst.rewards);
  double loss = 0;
  for (std::size_t k = 0; k < a.size(); ++k) loss -= a[k] * logp[k];
  return loss;
}

// Touches dw only.
inline void grad_choice(const PolicyParams& params, const TrainingInstance& inst, double scale,
                        Gradient& g) {
  const auto logp = choice_log_probs(params, inst.candidates);
  const auto a = advantages(inst.rewards);
  const double a_sum = std::accumulate(a.begin(), a.end(), 0.0);
  std::vector<double> dz(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) dz[j] = scale * (-a[j] + std::exp(logp[j]) * a_sum);
  detail::accumulate_choice_grad(params, inst.candidates, dz, g.dw);
}

// ---- Tactical argumentation (listwise) loss ---------------------------------

inline double loss_reason_rank(const PolicyParams& params, const TrainingInstance& inst) {
  inst.validate();
  const auto s = rationale_scores(params, inst.candidates);
  const auto order = reward_order(inst.rewards);
  return math::plackett_luce_nll<double>(s, order);
}

// Touches dU only.
inline void grad_reason_rank(const PolicyParams& params, const TrainingInstance& inst, double scale,
                             Gradient& g) {
  const auto s = rationale_scores(params, inst.candidates);
  const auto order = reward_order(inst.rewards);
  const auto ds = math::plackett_luce_nll_grad<double>(s, order);
  for (std::size_t k = 0; k < inst.candidates.size(); ++k) {
    const auto L = static_cast<double>(inst.candidates[k].rationale_tokens.size());
    detail::accumulate_token_logprob_grad(params, inst.candidates[k], scale * ds[k] / L, g.dU);
  }
}

// ---- Regularizers on the choice distribution ---------------------------------

inline double loss_kl(const PolicyParams& params, const PolicyParams& ref,
                      const TrainingInstance& inst) {
  const auto lp = choice_log_probs(params, inst.candidates);
  const auto lq = choice_log_probs(ref, inst.candidates);
  return std::max(0.0, math::kl_from_log_probs<double>(lp, lq));
}

inline void grad_kl(const PolicyParams& params, const PolicyParams& ref,
                    const TrainingInstance& inst, double scale, Gradient& g) {
  const auto lp = choice_log_probs(params, inst.candidates);
  const auto lq = choice_log_probs(ref, inst.candidates);
  const double kl = math::kl_from_log_probs<double>(lp, lq);
  std::vector<double> dz(lp.size());
  for (std::size_t j = 0; j < lp.size(); ++j) dz[j] = scale * std::exp(lp[j]) * (lp[j] - lq[j] - kl);
  detail::accumulate_choice_grad(params, inst.candidates, dz, g.dw);
}

inline double loss_entropy(const PolicyParams& params, const TrainingInstance& inst) {
  const auto lp = choice_log_probs(params, inst.candidates);
  return math::entropy_from_log_probs<double>(lp);
}

inline void grad_entropy(const PolicyParams& params, const TrainingInstance& inst, double scale,
                         Gradient& g) {
  const auto lp = choice_log_probs(params, inst.candidates);
  const double h = math::entropy_from_log_probs<double>(lp);
  std::vector<double> dz(lp.size());
  for (std::size_t j = 0; j < lp.size(); ++j) dz[j] = -scale * std::exp(lp[j]) * (lp[j] + h);
  detail::accumulate_choice_grad(params, inst.candidates, dz, g.dw);
}

// ---- Combined objective -------------------------------------------------------

struct LossTerms {
  double choice = 0;
  double rank = 0;
  double kl = 0;
  double entropy = 0;
  double total = 0;
};

// Batch means of each term and of
//   L = L_choice + rank * L_rank + kl * L_KL - entropy * H.
inline LossTerms clpo_terms(const PolicyParams& params, const PolicyParams& ref,
                            const TrainingBatch& batch, const LossWeights& weights) {
  weights.validate();
  if (batch.empty()) throw Error("clpo: empty batch");
  LossTerms t;
  for (const auto& inst : batch) {
    t.choice += loss_choice(params, inst);
    if (weights.rank != 0) t.rank += loss_reason_rank(params, inst);
    t.kl += loss_kl(params, ref, inst);
    t.entropy += loss_entropy(params, inst);
  }
  const double n = static_cast<double>(batch.size());
  t.choice /= n;
  t.rank /= n;
  t.kl /= n;
  t.entropy /= n;
  t.total = t.choice + weights.rank * t.rank + weights.kl * t.kl - weights.entropy * t.entropy;
  return t;
}

inline double loss_clpo(const PolicyParams& params, const PolicyParams& ref,
                        const TrainingBatch& batch, const LossWeights& weights) {
  return clpo_terms(params, ref, batch, weights).total;
}

inline Gradient grad_clpo(const PolicyParams& params, const PolicyParams& ref,
                          const TrainingBatch& batch, const LossWeights& weights) {
  weights.validate();
  if (batch.empty()) throw Error("clpo: empty batch");
  auto g = Gradient::zeros_like(params);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& inst : batch) {
    inst.validate();
    grad_choice(params, inst, inv_n, g);
    if (weights.rank != 0) grad_reason_rank(params, inst, weights.rank * inv_n, g);
    if (weights.kl != 0) grad_kl(params, ref, inst, weights.kl * inv_n, g);
    if (weights.entropy != 0) grad_entropy(params, inst, -weights.entropy * inv_n, g);
  }
  return g;
}

// ---- Sequence-level group-relative baseline ----------------------------------

// A_k = (r_k - mean) / (std + 1e-8), population std.
inline std::vector<double> normalized_advantages(std::span<const double> rewards) {
  const double sd = math::stddev<double>(rewards);
  auto a = advantages(rewards);
  for (auto& v : a) v /= (sd + 1e-8);
  return a;
}

// -sum_k A_k [ log pi(k) + sum_tau log pi(y_k,tau | ...) ], batch mean.
inline double loss_grpo(const PolicyParams& params, const TrainingBatch& batch) {
  if (batch.empty()) throw Error("grpo: empty batch");
  double total = 0;
  for (const auto& inst : batch) {
    inst.validate();
    const auto a = normalized_advantages(inst.rewards);
    const auto logp = choice_log_probs(params, inst.candidates);
    for (std::size_t k = 0; k < a.size(); ++k) {
      if (a[k] == 0.0) continue;
      const auto tok = rationale_token_log_probs(params, inst.candidates, k);
      const double seq = logp[k] + std::accumulate(tok.begin(), tok.end(), 0.0);
      total -= a[k] * seq;
    }
  }
  return total / static_cast<double>(batch.size());
}

inline Gradient grad_grpo(const PolicyParams& params, const TrainingBatch& batch) {
  if (batch.empty()) throw Error("grpo: empty batch");
  auto g = Gradient::zeros_like(params);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& inst : batch) {
    inst.validate();
    const auto a = normalized_advantages(inst.rewards);
    const auto logp = choice_log_probs(params, inst.candidates);
    const double a_sum = std::accumulate(a.begin(), a.end(), 0.0);
    std::vector<double> dz(a.size());
    for (std::size_t j = 0; j < a.size(); ++j) dz[j] = inv_n * (-a[j] + std::exp(logp[j]) * a_sum);
    detail::accumulate_choice_grad(params, inst.candidates, dz, g.dw);
    for (std::size_t k = 0; k < a.size(); ++k)
      detail::accumulate_token_logprob_grad(params, inst.candidates[k], -inv_n * a[k], g.dU);
  }
  return g;
}

// ---- Optimizer ----------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global L2 norm; <= 0 disables clipping
};

struct AdamState {
  Gradient m;
  Gradient v;
  std::int64_t step = 0;

  static AdamState for_params(const PolicyParams& p) {
    return {Gradient::zeros_like(p), Gradient::zeros_like(p), 0};
  }
};

// Scales g in place so that its global norm is at most max_norm; returns the
// norm before clipping.
inline double clip_gradient(Gradient& g, double max_norm) {
  const double n = g.norm();
  if (max_norm > 0 && n > max_norm) g *= max_norm / n;
  return n;
}

// Clip, then one bias-corrected Adam update.
inline void adam_step(PolicyParams& params, Gradient grad, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
  if (!grad.all_finite()) throw Error("adam_step: non-finite gradient");
  if (state.m.dw.size() != params.w.size() || state.m.dU.rows() != params.U.rows() ||
      state.m.dU.cols() != params.U.cols() || grad.dw.size() != params.w.size() ||
      grad.dU.rows() != params.U.rows() || grad.dU.cols() != params.U.cols())
    throw Error("adam_step: shape mismatch");
  clip_gradient(grad, cfg.clip_norm);
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    param.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
  };
  update(params.w, state.m.dw, state.v.dw, grad.dw);
  update(params.U, state.m.dU, state.v.dU, grad.dU);
}

// ---- Training loop ------------------------------------------------------------

enum class Objective { clpo, grpo };

NLOHMANN_JSON_SERIALIZE_ENUM(Objective, {{Objective::clpo, "clpo"}, {Objective::grpo, "grpo"}})

struct TrainSchedule {
  double lr = 5e-5;
  int epochs = 3;
  int batch_size = 32;
  int max_steps = 0;  // 0: no cap beyond epochs
  bool cosine = true;
  std::uint64_t seed = 0;
  AdamConfig adam;
};

inline void to_json(nlohmann::json& j, const TrainSchedule& s) {
  j = nlohmann::json{{"lr", s.lr},         {"epochs", s.epochs}, {"batch_size", s.batch_size},
                     {"max_steps", s.max_steps}, {"cosine", s.cosine}, {"seed", s.seed},
                     {"clip_norm", s.adam.clip_norm}};
}

inline void from_json(const nlohmann::json& j, TrainSchedule& s) {
  TrainSchedule d;
  s.lr = j.value("lr", d.lr);
  s.epochs = j.value("epochs", d.epochs);
  s.batch_size = j.value("batch_size", d.batch_size);
  s.max_steps = j.value("max_steps", d.max_steps);
  s.cosine = j.value("cosine", d.cosine);
  s.seed = j.value("seed", d.seed);
  s.adam.clip_norm = j.value("clip_norm", d.adam.clip_norm);
}

// Learning rate at step t of total (cosine decay to zero, or constant).
inline double scheduled_lr(const TrainSchedule& s, std::int64_t t, std::int64_t total) {
  if (!s.cosine || total <= 0) return s.lr;
  return s.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total)));
}

struct StepRecord {
  std::int64_t step = 0;
  double lr = 0;
  LossTerms terms;
};

struct TrainResult {
  PolicyParams params;
  std::vector<StepRecord> curve;
};

inline std::int64_t planned_steps(std::size_t n_instances, const TrainSchedule& s) {
  const auto per_epoch = static_cast<std::int64_t>((n_instances + s.batch_size - 1) / s.batch_size);
  std::int64_t total = per_epoch * s.epochs;
  if (s.max_steps > 0) total = std::min<std::int64_t>(total, s.max_steps);
  return total;
}

// Mini-batch training over seeded per-epoch shuffles. The reference policy is
// the initial parameters, frozen.
inline TrainResult train(const PolicyParams& initial, const std::vector<TrainingInstance>& data,
                         const LossWeights& weights, const TrainSchedule& schedule,
                         Objective objective = Objective::clpo) {
  if (data.empty()) throw Error("train: empty dataset");
  if (schedule.batch_size < 1 || schedule.epochs < 0) throw Error("train: invalid schedule");
  const PolicyParams ref = initial;
  TrainResult out{initial, {}};
  auto state = AdamState::for_params(initial);
  const auto total = planned_steps(data.size(), schedule);
  out.curve.reserve(static_cast<std::size_t>(total));

  Rng rng(mix_seed(schedule.seed, 0x7472a1));
  std::vector<std::size_t> order(data.size());
  std::int64_t step = 0;
  for (int epoch = 0; epoch < schedule.epochs && step < total; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size() && step < total; start += schedule.batch_size) {
      TrainingBatch batch;
      for (std::size_t i = start; i < std::min(order.size(), start + schedule.batch_size); ++i)
        batch.push_back(data[order[i]]);
      StepRecord rec;
      rec.step = step;
      rec.lr = scheduled_lr(schedule, step, total);
      Gradient g;
      if (objective == Objective::clpo) {
        rec.terms = clpo_terms(out.params, ref, batch, weights);
        g = grad_clpo(out.params, ref, batch, weights);
      } else {
        rec.terms.total = loss_grpo(out.params, batch);
        g = grad_grpo(out.params, batch);
      }
      adam_step(out.params, std::move(g), state, rec.lr, schedule.adam);
      out.curve.push_back(rec);
      ++step;
    }
  }
  return out;
}

// Text table: step,L_choice,L_rank,L_KL,H,L_total
inline std::string format_loss_curve(const std::vector<StepRecord>& curve) {
  std::ostringstream os;
  os.precision(10);
  os << "step,L_choice,L_rank,L_KL,H,L_total\n";
  for (const auto& r : curve)
    os << r.step << ',' << r.terms.choice << ',' << r.terms.rank << ',' << r.terms.kl << ','
       << r.terms.entropy << ',' << r.terms.total << '\n';
  return os.str();
}

}  // namespace maestro::clpo
