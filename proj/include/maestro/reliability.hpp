#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "maestro/core.hpp"
#include "maestro/reward.hpp"
#include "maestro/rng.hpp"

namespace maestro::reliability {

// One protocol round, reduced to the two events the metrics need.
struct RoundOutcome {
  bool covered = false;     // slate contains at least one correct candidate
  bool identified = false;  // endorsed candidate is correct
};

struct RoundStats {
  std::int64_t rounds_total = 0;
  std::int64_t rounds_covered = 0;
  std::int64_t rounds_identified = 0;  // counted among covered rounds only
  std::int64_t episodes_total = 0;
  std::int64_t episodes_succeeded = 0;  // last endorsement correct
};

struct Estimate {
  double value = 0;
  double ci_low = 0;
  double ci_high = 0;
  std::int64_t successes = 0;
  std::int64_t trials = 0;
};

inline void to_json(nlohmann::json& j, const Estimate& e) {
  j = nlohmann::json{{"value", e.value},
                     {"ci_low", e.ci_low},
                     {"ci_high", e.ci_high},
                     {"successes", e.successes},
                     {"trials", e.trials}};
}

inline constexpr double kZ95 = 1.959963984540054;

// Wilson score interval for a binomial proportion.
inline Estimate wilson(std::int64_t successes, std::int64_t trials, double z = kZ95) {
  if (trials <= 0) throw Error("wilson: no trials");
  Estimate e;
  e.successes = successes;
  e.trials = trials;
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  e.value = p;
  const double z2 = z * z;
  const double centre = (p + z2 / (2 * n)) / (1 + z2 / n);
  const double half = z * std::sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / (1 + z2 / n);
  e.ci_low = std::max(0.0, centre - half);
  e.ci_high = std::min(1.0, centre + half);
  return e;
}

inline std::vector<RoundOutcome> round_outcomes(const EpisodeTrace& trace) {
  if (!trace.question.gold_answer)
    throw Error("metrics need a gold answer (question '" + trace.question.id + "')");
  std::vector<RoundOutcome> out;
  for (const auto& r : trace.rounds) {
    RoundOutcome o;
    for (const auto& c : r.slate.candidates) o.covered = o.covered || is_correct(c, trace.question);
    const auto idx = static_cast<std::size_t>(r.broadcast.chosen_flat_index);
    o.identified = idx < r.slate.size() && is_correct(r.slate.candidates[idx], trace.question);
    out.push_back(o);
  }
  return out;
}

inline std::vector<RoundOutcome> round_outcomes(std::span<const EpisodeTrace> traces) {
  std::vector<RoundOutcome> out;
  for (const auto& t : traces) {
    auto o = round_outcomes(t);
    out.insert(out.end(), o.begin(), o.end());
  }
  return out;
}

inline bool episode_succeeded(const EpisodeTrace& trace) {
  if (!trace.question.gold_answer)
    throw Error("metrics need a gold answer (question '" + trace.question.id + "')");
  return !trace.rounds.empty() && answers_match(trace.final_answer(), *trace.question.gold_answer);
}

inline RoundStats collect_stats(std::span<const EpisodeTrace> traces) {
  RoundStats s;
  for (const auto& t : traces) {
    for (const auto& o : round_outcomes(t)) {
      ++s.rounds_total;
      if (o.covered) {
        ++s.rounds_covered;
        if (o.identified) ++s.rounds_identified;
      }
    }
    ++s.episodes_total;
    if (episode_succeeded(t)) ++s.episodes_succeeded;
  }
  return s;
}

inline Estimate estimate_coverage(std::span<const RoundOutcome> rounds) {
  if (rounds.empty()) throw Error("estimate_coverage: no rounds");
  const auto covered = std::count_if(rounds.begin(), rounds.end(), [](const RoundOutcome& o) { return o.covered; });
  return wilson(covered, static_cast<std::int64_t>(rounds.size()));
}

// Identification conditions on coverage: uncovered rounds are ignored.
inline Estimate estimate_identification(std::span<const RoundOutcome> rounds) {
  std::int64_t covered = 0, identified = 0;
  for (const auto& o : rounds) {
    if (!o.covered) continue;
    ++covered;
    if (o.identified) ++identified;
  }
  if (covered == 0) throw Error("estimate_identification: no covered rounds");
  return wilson(identified, covered);
}

inline Estimate estimate_coverage(std::span<const EpisodeTrace> traces) {
  if (traces.empty()) throw Error("estimate_coverage: empty trace set");
  return estimate_coverage(round_outcomes(traces));
}

inline Estimate estimate_identification(std::span<const EpisodeTrace> traces) {
  if (traces.empty()) throw Error("estimate_identification: empty trace set");
  return estimate_identification(round_outcomes(traces));
}

inline Estimate estimate_accuracy(std::span<const EpisodeTrace> traces) {
  if (traces.empty()) throw Error("estimate_accuracy: empty trace set");
  std::int64_t ok = 0;
  for (const auto& t : traces) ok += episode_succeeded(t) ? 1 : 0;
  return wilson(ok, static_cast<std::int64_t>(traces.size()));
}

// 1 - (1 - p q)^R
inline double reliability_lower_bound(double p_floor, double q_floor, int R) {
  if (!(p_floor >= 0 && p_floor <= 1) || !(q_floor >= 0 && q_floor <= 1))
    throw Error("reliability_lower_bound: p and q must lie in [0,1]");
  if (R < 1) throw Error("reliability_lower_bound: R must be >= 1");
  return 1.0 - std::pow(1.0 - p_floor * q_floor, R);
}

// Smallest R with R >= ln(1/delta) / (p q), at least 1.
inline int required_rounds_pq(double pq, double delta) {
  if (!(pq > 0 && pq <= 1)) throw Error("required_rounds: p*q must lie in (0,1]; no finite R otherwise");
  if (!(delta > 0 && delta < 1)) throw Error("required_rounds: delta must lie in (0,1)");
  const double r = std::ceil(std::log(1.0 / delta) / pq);
  return std::max(1, static_cast<int>(r));
}

inline int required_rounds(double p_floor, double q_floor, double delta) {
  if (!(p_floor >= 0 && p_floor <= 1) || !(q_floor >= 0 && q_floor <= 1))
    throw Error("required_rounds: p and q must lie in [0,1]");
  return required_rounds_pq(p_floor * q_floor, delta);
}

// Per-round (coverage, identification) rates given the round index (1-based)
// and the success flags of earlier rounds.
using RateFn = std::function<std::pair<double, double>(int round, const std::vector<bool>& history)>;

struct SimulationResult {
  std::int64_t episodes = 0;
  std::int64_t successes = 0;
  double rate = 0;
  Estimate ci;
};

struct SimulationOptions {
  double p_floor = 0;  // rates below the floors are rejected
  double q_floor = 0;
  unsigned threads = 0;  // 0: hardware concurrency
};

// Episodes of up to R rounds; each round is covered with probability p_t and,
// if covered, identified with probability q_t. An episode succeeds when any
// round is both covered and identified. Per-episode streams are derived from
// (seed, episode index), so the result does not depend on thread count.
inline SimulationResult simulate_protocol(const RateFn& rates, int R, std::int64_t episodes,
                                          std::uint64_t seed, const SimulationOptions& opt = {}) {
  if (R < 1) throw Error("simulate_protocol: R must be >= 1");
  if (episodes < 1) throw Error("simulate_protocol: need at least one episode");
  unsigned threads = opt.threads ? opt.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::int64_t>(threads, episodes));

  std::vector<std::int64_t> wins(threads, 0);
  std::vector<std::exception_ptr> errors(threads);
  auto worker = [&](unsigned tid) {
    try {
      std::vector<bool> history;
      for (std::int64_t e = tid; e < episodes; e += threads) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(e)));
        history.clear();
        for (int t = 1; t <= R; ++t) {
          const auto [p, q] = rates(t, history);
          if (!(p >= opt.p_floor && p <= 1) || !(q >= opt.q_floor && q <= 1))
            throw Error("simulate_protocol: round rates violate the floors or [0,1]");
          const bool covered = rng.bernoulli(p);
          const bool success = covered && rng.bernoulli(q);
          history.push_back(success);
          if (success) {
            ++wins[tid];
            break;
          }
        }
      }
    } catch (...) {
      errors[tid] = std::current_exception();
    }
  };
  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker, t);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  SimulationResult r;
  r.episodes = episodes;
  for (auto w : wins) r.successes += w;
  r.rate = static_cast<double>(r.successes) / static_cast<double>(episodes);
  r.ci = wilson(r.successes, episodes);
  return r;
}

inline SimulationResult simulate_protocol(double p, double q, int R, std::int64_t episodes,
                                          std::uint64_t seed, unsigned threads = 0) {
  return simulate_protocol([p, q](int, const std::vector<bool>&) { return std::pair{p, q}; }, R,
                           episodes, seed, SimulationOptions{p, q, threads});
}

// Round-indexed rate sequences (length >= R), checked against the floors.
inline SimulationResult simulate_protocol(std::vector<double> p_seq, std::vector<double> q_seq,
                                          int R, std::int64_t episodes, std::uint64_t seed,
                                          double p_floor, double q_floor) {
  if (static_cast<int>(p_seq.size()) < R || static_cast<int>(q_seq.size()) < R)
    throw Error("simulate_protocol: rate sequences shorter than R");
  return simulate_protocol(
      [p_seq = std::move(p_seq), q_seq = std::move(q_seq)](int t, const std::vector<bool>&) {
        return std::pair{p_seq[static_cast<std::size_t>(t - 1)], q_seq[static_cast<std::size_t>(t - 1)]};
      },
      R, episodes, seed, SimulationOptions{p_floor, q_floor, 0});
}

// Binomial standard deviation of an empirical rate around `p` over n trials.
inline double binomial_sigma(double p, std::int64_t n) {
  return std::sqrt(p * (1 - p) / static_cast<double>(n));
}

struct MetricsReport {
  Estimate coverage;
  Estimate identification;
  Estimate accuracy;
  int rounds_budget = 1;
  double bound = 0;  // reliability bound evaluated at the empirical coverage / identification
};

inline MetricsReport metrics_report(std::span<const EpisodeTrace> traces, int R) {
  MetricsReport m;
  const auto outcomes = round_outcomes(traces);
  m.coverage = estimate_coverage(outcomes);
  const bool any_covered = std::any_of(outcomes.begin(), outcomes.end(), [](const RoundOutcome& o) { return o.covered; });
  if (any_covered) m.identification = estimate_identification(outcomes);
  m.accuracy = estimate_accuracy(traces);
  m.rounds_budget = R;
  m.bound = reliability_lower_bound(m.coverage.value, any_covered ? m.identification.value : 0.0, R);
  return m;
}

inline void to_json(nlohmann::json& j, const MetricsReport& m) {
  j = nlohmann::json{{"coverage", m.coverage.value},
                     {"coverage_ci", {m.coverage.ci_low, m.coverage.ci_high}},
                     {"identification", m.identification.value},
                     {"identification_ci", {m.identification.ci_low, m.identification.ci_high}},
                     {"accuracy", m.accuracy.value},
                     {"accuracy_ci", {m.accuracy.ci_low, m.accuracy.ci_high}},
                     {"rounds_budget", m.rounds_budget},
                     {"bound", m.bound},
                     {"rounds_total", m.coverage.trials},
                     {"rounds_covered", m.coverage.successes},
                     {"rounds_identified", m.identification.successes},
                     {"episodes", m.accuracy.trials}};
}

}  // namespace maestro::reliability
