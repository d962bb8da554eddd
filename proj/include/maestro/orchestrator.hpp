#pragma once

#include <cstdint>
#include <functional>
#include <future>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "maestro/agents.hpp"
#include "maestro/core.hpp"
#include "maestro/reward.hpp"
#include "maestro/rng.hpp"
#include "maestro/selector.hpp"

namespace maestro {

struct StoppingRule {
  enum class Kind { fixed_rounds, stable_broadcast };
  Kind kind = Kind::fixed_rounds;
  int window = 2;  // stable_broadcast only

  static StoppingRule fixed() { return {}; }
  static StoppingRule stable(int window) { return {Kind::stable_broadcast, window}; }
};

NLOHMANN_JSON_SERIALIZE_ENUM(StoppingRule::Kind, {{StoppingRule::Kind::fixed_rounds, "fixed_rounds"},
                                                  {StoppingRule::Kind::stable_broadcast, "stable_broadcast"}})

struct ProtocolConfig {
  int N = 3;
  int K = 3;
  int R = 3;
  StoppingRule stopping_rule;
  double epsilon = 0.1;
  std::size_t justification_budget = kDefaultJustificationBudget;
  bool include_justification = true;
  bool parallel_agents = true;
  RewardConfig reward;

  void validate() const {
    if (N < 1 || K < 1 || R < 1) throw Error("ProtocolConfig: N, K and R must be >= 1");
    if (stopping_rule.kind == StoppingRule::Kind::stable_broadcast && stopping_rule.window < 2)
      throw Error("ProtocolConfig: stable_broadcast window must be >= 2");
    if (!(epsilon >= 0 && epsilon <= 1)) throw Error("ProtocolConfig: epsilon must lie in [0,1]");
  }
};

inline void to_json(nlohmann::json& j, const ProtocolConfig& c) {
  j = nlohmann::json{{"N", c.N},
                     {"K", c.K},
                     {"R", c.R},
                     {"stopping_rule", c.stopping_rule.kind},
                     {"window", c.stopping_rule.window},
                     {"epsilon", c.epsilon},
                     {"justification_budget", c.justification_budget},
                     {"include_justification", c.include_justification}};
}

inline void from_json(const nlohmann::json& j, ProtocolConfig& c) {
  ProtocolConfig d;
  c.N = j.value("N", d.N);
  c.K = j.value("K", d.K);
  c.R = j.value("R", d.R);
  c.stopping_rule.kind = j.value("stopping_rule", d.stopping_rule.kind);
  c.stopping_rule.window = j.value("window", d.stopping_rule.window);
  c.epsilon = j.value("epsilon", d.epsilon);
  c.justification_budget = j.value("justification_budget", d.justification_budget);
  c.include_justification = j.value("include_justification", d.include_justification);
}

// One execution agent: its configuration and the backend that samples for it.
struct Agent {
  AgentConfig config;
  std::shared_ptr<const AgentBackend> backend;
};

struct RoundResult {
  RoundRecord record;
  std::vector<AgentState> next_states;
};

// Divergence (agents sample K candidates each, concurrently), convergence (the
// selector endorses one candidate of the full slate) and broadcast. Either the
// whole round completes or an exception propagates; nothing partial escapes.
inline RoundResult run_round(const Question& question, const std::vector<AgentState>& agent_states,
                             const std::optional<Broadcast>& prev_broadcast, const Selector& selector,
                             const ProtocolConfig& config, const std::vector<Agent>& agents,
                             int round_index, std::uint64_t seed) {
  config.validate();
  if (static_cast<int>(agent_states.size()) != config.N || static_cast<int>(agents.size()) != config.N)
    throw Error("run_round: expected " + std::to_string(config.N) + " agents");
  if (round_index == 1 && prev_broadcast) throw Error("run_round: round 1 cannot have a broadcast");

  auto sample = [&](int i) {
    const auto& agent = agents[static_cast<std::size_t>(i)];
    auto cands = agent.backend->sample_candidates(agent_states[static_cast<std::size_t>(i)], question,
                                                  prev_broadcast, round_index, agent.config);
    if (static_cast<int>(cands.size()) != config.K)
      throw AgentError(i, "returned " + std::to_string(cands.size()) + " candidates, expected " +
                              std::to_string(config.K));
    return cands;
  };

  std::vector<std::vector<Candidate>> per_agent(static_cast<std::size_t>(config.N));
  if (config.parallel_agents && config.N > 1) {
    std::vector<std::future<std::vector<Candidate>>> futures;
    for (int i = 0; i < config.N; ++i) futures.push_back(std::async(std::launch::async, sample, i));
    std::exception_ptr first_error;
    for (int i = 0; i < config.N; ++i) {
      try {
        per_agent[static_cast<std::size_t>(i)] = futures[static_cast<std::size_t>(i)].get();
      } catch (...) {
        if (!first_error) first_error = std::current_exception();
      }
    }
    if (first_error) std::rethrow_exception(first_error);
  } else {
    for (int i = 0; i < config.N; ++i) per_agent[static_cast<std::size_t>(i)] = sample(i);
  }

  RoundResult out;
  auto& rec = out.record;
  rec.slate.round_index = round_index;
  for (auto& cands : per_agent)
    for (auto& c : cands) rec.slate.candidates.push_back(std::move(c));
  annotate_agreement(rec.slate);
  if (auto v = validate_slate(rec.slate, config.N, config.K); !v.empty())
    throw Error("run_round: malformed slate: " + v.front());

  Rng selector_rng(mix_seed(seed, fnv1a64(question.id), static_cast<std::uint64_t>(round_index), 0x5e1ec7ULL));
  const auto decision = selector.select(question, rec.slate, selector_rng);
  if (decision.chosen_flat_index < 0 || decision.chosen_flat_index >= static_cast<int>(rec.slate.size()))
    throw Error("run_round: selector chose an index outside the slate");

  rec.broadcast.round_index = round_index;
  rec.broadcast.chosen_flat_index = decision.chosen_flat_index;
  rec.broadcast.final_answer = decision.final_answer;
  if (config.include_justification)
    rec.broadcast.justification = truncate_utf8(decision.reason_text, config.justification_budget);
  rec.conditioned_on_round = prev_broadcast ? prev_broadcast->round_index : 0;
  rec.selector_fallback = decision.fallback;

  if (question.gold_answer) {
    auto scored = candidate_rewards(rec.slate, question, config.reward);
    for (std::size_t k = 0; k < rec.slate.size(); ++k) rec.slate.candidates[k].reward = scored.rewards[k];
    rec.rewards = std::move(scored.rewards);
  }

  out.next_states.resize(static_cast<std::size_t>(config.N));
  for (int i = 0; i < config.N; ++i) {
    auto& st = out.next_states[static_cast<std::size_t>(i)];
    st.agent_index = i;
    const auto first = rec.slate.candidates.begin() + static_cast<std::ptrdiff_t>(i) * config.K;
    st.private_history.assign(first, first + config.K);
  }
  return out;
}

inline bool stopping_rule_fired(const EpisodeTrace& trace, const ProtocolConfig& config) {
  if (config.stopping_rule.kind != StoppingRule::Kind::stable_broadcast) return false;
  const auto w = static_cast<std::size_t>(config.stopping_rule.window);
  if (trace.rounds.size() < w) return false;
  const auto last = normalize_answer(trace.rounds.back().broadcast.final_answer);
  for (std::size_t i = trace.rounds.size() - w; i < trace.rounds.size(); ++i)
    if (normalize_answer(trace.rounds[i].broadcast.final_answer) != last) return false;
  return true;
}

// True iff the round budget is spent or, under stable_broadcast, the last
// `window` broadcasts carry the same normalized answer.
inline bool should_stop(const EpisodeTrace& trace, const ProtocolConfig& config) {
  if (trace.rounds.empty()) throw Error("should_stop: no completed rounds");
  if (static_cast<int>(trace.rounds.size()) >= config.R) return true;
  return stopping_rule_fired(trace, config);
}

class EpisodeError : public Error {
 public:
  EpisodeError(const std::string& what, EpisodeTrace partial)
      : Error(what), partial_(std::move(partial)) {}
  const EpisodeTrace& partial_trace() const noexcept { return partial_; }

 private:
  EpisodeTrace partial_;
};

using RoundCallback = std::function<void(const RoundRecord&)>;

inline EpisodeTrace run_episode(const Question& question, const Selector& selector,
                                const ProtocolConfig& config, const std::vector<Agent>& agents,
                                std::uint64_t seed, const RoundCallback& on_round = {}) {
  config.validate();
  EpisodeTrace trace;
  trace.question = question;
  std::vector<AgentState> states(static_cast<std::size_t>(config.N));
  for (int i = 0; i < config.N; ++i) states[static_cast<std::size_t>(i)].agent_index = i;
  std::optional<Broadcast> prev;

  for (int t = 1; t <= config.R; ++t) {
    RoundResult round;
    try {
      round = run_round(question, states, prev, selector, config, agents, t, seed);
    } catch (const std::exception& e) {
      throw EpisodeError("question '" + question.id + "', round " + std::to_string(t) + ": " + e.what(),
                         trace);
    }
    trace.rounds.push_back(round.record);
    if (on_round) on_round(trace.rounds.back());
    prev = round.record.broadcast;
    states = std::move(round.next_states);
    if (stopping_rule_fired(trace, config)) {
      trace.terminated_reason = TerminationReason::stopping_rule;
      return trace;
    }
  }
  trace.terminated_reason = TerminationReason::max_rounds;
  return trace;
}

inline std::vector<Agent> make_agents(const ProtocolConfig& protocol, std::vector<AgentConfig> configs,
                                      std::shared_ptr<const HttpTransport> transport = std::make_shared<HttplibTransport>()) {
  if (static_cast<int>(configs.size()) != protocol.N)
    throw Error("make_agents: need exactly N agent configurations");
  std::vector<Agent> agents;
  for (auto& c : configs) {
    c.K = protocol.K;
    c.validate();
    auto backend = make_agent_backend(c, transport);
    agents.push_back({std::move(c), std::move(backend)});
  }
  return agents;
}

}  // namespace maestro
