#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace maestro {

// Base for every error this library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kDefaultJustificationBudget = 256;

struct Question {
  std::string id;
  std::string text;
  std::optional<std::string> gold_answer;  // normalized; absent in inference mode

  friend bool operator==(const Question&, const Question&) = default;
};

struct Candidate {
  int agent_index = 0;
  int sample_index = 0;
  std::string reasoning_text;
  std::string final_answer;  // empty when extraction failed
  std::vector<int> rationale_tokens;
  std::vector<double> features;
  std::optional<double> reward;
  bool used_base_prompt = false;

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

// Candidates of one round, ordered by (agent_index, sample_index).
struct Slate {
  int round_index = 1;
  std::vector<Candidate> candidates;

  std::size_t size() const noexcept { return candidates.size(); }
  friend bool operator==(const Slate&, const Slate&) = default;
};

struct Broadcast {
  int round_index = 1;
  int chosen_flat_index = 0;
  std::string final_answer;
  std::string justification;

  friend bool operator==(const Broadcast&, const Broadcast&) = default;
};

struct AgentState {
  int agent_index = 0;
  std::vector<Candidate> private_history;  // own K candidates of the previous round

  friend bool operator==(const AgentState&, const AgentState&) = default;
};

enum class TerminationReason { max_rounds, stopping_rule };

struct RoundRecord {
  Slate slate;
  Broadcast broadcast;
  std::vector<double> rewards;  // empty when the question has no gold answer
  int conditioned_on_round = 0;  // round whose broadcast the agents saw (0 = none)
  bool selector_fallback = false;

  friend bool operator==(const RoundRecord&, const RoundRecord&) = default;
};

struct EpisodeTrace {
  Question question;
  std::vector<RoundRecord> rounds;
  TerminationReason terminated_reason = TerminationReason::max_rounds;

  // The episode's answer is the endorsement at termination.
  const std::string& final_answer() const {
    if (rounds.empty()) throw Error("EpisodeTrace::final_answer: no completed rounds");
    return rounds.back().broadcast.final_answer;
  }
  friend bool operator==(const EpisodeTrace&, const EpisodeTrace&) = default;
};

inline int flat_index(int agent_index, int sample_index, int K, int N = -1) {
  if (K < 1) throw Error("flat_index: K must be >= 1");
  if (agent_index < 0 || (N >= 0 && agent_index >= N))
    throw Error("flat_index: agent index out of range");
  if (sample_index < 0 || sample_index >= K) throw Error("flat_index: sample index out of range");
  return agent_index * K + sample_index;
}

inline std::pair<int, int> unflatten(int flat, int K) {
  if (K < 1) throw Error("unflatten: K must be >= 1");
  if (flat < 0) throw Error("unflatten: negative index");
  return {flat / K, flat % K};
}

// Returns the list of violated slate invariants; empty means well-formed.
inline std::vector<std::string> validate_slate(const Slate& slate, int N, int K) {
  std::vector<std::string> violations;
  if (slate.round_index < 1) violations.emplace_back("round index must be positive");
  if (N < 1 || K < 1) {
    violations.emplace_back("slate shape must have N >= 1 and K >= 1");
    return violations;
  }
  std::vector<int> seen(static_cast<std::size_t>(N) * K, 0);
  int prev = -1;
  bool sorted = true;
  for (const auto& c : slate.candidates) {
    if (c.agent_index < 0 || c.agent_index >= N || c.sample_index < 0 || c.sample_index >= K) {
      violations.push_back("position out of range (" + std::to_string(c.agent_index) + "," +
                           std::to_string(c.sample_index) + ")");
      continue;
    }
    const int f = c.agent_index * K + c.sample_index;
    if (f <= prev) sorted = false;
    prev = f;
    if (++seen[f] == 2)
      violations.push_back("duplicate position (" + std::to_string(c.agent_index) + "," +
                           std::to_string(c.sample_index) + ")");
  }
  for (int f = 0; f < N * K; ++f) {
    if (seen[f] == 0)
      violations.push_back("missing position (" + std::to_string(f / K) + "," +
                           std::to_string(f % K) + ")");
  }
  if (!sorted) violations.emplace_back("candidates not ordered by (agent, sample)");
  return violations;
}

// Cuts `text` to at most `budget` bytes without splitting a UTF-8 sequence.
inline std::string truncate_utf8(const std::string& text, std::size_t budget) {
  if (text.size() <= budget) return text;
  std::size_t cut = budget;
  while (cut > 0 && (static_cast<unsigned char>(text[cut]) & 0xC0) == 0x80) --cut;
  return text.substr(0, cut);
}

// ---- JSON schema -----------------------------------------------------------

inline void to_json(nlohmann::json& j, const Question& q) {
  j = nlohmann::json{{"id", q.id}, {"text", q.text}};
  if (q.gold_answer) j["gold_answer"] = *q.gold_answer;
}

inline void from_json(const nlohmann::json& j, Question& q) {
  j.at("id").get_to(q.id);
  j.at("text").get_to(q.text);
  if (auto it = j.find("gold_answer"); it != j.end() && !it->is_null())
    q.gold_answer = it->get<std::string>();
  else
    q.gold_answer.reset();
  if (q.id.empty()) throw Error("Question: empty id");
}

inline void to_json(nlohmann::json& j, const Candidate& c) {
  j = nlohmann::json{{"agent", c.agent_index},
                     {"sample", c.sample_index},
                     {"reasoning", c.reasoning_text},
                     {"answer", c.final_answer},
                     {"tokens", c.rationale_tokens},
                     {"features", c.features},
                     {"base_prompt", c.used_base_prompt}};
  if (c.reward) j["reward"] = *c.reward;
}

inline void from_json(const nlohmann::json& j, Candidate& c) {
  j.at("agent").get_to(c.agent_index);
  j.at("sample").get_to(c.sample_index);
  j.at("reasoning").get_to(c.reasoning_text);
  j.at("answer").get_to(c.final_answer);
  j.at("tokens").get_to(c.rationale_tokens);
  j.at("features").get_to(c.features);
  c.used_base_prompt = j.value("base_prompt", false);
  if (auto it = j.find("reward"); it != j.end() && !it->is_null())
    c.reward = it->get<double>();
  else
    c.reward.reset();
}

inline void to_json(nlohmann::json& j, const Slate& s) {
  j = nlohmann::json{{"round", s.round_index}, {"candidates", s.candidates}};
}

inline void from_json(const nlohmann::json& j, Slate& s) {
  j.at("round").get_to(s.round_index);
  j.at("candidates").get_to(s.candidates);
}

inline void to_json(nlohmann::json& j, const Broadcast& b) {
  j = nlohmann::json{{"round", b.round_index},
                     {"chosen", b.chosen_flat_index},
                     {"final_answer", b.final_answer},
                     {"justification", b.justification}};
}

inline void from_json(const nlohmann::json& j, Broadcast& b) {
  j.at("round").get_to(b.round_index);
  j.at("chosen").get_to(b.chosen_flat_index);
  j.at("final_answer").get_to(b.final_answer);
  j.at("justification").get_to(b.justification);
}

inline void to_json(nlohmann::json& j, const AgentState& a) {
  j = nlohmann::json{{"agent", a.agent_index}, {"history", a.private_history}};
}

inline void from_json(const nlohmann::json& j, AgentState& a) {
  j.at("agent").get_to(a.agent_index);
  j.at("history").get_to(a.private_history);
}

NLOHMANN_JSON_SERIALIZE_ENUM(TerminationReason, {{TerminationReason::max_rounds, "max_rounds"},
                                                 {TerminationReason::stopping_rule, "stopping_rule"}})

inline void to_json(nlohmann::json& j, const RoundRecord& r) {
  j = nlohmann::json{{"slate", r.slate},
                     {"broadcast", r.broadcast},
                     {"rewards", r.rewards},
                     {"conditioned_on_round", r.conditioned_on_round},
                     {"selector_fallback", r.selector_fallback}};
}

inline void from_json(const nlohmann::json& j, RoundRecord& r) {
  j.at("slate").get_to(r.slate);
  j.at("broadcast").get_to(r.broadcast);
  j.at("rewards").get_to(r.rewards);
  j.at("conditioned_on_round").get_to(r.conditioned_on_round);
  r.selector_fallback = j.value("selector_fallback", false);
}

inline void to_json(nlohmann::json& j, const EpisodeTrace& t) {
  j = nlohmann::json{
      {"question", t.question}, {"rounds", t.rounds}, {"terminated_reason", t.terminated_reason}};
}

inline void from_json(const nlohmann::json& j, EpisodeTrace& t) {
  j.at("question").get_to(t.question);
  j.at("rounds").get_to(t.rounds);
  j.at("terminated_reason").get_to(t.terminated_reason);
}

// Structural checks on a whole trace: contiguous round numbering from 1 and a
// broadcast that addresses a slate position in every round.
inline std::vector<std::string> validate_trace(const EpisodeTrace& trace, int N, int K) {
  std::vector<std::string> violations;
  if (trace.question.id.empty()) violations.emplace_back("question id empty");
  for (std::size_t t = 0; t < trace.rounds.size(); ++t) {
    const auto& r = trace.rounds[t];
    const int expected = static_cast<int>(t) + 1;
    const std::string tag = "round " + std::to_string(expected) + ": ";
    if (r.slate.round_index != expected) violations.push_back(tag + "slate round index mismatch");
    if (r.broadcast.round_index != expected)
      violations.push_back(tag + "broadcast round index mismatch");
    for (auto& v : validate_slate(r.slate, N, K)) violations.push_back(tag + v);
    if (r.broadcast.chosen_flat_index < 0 ||
        r.broadcast.chosen_flat_index >= static_cast<int>(r.slate.size()))
      violations.push_back(tag + "broadcast index out of range");
    if (!r.rewards.empty() && r.rewards.size() != r.slate.size())
      violations.push_back(tag + "reward vector length mismatch");
  }
  return violations;
}

}  // namespace maestro
