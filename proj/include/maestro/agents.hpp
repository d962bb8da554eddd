#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "maestro/chat_client.hpp"
#include "maestro/core.hpp"
#include "maestro/prompts.hpp"
#include "maestro/reward.hpp"
#include "maestro/rng.hpp"

namespace maestro {

enum class AgentBackendKind { simulated, endpoint };

NLOHMANN_JSON_SERIALIZE_ENUM(AgentBackendKind, {{AgentBackendKind::simulated, "simulated"},
                                                {AgentBackendKind::endpoint, "endpoint"}})

// Feature layout of simulated candidates:
//   0     correctness latent + Gaussian noise
//   1     rationale length / max rationale length
//   2..4  agent one-hot (agents 0..2; later agents get all zeros)
//   5     fraction of the slate sharing this candidate's answer (set after the
//         slate is assembled, see annotate_agreement)
inline constexpr int kSimulatedFeatureDim = 6;
inline constexpr int kAgreementFeature = 5;

// Desk-scale stand-in for an execution LLM: candidate correctness is a
// Bernoulli draw whose rate depends on the prompt branch and on whether the
// previous broadcast was correct. Wrong candidates pick one of a fixed set of
// distractor answers derived from the gold answer.
struct SimulatedAgentSpec {
  double base_correct_prob = 0.3;
  double conditioned_correct_prob = 0.9;
  double conditioned_wrong_prob = 0.2;
  double feature_noise_scale = 0.1;
  std::pair<int, int> rationale_length_range{4, 12};
  int num_distractors = 4;
  int vocab_size = 16;
  int bos_token = 0;

  void validate() const {
    for (double p : {base_correct_prob, conditioned_correct_prob, conditioned_wrong_prob})
      if (!(p >= 0 && p <= 1)) throw Error("SimulatedAgentSpec: probabilities must lie in [0,1]");
    if (feature_noise_scale < 0) throw Error("SimulatedAgentSpec: negative noise scale");
    if (rationale_length_range.first < 1 ||
        rationale_length_range.second < rationale_length_range.first)
      throw Error("SimulatedAgentSpec: invalid rationale length range");
    if (num_distractors < 1) throw Error("SimulatedAgentSpec: need at least one distractor");
    if (vocab_size < 2 || bos_token < 0 || bos_token >= vocab_size)
      throw Error("SimulatedAgentSpec: invalid vocabulary");
  }
};

inline void to_json(nlohmann::json& j, const SimulatedAgentSpec& s) {
  j = nlohmann::json{{"base_correct_prob", s.base_correct_prob},
                     {"conditioned_correct_prob", s.conditioned_correct_prob},
                     {"conditioned_wrong_prob", s.conditioned_wrong_prob},
                     {"feature_noise_scale", s.feature_noise_scale},
                     {"rationale_length_range", {s.rationale_length_range.first, s.rationale_length_range.second}},
                     {"num_distractors", s.num_distractors},
                     {"vocab_size", s.vocab_size},
                     {"bos_token", s.bos_token}};
}

inline void from_json(const nlohmann::json& j, SimulatedAgentSpec& s) {
  SimulatedAgentSpec d;
  s.base_correct_prob = j.value("base_correct_prob", d.base_correct_prob);
  s.conditioned_correct_prob = j.value("conditioned_correct_prob", d.conditioned_correct_prob);
  s.conditioned_wrong_prob = j.value("conditioned_wrong_prob", d.conditioned_wrong_prob);
  s.feature_noise_scale = j.value("feature_noise_scale", d.feature_noise_scale);
  if (auto it = j.find("rationale_length_range"); it != j.end())
    s.rationale_length_range = {it->at(0).get<int>(), it->at(1).get<int>()};
  else
    s.rationale_length_range = d.rationale_length_range;
  s.num_distractors = j.value("num_distractors", d.num_distractors);
  s.vocab_size = j.value("vocab_size", d.vocab_size);
  s.bos_token = j.value("bos_token", d.bos_token);
}

struct AgentConfig {
  AgentBackendKind backend = AgentBackendKind::simulated;
  double epsilon = 0.1;
  int K = 3;
  std::uint64_t seed = 0;
  SimulatedAgentSpec simulated;
  EndpointSpec endpoint;

  void validate() const {
    if (!(epsilon >= 0 && epsilon <= 1)) throw Error("AgentConfig: epsilon must lie in [0,1]");
    if (K < 1) throw Error("AgentConfig: K must be >= 1");
    if (backend == AgentBackendKind::simulated) simulated.validate();
    if (backend == AgentBackendKind::endpoint) endpoint.validate();
  }
};

inline void to_json(nlohmann::json& j, const AgentConfig& a) {
  j = nlohmann::json{{"backend", a.backend},     {"epsilon", a.epsilon},
                     {"K", a.K},                 {"seed", a.seed},
                     {"simulated", a.simulated}, {"endpoint", a.endpoint}};
}

inline void from_json(const nlohmann::json& j, AgentConfig& a) {
  AgentConfig d;
  a.backend = j.value("backend", d.backend);
  a.epsilon = j.value("epsilon", d.epsilon);
  a.K = j.value("K", d.K);
  a.seed = j.value("seed", d.seed);
  a.simulated = j.contains("simulated") ? j.at("simulated").get<SimulatedAgentSpec>() : d.simulated;
  a.endpoint = j.contains("endpoint") ? j.at("endpoint").get<EndpointSpec>() : d.endpoint;
}

class AgentError : public Error {
 public:
  AgentError(int agent_index, const std::string& what)
      : Error("agent " + std::to_string(agent_index) + ": " + what), agent_index_(agent_index) {}
  int agent_index() const noexcept { return agent_index_; }

 private:
  int agent_index_;
};

// Per-sample dropout: the base (broadcast-agnostic) prompt with probability
// epsilon, otherwise the conditioned prompt. Consumes exactly one uniform draw.
inline PromptBranch mix_epsilon_greedy(Rng& rng, double epsilon) {
  return rng.uniform() < epsilon ? PromptBranch::use_base_prompt
                                 : PromptBranch::use_conditioned_prompt;
}

// Independent RNG stream for one candidate draw.
inline std::uint64_t candidate_stream_seed(std::uint64_t seed, const Question& q, int round_index,
                                           int agent_index, int sample_index) {
  return mix_seed(seed, fnv1a64(q.id), static_cast<std::uint64_t>(round_index),
                  static_cast<std::uint64_t>(agent_index), static_cast<std::uint64_t>(sample_index));
}

namespace simulated {

inline std::vector<std::string> distractors(const std::string& gold, int count) {
  std::vector<std::string> out;
  const auto norm = normalize_answer(gold);
  const auto r = detail::parse_rational(norm);
  if (r && r->den == 1) {
    const detail::Wide g = r->num;
    for (int j = 1; static_cast<int>(out.size()) < count; ++j) {
      const detail::Wide off = (j % 2 == 1) ? (j + 1) / 2 : -(j / 2);
      out.push_back(detail::wide_to_string(g + off));
    }
  } else {
    for (int j = 1; j <= count; ++j) out.push_back(norm + " (alt " + std::to_string(j) + ")");
  }
  return out;
}

// Probability that one candidate is correct under `branch`.
inline double correct_prob(const SimulatedAgentSpec& spec, const Question& q,
                           const std::optional<Broadcast>& prev, PromptBranch branch) {
  if (branch == PromptBranch::use_base_prompt || !prev) return spec.base_correct_prob;
  return answers_match(prev->final_answer, q.gold_answer.value_or(""))
             ? spec.conditioned_correct_prob
             : spec.conditioned_wrong_prob;
}

// Exact distribution over final answers for one branch.
inline std::map<std::string, double> outcome_distribution(const SimulatedAgentSpec& spec,
                                                          const Question& q,
                                                          const std::optional<Broadcast>& prev,
                                                          PromptBranch branch) {
  if (!q.gold_answer) throw Error("simulated agent: question '" + q.id + "' has no gold answer");
  const double p = correct_prob(spec, q, prev, branch);
  std::map<std::string, double> dist;
  dist[normalize_answer(*q.gold_answer)] += p;
  const auto wrong = distractors(*q.gold_answer, spec.num_distractors);
  for (const auto& w : wrong) dist[w] += (1.0 - p) / static_cast<double>(wrong.size());
  return dist;
}

// (1 - eps) * conditioned + eps * base, outcome by outcome.
inline std::map<std::string, double> mixture_distribution(const SimulatedAgentSpec& spec,
                                                          const Question& q,
                                                          const std::optional<Broadcast>& prev,
                                                          double epsilon) {
  auto cond = outcome_distribution(spec, q, prev, PromptBranch::use_conditioned_prompt);
  const auto base = outcome_distribution(spec, q, prev, PromptBranch::use_base_prompt);
  for (auto& [a, p] : cond) p *= (1.0 - epsilon);
  for (const auto& [a, p] : base) cond[a] += epsilon * p;
  return cond;
}

}  // namespace simulated

class AgentBackend {
 public:
  virtual ~AgentBackend() = default;
  // Exactly config.K candidates for `state.agent_index`, in sample order.
  virtual std::vector<Candidate> sample_candidates(const AgentState& state, const Question& q,
                                                   const std::optional<Broadcast>& prev,
                                                   int round_index,
                                                   const AgentConfig& config) const = 0;
};

class SimulatedAgent final : public AgentBackend {
 public:
  std::vector<Candidate> sample_candidates(const AgentState& state, const Question& q,
                                           const std::optional<Broadcast>& prev, int round_index,
                                           const AgentConfig& config) const override {
    const auto& spec = config.simulated;
    if (!q.gold_answer) throw AgentError(state.agent_index, "simulated backend needs a gold answer");
    const auto wrong = simulated::distractors(*q.gold_answer, spec.num_distractors);
    const auto gold = normalize_answer(*q.gold_answer);
    const int max_len = spec.rationale_length_range.second;

    std::vector<Candidate> out;
    out.reserve(static_cast<std::size_t>(config.K));
    for (int k = 0; k < config.K; ++k) {
      Rng rng(candidate_stream_seed(config.seed, q, round_index, state.agent_index, k));
      const auto branch = mix_epsilon_greedy(rng, config.epsilon);
      const bool correct = rng.bernoulli(simulated::correct_prob(spec, q, prev, branch));
      const std::string answer = correct ? gold : wrong[rng.below(wrong.size())];
      const int len = static_cast<int>(
          rng.between(spec.rationale_length_range.first, spec.rationale_length_range.second));

      Candidate c;
      c.agent_index = state.agent_index;
      c.sample_index = k;
      c.used_base_prompt = branch == PromptBranch::use_base_prompt;
      c.rationale_tokens.resize(static_cast<std::size_t>(len));
      for (auto& tok : c.rationale_tokens) {
        // every id except the reserved BOS
        auto t = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.vocab_size - 1)));
        tok = t >= spec.bos_token ? t + 1 : t;
      }
      c.features.assign(kSimulatedFeatureDim, 0.0);
      c.features[0] = (correct ? 1.0 : 0.0) + spec.feature_noise_scale * rng.normal();
      c.features[1] = static_cast<double>(len) / static_cast<double>(max_len);
      if (state.agent_index < 3) c.features[2 + state.agent_index] = 1.0;

      c.reasoning_text = "Agent " + std::to_string(state.agent_index + 1) + ", sample " +
                         std::to_string(k + 1) + " (" +
                         (c.used_base_prompt ? "base" : "conditioned") + " prompt, round " +
                         std::to_string(round_index) + "): worked through " + std::to_string(len) +
                         " steps. Therefore the answer is \\boxed{" + answer + "}.";
      c.final_answer = extract_final_answer(c.reasoning_text).value_or("");
      out.push_back(std::move(c));
    }
    return out;
  }
};

class EndpointAgent final : public AgentBackend {
 public:
  explicit EndpointAgent(std::shared_ptr<const HttpTransport> transport = std::make_shared<HttplibTransport>(),
                         Sleeper sleeper = real_sleep)
      : transport_(std::move(transport)), sleeper_(std::move(sleeper)) {}

  std::vector<Candidate> sample_candidates(const AgentState& state, const Question& q,
                                           const std::optional<Broadcast>& prev, int round_index,
                                           const AgentConfig& config) const override {
    ChatClient client(config.endpoint, transport_, sleeper_);
    std::vector<Candidate> out;
    out.reserve(static_cast<std::size_t>(config.K));
    for (int k = 0; k < config.K; ++k) {
      Rng rng(candidate_stream_seed(config.seed, q, round_index, state.agent_index, k));
      const auto branch = mix_epsilon_greedy(rng, config.epsilon);
      const auto prompt = render_prompt(q, state, prev, round_index, branch);
      Candidate c;
      c.agent_index = state.agent_index;
      c.sample_index = k;
      c.used_base_prompt = branch == PromptBranch::use_base_prompt;
      try {
        c.reasoning_text = client.complete({{"user", prompt}}, config.endpoint.temperature);
      } catch (const TransportError& e) {
        throw AgentError(state.agent_index, e.what());
      }
      c.final_answer = extract_final_answer(c.reasoning_text).value_or("");
      out.push_back(std::move(c));
    }
    return out;
  }

 private:
  std::shared_ptr<const HttpTransport> transport_;
  Sleeper sleeper_;
};

inline std::shared_ptr<const AgentBackend> make_agent_backend(
    const AgentConfig& config,
    std::shared_ptr<const HttpTransport> transport = std::make_shared<HttplibTransport>()) {
  if (config.backend == AgentBackendKind::endpoint)
    return std::make_shared<EndpointAgent>(std::move(transport));
  return std::make_shared<SimulatedAgent>();
}

inline std::vector<Candidate> sample_candidates(const AgentState& state, const Question& q,
                                                const std::optional<Broadcast>& prev,
                                                int round_index, const AgentConfig& config) {
  config.validate();
  return make_agent_backend(config)->sample_candidates(state, q, prev, round_index, config);
}

// Fills the agreement feature once the full slate is known.
inline void annotate_agreement(Slate& slate) {
  std::map<std::string, int> counts;
  for (const auto& c : slate.candidates) ++counts[normalize_answer(c.final_answer)];
  const double n = static_cast<double>(slate.size());
  for (auto& c : slate.candidates) {
    if (static_cast<int>(c.features.size()) != kSimulatedFeatureDim) continue;
    c.features[kAgreementFeature] = counts[normalize_answer(c.final_answer)] / n;
  }
}

}  // namespace maestro
