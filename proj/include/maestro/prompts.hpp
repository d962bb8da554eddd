#pragma once

#include <optional>
#include <string>

#include "maestro/core.hpp"

namespace maestro {

enum class PromptBranch { use_base_prompt, use_conditioned_prompt };

namespace prompts {

// Agent ids and candidate ids are 1-based in every rendered prompt.

inline std::string initial_round(int agent_index, const Question& q) {
  std::string s;
  s += "You are Reasoning Agent #" + std::to_string(agent_index + 1) + ".\n";
  s += "Your task is to carefully solve the given math problem step by step.\n";
  s += "Clearly show your reasoning process, making sure that each transformation is logically "
       "valid.\n";
  s += "Avoid skipping important intermediate steps.\n";
  s += "\n";
  s += "At the end of your reasoning, provide the final numeric answer in the exact format: "
       "\\boxed{...}.\n";
  s += "\n";
  s += "Problem: " + q.text + "\n";
  return s;
}

inline std::string arbiter_feedback(const Broadcast& b) {
  std::string s;
  if (!b.justification.empty()) s += "Reason: " + b.justification + "\n";
  s += "Chosen: " + std::to_string(b.chosen_flat_index + 1) + "\n";
  s += "Final: \\boxed{" + b.final_answer + "}";
  return s;
}

inline std::string previous_solutions(const AgentState& state) {
  std::string s;
  for (std::size_t k = 0; k < state.private_history.size(); ++k) {
    s += "\n[Solution " + std::to_string(k + 1) + "]\n";
    s += state.private_history[k].reasoning_text;
  }
  return s;
}

inline std::string interactive_round(const AgentState& state, const Question& q,
                                     const Broadcast& feedback) {
  std::string s;
  s += "You are Reasoning Agent #" + std::to_string(state.agent_index + 1) + ".\n";
  s += "You previously proposed multiple solutions and now also receive the Center Arbiter's "
       "synthesis.\n";
  s += "\n";
  s += "Re-evaluate the problem carefully, considering both your earlier solutions and the "
       "Arbiter's feedback.\n";
  s += "Generate refined solutions that correct any mistakes if needed, ensuring logical "
       "consistency.\n";
  s += "\n";
  s += "Each output must end with the final numeric answer in the exact format: \\boxed{...}.\n";
  s += "\n";
  s += "Problem: " + q.text + "\n";
  s += "Your Previous Solutions: " + previous_solutions(state) + "\n";
  s += "Center Arbiter's Feedback: " + arbiter_feedback(feedback) + "\n";
  return s;
}

inline std::string arbiter(const Question& q, const Slate& slate) {
  std::string s;
  s += "You are the Center Arbiter, responsible for evaluating candidate solutions proposed by "
       "agents.\n";
  s += "Carefully read the original problem and all candidate solutions.\n";
  s += "Compare their reasoning, detect mistakes if present, and identify the most reliable "
       "candidate.\n";
  s += "\n";
  s += "Then, following the strict format below, provide a short justification, the chosen "
       "candidate index,\n";
  s += "and the final numeric answer in \\boxed{...}.\n";
  s += "\n";
  s += "Problem: " + q.text + "\n";
  s += "\n";
  s += "Candidates:\n";
  for (std::size_t k = 0; k < slate.size(); ++k)
    s += "- Candidate " + std::to_string(k + 1) + ": " + slate.candidates[k].reasoning_text + "\n";
  s += "\n";
  s += "STRICT OUTPUT FORMAT:\n";
  s += "Reason: {detailed justification}\n";
  s += "Chosen: {candidate_id}\n";
  s += "Final: \\boxed{...}\n";
  return s;
}

inline constexpr const char* kFormatReminder =
    "\nYour previous reply did not follow the STRICT OUTPUT FORMAT. Reply again with exactly "
    "three lines, in this order:\n"
    "Reason: {detailed justification}\n"
    "Chosen: {candidate_id}\n"
    "Final: \\boxed{...}\n";

}  // namespace prompts

// The base branch always renders the initial-round template: the base policy
// sees only the question. Round 1 has no broadcast, so both branches coincide.
inline std::string render_prompt(const Question& question, const AgentState& state,
                                 const std::optional<Broadcast>& prev_broadcast, int round_index,
                                 PromptBranch branch) {
  if (branch == PromptBranch::use_base_prompt || round_index <= 1 || !prev_broadcast)
    return prompts::initial_round(state.agent_index, question);
  return prompts::interactive_round(state, question, *prev_broadcast);
}

}  // namespace maestro
