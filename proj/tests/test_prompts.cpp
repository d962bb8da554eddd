#include <gtest/gtest.h>

#include "maestro/prompts.hpp"

using namespace maestro;

namespace {

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

}  // namespace

TEST(Prompts, InitialRoundNamesTheAgentAndProblem) {
  const Question q{"q", "What is 2+3?", "5"};
  const auto p = prompts::initial_round(0, q);
  EXPECT_TRUE(contains(p, "Reasoning Agent #1"));
  EXPECT_TRUE(contains(p, "Problem: What is 2+3?"));
  EXPECT_TRUE(contains(p, "\\boxed{...}"));
}

TEST(Prompts, InteractiveRoundCarriesHistoryAndFeedback) {
  const Question q{"q", "What is 2+3?", "5"};
  AgentState st;
  st.agent_index = 2;
  Candidate a, b;
  a.reasoning_text = "first try \\boxed{6}";
  b.reasoning_text = "second try \\boxed{5}";
  st.private_history = {a, b};
  const Broadcast fb{1, 4, "5", "candidate 5 adds correctly"};
  const auto p = prompts::interactive_round(st, q, fb);
  EXPECT_TRUE(contains(p, "Reasoning Agent #3"));
  EXPECT_TRUE(contains(p, "[Solution 1]\nfirst try \\boxed{6}"));
  EXPECT_TRUE(contains(p, "[Solution 2]\nsecond try \\boxed{5}"));
  EXPECT_TRUE(contains(p, "Center Arbiter's Feedback: Reason: candidate 5 adds correctly\nChosen: 5\nFinal: \\boxed{5}"));
}

TEST(Prompts, FeedbackOmitsEmptyJustification) {
  EXPECT_EQ(prompts::arbiter_feedback({2, 0, "7", ""}), "Chosen: 1\nFinal: \\boxed{7}");
}

TEST(Prompts, ArbiterListsCandidatesOneBased) {
  const Question q{"q", "P?", std::nullopt};
  Slate s;
  for (int k = 0; k < 3; ++k) {
    Candidate c;
    c.sample_index = k;
    c.reasoning_text = "sol" + std::to_string(k);
    s.candidates.push_back(c);
  }
  const auto p = prompts::arbiter(q, s);
  EXPECT_TRUE(contains(p, "- Candidate 1: sol0\n- Candidate 2: sol1\n- Candidate 3: sol2\n"));
  EXPECT_TRUE(contains(p, "STRICT OUTPUT FORMAT:\nReason: {detailed justification}\nChosen: {candidate_id}\nFinal: \\boxed{...}"));
}

TEST(Prompts, BaseBranchIgnoresTheBroadcast) {
  const Question q{"q", "P?", "1"};
  AgentState st;
  const Broadcast b{1, 0, "1", "r"};
  const auto base = render_prompt(q, st, b, 2, PromptBranch::use_base_prompt);
  EXPECT_EQ(base, prompts::initial_round(0, q));
  const auto cond = render_prompt(q, st, b, 2, PromptBranch::use_conditioned_prompt);
  EXPECT_EQ(cond, prompts::interactive_round(st, q, b));
  EXPECT_EQ(render_prompt(q, st, std::nullopt, 1, PromptBranch::use_conditioned_prompt), base);
}
