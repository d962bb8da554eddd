// One simulated episode: three agents, three candidates each, three rounds,
// majority-vote arbiter. Prints each round's broadcast and the trace as JSON.

#include <iostream>

#include "maestro/maestro.hpp"

int main() {
  using namespace maestro;

  ProtocolConfig protocol;  // N = K = R = 3
  std::vector<AgentConfig> configs(3);
  for (std::size_t i = 0; i < configs.size(); ++i) configs[i].seed = 1000 + i;
  const auto agents = make_agents(protocol, configs);

  const Question q{"demo-1", "What is 17 + 25?", "42"};
  MajorityVoteSelector selector;
  const auto trace = run_episode(q, selector, protocol, agents, 7, [](const RoundRecord& r) {
    std::cout << "round " << r.slate.round_index << ": endorsed candidate " << r.broadcast.chosen_flat_index
              << " -> " << r.broadcast.final_answer << '\n';
  });
  std::cout << "final answer: " << trace.final_answer() << '\n';
  std::cout << nlohmann::json(trace).dump(2) << '\n';
}
