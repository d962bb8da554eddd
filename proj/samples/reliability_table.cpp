// Cumulative success bound against Monte Carlo for a few (p, q) floors, and
// the round budget needed for 95% reliability.

#include <cstdio>

#include "maestro/reliability.hpp"

int main() {
  using namespace maestro::reliability;
  std::printf("%5s %5s %3s %10s %10s %8s\n", "p", "q", "R", "bound", "simulated", "R@95%");
  const struct {
    double p, q;
  } floors[] = {{0.6, 0.7}, {0.3, 0.9}, {0.9, 0.5}, {0.5, 0.5}};
  for (auto [p, q] : floors) {
    for (int R : {1, 3, 5}) {
      const auto sim = simulate_protocol(p, q, R, 50000, 11);
      std::printf("%5.2f %5.2f %3d %10.4f %10.4f %8d\n", p, q, R, reliability_lower_bound(p, q, R), sim.rate,
                  required_rounds(p, q, 0.05));
    }
  }
}
