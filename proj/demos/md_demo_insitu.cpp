// Lennard-Jones MD demo: steps a system and prints step, kinetic, potential
// and total energy every 100 steps.
//
// usage: md_demo [config-file] [steps]

#include <cstdint>
#include <cstdio>
#include <string>

#include "insitu/runtime.hpp"

int main(int argc, char** argv) {
  insitu::sim::SimConfig cfg;
  std::uint64_t steps = 1000;
  int positional = 0;
  for (int i = 1; i < argc; ++i) {
    std::string arg = argv[i];
    if (arg.rfind("--", 0) == 0) continue;
    if (positional++ == 0) cfg = insitu::sim::load_sim_config(arg);
    else steps = std::stoull(arg);
  }

  insitu::InSituSimulation sim(cfg, argc, argv);

  std::uint64_t reported = 0;
  while (!sim.finished() && sim.state().sim_step < steps) {
    sim.advance();
    const std::uint64_t step = sim.state().sim_step;
    if (step % 100 == 0 && step != reported) {
      reported = step;
      auto e = sim.energy();
      std::printf("%llu %.12e %.12e %.12e\n", static_cast<unsigned long long>(step), e.kinetic, e.potential,
                  e.total());
    }
  }
  return 0;
}
