#pragma once

// Slab-decomposed Lennard-Jones molecular dynamics in reduced units
// (sigma = epsilon = mass = 1). One SimState per rank; ranks exchange
// migrating particles and ghosts over a comm::MessageEndpoint.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "insitu/comm.hpp"
#include "insitu/steering_command.hpp"

namespace insitu::sim {

using Vec3 = std::array<double, 3>;

struct SimConfig {
  std::size_t particle_count = 1000;
  double box_length = 16.0;
  double dt = 0.001;
  double cutoff = 2.5;
  // Initial-velocity temperature and thermostat setpoint.
  double target_temperature = 1.0;
  bool thermostat = false;
  std::uint64_t seed = 1;
  int rank_count = 1;
  int steps_per_publish = 1;
  // Lattice perturbation amplitude as a fraction of the lattice spacing.
  double lattice_jitter = 0.1;

  bool operator==(const SimConfig&) const = default;
};

// Throws ConfigError naming the violated rule.
void validate(const SimConfig& cfg);

// Key/value text: one `key = value` per line, `#` starts a comment.
SimConfig parse_sim_config(const std::string& text);
SimConfig load_sim_config(const std::string& path);
std::string to_text(const SimConfig& cfg);

// 24-byte record, the shared-memory payload layout.
struct ParticleRecord {
  float position[3];
  float velocity[3];
};
static_assert(sizeof(ParticleRecord) == 24);

struct ParticleSnapshot {
  std::uint64_t sim_step = 0;
  double sim_time = 0.0;
  std::vector<ParticleRecord> records;

  std::size_t count() const { return records.size(); }
};

struct RankDomain {
  int rank_id = 0;
  double slab_min_x = 0.0;
  double slab_max_x = 0.0;
  double ghost_width = 0.0;
};

RankDomain make_domain(const SimConfig& cfg, int rank);
// Rank owning a wrapped x coordinate.
int owner_rank(double x, const SimConfig& cfg);

struct Particle {
  std::uint64_t id = 0;
  Vec3 x{};
  Vec3 v{};
  Vec3 f{};
};

struct Ghost {
  std::uint64_t id = 0;
  Vec3 x{};
};

struct SimState {
  SimConfig config;
  RankDomain domain;
  std::uint64_t sim_step = 0;
  double sim_time = 0.0;
  double dt = 0.0;
  double target_temperature = 0.0;
  bool thermostat = false;
  bool paused = false;
  bool terminate_requested = false;
  std::vector<Particle> particles;
  std::vector<Ghost> ghosts;
  bool forces_valid = false;
  // This rank's share of the potential at the last force evaluation.
  double local_potential = 0.0;
};

struct PairLaw {
  double force_magnitude = 0.0;  // -dU/dr of the unshifted potential
  double potential = 0.0;        // truncated and shifted
};

PairLaw lj_force_energy(double r, double cutoff);

SimState init_simulation(const SimConfig& cfg, int rank);

// Ghost exchange plus cell-list force evaluation.
void compute_forces(SimState& state, comm::MessageEndpoint& ep);
// One velocity-Verlet step (no-op while paused). Collective over all ranks.
void step(SimState& state, comm::MessageEndpoint& ep);

struct Energy {
  double kinetic = 0.0;
  double potential = 0.0;
  double total() const { return kinetic + potential; }
};

// System-wide energy; collective.
Energy total_energy(SimState& state, comm::MessageEndpoint& ep);
// Single-rank convenience: evaluates from scratch without messaging.
Energy total_energy(const SimState& state);

Vec3 local_momentum(const SimState& state);

// Mutates a steerable parameter or the pause/terminate flags. Returns false
// (state untouched) for an unknown or invalid parameter; `reason` explains.
bool apply_steering(SimState& state, const steer::SteeringCommand& cmd,
                    std::string* reason = nullptr);

ParticleSnapshot snapshot(const SimState& state);

// Owns a rank's state and stepping loop; hooks let an embedding (the in-situ
// layer) steer before and publish after each step.
class Simulation {
 public:
  using Hook = std::function<void(SimState&)>;

  // Single-rank simulation with an in-process loopback endpoint.
  explicit Simulation(const SimConfig& cfg);
  Simulation(const SimConfig& cfg, int rank, comm::MessageEndpoint& ep);
  virtual ~Simulation();

  void advance();
  bool finished() const { return state_.terminate_requested; }

  void set_hooks(Hook before_step, Hook after_step);

  SimState& state() { return state_; }
  const SimState& state() const { return state_; }
  comm::MessageEndpoint& endpoint() { return *ep_; }
  Energy energy() { return total_energy(state_, *ep_); }

 private:
  std::unique_ptr<comm::LocalFabric> own_fabric_;
  comm::MessageEndpoint* ep_;
  SimState state_;
  Hook before_;
  Hook after_;
};

}  // namespace insitu::sim
