#include "insitu/sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "insitu/errors.hpp"
#include "insitu/log.hpp"

namespace insitu::sim {

namespace {

constexpr comm::Tag kTagMigrateToLeft = 0x5100;
constexpr comm::Tag kTagMigrateToRight = 0x5101;
constexpr comm::Tag kTagGhostToLeft = 0x5102;
constexpr comm::Tag kTagGhostToRight = 0x5103;
constexpr comm::Tag kTagReduceKinetic = 0x5110;
constexpr comm::Tag kTagReducePotential = 0x5111;

// Ghost selection is widened by this relative margin so that rounding in
// slab bounds can never drop a pair sitting exactly at the cutoff.
constexpr double kGhostMargin = 1e-9;

bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

double shifted_cutoff_potential(double cutoff) {
  double inv6 = 1.0 / std::pow(cutoff, 6);
  return 4.0 * inv6 * (inv6 - 1.0);
}

double wrap(double x, double length) {
  if (x < 0.0) x += length;
  if (x >= length) x -= length;
  if (x < 0.0 || x >= length) x = std::fmod(std::fmod(x, length) + length, length);
  if (x >= length) x = 0.0;
  return x;
}

double minimum_image(double d, double length) { return d - length * std::round(d / length); }

double kinetic(const std::vector<Particle>& ps) {
  double k = 0.0;
  for (const auto& p : ps) k += 0.5 * (p.v[0] * p.v[0] + p.v[1] * p.v[1] + p.v[2] * p.v[2]);
  return k;
}

wire::Bytes pack_particles(const std::vector<Particle>& ps) {
  wire::Writer w(8 + ps.size() * 56);
  w.u64(ps.size());
  for (const auto& p : ps) {
    w.u64(p.id);
    for (double c : p.x) w.f64(c);
    for (double c : p.v) w.f64(c);
  }
  return w.take();
}

void unpack_particles(const wire::Bytes& b, std::vector<Particle>& out) {
  wire::Reader r(b);
  auto n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    Particle p;
    p.id = r.u64();
    for (double& c : p.x) c = r.f64();
    for (double& c : p.v) c = r.f64();
    out.push_back(p);
  }
}

wire::Bytes pack_ghosts(const std::vector<Ghost>& gs) {
  wire::Writer w(8 + gs.size() * 32);
  w.u64(gs.size());
  for (const auto& g : gs) {
    w.u64(g.id);
    for (double c : g.x) w.f64(c);
  }
  return w.take();
}

void unpack_ghosts(const wire::Bytes& b, std::vector<Ghost>& out) {
  wire::Reader r(b);
  auto n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    Ghost g;
    g.id = r.u64();
    for (double& c : g.x) c = r.f64();
    out.push_back(g);
  }
}

int left_of(int rank, int k) { return (rank - 1 + k) % k; }
int right_of(int rank, int k) { return (rank + 1) % k; }

// Ghost copies of boundary particles, shifted into the receiver's frame.
void select_ghosts(const SimState& s, std::vector<Ghost>& to_left, std::vector<Ghost>& to_right) {
  const auto& cfg = s.config;
  const double L = cfg.box_length;
  const double gw = s.domain.ghost_width * (1.0 + kGhostMargin);
  const int k = cfg.rank_count;
  const int r = s.domain.rank_id;
  for (const auto& p : s.particles) {
    if (p.x[0] < s.domain.slab_min_x + gw) {
      Ghost g{p.id, p.x};
      if (r == 0) g.x[0] += L;
      to_left.push_back(g);
    }
    if (p.x[0] >= s.domain.slab_max_x - gw) {
      Ghost g{p.id, p.x};
      if (r == k - 1) g.x[0] -= L;
      to_right.push_back(g);
    }
  }
}

void exchange_ghosts(SimState& s, comm::MessageEndpoint& ep) {
  std::vector<Ghost> to_left, to_right;
  select_ghosts(s, to_left, to_right);
  s.ghosts.clear();
  const int k = s.config.rank_count;
  if (k == 1) {
    s.ghosts = std::move(to_left);
    s.ghosts.insert(s.ghosts.end(), to_right.begin(), to_right.end());
    return;
  }
  const int r = s.domain.rank_id;
  const int left = left_of(r, k);
  const int right = right_of(r, k);
  ep.send(left, kTagGhostToLeft, pack_ghosts(to_left));
  ep.send(right, kTagGhostToRight, pack_ghosts(to_right));
  unpack_ghosts(ep.recv(right, kTagGhostToLeft), s.ghosts);
  unpack_ghosts(ep.recv(left, kTagGhostToRight), s.ghosts);
}

// Sends particles that left this slab to the owning neighbour and adopts
// arrivals. Throws InstabilityError if a particle skipped past a neighbour.
void migrate(SimState& s, comm::MessageEndpoint& ep) {
  const int k = s.config.rank_count;
  const int r = s.domain.rank_id;
  if (k == 1) return;
  const int left = left_of(r, k);
  const int right = right_of(r, k);
  std::vector<Particle> keep, to_left, to_right;
  keep.reserve(s.particles.size());
  for (auto& p : s.particles) {
    int owner = owner_rank(p.x[0], s.config);
    if (owner == r) {
      keep.push_back(p);
    } else if (owner == left) {
      to_left.push_back(p);
    } else if (owner == right) {
      to_right.push_back(p);
    } else {
      throw InstabilityError("particle " + std::to_string(p.id) + " jumped from rank " +
                             std::to_string(r) + " to rank " + std::to_string(owner));
    }
  }
  s.particles = std::move(keep);
  ep.send(left, kTagMigrateToLeft, pack_particles(to_left));
  ep.send(right, kTagMigrateToRight, pack_particles(to_right));
  unpack_particles(ep.recv(right, kTagMigrateToLeft), s.particles);
  unpack_particles(ep.recv(left, kTagMigrateToRight), s.particles);
}

struct CellGrid {
  int nx = 1, ny = 1;
  double x0 = 0.0, cx = 1.0, cy = 1.0;
  std::vector<int> start;  // size nx*ny*ny + 1
  std::vector<int> items;

  int cell_of(const Vec3& p) const {
    int ix = std::clamp(static_cast<int>((p[0] - x0) / cx), 0, nx - 1);
    int iy = std::clamp(static_cast<int>(p[1] / cy), 0, ny - 1);
    int iz = std::clamp(static_cast<int>(p[2] / cy), 0, ny - 1);
    return (ix * ny + iy) * ny + iz;
  }
};

// Forces on local particles (when `forces` is set) and this rank's potential
// share: local-local pairs once, local-ghost pairs at half weight.
double evaluate(const SimState& s, const std::vector<Ghost>& ghosts, bool write_forces,
                std::vector<Particle>* out) {
  const auto& cfg = s.config;
  const double L = cfg.box_length;
  const double rc = cfg.cutoff;
  const double rc2 = rc * rc;
  const double uc = shifted_cutoff_potential(rc);
  const std::size_t n = s.particles.size();
  const std::size_t total = n + ghosts.size();

  std::vector<Vec3> pos(total);
  for (std::size_t i = 0; i < n; ++i) pos[i] = s.particles[i].x;
  for (std::size_t i = 0; i < ghosts.size(); ++i) pos[n + i] = ghosts[i].x;

  CellGrid grid;
  grid.x0 = s.domain.slab_min_x - s.domain.ghost_width;
  double width = (s.domain.slab_max_x + s.domain.ghost_width) - grid.x0;
  grid.nx = std::max(1, static_cast<int>(std::floor(width / rc)));
  grid.cx = width / grid.nx;
  grid.ny = std::max(1, static_cast<int>(std::floor(L / rc)));
  grid.cy = L / grid.ny;
  const int ncell = grid.nx * grid.ny * grid.ny;

  std::vector<int> cell(total);
  std::vector<int> count(ncell + 1, 0);
  for (std::size_t i = 0; i < total; ++i) {
    cell[i] = grid.cell_of(pos[i]);
    ++count[cell[i] + 1];
  }
  grid.start.assign(ncell + 1, 0);
  for (int c = 0; c < ncell; ++c) grid.start[c + 1] = grid.start[c] + count[c + 1];
  grid.items.assign(total, 0);
  std::vector<int> fill(grid.start.begin(), grid.start.end() - 1);
  for (std::size_t i = 0; i < total; ++i) grid.items[fill[cell[i]]++] = static_cast<int>(i);

  std::vector<int> yoff;
  for (int d = -1; d <= 1; ++d) yoff.push_back(d);
  auto wrap_y = [&](int iy, int d) { return ((iy + d) % grid.ny + grid.ny) % grid.ny; };

  if (write_forces) {
    for (auto& p : *out) p.f = {0.0, 0.0, 0.0};
  }
  double pe = 0.0;
  std::vector<int> ny_cells;
  std::vector<int> nz_cells;
  for (int ix = 0; ix < grid.nx; ++ix) {
    for (int iy = 0; iy < grid.ny; ++iy) {
      ny_cells.clear();
      for (int d : yoff) {
        int c = wrap_y(iy, d);
        if (std::find(ny_cells.begin(), ny_cells.end(), c) == ny_cells.end()) ny_cells.push_back(c);
      }
      for (int iz = 0; iz < grid.ny; ++iz) {
        nz_cells.clear();
        for (int d : yoff) {
          int c = wrap_y(iz, d);
          if (std::find(nz_cells.begin(), nz_cells.end(), c) == nz_cells.end()) nz_cells.push_back(c);
        }
        const int here = (ix * grid.ny + iy) * grid.ny + iz;
        for (int ia = grid.start[here]; ia < grid.start[here + 1]; ++ia) {
          const int a = grid.items[ia];
          if (static_cast<std::size_t>(a) >= n) continue;
          Vec3 fa{0.0, 0.0, 0.0};
          for (int jx = std::max(0, ix - 1); jx <= std::min(grid.nx - 1, ix + 1); ++jx) {
            for (int jy : ny_cells) {
              for (int jz : nz_cells) {
                const int there = (jx * grid.ny + jy) * grid.ny + jz;
                for (int ib = grid.start[there]; ib < grid.start[there + 1]; ++ib) {
                  const int b = grid.items[ib];
                  const bool local = static_cast<std::size_t>(b) < n;
                  if (local && b <= a) continue;
                  double dx = pos[a][0] - pos[b][0];
                  double dy = minimum_image(pos[a][1] - pos[b][1], L);
                  double dz = minimum_image(pos[a][2] - pos[b][2], L);
                  double r2 = dx * dx + dy * dy + dz * dz;
                  if (r2 >= rc2) continue;
                  double inv2 = 1.0 / r2;
                  double inv6 = inv2 * inv2 * inv2;
                  double fr = 24.0 * inv2 * inv6 * (2.0 * inv6 - 1.0);
                  double u = 4.0 * inv6 * (inv6 - 1.0) - uc;
                  if (write_forces) {
                    fa[0] += fr * dx;
                    fa[1] += fr * dy;
                    fa[2] += fr * dz;
                    if (local) {
                      auto& fb = (*out)[b].f;
                      fb[0] -= fr * dx;
                      fb[1] -= fr * dy;
                      fb[2] -= fr * dz;
                    }
                  }
                  pe += local ? u : 0.5 * u;
                }
              }
            }
          }
          if (write_forces) {
            auto& f = (*out)[a].f;
            f[0] += fa[0];
            f[1] += fa[1];
            f[2] += fa[2];
          }
        }
      }
    }
  }
  return pe;
}

void apply_thermostat(SimState& s, comm::MessageEndpoint& ep) {
  double ke = comm::allreduce_sum(ep, kinetic(s.particles), kTagReduceKinetic);
  const double n = static_cast<double>(s.config.particle_count);
  const double dof = n > 1 ? 3.0 * n - 3.0 : 3.0;
  double t = 2.0 * ke / dof;
  if (t <= 0.0) return;
  double scale = std::sqrt(s.target_temperature / t);
  for (auto& p : s.particles) {
    for (double& c : p.v) c *= scale;
  }
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void validate(const SimConfig& cfg) {
  if (!(cfg.dt > 0.0)) throw ConfigError("dt must be positive");
  if (!(cfg.cutoff > 0.0)) throw ConfigError("cutoff must be positive");
  if (!(cfg.box_length > 2.0 * cfg.cutoff)) {
    throw ConfigError("box_length must exceed twice the cutoff");
  }
  if (!is_power_of_two(cfg.rank_count)) {
    throw ConfigError("rank_count must be a power of two, got " + std::to_string(cfg.rank_count));
  }
  if (cfg.box_length / cfg.rank_count < cfg.cutoff) {
    throw ConfigError("slab width box_length/rank_count must be at least the cutoff");
  }
  if (cfg.steps_per_publish < 1) throw ConfigError("steps_per_publish must be >= 1");
  if (!(cfg.target_temperature >= 0.0)) throw ConfigError("target_temperature must be >= 0");
  if (cfg.lattice_jitter < 0.0 || cfg.lattice_jitter >= 1.0) {
    throw ConfigError("lattice_jitter must be in [0, 1)");
  }
}

SimConfig parse_sim_config(const std::string& text) {
  SimConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "particle_count") {
        cfg.particle_count = std::stoull(value);
      } else if (key == "box_length") {
        cfg.box_length = std::stod(value);
      } else if (key == "dt") {
        cfg.dt = std::stod(value);
      } else if (key == "cutoff") {
        cfg.cutoff = std::stod(value);
      } else if (key == "target_temperature") {
        cfg.target_temperature = std::stod(value);
      } else if (key == "thermostat") {
        cfg.thermostat = value == "1" || value == "true" || value == "on";
      } else if (key == "seed") {
        cfg.seed = std::stoull(value);
      } else if (key == "rank_count") {
        cfg.rank_count = std::stoi(value);
      } else if (key == "steps_per_publish") {
        cfg.steps_per_publish = std::stoi(value);
      } else if (key == "lattice_jitter") {
        cfg.lattice_jitter = std::stod(value);
      } else {
        throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw ConfigError("line " + std::to_string(lineno) + ": bad value for '" + key + "'");
    }
  }
  return cfg;
}

SimConfig load_sim_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_sim_config(ss.str());
}

std::string to_text(const SimConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "particle_count = " << cfg.particle_count << '\n'
     << "box_length = " << cfg.box_length << '\n'
     << "dt = " << cfg.dt << '\n'
     << "cutoff = " << cfg.cutoff << '\n'
     << "target_temperature = " << cfg.target_temperature << '\n'
     << "thermostat = " << (cfg.thermostat ? 1 : 0) << '\n'
     << "seed = " << cfg.seed << '\n'
     << "rank_count = " << cfg.rank_count << '\n'
     << "steps_per_publish = " << cfg.steps_per_publish << '\n'
     << "lattice_jitter = " << cfg.lattice_jitter << '\n';
  return os.str();
}

RankDomain make_domain(const SimConfig& cfg, int rank) {
  const double width = cfg.box_length / cfg.rank_count;
  RankDomain d;
  d.rank_id = rank;
  d.slab_min_x = rank * width;
  d.slab_max_x = rank + 1 == cfg.rank_count ? cfg.box_length : (rank + 1) * width;
  d.ghost_width = cfg.cutoff;
  return d;
}

int owner_rank(double x, const SimConfig& cfg) {
  int r = static_cast<int>(std::floor(x * cfg.rank_count / cfg.box_length));
  return std::clamp(r, 0, cfg.rank_count - 1);
}

PairLaw lj_force_energy(double r, double cutoff) {
  if (!(r > 0.0)) throw DomainError("pair distance must be positive");
  if (r >= cutoff) return {};
  double inv = 1.0 / r;
  double inv6 = std::pow(inv, 6);
  PairLaw out;
  out.force_magnitude = 24.0 * inv * inv6 * (2.0 * inv6 - 1.0);
  out.potential = 4.0 * inv6 * (inv6 - 1.0) - shifted_cutoff_potential(cutoff);
  return out;
}

SimState init_simulation(const SimConfig& cfg, int rank) {
  validate(cfg);
  if (rank < 0 || rank >= cfg.rank_count) {
    throw ConfigError("rank " + std::to_string(rank) + " outside rank_count");
  }
  SimState s;
  s.config = cfg;
  s.domain = make_domain(cfg, rank);
  s.dt = cfg.dt;
  s.target_temperature = cfg.target_temperature;
  s.thermostat = cfg.thermostat;

  // Every rank replays the same global stream so the particle set does not
  // depend on the decomposition; each keeps the particles of its slab.
  const std::size_t n = cfg.particle_count;
  std::size_t side = 1;
  while (side * side * side < n) ++side;
  const double spacing = cfg.box_length / static_cast<double>(side);
  std::mt19937_64 gen(cfg.seed);
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<Particle> all(n);
  Vec3 momentum{0.0, 0.0, 0.0};
  for (std::size_t id = 0; id < n; ++id) {
    Particle& p = all[id];
    p.id = id;
    std::size_t idx[3] = {id % side, (id / side) % side, id / (side * side)};
    for (int a = 0; a < 3; ++a) {
      double x = (static_cast<double>(idx[a]) + 0.5) * spacing +
                 cfg.lattice_jitter * spacing * jitter(gen);
      p.x[a] = wrap(x, cfg.box_length);
    }
    for (int a = 0; a < 3; ++a) {
      p.v[a] = normal(gen);
      momentum[a] += p.v[a];
    }
  }
  if (n > 0) {
    for (auto& p : all) {
      for (int a = 0; a < 3; ++a) p.v[a] -= momentum[a] / static_cast<double>(n);
    }
  }
  double ke = kinetic(all);
  if (n > 1 && ke > 0.0) {
    double wanted = 0.5 * (3.0 * static_cast<double>(n) - 3.0) * cfg.target_temperature;
    double scale = std::sqrt(wanted / ke);
    for (auto& p : all) {
      for (double& c : p.v) c *= scale;
    }
  }
  for (const auto& p : all) {
    if (owner_rank(p.x[0], cfg) == rank) s.particles.push_back(p);
  }
  return s;
}

void compute_forces(SimState& state, comm::MessageEndpoint& ep) {
  exchange_ghosts(state, ep);
  state.local_potential = evaluate(state, state.ghosts, true, &state.particles);
  state.forces_valid = true;
}

void step(SimState& state, comm::MessageEndpoint& ep) {
  if (state.paused) return;
  if (!state.forces_valid) compute_forces(state, ep);
  const double dt = state.dt;
  const double L = state.config.box_length;
  const double limit = state.domain.ghost_width;

  for (auto& p : state.particles) {
    for (int a = 0; a < 3; ++a) p.v[a] += 0.5 * dt * p.f[a];
  }
  for (auto& p : state.particles) {
    for (int a = 0; a < 3; ++a) {
      double dx = dt * p.v[a];
      if (!(std::abs(dx) <= limit)) {
        throw InstabilityError("particle " + std::to_string(p.id) + " moved " +
                               std::to_string(dx) + " in one step (ghost width " +
                               std::to_string(limit) + "); dt " + std::to_string(dt) +
                               " is too large");
      }
      p.x[a] = wrap(p.x[a] + dx, L);
    }
  }
  migrate(state, ep);
  compute_forces(state, ep);
  for (auto& p : state.particles) {
    for (int a = 0; a < 3; ++a) p.v[a] += 0.5 * dt * p.f[a];
  }
  if (state.thermostat) apply_thermostat(state, ep);
  state.sim_step += 1;
  state.sim_time += dt;
}

Energy total_energy(SimState& state, comm::MessageEndpoint& ep) {
  if (!state.forces_valid) compute_forces(state, ep);
  Energy e;
  e.kinetic = comm::allreduce_sum(ep, kinetic(state.particles), kTagReduceKinetic);
  e.potential = comm::allreduce_sum(ep, state.local_potential, kTagReducePotential);
  return e;
}

Energy total_energy(const SimState& state) {
  if (state.config.rank_count != 1) {
    throw ArgumentError("total_energy without an endpoint needs a single-rank state");
  }
  std::vector<Ghost> to_left, to_right;
  select_ghosts(state, to_left, to_right);
  to_left.insert(to_left.end(), to_right.begin(), to_right.end());
  Energy e;
  e.kinetic = kinetic(state.particles);
  e.potential = evaluate(state, to_left, false, nullptr);
  return e;
}

Vec3 local_momentum(const SimState& state) {
  Vec3 m{0.0, 0.0, 0.0};
  for (const auto& p : state.particles) {
    for (int a = 0; a < 3; ++a) m[a] += p.v[a];
  }
  return m;
}

bool apply_steering(SimState& state, const steer::SteeringCommand& cmd, std::string* reason) {
  using steer::CommandKind;
  switch (cmd.body.kind) {
    case CommandKind::set_param: {
      if (auto why = steer::check_param(cmd.body.name, cmd.body.value)) {
        log::warn("rank ", state.domain.rank_id, " rejected steering command ", cmd.seq, ": ", *why);
        if (reason) *reason = *why;
        return false;
      }
      if (cmd.body.name == "dt") {
        state.dt = cmd.body.value;
      } else if (cmd.body.name == "target_temperature") {
        state.target_temperature = cmd.body.value;
        state.thermostat = true;
      } else if (cmd.body.name == "thermostat") {
        state.thermostat = cmd.body.value != 0.0;
      }
      return true;
    }
    case CommandKind::pause:
      state.paused = true;
      return true;
    case CommandKind::resume:
      state.paused = false;
      return true;
    case CommandKind::terminate:
      state.terminate_requested = true;
      return true;
  }
  return false;
}

ParticleSnapshot snapshot(const SimState& state) {
  ParticleSnapshot snap;
  snap.sim_step = state.sim_step;
  snap.sim_time = state.sim_time;
  snap.records.resize(state.particles.size());
  const float below_box = std::nextafter(static_cast<float>(state.config.box_length), 0.0f);
  for (std::size_t i = 0; i < state.particles.size(); ++i) {
    const auto& p = state.particles[i];
    auto& rec = snap.records[i];
    for (int a = 0; a < 3; ++a) {
      rec.position[a] = std::min(static_cast<float>(p.x[a]), below_box);
      rec.velocity[a] = static_cast<float>(p.v[a]);
    }
  }
  return snap;
}

Simulation::Simulation(const SimConfig& cfg)
    : own_fabric_(std::make_unique<comm::LocalFabric>(1)),
      ep_(&own_fabric_->endpoint(0)),
      state_(init_simulation(cfg, 0)) {
  if (cfg.rank_count != 1) {
    throw ConfigError("a standalone Simulation runs a single rank; use the launcher for more");
  }
}

Simulation::Simulation(const SimConfig& cfg, int rank, comm::MessageEndpoint& ep)
    : ep_(&ep), state_(init_simulation(cfg, rank)) {}

Simulation::~Simulation() = default;

void Simulation::set_hooks(Hook before_step, Hook after_step) {
  before_ = std::move(before_step);
  after_ = std::move(after_step);
}

void Simulation::advance() {
  if (before_) before_(state_);
  if (state_.terminate_requested) return;
  step(state_, *ep_);
  if (after_) after_(state_);
}

}  // namespace insitu::sim
