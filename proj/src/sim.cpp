#include "scanenc/sim.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace scanenc {

namespace {

constexpr double kPi = 3.14159265358979323846;

double wrap_angle(double a) {
  while (a > kPi) a -= 2 * kPi;
  while (a < -kPi) a += 2 * kPi;
  return a;
}

double clampd(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

void reflect_axis(double& pos, double& vel, double half) {
  if (pos > half) {
    pos = 2 * half - pos;
    vel = -vel;
  } else if (pos < -half) {
    pos = -2 * half - pos;
    vel = -vel;
  }
}

}  // namespace

void SimConfig::validate() const {
  auto req = [](bool ok, const char* what) {
    if (!ok) throw ValueError(std::string("SimConfig: ") + what);
  };
  req(arena > 0, "arena must be positive");
  req(dt > 0, "dt must be positive");
  req(max_speed > 0, "max_speed must be positive");
  req(n_robots_min >= 1 && n_robots_max >= n_robots_min, "robot count range invalid");
  req(n_targets_min >= 1 && n_targets_max >= n_targets_min, "target count range invalid");
  req(skip_steps >= 0, "skip_steps must be non-negative");
  req(episode_len > 0, "episode_len must be positive");
  req(reach_radius > 0, "reach_radius must be positive");
  req(collision_radius > 0, "collision_radius must be positive");
  req(wheel_base > 0, "wheel_base must be positive");
  req(particle_speed_std >= 0, "particle_speed_std must be non-negative");
  req(particle_speed_clamp > 0, "particle_speed_clamp must be positive");
  req(control_grid >= 2, "control_grid needs at least two speeds per axis");
  req(horizon_steps >= 1, "horizon_steps must be positive");
  req(grid_h > 0 && grid_w > 0, "occupancy grid dims must be positive");
  req(dilation_cells >= 0, "dilation_cells must be non-negative");
}

Task task_from_string(const std::string& s) {
  if (s == "assignment") return Task::assignment;
  if (s == "hidden_target") return Task::hidden_target;
  throw ValueError("unknown task '" + s + "' (assignment|hidden_target)");
}

const char* task_name(Task t) {
  return t == Task::assignment ? "assignment" : "hidden_target";
}

SimState init_sim(const SimConfig& cfg) {
  cfg.validate();
  SimState st;
  st.rng = Rng(cfg.seed);
  const double h = cfg.half();
  const int n_r = int(st.rng.uniform_int(cfg.n_robots_min, cfg.n_robots_max));
  const int n_t = int(st.rng.uniform_int(cfg.n_targets_min, cfg.n_targets_max));
  st.robots.resize(size_t(n_r));
  for (auto& r : st.robots) {
    r.x = st.rng.uniform(-h, h);
    r.y = st.rng.uniform(-h, h);
    r.theta = st.rng.uniform(-kPi, kPi);
    r.v_l = r.v_r = 0;
  }
  st.particles.resize(size_t(n_t));
  for (auto& p : st.particles) {
    p.x = st.rng.uniform(-h, h);
    p.y = st.rng.uniform(-h, h);
    p.vx = st.rng.normal() * cfg.particle_speed_std;
    p.vy = st.rng.normal() * cfg.particle_speed_std;
    const double speed = std::hypot(p.vx, p.vy);
    if (speed > cfg.particle_speed_clamp) {
      p.vx *= cfg.particle_speed_clamp / speed;
      p.vy *= cfg.particle_speed_clamp / speed;
    }
  }
  for (auto& r : st.robots) r.assigned_target = int(st.rng.uniform_int(n_t));
  return st;
}

std::vector<std::array<double, 2>> candidate_controls(const SimConfig& cfg) {
  std::vector<std::array<double, 2>> out;
  const int n = cfg.control_grid;
  out.reserve(size_t(n) * size_t(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      out.push_back({-cfg.max_speed + 2 * cfg.max_speed * i / (n - 1),
                     -cfg.max_speed + 2 * cfg.max_speed * j / (n - 1)});
  return out;
}

void integrate_pose(double& x, double& y, double& theta, double v_l, double v_r,
                    double wheel_base, double seconds) {
  const double v = 0.5 * (v_l + v_r);
  const double w = (v_r - v_l) / wheel_base;
  if (std::abs(w) < 1e-9) {
    x += v * std::cos(theta) * seconds;
    y += v * std::sin(theta) * seconds;
  } else {
    const double radius = v / w;
    const double t2 = theta + w * seconds;
    x += radius * (std::sin(t2) - std::sin(theta));
    y += -radius * (std::cos(t2) - std::cos(theta));
    theta = wrap_angle(t2);
  }
}

void advance_particle(ParticleState& p, double half, double seconds) {
  p.x += p.vx * seconds;
  p.y += p.vy * seconds;
  reflect_axis(p.x, p.vx, half);
  reflect_axis(p.y, p.vy, half);
}

std::vector<double> controller_cost(const RobotState& robot,
                                    const std::vector<std::array<double, 2>>& candidates,
                                    const ParticleState& target,
                                    const std::vector<RobotState>& robots,
                                    std::size_t self_index, const SimConfig& cfg) {
  // Scoring the end-of-horizon gap alone makes robots settle on the target's
  // lead point (one horizon ahead of the particle) and trail fast particles
  // just outside reach_radius forever, so the distance term is the closest
  // matched-time approach between the candidate arc and the projection.
  std::vector<std::array<double, 2>> track(size_t(cfg.horizon_steps));
  ParticleState proj = target;
  for (int s = 0; s < cfg.horizon_steps; ++s) {
    advance_particle(proj, cfg.half(), cfg.dt);
    track[size_t(s)] = {proj.x, proj.y};
  }

  std::vector<double> cost(candidates.size());
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    double x = robot.x, y = robot.y, th = robot.theta;
    bool hit = false;
    double closest = 1e300;
    for (int s = 0; s < cfg.horizon_steps; ++s) {
      integrate_pose(x, y, th, candidates[c][0], candidates[c][1], cfg.wheel_base,
                     cfg.dt);
      for (std::size_t o = 0; o < robots.size(); ++o) {
        if (o == self_index) continue;
        if (std::hypot(x - robots[o].x, y - robots[o].y) < cfg.collision_radius)
          hit = true;
      }
      closest = std::min(closest,
                         std::hypot(x - track[size_t(s)][0], y - track[size_t(s)][1]));
    }
    cost[c] = closest + (hit ? cfg.collision_penalty : 0.0);
  }
  return cost;
}

std::array<double, 2> choose_control(const RobotState& robot, const ParticleState& target,
                                     const std::vector<RobotState>& robots,
                                     std::size_t self_index, const SimConfig& cfg) {
  const auto candidates = candidate_controls(cfg);
  const auto cost = controller_cost(robot, candidates, target, robots, self_index, cfg);
  std::size_t best = 0;
  for (std::size_t c = 1; c < cost.size(); ++c)
    if (cost[c] < cost[best]) best = c;
  return candidates[best];
}

void step_sim(SimState& st, const SimConfig& cfg) {
  const double h = cfg.half();
  const int n_t = int(st.particles.size());

  // Reassignment first, on entry distances, so reaching is observable in the
  // recorded labels of the following step.
  for (auto& r : st.robots) {
    const auto& p = st.particles[size_t(r.assigned_target)];
    if (std::hypot(r.x - p.x, r.y - p.y) < cfg.reach_radius && n_t > 1) {
      int pick = int(st.rng.uniform_int(n_t - 1));
      if (pick >= r.assigned_target) ++pick;
      r.assigned_target = pick;
    }
  }

  // Controls are chosen against the pre-step snapshot so in-step robot order
  // carries no information.
  const std::vector<RobotState> before = st.robots;
  for (std::size_t i = 0; i < st.robots.size(); ++i) {
    auto& r = st.robots[i];
    const auto ctrl = choose_control(before[i], st.particles[size_t(r.assigned_target)],
                                     before, i, cfg);
    r.v_l = ctrl[0];
    r.v_r = ctrl[1];
    integrate_pose(r.x, r.y, r.theta, r.v_l, r.v_r, cfg.wheel_base, cfg.dt);
    r.x = clampd(r.x, -h, h);
    r.y = clampd(r.y, -h, h);
  }

  for (auto& p : st.particles) advance_particle(p, h, cfg.dt);
  ++st.step;
}

std::vector<std::uint8_t> occupancy_label(const std::vector<ParticleState>& particles,
                                          const SimConfig& cfg) {
  std::vector<std::uint8_t> grid(size_t(cfg.grid_h) * size_t(cfg.grid_w), 0);
  const double cw = cfg.arena / cfg.grid_w;
  const double ch = cfg.arena / cfg.grid_h;
  const int reach = int(std::ceil(cfg.dilation_cells)) + 1;
  for (const auto& p : particles) {
    const double ux = (p.x + cfg.half()) / cw;  // position in cell units
    const double uy = (p.y + cfg.half()) / ch;
    const int ci = int(std::floor(uy));
    const int cj = int(std::floor(ux));
    for (int i = ci - reach; i <= ci + reach; ++i) {
      if (i < 0 || i >= cfg.grid_h) continue;
      for (int j = cj - reach; j <= cj + reach; ++j) {
        if (j < 0 || j >= cfg.grid_w) continue;
        const double d = std::hypot(j + 0.5 - ux, i + 0.5 - uy);
        if (d <= cfg.dilation_cells) grid[size_t(i) * size_t(cfg.grid_w) + size_t(j)] = 1;
      }
    }
  }
  return grid;
}

EpisodeRecord rollout(const SimConfig& cfg) {
  SimState st = init_sim(cfg);
  for (int s = 0; s < cfg.skip_steps; ++s) step_sim(st, cfg);

  EpisodeRecord rec;
  rec.config = cfg;
  rec.n_robots = int(st.robots.size());
  rec.n_targets = int(st.particles.size());
  rec.steps.reserve(size_t(cfg.episode_len));
  for (int s = 0; s < cfg.episode_len; ++s) {
    StepRecord sr;
    sr.robots.reserve(st.robots.size());
    sr.assignment.reserve(st.robots.size());
    for (const auto& r : st.robots) {
      sr.robots.push_back({r.x, r.y, r.theta, r.v_l, r.v_r});
      sr.assignment.push_back(r.assigned_target);
    }
    sr.particles.reserve(st.particles.size());
    for (const auto& p : st.particles) sr.particles.push_back({p.x, p.y, p.vx, p.vy});
    sr.occupancy = occupancy_label(st.particles, cfg);
    rec.steps.push_back(std::move(sr));
    step_sim(st, cfg);
  }
  return rec;
}

std::vector<double> featurize(double x, double y, double theta, double arena, int d_o) {
  if (d_o <= 0 || d_o % 6 != 0)
    throw ValueError("featurize needs d_o divisible by 6, got " + std::to_string(d_o));
  const int freqs = d_o / 6;
  const double coords[3] = {(x + arena / 2) / arena, (y + arena / 2) / arena,
                            (theta + kPi) / (2 * kPi)};
  // Positions span half a period across the arena so opposite walls stay
  // distinct; the angle spans a full period so -pi and pi coincide.
  const double base[3] = {kPi, kPi, 2 * kPi};
  std::vector<double> out(static_cast<std::size_t>(d_o));
  std::size_t at = 0;
  for (int c = 0; c < 3; ++c) {
    double omega = base[c];
    for (int k = 0; k < freqs; ++k) {
      out[at++] = std::sin(omega * coords[c]);
      out[at++] = std::cos(omega * coords[c]);
      omega *= 2;
    }
  }
  return out;
}

Observation observe(const SimState& st, Task task, int d_o, const SimConfig& cfg) {
  Observation obs;
  const int n_r = int(st.robots.size());
  const int n_t = int(st.particles.size());

  obs.obs_p.tokens = Tensor<double>({1, n_r, d_o});
  obs.obs_p.valid = Tensor<std::uint8_t>::full({1, n_r}, 1);
  obs.obs_p.source_id = SourceId::player;
  for (int i = 0; i < n_r; ++i) {
    const auto& r = st.robots[size_t(i)];
    const auto f = featurize(r.x, r.y, r.theta, cfg.arena, d_o);
    std::memcpy(obs.obs_p.tokens.data() + std::int64_t(i) * d_o, f.data(), size_t(d_o) * sizeof(double));
  }

  if (task == Task::assignment) {
    obs.obs_e.tokens = Tensor<double>({1, n_t, d_o});
    obs.obs_e.valid = Tensor<std::uint8_t>::full({1, n_t}, 1);
    for (int i = 0; i < n_t; ++i) {
      const auto& p = st.particles[size_t(i)];
      const auto f = featurize(p.x, p.y, 0.0, cfg.arena, d_o);
      std::memcpy(obs.obs_e.tokens.data() + std::int64_t(i) * d_o, f.data(),
                  size_t(d_o) * sizeof(double));
    }
  } else {
    obs.obs_e.tokens = Tensor<double>::zeros({1, 1, d_o});
    obs.obs_e.valid = Tensor<std::uint8_t>::zeros({1, 1});
  }
  obs.obs_e.source_id = SourceId::enemy;

  obs.assignment.reserve(size_t(n_r));
  for (const auto& r : st.robots) obs.assignment.push_back(r.assigned_target);
  obs.occupancy = occupancy_label(st.particles, cfg);
  return obs;
}

namespace {

constexpr std::uint32_t kEpisodeMagic = 0x43544550;  // "PETC" little-endian
constexpr std::uint32_t kEpisodeVersion = 1;

template <class T>
void put(std::string& out, const T& v) {
  static_assert(std::is_trivially_copyable_v<T>);
  const char* p = reinterpret_cast<const char*>(&v);
  out.append(p, sizeof(T));
}

struct Cursor {
  const std::string& bytes;
  std::size_t at = 0;
  template <class T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    if (at + sizeof(T) > bytes.size()) throw ValueError("episode file truncated");
    T v;
    std::memcpy(&v, bytes.data() + at, sizeof(T));
    at += sizeof(T);
    return v;
  }
};

}  // namespace

std::string serialize_episode(const EpisodeRecord& rec) {
  const SimConfig& c = rec.config;
  std::string out;
  put(out, kEpisodeMagic);
  put(out, kEpisodeVersion);
  for (double v : {c.arena, c.dt, c.max_speed, c.reach_radius, c.collision_radius,
                   c.wheel_base, c.particle_speed_std, c.particle_speed_clamp,
                   c.collision_penalty, c.dilation_cells})
    put(out, v);
  for (std::int32_t v :
       {c.n_robots_min, c.n_robots_max, c.n_targets_min, c.n_targets_max, c.skip_steps,
        c.episode_len, c.control_grid, c.horizon_steps, c.grid_h, c.grid_w})
    put(out, v);
  put(out, c.seed);
  put(out, std::int32_t(rec.n_robots));
  put(out, std::int32_t(rec.n_targets));
  put(out, std::int32_t(rec.steps.size()));
  for (const auto& s : rec.steps) {
    if (int(s.robots.size()) != rec.n_robots || int(s.particles.size()) != rec.n_targets ||
        s.occupancy.size() != size_t(c.grid_h) * size_t(c.grid_w))
      throw ValueError("episode step sizes inconsistent with header");
    for (const auto& r : s.robots)
      for (double v : r) put(out, v);
    for (int a : s.assignment) put(out, std::int32_t(a));
    for (const auto& p : s.particles)
      for (double v : p) put(out, v);
    out.append(reinterpret_cast<const char*>(s.occupancy.data()), s.occupancy.size());
  }
  return out;
}

EpisodeRecord parse_episode(const std::string& bytes) {
  Cursor cur{bytes};
  if (cur.get<std::uint32_t>() != kEpisodeMagic)
    throw ValueError("not an episode file (bad magic)");
  if (cur.get<std::uint32_t>() != kEpisodeVersion)
    throw ValueError("unsupported episode file version");
  EpisodeRecord rec;
  SimConfig& c = rec.config;
  c.arena = cur.get<double>();
  c.dt = cur.get<double>();
  c.max_speed = cur.get<double>();
  c.reach_radius = cur.get<double>();
  c.collision_radius = cur.get<double>();
  c.wheel_base = cur.get<double>();
  c.particle_speed_std = cur.get<double>();
  c.particle_speed_clamp = cur.get<double>();
  c.collision_penalty = cur.get<double>();
  c.dilation_cells = cur.get<double>();
  c.n_robots_min = cur.get<std::int32_t>();
  c.n_robots_max = cur.get<std::int32_t>();
  c.n_targets_min = cur.get<std::int32_t>();
  c.n_targets_max = cur.get<std::int32_t>();
  c.skip_steps = cur.get<std::int32_t>();
  c.episode_len = cur.get<std::int32_t>();
  c.control_grid = cur.get<std::int32_t>();
  c.horizon_steps = cur.get<std::int32_t>();
  c.grid_h = cur.get<std::int32_t>();
  c.grid_w = cur.get<std::int32_t>();
  c.seed = cur.get<std::uint64_t>();
  rec.n_robots = cur.get<std::int32_t>();
  rec.n_targets = cur.get<std::int32_t>();
  const int n_steps = cur.get<std::int32_t>();
  if (rec.n_robots < 0 || rec.n_targets < 0 || n_steps < 0)
    throw ValueError("episode header counts negative");
  rec.steps.resize(size_t(n_steps));
  for (auto& s : rec.steps) {
    s.robots.resize(size_t(rec.n_robots));
    s.assignment.resize(size_t(rec.n_robots));
    s.particles.resize(size_t(rec.n_targets));
    for (auto& r : s.robots)
      for (double& v : r) v = cur.get<double>();
    for (int& a : s.assignment) a = cur.get<std::int32_t>();
    for (auto& p : s.particles)
      for (double& v : p) v = cur.get<double>();
    const std::size_t cells = size_t(c.grid_h) * size_t(c.grid_w);
    if (cur.at + cells > bytes.size()) throw ValueError("episode file truncated");
    s.occupancy.assign(bytes.data() + cur.at, bytes.data() + cur.at + cells);
    cur.at += cells;
  }
  if (cur.at != bytes.size()) throw ValueError("trailing bytes in episode file");
  return rec;
}

void write_episode(const EpisodeRecord& rec, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValueError("cannot open for write: " + path);
  const std::string bytes = serialize_episode(rec);
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw ValueError("write failed: " + path);
}

EpisodeRecord read_episode(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValueError("cannot open for read: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_episode(bytes);
}

std::uint64_t episode_hash(const EpisodeRecord& rec) {
  const std::string bytes = serialize_episode(rec);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

void write_pgm(const std::vector<std::uint8_t>& grid, int h, int w,
               const std::string& path) {
  if (int64_t(grid.size()) != int64_t(h) * w)
    throw ValueError("grid size does not match dims");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValueError("cannot open for write: " + path);
  f << "P5\n" << w << " " << h << "\n255\n";
  for (std::uint8_t v : grid) f.put(v ? char(255) : char(0));
  if (!f) throw ValueError("write failed: " + path);
}

}  // namespace scanenc
