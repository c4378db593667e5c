#pragma once

// Chasing-targets benchmark: differential-drive robots pursue bouncing
// particles across a square arena under a greedy cost-minimizing controller.
// Rollouts are pure functions of (config, seed); every random draw goes
// through the state's own Rng in a fixed order.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "scanenc/attention.hpp"
#include "scanenc/tensor.hpp"

namespace scanenc {

struct SimConfig {
  double arena = 4.0;       // side length in metres, centered on the origin
  double dt = 0.1;          // seconds per step
  double max_speed = 0.5;   // per-wheel speed limit, m/s
  int n_robots_min = 8;     // robot count ~ U(min, max) inclusive
  int n_robots_max = 15;
  int n_targets_min = 3;    // particle count ~ U(min, max) inclusive
  int n_targets_max = 6;
  int skip_steps = 10;      // settle-in steps dropped before recording
  int episode_len = 41;     // recorded steps per episode
  double reach_radius = 0.1;      // target reached below this distance
  double collision_radius = 0.2;  // forecast closer than this is penalized
  double wheel_base = 0.1;        // axle width for the kinematics, m
  double particle_speed_std = 0.3;    // per-axis normal std, m/s
  double particle_speed_clamp = 0.5;  // cap on particle speed norm, m/s
  double collision_penalty = 56.568542494923804;  // 10x the default diagonal
  int control_grid = 5;    // candidate wheel speeds per axis
  int horizon_steps = 10;  // controller lookahead, in dt units
  int grid_h = 64;         // occupancy label resolution
  int grid_w = 64;
  double dilation_cells = 2.0;  // occupancy marks centers within this radius
  std::uint64_t seed = 0;

  void validate() const;  // throws ValueError
  double half() const { return arena / 2.0; }
};

struct RobotState {
  double x = 0, y = 0, theta = 0;
  double v_l = 0, v_r = 0;
  int assigned_target = 0;
};

struct ParticleState {
  double x = 0, y = 0;
  double vx = 0, vy = 0;
};

struct SimState {
  std::vector<RobotState> robots;
  std::vector<ParticleState> particles;
  int step = 0;
  Rng rng{0};
};

struct StepRecord {
  std::vector<std::array<double, 5>> robots;     // x, y, theta, v_l, v_r
  std::vector<int> assignment;                   // per-robot particle index
  std::vector<std::array<double, 4>> particles;  // x, y, vx, vy
  std::vector<std::uint8_t> occupancy;           // grid_h * grid_w, row-major
};

struct EpisodeRecord {
  SimConfig config;
  int n_robots = 0;
  int n_targets = 0;
  std::vector<StepRecord> steps;
};

enum class Task { assignment, hidden_target };
Task task_from_string(const std::string& s);
const char* task_name(Task t);

// Stationary robots at uniform poses, particles with clamped normal
// velocities, uniform target assignments. Draw order is fixed: counts,
// robot poses, particle states, assignments.
SimState init_sim(const SimConfig& cfg);

// Candidate wheel-speed pairs, a control_grid x control_grid lattice over
// [-max_speed, max_speed] in row-major (v_l outer) order.
std::vector<std::array<double, 2>> candidate_controls(const SimConfig& cfg);

// Exact arc update for constant wheel speeds over `seconds`.
void integrate_pose(double& x, double& y, double& theta, double v_l, double v_r,
                    double wheel_base, double seconds);

// Advance a particle by `seconds`, reflecting off the arena walls.
void advance_particle(ParticleState& p, double half, double seconds);

// Cost of each candidate: closest matched-time distance between the
// forward-simulated robot arc and the ballistically projected target over
// the horizon, plus a flat penalty when any lookahead sample comes within
// collision_radius of another robot (treated as static over the horizon).
std::vector<double> controller_cost(const RobotState& robot,
                                    const std::vector<std::array<double, 2>>& candidates,
                                    const ParticleState& target,
                                    const std::vector<RobotState>& robots,
                                    std::size_t self_index, const SimConfig& cfg);

// Argmin over candidate_controls; first minimum wins ties.
std::array<double, 2> choose_control(const RobotState& robot, const ParticleState& target,
                                     const std::vector<RobotState>& robots,
                                     std::size_t self_index, const SimConfig& cfg);

// One step: robots within reach_radius of their target are reassigned to a
// different particle, every robot applies its argmin control, particles
// advance and reflect. Robots are clamped to the arena.
void step_sim(SimState& st, const SimConfig& cfg);

// Binary occupancy labels: 1 where a cell center lies within dilation_cells
// (in cell units) of any particle.
std::vector<std::uint8_t> occupancy_label(const std::vector<ParticleState>& particles,
                                          const SimConfig& cfg);

// skip_steps settle-in steps, then episode_len recorded steps. Each record
// snapshots the state before that step advances.
EpisodeRecord rollout(const SimConfig& cfg);

// Sinusoidal pose features: d_o/6 octave-spaced frequencies per coordinate,
// sin/cos pairs, coordinates normalized by the arena (theta by 2*pi).
// d_o must be divisible by 6.
std::vector<double> featurize(double x, double y, double theta, double arena, int d_o);

struct Observation {
  TokenSet<double> obs_p;          // robots
  TokenSet<double> obs_e;          // particles; zero valid tokens for task 2
  std::vector<int> assignment;     // task 1 labels
  std::vector<std::uint8_t> occupancy;  // task 2 labels
};

Observation observe(const SimState& st, Task task, int d_o, const SimConfig& cfg);

// Fixed-width binary episode file: config echo and counts, then per-step
// blocks. serialize/parse round-trip byte-identically.
std::string serialize_episode(const EpisodeRecord& rec);
EpisodeRecord parse_episode(const std::string& bytes);
void write_episode(const EpisodeRecord& rec, const std::string& path);
EpisodeRecord read_episode(const std::string& path);

// FNV-1a over the serialized episode; the determinism fingerprint.
std::uint64_t episode_hash(const EpisodeRecord& rec);

// 8-bit binary PGM (P5); nonzero cells render white.
void write_pgm(const std::vector<std::uint8_t>& grid, int h, int w,
               const std::string& path);

}  // namespace scanenc
