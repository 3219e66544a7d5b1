#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace squads::env {

// Skirmish: a cooperative grid Dec-POMDP. n ally agents fight scripted
// stationary enemies under partial observation and one shared team reward.

constexpr int kNMax = 10;
constexpr int kEMax = 12;
constexpr int kNumActions = 6;
constexpr int kAgentHealth = 3;

enum Action : int {
  kStay = 0,
  kUp = 1,
  kDown = 2,
  kLeft = 3,
  kRight = 4,
  kAttack = 5,
};

struct TaskConfig {
  std::string task_id;
  int grid_width{8};
  int grid_height{8};
  int n_agents{3};
  int n_enemies{3};
  int enemy_health{2};
  int view_radius{5};
  int max_steps{50};
  bool sparse{false};
  double win_bonus{20.0};
  std::uint64_t seed{0};

  void validate() const;
};

// Built-in task registry: the homogeneous "gN" family plus the asymmetric
// "g5v6" (more enemies than agents).
TaskConfig task_by_id(const std::string& id);
std::vector<std::string> task_ids();

struct Unit {
  int x{0};
  int y{0};
  int health{0};
  bool alive{false};
};

struct EnvState {
  std::vector<Unit> agents;
  std::vector<Unit> enemies;
  int step{0};
};

int obs_dim();
int state_dim();

// Fixed-length local observation: own position (normalized), own alive
// flag, then kNMax ally slots and kEMax enemy slots of (relative position,
// health fraction, visible flag), filled nearest-first; absent slots are
// zero. Dead observers see an all-zero vector.
std::vector<double> observe(const TaskConfig& cfg, const EnvState& s, int agent);
std::vector<std::vector<double>> observe_all(const TaskConfig& cfg, const EnvState& s);

// Global state vector for centralized components.
std::vector<double> global_state(const TaskConfig& cfg, const EnvState& s);

bool all_enemies_dead(const EnvState& s);
bool all_agents_dead(const EnvState& s);
bool terminal(const TaskConfig& cfg, const EnvState& s);

struct ResetOut {
  EnvState state;
  std::vector<std::vector<double>> obs;
};

// Agents spawn in the left third, enemies in the right third, cells drawn
// from the episode-seeded stream.
ResetOut reset_env(const TaskConfig& cfg, std::uint64_t episode_seed);

struct StepOut {
  double reward{0.0};
  EnvState state;
  std::vector<std::vector<double>> obs;
  bool done{false};
  bool won{false};
  double damage_dealt{0.0};
};

// Pure transition: moves (collisions keep movers put, lowest index moves
// first), agent attacks at Chebyshev range 1, enemy counter-attacks, shared
// reward, termination.
StepOut step_env(const TaskConfig& cfg, const EnvState& s, const std::vector<int>& actions);

// Deterministic focus-fire policy: everyone targets the lowest-index living
// enemy, attacks in range, else steps along the shortest path (horizontal
// before vertical). With probability eps an agent's action is replaced by a
// uniform random one.
std::vector<int> scripted_expert(const TaskConfig& cfg, const EnvState& s, double eps,
                                 std::mt19937_64& rng);

}  // namespace squads::env
