#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "squads/env.hpp"
#include "squads/errors.hpp"
#include "squads/rng.hpp"

using namespace squads;
using namespace squads::env;

TEST_CASE("reset is deterministic in (config, episode_seed)") {
  TaskConfig cfg = task_by_id("g3");
  ResetOut a = reset_env(cfg, 123);
  ResetOut b = reset_env(cfg, 123);
  for (int i = 0; i < cfg.n_agents; ++i) {
    CHECK(a.state.agents[i].x == b.state.agents[i].x);
    CHECK(a.state.agents[i].y == b.state.agents[i].y);
    CHECK(a.obs[i] == b.obs[i]);
  }
  ResetOut c = reset_env(cfg, 124);
  bool same = true;
  for (int i = 0; i < cfg.n_agents && same; ++i) {
    same = a.state.agents[i].x == c.state.agents[i].x && a.state.agents[i].y == c.state.agents[i].y;
  }
  for (int i = 0; i < cfg.n_enemies && same; ++i) {
    same = a.state.enemies[i].x == c.state.enemies[i].x && a.state.enemies[i].y == c.state.enemies[i].y;
  }
  CHECK_FALSE(same);
}

TEST_CASE("1v1 on a 4x4 grid: both alive, disjoint cells") {
  TaskConfig cfg;
  cfg.task_id = "tiny";
  cfg.grid_width = 4;
  cfg.grid_height = 4;
  cfg.n_agents = 1;
  cfg.n_enemies = 1;
  cfg.view_radius = 4;
  cfg.max_steps = 10;
  ResetOut r = reset_env(cfg, 1);
  CHECK(r.state.agents[0].alive);
  CHECK(r.state.enemies[0].alive);
  bool disjoint = r.state.agents[0].x != r.state.enemies[0].x || r.state.agents[0].y != r.state.enemies[0].y;
  CHECK(disjoint);
}

TEST_CASE("1000 seeded resets land every unit in its designated third") {
  TaskConfig cfg;
  cfg.task_id = "scan";
  cfg.grid_width = 8;
  cfg.grid_height = 8;
  cfg.n_agents = 3;
  cfg.n_enemies = 3;
  cfg.max_steps = 10;
  int tw = 8 / 3;  // 2 columns per third
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    ResetOut r = reset_env(cfg, seed);
    std::set<std::pair<int, int>> cells;
    for (const Unit& u : r.state.agents) {
      CHECK(u.x < tw);
      CHECK(u.y >= 0);
      CHECK(u.y < 8);
      CHECK(u.health == kAgentHealth);
      cells.insert({u.x, u.y});
    }
    for (const Unit& u : r.state.enemies) {
      CHECK(u.x >= 8 - tw);
      CHECK(u.x < 8);
      cells.insert({u.x, u.y});
    }
    CHECK(cells.size() == 6);  // no overlaps
    CHECK(r.state.step == 0);
  }
}

TEST_CASE("more units than cells in a third is a configuration error") {
  TaskConfig cfg;
  cfg.task_id = "fat";
  cfg.grid_width = 3;
  cfg.grid_height = 2;  // one column of 2 cells per third
  cfg.n_agents = 3;
  cfg.n_enemies = 1;
  CHECK_THROWS_AS(reset_env(cfg, 0), ConfigError);
}

namespace {
TaskConfig duel_cfg(int enemy_health, int max_steps = 10, bool sparse = false) {
  TaskConfig cfg;
  cfg.task_id = "duel";
  cfg.grid_width = 6;
  cfg.grid_height = 6;
  cfg.n_agents = 1;
  cfg.n_enemies = 1;
  cfg.enemy_health = enemy_health;
  cfg.view_radius = 6;
  cfg.max_steps = max_steps;
  cfg.sparse = sparse;
  cfg.win_bonus = 5.0;
  return cfg;
}

EnvState duel_state(int ax, int ay, int ex, int ey, int enemy_health) {
  EnvState s;
  s.agents = {Unit{ax, ay, kAgentHealth, true}};
  s.enemies = {Unit{ex, ey, enemy_health, true}};
  return s;
}
}  // namespace

TEST_CASE("all agents stay with no enemy in range: reward 0, not done") {
  TaskConfig cfg = duel_cfg(3);
  EnvState s = duel_state(0, 0, 5, 5, 3);
  StepOut out = step_env(cfg, s, {kStay});
  CHECK(out.reward == 0.0);
  CHECK_FALSE(out.done);
  CHECK(out.state.step == 1);
}

TEST_CASE("hand-simulated two-step duel against a health-2 enemy") {
  TaskConfig cfg = duel_cfg(2);
  EnvState s = duel_state(2, 2, 2, 3, 2);
  StepOut s1 = step_env(cfg, s, {kAttack});
  CHECK(s1.reward == doctest::Approx(1.0));  // one damage dealt
  CHECK_FALSE(s1.done);
  CHECK(s1.state.enemies[0].health == 1);
  CHECK(s1.state.agents[0].health == kAgentHealth - 1);  // counter-attacked
  StepOut s2 = step_env(cfg, s1.state, {kAttack});
  CHECK(s2.done);
  CHECK(s2.won);
  CHECK(s2.reward == doctest::Approx(1.0 + cfg.win_bonus));
  CHECK(s1.reward + s2.reward == doctest::Approx(2.0 + cfg.win_bonus));
}

TEST_CASE("sparse mode pays the win bonus exactly once, on the winning step") {
  TaskConfig cfg = duel_cfg(2, 10, true);
  cfg.win_bonus = 20.0;
  EnvState s = duel_state(2, 2, 2, 3, 2);
  std::vector<double> rewards;
  bool won = false;
  while (true) {
    StepOut out = step_env(cfg, s, {kAttack});
    rewards.push_back(out.reward);
    s = out.state;
    if (out.done) {
      won = out.won;
      break;
    }
  }
  CHECK(won);
  int nonzero = 0;
  double total = 0.0;
  for (double r : rewards) {
    if (r != 0.0) nonzero += 1;
    total += r;
  }
  CHECK(nonzero == 1);
  CHECK(rewards.back() == doctest::Approx(20.0));
  CHECK(total == doctest::Approx(20.0));
}

TEST_CASE("sparse episode return is either 0 or the win bonus") {
  TaskConfig cfg = task_by_id("g3");
  cfg.sparse = true;
  std::mt19937_64 rng = named_stream(5, "acts");
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    ResetOut r = reset_env(cfg, seed);
    EnvState s = r.state;
    double total = 0.0;
    while (true) {
      std::vector<int> acts(cfg.n_agents, kStay);
      for (int i = 0; i < cfg.n_agents; ++i) {
        acts[i] = s.agents[i].alive ? uniform_int(rng, kNumActions) : kStay;
      }
      StepOut out = step_env(cfg, s, acts);
      total += out.reward;
      s = out.state;
      if (out.done) break;
    }
    bool valid = total == 0.0 || total == doctest::Approx(cfg.win_bonus);
    CHECK(valid);
  }
}

TEST_CASE("collision rule: lowest index moves first, blocked movers stay") {
  TaskConfig cfg;
  cfg.task_id = "coll";
  cfg.grid_width = 6;
  cfg.grid_height = 6;
  cfg.n_agents = 2;
  cfg.n_enemies = 1;
  cfg.max_steps = 10;
  EnvState s;
  s.agents = {Unit{1, 1, 3, true}, Unit{1, 3, 3, true}};
  s.enemies = {Unit{5, 5, 3, true}};
  // Both move toward (1,2): agent 0 down, agent 1 up. Lowest index wins.
  StepOut out = step_env(cfg, s, {kDown, kUp});
  CHECK(out.state.agents[0].y == 2);
  CHECK(out.state.agents[1].y == 3);
  // Moving into an occupied cell keeps the mover put.
  StepOut out2 = step_env(cfg, out.state, {kStay, kUp});
  CHECK(out2.state.agents[1].y == 3);
  // Off-grid moves keep the mover put.
  EnvState edge;
  edge.agents = {Unit{0, 0, 3, true}};
  edge.enemies = {Unit{5, 5, 3, true}};
  TaskConfig cfg1 = cfg;
  cfg1.n_agents = 1;
  StepOut out3 = step_env(cfg1, edge, {kLeft});
  CHECK(out3.state.agents[0].x == 0);
}

TEST_CASE("dead agents must take the no-op") {
  TaskConfig cfg = duel_cfg(3);
  cfg.n_agents = 2;
  EnvState s;
  s.agents = {Unit{0, 0, 0, false}, Unit{1, 1, 3, true}};
  s.enemies = {Unit{5, 5, 3, true}};
  CHECK_THROWS_AS(step_env(cfg, s, {kUp, kStay}), ValidationError);
  StepOut ok = step_env(cfg, s, {kStay, kUp});
  CHECK(ok.state.agents[1].y == 0);
  CHECK_THROWS_AS(step_env(cfg, s, {kStay}), ValidationError);  // wrong arity
}

TEST_CASE("stepping a terminal state is rejected") {
  TaskConfig cfg = duel_cfg(1, 1);
  EnvState s = duel_state(0, 0, 5, 5, 1);
  StepOut out = step_env(cfg, s, {kStay});
  CHECK(out.done);  // max_steps reached
  CHECK_THROWS_AS(step_env(cfg, out.state, {kStay}), ValidationError);
}

TEST_CASE("observation length is identical across the task registry") {
  int len = -1;
  for (const std::string& id : task_ids()) {
    TaskConfig cfg = task_by_id(id);
    ResetOut r = reset_env(cfg, 7);
    for (const auto& o : r.obs) {
      if (len < 0) len = static_cast<int>(o.size());
      CHECK(static_cast<int>(o.size()) == len);
      CHECK(static_cast<int>(o.size()) == obs_dim());
    }
    CHECK(static_cast<int>(global_state(cfg, r.state).size()) == state_dim());
  }
  CHECK_THROWS_AS(task_by_id("nope"), ConfigError);
}

TEST_CASE("observations: dead observers see zeros, visibility is bounded") {
  TaskConfig cfg = duel_cfg(3);
  cfg.n_agents = 2;
  cfg.view_radius = 2;
  EnvState s;
  s.agents = {Unit{0, 0, 0, false}, Unit{1, 1, 3, true}};
  s.enemies = {Unit{5, 5, 3, true}};  // out of view
  std::vector<double> dead = observe(cfg, s, 0);
  for (double v : dead) CHECK(v == 0.0);
  std::vector<double> alive = observe(cfg, s, 1);
  CHECK(alive[2] == 1.0);  // own alive flag
  // All enemy slots empty (out of view radius).
  int enemy_base = 3 + 4 * kNMax;
  for (int sidx = 0; sidx < kEMax; ++sidx) CHECK(alive[enemy_base + 4 * sidx + 3] == 0.0);
}

TEST_CASE("scripted expert attacks when adjacent to the sole enemy") {
  TaskConfig cfg = duel_cfg(3);
  EnvState s = duel_state(2, 2, 3, 3, 3);
  std::mt19937_64 rng = named_stream(0, "e");
  std::vector<int> acts = scripted_expert(cfg, s, 0.0, rng);
  CHECK(acts[0] == kAttack);
  // Horizontal before vertical on the way in.
  EnvState far = duel_state(0, 0, 4, 3, 3);
  CHECK(scripted_expert(cfg, far, 0.0, rng)[0] == kRight);
  EnvState col = duel_state(4, 0, 4, 3, 3);
  CHECK(scripted_expert(cfg, col, 0.0, rng)[0] == kDown);
}

TEST_CASE("expert wins 3v1 (health 6) within 40 steps for 100 seeds") {
  TaskConfig cfg;
  cfg.task_id = "sweep";
  cfg.grid_width = 8;
  cfg.grid_height = 8;
  cfg.n_agents = 3;
  cfg.n_enemies = 1;
  cfg.enemy_health = 6;
  cfg.view_radius = 8;
  cfg.max_steps = 40;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    ResetOut r = reset_env(cfg, seed);
    EnvState s = r.state;
    std::mt19937_64 rng = named_stream(seed, "expert");
    bool won = false;
    while (true) {
      StepOut out = step_env(cfg, s, scripted_expert(cfg, s, 0.0, rng));
      s = out.state;
      if (out.done) {
        won = out.won;
        break;
      }
    }
    CHECK(won);
  }
}

TEST_CASE("eps = 1 expert action marginal is uniform within 2%") {
  TaskConfig cfg = duel_cfg(3);
  EnvState s = duel_state(2, 2, 4, 4, 3);
  std::mt19937_64 rng = named_stream(99, "marginal");
  std::vector<long> counts(kNumActions, 0);
  const long draws = 100000;
  for (long i = 0; i < draws; ++i) counts[scripted_expert(cfg, s, 1.0, rng)[0]] += 1;
  for (int a = 0; a < kNumActions; ++a) {
    double freq = static_cast<double>(counts[a]) / draws;
    CHECK(std::abs(freq - 1.0 / 6.0) < 0.02 / 6.0);
  }
}

TEST_CASE("step emits exactly one shared scalar reward and is pure") {
  TaskConfig cfg = duel_cfg(2);
  EnvState s = duel_state(2, 2, 2, 3, 2);
  EnvState before = s;
  StepOut out = step_env(cfg, s, {kAttack});
  CHECK(s.agents[0].health == before.agents[0].health);
  CHECK(s.enemies[0].health == before.enemies[0].health);
  CHECK(out.state.step == s.step + 1);
}
