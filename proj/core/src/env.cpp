#include "squads/env.hpp"

#include <algorithm>
#include <cmath>

#include "squads/errors.hpp"
#include "squads/rng.hpp"

namespace squads::env {

namespace {
int cheb(int ax, int ay, int bx, int by) { return std::max(std::abs(ax - bx), std::abs(ay - by)); }

int third_width(int w) { return std::max(1, w / 3); }
}  // namespace

void TaskConfig::validate() const {
  if (grid_width < 2 || grid_height < 1) throw ConfigError("grid too small");
  if (n_agents < 1 || n_agents > kNMax) {
    throw ConfigError("n_agents must be in [1, " + std::to_string(kNMax) + "]");
  }
  if (n_enemies < 1 || n_enemies > kEMax) {
    throw ConfigError("n_enemies must be in [1, " + std::to_string(kEMax) + "]");
  }
  if (enemy_health < 1) throw ConfigError("enemy_health must be positive");
  if (view_radius < 1) throw ConfigError("view_radius must be positive");
  if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
  int cap = third_width(grid_width) * grid_height;
  if (n_agents > cap) throw ConfigError("more agents than cells in the left third");
  if (n_enemies > cap) throw ConfigError("more enemies than cells in the right third");
}

TaskConfig task_by_id(const std::string& id) {
  TaskConfig c;
  c.task_id = id;
  if (id == "g3") {
    c.grid_width = 12;
    c.grid_height = 9;
    c.n_agents = 3;
    c.n_enemies = 3;
    c.view_radius = 7;
    c.max_steps = 50;
  } else if (id == "g5") {
    c.grid_width = 15;
    c.grid_height = 12;
    c.n_agents = 5;
    c.n_enemies = 5;
    c.view_radius = 9;
    c.max_steps = 60;
  } else if (id == "g7") {
    c.grid_width = 15;
    c.grid_height = 15;
    c.n_agents = 7;
    c.n_enemies = 7;
    c.view_radius = 10;
    c.max_steps = 110;
  } else if (id == "g10") {
    c.grid_width = 18;
    c.grid_height = 15;
    c.n_agents = 10;
    c.n_enemies = 10;
    c.view_radius = 12;
    c.max_steps = 120;
  } else if (id == "g5v6") {
    c.grid_width = 15;
    c.grid_height = 12;
    c.n_agents = 5;
    c.n_enemies = 6;
    c.view_radius = 9;
    c.max_steps = 60;
  } else {
    throw ConfigError("unknown task id '" + id + "'");
  }
  c.validate();
  return c;
}

std::vector<std::string> task_ids() { return {"g3", "g5", "g7", "g10", "g5v6"}; }

int obs_dim() { return 3 + 4 * kNMax + 4 * kEMax; }
int state_dim() { return 4 * kNMax + 4 * kEMax + 1; }

namespace {
struct SlotRef {
  int dist;
  int index;
};

void fill_slots(const TaskConfig& cfg, const Unit& me, const std::vector<Unit>& units, int skip_index,
                int max_health, int n_slots, std::vector<double>& out) {
  std::vector<SlotRef> vis;
  for (int i = 0; i < static_cast<int>(units.size()); ++i) {
    if (i == skip_index) continue;
    const Unit& u = units[static_cast<size_t>(i)];
    if (!u.alive) continue;
    int d = cheb(me.x, me.y, u.x, u.y);
    if (d > cfg.view_radius) continue;
    vis.push_back({d, i});
  }
  std::sort(vis.begin(), vis.end(), [](const SlotRef& a, const SlotRef& b) {
    return a.dist != b.dist ? a.dist < b.dist : a.index < b.index;
  });
  double nx = std::max(1, cfg.grid_width - 1);
  double ny = std::max(1, cfg.grid_height - 1);
  for (int s = 0; s < n_slots; ++s) {
    if (s < static_cast<int>(vis.size())) {
      const Unit& u = units[static_cast<size_t>(vis[static_cast<size_t>(s)].index)];
      out.push_back((u.x - me.x) / nx);
      out.push_back((u.y - me.y) / ny);
      out.push_back(static_cast<double>(u.health) / max_health);
      out.push_back(1.0);
    } else {
      out.insert(out.end(), {0.0, 0.0, 0.0, 0.0});
    }
  }
}
}  // namespace

std::vector<double> observe(const TaskConfig& cfg, const EnvState& s, int agent) {
  if (agent < 0 || agent >= static_cast<int>(s.agents.size())) {
    throw StructuralError("observe: agent index out of range");
  }
  const Unit& me = s.agents[static_cast<size_t>(agent)];
  std::vector<double> out;
  out.reserve(static_cast<size_t>(obs_dim()));
  if (!me.alive) {
    out.assign(static_cast<size_t>(obs_dim()), 0.0);
    return out;
  }
  out.push_back(me.x / std::max(1.0, cfg.grid_width - 1.0));
  out.push_back(me.y / std::max(1.0, cfg.grid_height - 1.0));
  out.push_back(1.0);
  fill_slots(cfg, me, s.agents, agent, kAgentHealth, kNMax, out);
  fill_slots(cfg, me, s.enemies, -1, cfg.enemy_health, kEMax, out);
  return out;
}

std::vector<std::vector<double>> observe_all(const TaskConfig& cfg, const EnvState& s) {
  std::vector<std::vector<double>> obs;
  obs.reserve(s.agents.size());
  for (int i = 0; i < static_cast<int>(s.agents.size()); ++i) obs.push_back(observe(cfg, s, i));
  return obs;
}

std::vector<double> global_state(const TaskConfig& cfg, const EnvState& s) {
  std::vector<double> out;
  out.reserve(static_cast<size_t>(state_dim()));
  double nx = std::max(1, cfg.grid_width - 1);
  double ny = std::max(1, cfg.grid_height - 1);
  auto push_units = [&](const std::vector<Unit>& units, int n_slots, int max_health) {
    for (int i = 0; i < n_slots; ++i) {
      if (i < static_cast<int>(units.size()) && units[static_cast<size_t>(i)].alive) {
        const Unit& u = units[static_cast<size_t>(i)];
        out.push_back(u.x / nx);
        out.push_back(u.y / ny);
        out.push_back(static_cast<double>(u.health) / max_health);
        out.push_back(1.0);
      } else {
        out.insert(out.end(), {0.0, 0.0, 0.0, 0.0});
      }
    }
  };
  push_units(s.agents, kNMax, kAgentHealth);
  push_units(s.enemies, kEMax, cfg.enemy_health);
  out.push_back(static_cast<double>(s.step) / cfg.max_steps);
  return out;
}

bool all_enemies_dead(const EnvState& s) {
  for (const Unit& e : s.enemies) {
    if (e.alive) return false;
  }
  return true;
}

bool all_agents_dead(const EnvState& s) {
  for (const Unit& a : s.agents) {
    if (a.alive) return false;
  }
  return true;
}

bool terminal(const TaskConfig& cfg, const EnvState& s) {
  return all_enemies_dead(s) || all_agents_dead(s) || s.step >= cfg.max_steps;
}

ResetOut reset_env(const TaskConfig& cfg, std::uint64_t episode_seed) {
  cfg.validate();
  std::mt19937_64 rng = named_stream(splitmix64(cfg.seed) ^ episode_seed, "env.reset");

  int tw = third_width(cfg.grid_width);
  // Agents spawn as a cluster around a seeded anchor cell; enemies keep a
  // minimum Chebyshev spacing (relaxed until the count fits) so that
  // engagements stay locally separable. Enemy indices are assigned by
  // distance from the agent anchor.
  int anchor_c = uniform_int(rng, tw * cfg.grid_height);
  int ax = anchor_c % tw;
  int ay = anchor_c / tw;
  auto place_cluster = [&](int col0, int count) {
    std::vector<std::pair<int, int>> cells;
    for (int y = 0; y < cfg.grid_height; ++y) {
      for (int x = 0; x < tw; ++x) cells.emplace_back(x, y);
    }
    std::sort(cells.begin(), cells.end(), [&](const auto& a, const auto& b) {
      int da = cheb(a.first, a.second, ax, ay);
      int db = cheb(b.first, b.second, ax, ay);
      if (da != db) return da < db;
      if (a.second != b.second) return a.second < b.second;
      return a.first < b.first;
    });
    std::vector<Unit> units;
    for (int i = 0; i < count; ++i) {
      Unit u;
      u.x = col0 + cells[static_cast<size_t>(i)].first;
      u.y = cells[static_cast<size_t>(i)].second;
      u.alive = true;
      units.push_back(u);
    }
    return units;
  };
  // Enemies sit on a seeded 3-spaced lattice (pairwise Chebyshev >= 3 by
  // construction) when it has capacity, otherwise on a greedily spaced
  // shuffle of the third.
  auto place_spaced = [&](int col0, int count) {
    std::vector<std::pair<int, int>> cells;
    int c0 = uniform_int(rng, std::min(3, tw));
    int r0 = uniform_int(rng, std::min(3, cfg.grid_height));
    for (int y = r0; y < cfg.grid_height; y += 3) {
      for (int x = c0; x < tw; x += 3) cells.emplace_back(x, y);
    }
    std::vector<Unit> units;
    if (static_cast<int>(cells.size()) >= count) {
      std::vector<int> order = permutation(rng, static_cast<int>(cells.size()));
      for (int i = 0; i < count; ++i) {
        Unit u;
        u.x = col0 + cells[static_cast<size_t>(order[static_cast<size_t>(i)])].first;
        u.y = cells[static_cast<size_t>(order[static_cast<size_t>(i)])].second;
        u.alive = true;
        units.push_back(u);
      }
    } else {
      std::vector<int> order = permutation(rng, tw * cfg.grid_height);
      for (int want = 3; want >= 0 && static_cast<int>(units.size()) < count; --want) {
        units.clear();
        for (int c : order) {
          int x = c % tw;
          int y = c / tw;
          bool ok = true;
          for (const Unit& u : units) {
            if (cheb(col0 + x, y, u.x, u.y) < want) {
              ok = false;
              break;
            }
          }
          if (!ok) continue;
          Unit u;
          u.x = col0 + x;
          u.y = y;
          u.alive = true;
          units.push_back(u);
          if (static_cast<int>(units.size()) == count) break;
        }
      }
    }
    std::sort(units.begin(), units.end(), [&](const Unit& a, const Unit& b) {
      int da = cheb(a.x, a.y, ax, ay);
      int db = cheb(b.x, b.y, ax, ay);
      if (da != db) return da < db;
      if (a.y != b.y) return a.y < b.y;
      return a.x < b.x;
    });
    return units;
  };

  ResetOut out;
  out.state.agents = place_cluster(0, cfg.n_agents);
  for (Unit& a : out.state.agents) a.health = kAgentHealth;
  out.state.enemies = place_spaced(cfg.grid_width - tw, cfg.n_enemies);
  for (Unit& e : out.state.enemies) e.health = cfg.enemy_health;
  out.state.step = 0;
  out.obs = observe_all(cfg, out.state);
  return out;
}

StepOut step_env(const TaskConfig& cfg, const EnvState& s, const std::vector<int>& actions) {
  if (terminal(cfg, s)) throw ValidationError("step on a terminal state");
  if (static_cast<int>(actions.size()) != cfg.n_agents) {
    throw ValidationError("expected " + std::to_string(cfg.n_agents) + " actions, got " +
                          std::to_string(actions.size()));
  }
  for (int i = 0; i < cfg.n_agents; ++i) {
    int a = actions[static_cast<size_t>(i)];
    if (a < 0 || a >= kNumActions) throw ValidationError("action out of range for agent " + std::to_string(i));
    if (!s.agents[static_cast<size_t>(i)].alive && a != kStay) {
      throw ValidationError("dead agent " + std::to_string(i) + " must take the no-op action");
    }
  }

  StepOut out;
  out.state = s;
  EnvState& ns = out.state;

  auto occupied = [&](int x, int y) {
    for (const Unit& u : ns.agents) {
      if (u.alive && u.x == x && u.y == y) return true;
    }
    for (const Unit& u : ns.enemies) {
      if (u.alive && u.x == x && u.y == y) return true;
    }
    return false;
  };

  // Moves, lowest agent index first.
  for (int i = 0; i < cfg.n_agents; ++i) {
    Unit& a = ns.agents[static_cast<size_t>(i)];
    if (!a.alive) continue;
    int act = actions[static_cast<size_t>(i)];
    int tx = a.x, ty = a.y;
    if (act == kUp) {
      ty -= 1;
    } else if (act == kDown) {
      ty += 1;
    } else if (act == kLeft) {
      tx -= 1;
    } else if (act == kRight) {
      tx += 1;
    } else {
      continue;
    }
    if (tx < 0 || tx >= cfg.grid_width || ty < 0 || ty >= cfg.grid_height) continue;
    if (occupied(tx, ty)) continue;
    a.x = tx;
    a.y = ty;
  }

  // Agent attacks: each hits its nearest visible living enemy if within
  // Chebyshev range 1. Resolved in agent index order against live healths.
  double damage = 0.0;
  for (int i = 0; i < cfg.n_agents; ++i) {
    const Unit& a = ns.agents[static_cast<size_t>(i)];
    if (!a.alive || actions[static_cast<size_t>(i)] != kAttack) continue;
    int best = -1, best_d = 1 << 30;
    for (int e = 0; e < static_cast<int>(ns.enemies.size()); ++e) {
      const Unit& u = ns.enemies[static_cast<size_t>(e)];
      if (!u.alive) continue;
      int d = cheb(a.x, a.y, u.x, u.y);
      if (d > cfg.view_radius) continue;
      if (d < best_d) {
        best_d = d;
        best = e;
      }
    }
    if (best >= 0 && best_d <= 1) {
      Unit& tgt = ns.enemies[static_cast<size_t>(best)];
      tgt.health -= 1;
      damage += 1.0;
      if (tgt.health <= 0) {
        tgt.health = 0;
        tgt.alive = false;
      }
    }
  }

  // Enemy counter-attacks: nearest living agent within range 1, ties to the
  // lowest agent index.
  for (const Unit& e : ns.enemies) {
    if (!e.alive) continue;
    int best = -1, best_d = 1 << 30;
    for (int i = 0; i < cfg.n_agents; ++i) {
      const Unit& a = ns.agents[static_cast<size_t>(i)];
      if (!a.alive) continue;
      int d = cheb(e.x, e.y, a.x, a.y);
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    if (best >= 0 && best_d <= 1) {
      Unit& tgt = ns.agents[static_cast<size_t>(best)];
      tgt.health -= 1;
      if (tgt.health <= 0) {
        tgt.health = 0;
        tgt.alive = false;
      }
    }
  }

  ns.step += 1;
  bool won = all_enemies_dead(ns);
  out.won = won;
  out.damage_dealt = damage;
  out.done = won || all_agents_dead(ns) || ns.step >= cfg.max_steps;
  if (cfg.sparse) {
    out.reward = won ? cfg.win_bonus : 0.0;
  } else {
    out.reward = damage + (won ? cfg.win_bonus : 0.0);
  }
  out.obs = observe_all(cfg, ns);
  return out;
}

std::vector<int> scripted_expert(const TaskConfig& cfg, const EnvState& s, double eps,
                                 std::mt19937_64& rng) {
  int target = -1;
  for (int e = 0; e < static_cast<int>(s.enemies.size()); ++e) {
    if (s.enemies[static_cast<size_t>(e)].alive) {
      target = e;
      break;
    }
  }
  auto blocked = [&](int x, int y) {
    if (x < 0 || x >= cfg.grid_width || y < 0 || y >= cfg.grid_height) return true;
    for (const Unit& u : s.agents) {
      if (u.alive && u.x == x && u.y == y) return true;
    }
    for (const Unit& u : s.enemies) {
      if (u.alive && u.x == x && u.y == y) return true;
    }
    return false;
  };
  std::vector<int> acts(static_cast<size_t>(cfg.n_agents), kStay);
  for (int i = 0; i < cfg.n_agents; ++i) {
    const Unit& a = s.agents[static_cast<size_t>(i)];
    if (!a.alive) continue;  // forced no-op, never noised
    int act = kStay;
    if (target >= 0) {
      const Unit& t = s.enemies[static_cast<size_t>(target)];
      bool in_range = false;
      for (const Unit& e : s.enemies) {
        if (e.alive && cheb(a.x, a.y, e.x, e.y) <= 1) {
          in_range = true;
          break;
        }
      }
      if (in_range) {
        act = kAttack;
      } else {
        // One step along the shortest path, horizontal leg first; if that
        // cell is taken, fall to the vertical leg.
        int hor = t.x != a.x ? (t.x > a.x ? kRight : kLeft) : kStay;
        int ver = t.y != a.y ? (t.y > a.y ? kDown : kUp) : kStay;
        int hx = a.x + (hor == kRight ? 1 : hor == kLeft ? -1 : 0);
        if (hor != kStay && !blocked(hx, a.y)) {
          act = hor;
        } else if (ver != kStay) {
          act = ver;
        } else if (hor != kStay) {
          act = hor;  // blocked but still the only shortening move
        }
      }
    }
    if (eps > 0.0 && uniform01(rng) < eps) act = uniform_int(rng, kNumActions);
    acts[static_cast<size_t>(i)] = act;
  }
  return acts;
}

}  // namespace squads::env
