#include "squads/runtime.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <queue>
#include <thread>

#include "squads/errors.hpp"
#include "squads/rng.hpp"

namespace squads::runtime {

Manner manner_from_string(const std::string& s) {
  if (s == "3d") return Manner::k3d;
  if (s == "hier") return Manner::kHier;
  if (s == "mixed") return Manner::kMixed;
  if (s == "rule") return Manner::kRule;
  if (s == "flat") return Manner::kFlat;
  throw ConfigError("unknown assignment manner '" + s + "'");
}

std::string manner_to_string(Manner m) {
  switch (m) {
    case Manner::k3d: return "3d";
    case Manner::kHier: return "hier";
    case Manner::kMixed: return "mixed";
    case Manner::kRule: return "rule";
    case Manner::kFlat: return "flat";
  }
  return "?";
}

FrozenSkills FrozenSkills::from_checkpoint(const nn::Checkpoint& ckpt) {
  FrozenSkills fs;
  fs.meta = ckpt.meta;
  fs.tensors = ckpt.tensors;
  fs.dims = skills::EnvDims{ckpt.meta.obs_dim, ckpt.meta.state_dim, ckpt.meta.n_actions, ckpt.meta.n_max};
  fs.enc_spec = nn::MlpSpec{"enc", {ckpt.meta.h * (fs.dims.obs_dim + fs.dims.n_actions),
                                    ckpt.meta.enc_hidden, ckpt.meta.d}};
  int cond = ckpt.meta.method == "hier" ? ckpt.meta.d + ckpt.meta.d_top : ckpt.meta.d;
  fs.dec_spec = nn::MlpSpec{"dec", {fs.dims.obs_dim + cond, ckpt.meta.dec_hidden, fs.dims.n_actions}};
  fs.gspec.context_dim =
      ckpt.meta.grouper_input == "obs" ? fs.dims.obs_dim : fs.dims.state_dim;
  fs.gspec.state_dim = fs.dims.state_dim;
  fs.gspec.n_max = fs.dims.n_max;
  fs.gspec.hidden = ckpt.meta.grouper_hidden;
  fs.agg_spec = skills::AggregatorSpec{ckpt.meta.d, ckpt.meta.d_top, ckpt.meta.heads};

  // Mixed-manner row pool.
  auto add_rows = [&](const nn::Tensor& codes, int m, int d_row) {
    int k = codes.shape[0];
    int rows = codes.shape[1] / d_row;
    for (int j = 0; j < k; ++j) {
      for (int r = 0; r < rows; ++r) {
        std::vector<double> row(codes.data.begin() + (static_cast<long>(j) * codes.shape[1] + r * d_row),
                                codes.data.begin() + (static_cast<long>(j) * codes.shape[1] + (r + 1) * d_row));
        bool dup = false;
        for (const auto& existing : fs.row_pool) {
          if (existing == row) {
            dup = true;
            break;
          }
        }
        if (!dup) {
          fs.row_pool.push_back(std::move(row));
          fs.row_pool_keys.push_back({m, j, r});
        }
      }
    }
  };
  if (ckpt.meta.method == "3d") {
    for (int m : ckpt.meta.sizes) add_rows(fs.tensors.at("E3d/m" + std::to_string(m)), m, ckpt.meta.d);
  } else if (ckpt.meta.method == "single") {
    add_rows(fs.tensors.at("Ehier/btm"), 1, ckpt.meta.d);
  }
  return fs;
}

const nn::Tensor& FrozenSkills::codes3d(int m) const {
  return tensors.at("E3d/m" + std::to_string(m));
}

bool FrozenSkills::supports(Manner manner) const { return missing_for(manner).empty(); }

std::string FrozenSkills::missing_for(Manner manner) const {
  auto need = [&](std::initializer_list<std::string> names) {
    std::string missing;
    for (const std::string& n : names) {
      if (!tensors.contains(n)) {
        if (!missing.empty()) missing += ", ";
        missing += n;
      }
    }
    return missing;
  };
  switch (manner) {
    case Manner::kFlat:
      return "";
    case Manner::k3d: {
      if (meta.method != "3d") return "E3d/m* (checkpoint method is '" + meta.method + "')";
      return need({"E3d/m1", "grouper/pi/W0"});
    }
    case Manner::kRule: {
      if (meta.method != "3d") return "E3d/m* (checkpoint method is '" + meta.method + "')";
      return need({"E3d/m1"});
    }
    case Manner::kMixed: {
      if (meta.method == "3d") return need({"E3d/m1"});
      if (meta.method == "single") return need({"Ehier/btm"});
      return "single-agent code rows (checkpoint method is '" + meta.method + "')";
    }
    case Manner::kHier: {
      if (meta.method != "hier") return "Ehier/top, agg/* (checkpoint method is '" + meta.method + "')";
      return need({"Ehier/btm", "Ehier/top", "agg/Wo", "grouper/pi/W0"});
    }
  }
  return "";
}

std::vector<double> FrozenSkills::decode_logp(const std::vector<double>& obs,
                                              const std::vector<double>& cond) const {
  nn::Graph g;
  nn::Binder b(g, {&tensors});
  std::vector<double> in = obs;
  in.insert(in.end(), cond.begin(), cond.end());
  nn::Value logits = mlp_forward(b, dec_spec, in);
  return g.value(g.log_softmax(logits)).data;
}

namespace {
grouper::Partition greedy_grouping(const FrozenSkills& fs, int n, const GroupingContext& ctx) {
  std::vector<std::vector<double>> contexts;
  contexts.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (fs.meta.grouper_input == "obs") {
      contexts.push_back(ctx.obs[static_cast<size_t>(i)]);
    } else {
      contexts.push_back(ctx.state);
    }
  }
  grouper::GroupDecision dec = grouper::choose_groups(fs.tensors, fs.gspec, contexts, n, nullptr);
  return grouper::partition_of(dec.gids, n);
}

std::vector<double> joint_of(const std::vector<std::vector<double>>& z, const std::vector<int>& group) {
  std::vector<double> joint;
  joint.reserve(group.size() * z[0].size());
  for (int agent : group) joint.insert(joint.end(), z[static_cast<size_t>(agent)].begin(), z[static_cast<size_t>(agent)].end());
  return joint;
}
}  // namespace

Assignment assign_3d(const FrozenSkills& fs, const std::vector<std::vector<double>>& z,
                     const GroupingContext& ctx) {
  int n = static_cast<int>(z.size());
  int d = fs.meta.d;
  Assignment out;
  out.partition = greedy_grouping(fs, n, ctx);
  out.cond.resize(static_cast<size_t>(n));
  out.code_index.assign(static_cast<size_t>(n), -1);
  out.top_index.assign(static_cast<size_t>(n), -1);
  for (const std::vector<int>& group : out.partition.groups) {
    int m = static_cast<int>(group.size());
    bool enabled = std::find(fs.meta.sizes.begin(), fs.meta.sizes.end(), m) != fs.meta.sizes.end();
    if (enabled) {
      const nn::Tensor& codes = fs.codes3d(m);
      std::vector<double> joint = joint_of(z, group);
      int idx = skills::nearest_code(codes, joint);
      for (int r = 0; r < m; ++r) {
        int agent = group[static_cast<size_t>(r)];
        out.cond[static_cast<size_t>(agent)] =
            std::vector<double>(codes.data.begin() + (static_cast<long>(idx) * codes.shape[1] + r * d),
                                codes.data.begin() + (static_cast<long>(idx) * codes.shape[1] + (r + 1) * d));
        out.code_index[static_cast<size_t>(agent)] = idx;
      }
    } else {
      // Size without a codebook: per-member nearest single-agent code.
      const nn::Tensor& e1 = fs.codes3d(1);
      for (int agent : group) {
        int idx = skills::nearest_code(e1, z[static_cast<size_t>(agent)]);
        out.cond[static_cast<size_t>(agent)] =
            std::vector<double>(e1.data.begin() + static_cast<long>(idx) * e1.shape[1],
                                e1.data.begin() + static_cast<long>(idx + 1) * e1.shape[1]);
        out.code_index[static_cast<size_t>(agent)] = idx;
        out.e1_fallbacks += 1;
      }
    }
  }
  return out;
}

Assignment assign_hier(const FrozenSkills& fs, const std::vector<std::vector<double>>& z,
                       const GroupingContext& ctx) {
  int n = static_cast<int>(z.size());
  Assignment out;
  out.partition = greedy_grouping(fs, n, ctx);
  out.cond.resize(static_cast<size_t>(n));
  out.code_index.assign(static_cast<size_t>(n), -1);
  out.top_index.assign(static_cast<size_t>(n), -1);
  const nn::Tensor& btm = fs.tensors.at("Ehier/btm");
  const nn::Tensor& top = fs.tensors.at("Ehier/top");
  for (const std::vector<int>& group : out.partition.groups) {
    std::vector<std::vector<double>> members;
    members.reserve(group.size());
    for (int agent : group) members.push_back(z[static_cast<size_t>(agent)]);
    std::vector<double> z_top = skills::aggregate_top_values(fs.tensors, fs.agg_spec, members);
    int ti = skills::nearest_code(top, z_top);
    std::vector<double> top_row(top.data.begin() + static_cast<long>(ti) * top.shape[1],
                                top.data.begin() + static_cast<long>(ti + 1) * top.shape[1]);
    for (int agent : group) {
      int bi = skills::nearest_code(btm, z[static_cast<size_t>(agent)]);
      std::vector<double> cond(btm.data.begin() + static_cast<long>(bi) * btm.shape[1],
                               btm.data.begin() + static_cast<long>(bi + 1) * btm.shape[1]);
      cond.insert(cond.end(), top_row.begin(), top_row.end());
      out.cond[static_cast<size_t>(agent)] = std::move(cond);
      out.code_index[static_cast<size_t>(agent)] = bi;
      out.top_index[static_cast<size_t>(agent)] = ti;
    }
  }
  return out;
}

Assignment assign_mixed(const FrozenSkills& fs, const std::vector<std::vector<double>>& z) {
  int n = static_cast<int>(z.size());
  if (fs.row_pool.empty()) throw ConfigError("mixed manner: checkpoint provides no single-agent rows");
  Assignment out;
  std::vector<int> gids(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) gids[static_cast<size_t>(i)] = i;
  out.partition = grouper::partition_of(gids, n);
  out.cond.resize(static_cast<size_t>(n));
  out.code_index.assign(static_cast<size_t>(n), -1);
  out.top_index.assign(static_cast<size_t>(n), -1);
  for (int i = 0; i < n; ++i) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t p = 0; p < fs.row_pool.size(); ++p) {
      if (fs.row_pool_keys[p][0] > n) continue;  // pool over E_{1:n} of the current team size
      double dist = skills::squared_distance(z[static_cast<size_t>(i)].data(), fs.row_pool[p].data(),
                                             static_cast<int>(fs.row_pool[p].size()));
      if (dist < best_d) {
        best_d = dist;
        best = static_cast<int>(p);
      }
    }
    if (best < 0) throw ConfigError("mixed manner: no code rows available for this team size");
    out.cond[static_cast<size_t>(i)] = fs.row_pool[static_cast<size_t>(best)];
    out.code_index[static_cast<size_t>(i)] = best;
  }
  return out;
}

namespace {
struct RuleEntry {
  double key;
  int m;
  std::vector<int> subgroup;
  int code;
};

struct RuleEntryGreater {
  bool operator()(const RuleEntry& a, const RuleEntry& b) const {
    if (a.key != b.key) return a.key > b.key;
    if (a.m != b.m) return a.m > b.m;
    if (a.subgroup != b.subgroup) return a.subgroup > b.subgroup;
    return a.code > b.code;
  }
};

void enumerate_subsets(int n, int m, std::vector<int>& cur, int start,
                       const std::function<void(const std::vector<int>&)>& emit) {
  if (static_cast<int>(cur.size()) == m) {
    emit(cur);
    return;
  }
  for (int i = start; i <= n - (m - static_cast<int>(cur.size())); ++i) {
    cur.push_back(i);
    enumerate_subsets(n, m, cur, i + 1, emit);
    cur.pop_back();
  }
}
}  // namespace

Assignment assign_rule(const FrozenSkills& fs, const std::vector<std::vector<double>>& z) {
  int n = static_cast<int>(z.size());
  int d = fs.meta.d;
  if (std::find(fs.meta.sizes.begin(), fs.meta.sizes.end(), 1) == fs.meta.sizes.end()) {
    throw ConfigError("rule manner requires the single-agent codebook");
  }
  std::priority_queue<RuleEntry, std::vector<RuleEntry>, RuleEntryGreater> heap;
  for (int m : fs.meta.sizes) {
    if (m > n) continue;
    const nn::Tensor& codes = fs.codes3d(m);
    std::vector<int> cur;
    enumerate_subsets(n, m, cur, 0, [&](const std::vector<int>& subset) {
      std::vector<double> joint = joint_of(z, subset);
      for (int j = 0; j < codes.shape[0]; ++j) {
        double dist = skills::squared_distance(
            joint.data(), codes.data.data() + static_cast<size_t>(j) * codes.shape[1],
            codes.shape[1]);
        heap.push(RuleEntry{dist / m, m, subset, j});
      }
    });
  }

  Assignment out;
  out.cond.resize(static_cast<size_t>(n));
  out.code_index.assign(static_cast<size_t>(n), -1);
  out.top_index.assign(static_cast<size_t>(n), -1);
  std::vector<bool> assigned(static_cast<size_t>(n), false);
  std::vector<std::vector<int>> groups;
  int covered = 0;
  while (covered < n) {
    if (heap.empty()) throw StructuralError("rule assignment ran out of candidates before covering all agents");
    RuleEntry e = heap.top();
    heap.pop();
    bool free = true;
    for (int agent : e.subgroup) {
      if (assigned[static_cast<size_t>(agent)]) {
        free = false;
        break;
      }
    }
    if (!free) continue;
    const nn::Tensor& codes = fs.codes3d(e.m);
    for (int r = 0; r < e.m; ++r) {
      int agent = e.subgroup[static_cast<size_t>(r)];
      assigned[static_cast<size_t>(agent)] = true;
      out.cond[static_cast<size_t>(agent)] = std::vector<double>(
          codes.data.begin() + (static_cast<long>(e.code) * codes.shape[1] + r * d),
          codes.data.begin() + (static_cast<long>(e.code) * codes.shape[1] + (r + 1) * d));
      out.code_index[static_cast<size_t>(agent)] = e.code;
    }
    groups.push_back(e.subgroup);
    covered += e.m;
  }
  out.partition = grouper::partition_from_groups(std::move(groups), n);
  out.partition.validate(n);
  return out;
}

Assignment assign(const FrozenSkills& fs, Manner manner, const std::vector<std::vector<double>>& z,
                  const GroupingContext& ctx) {
  switch (manner) {
    case Manner::k3d: return assign_3d(fs, z, ctx);
    case Manner::kHier: return assign_hier(fs, z, ctx);
    case Manner::kMixed: return assign_mixed(fs, z);
    case Manner::kRule: return assign_rule(fs, z);
    case Manner::kFlat: break;
  }
  throw ConfigError("flat manner has no skill assignment");
}

ActorCritic init_actor_critic(const skills::EnvDims& dims, int d, int actor_hidden, int critic_hidden,
                              bool discrete, int n_actions, std::mt19937_64& rng) {
  ActorCritic ac;
  ac.discrete = discrete;
  int in = 2 * dims.obs_dim;
  if (discrete) {
    ac.actor_disc = nn::MlpSpec{"actor/pi", {in, actor_hidden, n_actions}};
    ac.actor = init_mlp(ac.actor_disc, rng, "actor");
  } else {
    ac.gaussian.mean = nn::MlpSpec{"actor/pi", {in, actor_hidden, d}};
    ac.gaussian.log_std_name = "actor/log_std";
    ac.actor = init_mlp(ac.gaussian.mean, rng, "actor");
    ac.actor.insert("actor/log_std", nn::Tensor::full({d}, std::log(0.5)));
  }
  ac.critic_spec = nn::MlpSpec{"critic/vf", {dims.state_dim, critic_hidden, 1}};
  ac.critic = init_mlp(ac.critic_spec, rng, "critic");
  return ac;
}

namespace {
std::vector<double> stacked(const std::vector<double>& now, const std::vector<double>& before) {
  std::vector<double> out = now;
  out.insert(out.end(), before.begin(), before.end());
  return out;
}

void emit_row(TrajectorySink* sink, int t, const env::EnvState& st, const std::vector<int>& acts,
              const Assignment* as) {
  if (sink == nullptr) return;
  TrajectoryRow row;
  row.t = t;
  for (const env::Unit& u : st.agents) row.agents.emplace_back(u.x, u.y);
  for (const env::Unit& u : st.enemies) row.enemies.emplace_back(u.x, u.y);
  row.actions = acts;
  if (as != nullptr) {
    row.codes = as->code_index;
    row.top_codes = as->top_index;
    row.partition = as->partition.groups;
  }
  (*sink)(row);
}
}  // namespace

EpisodeResult run_skill_episode(const env::TaskConfig& cfg, const ActorCritic& ac,
                                const FrozenSkills& fs, Manner manner, int H,
                                std::uint64_t episode_seed, bool actor_greedy, bool decoder_greedy,
                                const nn::ParameterSet* critic_for_values, TrajectorySink* sink) {
  std::mt19937_64 actor_rng = named_stream(episode_seed, "skill.actor");
  std::mt19937_64 dec_rng = named_stream(episode_seed, "skill.decoder");
  env::ResetOut r = env::reset_env(cfg, episode_seed);
  env::EnvState state = r.state;
  std::vector<std::vector<double>> obs = r.obs;
  std::vector<std::vector<double>> obs_prev_decision = obs;

  EpisodeResult ep;
  Assignment as;
  SkillTransition tr;
  bool have_open = false;
  int t = 0;
  while (true) {
    if (t % H == 0) {
      if (have_open) {
        ep.transitions.push_back(std::move(tr));
        tr = SkillTransition{};
      }
      tr.state = env::global_state(cfg, state);
      tr.value = critic_for_values != nullptr
                     ? rl::critic_value(*critic_for_values, ac.critic_spec, tr.state)
                     : 0.0;
      std::vector<std::vector<double>> z(static_cast<size_t>(cfg.n_agents));
      for (int i = 0; i < cfg.n_agents; ++i) {
        std::vector<double> in = stacked(obs[static_cast<size_t>(i)], obs_prev_decision[static_cast<size_t>(i)]);
        rl::GaussianSample gs = rl::gaussian_sample(ac.actor, ac.gaussian, in, actor_greedy, actor_rng);
        tr.actor_inputs.push_back(std::move(in));
        tr.logp.push_back(gs.logp);
        z[static_cast<size_t>(i)] = gs.z;
      }
      tr.z = z;
      GroupingContext ctx{tr.state, obs};
      as = assign(fs, manner, z, ctx);
      obs_prev_decision = obs;
      have_open = true;
    }
    // Decode one primitive step per agent from the frozen skill policy.
    std::vector<int> acts(static_cast<size_t>(cfg.n_agents), env::kStay);
    for (int i = 0; i < cfg.n_agents; ++i) {
      if (!state.agents[static_cast<size_t>(i)].alive) continue;
      std::vector<double> lp = fs.decode_logp(obs[static_cast<size_t>(i)], as.cond[static_cast<size_t>(i)]);
      int a;
      if (decoder_greedy) {
        a = 0;
        for (int j = 1; j < static_cast<int>(lp.size()); ++j) {
          if (lp[static_cast<size_t>(j)] > lp[static_cast<size_t>(a)]) a = j;
        }
      } else {
        a = rl::categorical_from_logp(lp, dec_rng);
      }
      acts[static_cast<size_t>(i)] = a;
    }
    env::StepOut so = env::step_env(cfg, state, acts);
    emit_row(sink, t, so.state, acts, &as);
    state = so.state;
    obs = so.obs;
    tr.reward += so.reward;
    tr.steps_spanned += 1;
    ep.total_return += so.reward;
    t += 1;
    if (so.done) {
      tr.done = true;
      ep.transitions.push_back(std::move(tr));
      ep.won = so.won;
      break;
    }
  }
  ep.steps = t;
  return ep;
}

EpisodeResult run_flat_episode(const env::TaskConfig& cfg, const ActorCritic& ac,
                               std::uint64_t episode_seed, bool greedy,
                               const nn::ParameterSet* critic_for_values, TrajectorySink* sink) {
  std::mt19937_64 actor_rng = named_stream(episode_seed, "flat.actor");
  env::ResetOut r = env::reset_env(cfg, episode_seed);
  env::EnvState state = r.state;
  std::vector<std::vector<double>> obs = r.obs;
  std::vector<std::vector<double>> prev_obs = obs;

  EpisodeResult ep;
  int t = 0;
  while (true) {
    SkillTransition tr;
    tr.state = env::global_state(cfg, state);
    tr.value = critic_for_values != nullptr
                   ? rl::critic_value(*critic_for_values, ac.critic_spec, tr.state)
                   : 0.0;
    std::vector<int> acts(static_cast<size_t>(cfg.n_agents), env::kStay);
    for (int i = 0; i < cfg.n_agents; ++i) {
      std::vector<double> in = stacked(obs[static_cast<size_t>(i)], prev_obs[static_cast<size_t>(i)]);
      if (state.agents[static_cast<size_t>(i)].alive) {
        rl::DiscreteSample ds = rl::discrete_sample(ac.actor, ac.actor_disc, in, env::kNumActions,
                                                    greedy, actor_rng);
        acts[static_cast<size_t>(i)] = ds.action;
        tr.logp.push_back(ds.logp);
        tr.z.push_back({static_cast<double>(ds.action)});
      } else {
        tr.logp.push_back(0.0);
        tr.z.push_back({static_cast<double>(env::kStay)});
      }
      tr.actor_inputs.push_back(std::move(in));
    }
    env::StepOut so = env::step_env(cfg, state, acts);
    emit_row(sink, t, so.state, acts, nullptr);
    prev_obs = obs;
    state = so.state;
    obs = so.obs;
    tr.reward = so.reward;
    tr.steps_spanned = 1;
    tr.done = so.done;
    ep.total_return += so.reward;
    ep.transitions.push_back(std::move(tr));
    t += 1;
    if (so.done) {
      ep.won = so.won;
      break;
    }
  }
  ep.steps = t;
  return ep;
}

namespace {
// Per-episode GAE over the shared-reward time series; every agent at step t
// receives the same centralized advantage.
void fill_buffer_from_episode(const EpisodeResult& ep, const DownstreamConfig& dcfg, bool discrete,
                              rl::RolloutBuffer* buf) {
  int T = static_cast<int>(ep.transitions.size());
  std::vector<double> adv(static_cast<size_t>(T)), ret(static_cast<size_t>(T));
  double next_adv = 0.0, next_v = 0.0;
  for (int t = T - 1; t >= 0; --t) {
    const SkillTransition& tr = ep.transitions[static_cast<size_t>(t)];
    double gamma_t = std::pow(dcfg.ppo.gamma, tr.steps_spanned);
    double delta = tr.reward + gamma_t * next_v - tr.value;
    next_adv = delta + gamma_t * dcfg.ppo.lam * next_adv;
    adv[static_cast<size_t>(t)] = next_adv;
    ret[static_cast<size_t>(t)] = next_adv + tr.value;
    next_v = tr.value;
  }
  for (int t = 0; t < T; ++t) {
    const SkillTransition& tr = ep.transitions[static_cast<size_t>(t)];
    for (size_t i = 0; i < tr.actor_inputs.size(); ++i) {
      rl::Transition s;
      s.actor_input = tr.actor_inputs[i];
      s.critic_input = tr.state;
      if (discrete) {
        s.action = static_cast<int>(tr.z[i][0]);
        s.n_valid = env::kNumActions;
      } else {
        s.action_vec = tr.z[i];
      }
      s.logp = tr.logp[i];
      s.value = tr.value;
      s.reward = tr.reward;
      s.done = tr.done;
      s.gamma = std::pow(dcfg.ppo.gamma, tr.steps_spanned);
      s.advantage = adv[static_cast<size_t>(t)];
      s.ret = ret[static_cast<size_t>(t)];
      buf->steps.push_back(std::move(s));
    }
  }
}
}  // namespace

EvalSummary evaluate_policy(const env::TaskConfig& cfg, const ActorCritic& ac, const FrozenSkills* fs,
                            Manner manner, int episodes, std::uint64_t seed, TrajectorySink* sink) {
  if (episodes < 1) throw ConfigError("evaluation needs at least one episode");
  EvalSummary s;
  s.episodes = episodes;
  for (int e = 0; e < episodes; ++e) {
    std::uint64_t es = stream_seed(seed, "eval." + std::to_string(e));
    // Greedy high-level decisions; the frozen skill policy itself samples
    // (seeded), which keeps evaluation reproducible and jam-free.
    EpisodeResult ep = manner == Manner::kFlat
                           ? run_flat_episode(cfg, ac, es, true, nullptr, sink)
                           : run_skill_episode(cfg, ac, *fs, manner, fs->meta.h, es, true, false, nullptr, sink);
    s.wins += ep.won ? 1 : 0;
    s.mean_return += ep.total_return;
    s.mean_length += ep.steps;
  }
  s.mean_return /= episodes;
  s.mean_length /= episodes;
  s.win_rate = static_cast<double>(s.wins) / episodes;
  auto ci = binomial_ci95(s.wins, episodes);
  s.ci_low = ci.first;
  s.ci_high = ci.second;
  return s;
}

EvalSummary evaluate_expert(const env::TaskConfig& cfg, double eps, int episodes, std::uint64_t seed,
                            TrajectorySink* sink) {
  if (episodes < 1) throw ConfigError("evaluation needs at least one episode");
  EvalSummary s;
  s.episodes = episodes;
  for (int e = 0; e < episodes; ++e) {
    std::uint64_t es = stream_seed(seed, "eval." + std::to_string(e));
    std::mt19937_64 noise = named_stream(es, "expert.noise");
    env::ResetOut r = env::reset_env(cfg, es);
    env::EnvState state = r.state;
    int t = 0;
    while (true) {
      std::vector<int> acts = env::scripted_expert(cfg, state, eps, noise);
      env::StepOut so = env::step_env(cfg, state, acts);
      emit_row(sink, t, so.state, acts, nullptr);
      state = so.state;
      s.mean_return += so.reward;
      t += 1;
      if (so.done) {
        s.wins += so.won ? 1 : 0;
        break;
      }
    }
    s.mean_length += t;
  }
  s.mean_return /= episodes;
  s.mean_length /= episodes;
  s.win_rate = static_cast<double>(s.wins) / episodes;
  auto ci = binomial_ci95(s.wins, episodes);
  s.ci_low = ci.first;
  s.ci_high = ci.second;
  return s;
}

DownstreamResult train_downstream(const env::TaskConfig& cfg, const FrozenSkills* fs, Manner manner,
                                  const DownstreamConfig& dcfg, std::uint64_t seed) {
  bool flat = manner == Manner::kFlat;
  if (!flat) {
    if (fs == nullptr) throw ConfigError("skill manners need a skills checkpoint");
    std::string missing = fs->missing_for(manner);
    if (!missing.empty()) {
      throw ConfigError("checkpoint does not support manner '" + manner_to_string(manner) +
                        "', missing: " + missing);
    }
  }
  skills::EnvDims dims{env::obs_dim(), env::state_dim(), env::kNumActions, env::kNMax};
  std::mt19937_64 init_rng = named_stream(seed, "downstream.init");
  std::mt19937_64 update_rng = named_stream(seed, "downstream.update");
  ActorCritic ac = init_actor_critic(dims, flat ? 0 : fs->meta.d, dcfg.actor_hidden,
                                     dcfg.critic_hidden, flat, env::kNumActions, init_rng);
  if (!flat) {
    for (double& v : ac.actor.at("actor/log_std").data) v = dcfg.log_std_init;
    if (dcfg.center_actor_on_codes) {
      // Single-agent rows: the mixed/rule pool for 3d checkpoints, the
      // bottom codebook for hier/single ones.
      std::vector<std::vector<double>> rows;
      if (fs->tensors.contains("Ehier/btm")) {
        const nn::Tensor& btm = fs->tensors.at("Ehier/btm");
        for (int j = 0; j < btm.shape[0]; ++j) {
          rows.emplace_back(btm.data.begin() + static_cast<long>(j) * btm.shape[1],
                            btm.data.begin() + static_cast<long>(j + 1) * btm.shape[1]);
        }
      } else {
        rows = fs->row_pool;
      }
      int d = fs->meta.d;
      std::vector<double> mean(static_cast<size_t>(d), 0.0), var(static_cast<size_t>(d), 0.0);
      for (const auto& r : rows) {
        for (int i = 0; i < d; ++i) mean[static_cast<size_t>(i)] += r[static_cast<size_t>(i)];
      }
      for (double& m : mean) m /= static_cast<double>(rows.size());
      for (const auto& r : rows) {
        for (int i = 0; i < d; ++i) {
          double dv = r[static_cast<size_t>(i)] - mean[static_cast<size_t>(i)];
          var[static_cast<size_t>(i)] += dv * dv;
        }
      }
      nn::Tensor& bias = ac.actor.at("actor/pi/b1");
      nn::Tensor& log_std = ac.actor.at("actor/log_std");
      for (int i = 0; i < d; ++i) {
        bias[i] = mean[static_cast<size_t>(i)];
        double sd = std::sqrt(var[static_cast<size_t>(i)] / static_cast<double>(rows.size()));
        log_std[i] = std::log(std::max(0.25, sd));
      }
    }
  }
  nn::AdamConfig acfg;
  acfg.lr = dcfg.ppo.actor_lr;
  nn::AdamState actor_adam = nn::AdamState::init(ac.actor, acfg);
  nn::AdamConfig ccfg;
  ccfg.lr = dcfg.ppo.critic_lr;
  nn::AdamState critic_adam = nn::AdamState::init(ac.critic, ccfg);

  nn::ParameterSet frozen_before = flat ? nn::ParameterSet{} : fs->tensors;

  rl::PolicyHeads heads;
  heads.policy = [&](nn::Binder& b, const rl::Transition& t) {
    if (flat) return rl::discrete_logp_entropy(b, ac.actor_disc, t.actor_input, t.action, t.n_valid);
    return rl::gaussian_logp_entropy(b, ac.gaussian, t.actor_input, t.action_vec);
  };
  heads.value = [&](nn::Binder& b, const rl::Transition& t) {
    return mlp_forward(b, ac.critic_spec, t.critic_input);
  };

  DownstreamResult res;
  long episode_counter = 0;
  long next_eval = 0;
  int eval_idx = 0;
  rl::PPODiagnostics last_diag;

  auto run_eval = [&]() {
    EvalSummary ev = evaluate_policy(cfg, ac, fs, manner, dcfg.eval_episodes,
                                     stream_seed(seed, "eval." + std::to_string(eval_idx)));
    eval_idx += 1;
    EvalRow row;
    row.step = res.env_steps;
    row.win_rate = ev.win_rate;
    row.mean_return = ev.mean_return;
    row.diag = last_diag;
    res.rows.push_back(row);
    res.best_win_rate = std::max(res.best_win_rate, ev.win_rate);
    return ev.win_rate;
  };

  bool stop = false;
  while (res.env_steps < dcfg.total_steps && !stop) {
    if (res.env_steps >= next_eval) {
      double wr = run_eval();
      next_eval += dcfg.eval_every;
      if (dcfg.stop_at_win_rate > 0.0 && wr >= dcfg.stop_at_win_rate) break;
    }
    // Collect one iteration of episodes (deterministic per episode index,
    // independent of the worker layout).
    int n_ep = dcfg.episodes_per_iter;
    std::vector<EpisodeResult> results(static_cast<size_t>(n_ep));
    auto collect = [&](int idx) {
      std::uint64_t es = stream_seed(seed, "rollout." + std::to_string(episode_counter + idx));
      results[static_cast<size_t>(idx)] =
          flat ? run_flat_episode(cfg, ac, es, false, &ac.critic, nullptr)
               : run_skill_episode(cfg, ac, *fs, manner, fs->meta.h, es, false,
                                   dcfg.greedy_skill_execution, &ac.critic, nullptr);
    };
    if (dcfg.workers > 1) {
      std::vector<std::thread> pool;
      std::atomic<int> cursor{0};
      for (int w = 0; w < dcfg.workers; ++w) {
        pool.emplace_back([&]() {
          int i;
          while ((i = cursor.fetch_add(1)) < n_ep) collect(i);
        });
      }
      for (auto& th : pool) th.join();
    } else {
      for (int i = 0; i < n_ep; ++i) collect(i);
    }
    episode_counter += n_ep;

    rl::RolloutBuffer buf;
    for (const EpisodeResult& ep : results) {
      fill_buffer_from_episode(ep, dcfg, flat, &buf);
      res.env_steps += ep.steps;
    }
    rl::PPOUpdateResult upd =
        rl::ppo_update(ac.actor, actor_adam, ac.critic, critic_adam, buf, dcfg.ppo, heads, update_rng);
    last_diag = upd.diag;
    if (!upd.diag.aborted) {
      ac.actor = std::move(upd.actor);
      ac.critic = std::move(upd.critic);
      actor_adam = std::move(upd.actor_adam);
      critic_adam = std::move(upd.critic_adam);
    }
  }
  run_eval();

  res.ac = std::move(ac);
  res.frozen_intact = flat || fs->tensors.same_values(frozen_before);
  return res;
}

std::pair<double, double> binomial_ci95(int successes, int trials) {
  if (trials <= 0) return {0.0, 0.0};
  const double z = 1.959963984540054;
  double p = static_cast<double>(successes) / trials;
  double n = trials;
  double denom = 1.0 + z * z / n;
  double center = (p + z * z / (2 * n)) / denom;
  double half = z * std::sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom;
  double lo = successes == 0 ? 0.0 : std::max(0.0, center - half);
  double hi = successes == trials ? 1.0 : std::min(1.0, center + half);
  return {lo, hi};
}

}  // namespace squads::runtime
