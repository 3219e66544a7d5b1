#include "squads/grouper.hpp"

#include <algorithm>
#include <cmath>

#include "squads/errors.hpp"
#include "squads/rng.hpp"

namespace squads::grouper {

int Partition::n_agents() const {
  int n = 0;
  for (const auto& g : groups) n += static_cast<int>(g.size());
  return n;
}

int Partition::group_of(int agent) const {
  for (int g = 0; g < static_cast<int>(groups.size()); ++g) {
    for (int a : groups[static_cast<size_t>(g)]) {
      if (a == agent) return g;
    }
  }
  throw StructuralError("agent " + std::to_string(agent) + " not in partition");
}

void Partition::validate(int n) const {
  std::vector<int> seen(static_cast<size_t>(n), 0);
  int last_lead = -1;
  for (const auto& g : groups) {
    if (g.empty()) throw ValidationError("partition contains an empty subgroup");
    if (g.front() <= last_lead) throw ValidationError("subgroups not ordered by smallest member");
    last_lead = g.front();
    int prev = -1;
    for (int a : g) {
      if (a < 0 || a >= n) throw ValidationError("agent index " + std::to_string(a) + " out of range");
      if (a <= prev) throw ValidationError("subgroup members not ascending");
      prev = a;
      if (seen[static_cast<size_t>(a)]++) throw ValidationError("agent appears in two subgroups");
    }
  }
  for (int a = 0; a < n; ++a) {
    if (!seen[static_cast<size_t>(a)]) throw ValidationError("agent " + std::to_string(a) + " uncovered");
  }
}

Partition partition_of(const std::vector<int>& gids, int n) {
  if (static_cast<int>(gids.size()) != n) throw ValidationError("partition_of: wrong number of ids");
  for (int id : gids) {
    if (id < 0 || id >= n) {
      throw ValidationError("group id " + std::to_string(id) + " out of range [0," + std::to_string(n) + ")");
    }
  }
  Partition p;
  std::vector<int> slot(static_cast<size_t>(n), -1);  // group id -> index in p.groups
  for (int a = 0; a < n; ++a) {
    int id = gids[static_cast<size_t>(a)];
    if (slot[static_cast<size_t>(id)] < 0) {
      slot[static_cast<size_t>(id)] = static_cast<int>(p.groups.size());
      p.groups.emplace_back();
    }
    p.groups[static_cast<size_t>(slot[static_cast<size_t>(id)])].push_back(a);
  }
  p.validate(n);
  return p;
}

Partition partition_from_groups(std::vector<std::vector<int>> groups, int n) {
  for (auto& g : groups) std::sort(g.begin(), g.end());
  std::sort(groups.begin(), groups.end(),
            [](const std::vector<int>& a, const std::vector<int>& b) { return a.front() < b.front(); });
  Partition p;
  p.groups = std::move(groups);
  p.validate(n);
  return p;
}

nn::MlpSpec GrouperSpec::actor_spec() const {
  return nn::MlpSpec{"grouper/pi", {actor_input_dim(), hidden, n_max}};
}

nn::MlpSpec GrouperSpec::critic_spec() const {
  return nn::MlpSpec{"grouper/vf", {critic_input_dim(), hidden, 1}};
}

nn::ParameterSet init_grouper(const GrouperSpec& spec, std::mt19937_64& rng) {
  return nn::init_mlp(spec.actor_spec(), rng, "grouper");
}

nn::ParameterSet init_grouper_critic(const GrouperSpec& spec, std::mt19937_64& rng) {
  return nn::init_mlp(spec.critic_spec(), rng, "grouper-critic");
}

namespace {
void append_autoregressive(const GrouperSpec& spec, const std::vector<int>& prev, int agent,
                           std::vector<double>* out) {
  out->resize(out->size() + static_cast<size_t>((spec.n_max - 1) * spec.n_max), 0.0);
  size_t base = out->size() - static_cast<size_t>((spec.n_max - 1) * spec.n_max);
  for (size_t j = 0; j < prev.size(); ++j) {
    (*out)[base + j * static_cast<size_t>(spec.n_max) + static_cast<size_t>(prev[j])] = 1.0;
  }
  out->resize(out->size() + static_cast<size_t>(spec.n_max), 0.0);
  (*out)[out->size() - static_cast<size_t>(spec.n_max) + static_cast<size_t>(agent)] = 1.0;
}
}  // namespace

std::vector<double> grouper_actor_input(const GrouperSpec& spec, const std::vector<double>& context,
                                        const std::vector<int>& prev, int agent) {
  if (static_cast<int>(context.size()) != spec.context_dim) {
    throw StructuralError("grouper context width " + std::to_string(context.size()) +
                          " != spec.context_dim " + std::to_string(spec.context_dim));
  }
  std::vector<double> out = context;
  append_autoregressive(spec, prev, agent, &out);
  return out;
}

std::vector<double> grouper_critic_input(const GrouperSpec& spec, const std::vector<double>& state,
                                         const std::vector<int>& prev, int agent) {
  if (static_cast<int>(state.size()) != spec.state_dim) {
    throw StructuralError("grouper critic state width mismatch");
  }
  std::vector<double> out = state;
  append_autoregressive(spec, prev, agent, &out);
  return out;
}

GroupDecision choose_groups(const nn::ParameterSet& psi, const GrouperSpec& spec,
                            const std::vector<std::vector<double>>& contexts, int n,
                            std::mt19937_64* rng) {
  if (static_cast<int>(contexts.size()) != n) {
    throw StructuralError("choose_groups: need one context per agent");
  }
  GroupDecision out;
  nn::MlpSpec actor = spec.actor_spec();
  for (int i = 0; i < n; ++i) {
    std::vector<double> in = grouper_actor_input(spec, contexts[static_cast<size_t>(i)], out.gids, i);
    nn::Graph g;
    nn::Binder b(g, {&psi});
    nn::Value logits = mlp_forward(b, actor, in);
    if (n < spec.n_max) logits = g.slice(logits, 0, n);
    nn::Value logp = g.log_softmax(logits);
    const nn::Tensor& lp = g.value(logp);
    int choice;
    if (rng != nullptr) {
      choice = rl::categorical_from_logp(lp.data, *rng);
    } else {
      choice = 0;
      for (int j = 1; j < lp.size(); ++j) {
        if (lp[j] > lp[choice]) choice = j;
      }
    }
    out.gids.push_back(choice);
    out.logp.push_back(lp[choice]);
  }
  return out;
}

GrouperTrainState init_grouper_train_state(const GrouperSpec& spec, GrouperContext mode,
                                           const rl::PPOConfig& cfg, std::mt19937_64& rng) {
  GrouperTrainState st;
  st.spec = spec;
  st.mode = mode;
  st.psi = init_grouper(spec, rng);
  st.critic = init_grouper_critic(spec, rng);
  nn::AdamConfig ac;
  ac.lr = cfg.actor_lr;
  st.psi_adam = nn::AdamState::init(st.psi, ac);
  nn::AdamConfig cc;
  cc.lr = cfg.critic_lr;
  st.critic_adam = nn::AdamState::init(st.critic, cc);
  return st;
}

std::vector<std::vector<double>> batch_contexts(const data::SegmentBatch& batch, GrouperContext mode) {
  std::vector<std::vector<double>> out;
  out.reserve(static_cast<size_t>(batch.n_agents));
  for (int i = 0; i < batch.n_agents; ++i) {
    if (mode == GrouperContext::kState) {
      out.push_back(batch.start_state);
    } else {
      out.push_back(batch.segments[static_cast<size_t>(i)].obs[0]);
    }
  }
  return out;
}

GrouperPhaseStats grouper_ppo_phase(GrouperTrainState& st, const DiscoveryLoss& loss_fn,
                                    const std::vector<const data::SegmentBatch*>& batches,
                                    const rl::PPOConfig& cfg, std::mt19937_64& rng) {
  GrouperPhaseStats stats;
  rl::RolloutBuffer buf;
  nn::MlpSpec actor = st.spec.actor_spec();
  nn::MlpSpec critic = st.spec.critic_spec();

  for (const data::SegmentBatch* batch : batches) {
    int n = batch->n_agents;
    std::vector<std::vector<double>> contexts = batch_contexts(*batch, st.mode);
    std::vector<rl::Transition> episode;
    std::vector<int> prev;
    for (int i = 0; i < n; ++i) {
      rl::Transition t;
      t.actor_input = grouper_actor_input(st.spec, contexts[static_cast<size_t>(i)], prev, i);
      t.critic_input = grouper_critic_input(st.spec, batch->start_state, prev, i);
      rl::DiscreteSample ds = rl::discrete_sample(st.psi, actor, t.actor_input, n, false, rng);
      t.action = ds.action;
      t.logp = ds.logp;
      t.n_valid = n;
      t.value = rl::critic_value(st.critic, critic, t.critic_input);
      t.gamma = 1.0;  // undiscounted within the n-step grouping episode
      t.done = (i == n - 1);
      prev.push_back(ds.action);
      episode.push_back(std::move(t));
    }
    Partition part = partition_of(prev, n);
    double loss = loss_fn(*batch, part);
    if (!std::isfinite(loss)) {
      st.skipped_batches += 1;
      continue;
    }
    double raw = -loss;
    st.reward_norm.update(raw);
    episode.back().reward = st.reward_norm.normalize(raw);
    stats.mean_raw_reward += raw;
    stats.episodes += 1;
    for (rl::Transition& t : episode) buf.steps.push_back(std::move(t));
  }
  if (stats.episodes == 0) return stats;
  stats.mean_raw_reward /= stats.episodes;

  rl::compute_gae(buf, cfg.lam);

  rl::PolicyHeads heads;
  heads.policy = [&](nn::Binder& b, const rl::Transition& t) {
    return rl::discrete_logp_entropy(b, actor, t.actor_input, t.action, t.n_valid);
  };
  heads.value = [&](nn::Binder& b, const rl::Transition& t) {
    return mlp_forward(b, critic, t.critic_input);
  };
  rl::PPOUpdateResult upd =
      rl::ppo_update(st.psi, st.psi_adam, st.critic, st.critic_adam, buf, cfg, heads, rng);
  st.psi = std::move(upd.actor);
  st.critic = std::move(upd.critic);
  st.psi_adam = std::move(upd.actor_adam);
  st.critic_adam = std::move(upd.critic_adam);
  stats.diag = upd.diag;
  return stats;
}

}  // namespace squads::grouper
