#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "squads/autodiff_check.hpp"
#include "squads/errors.hpp"
#include "squads/grouper.hpp"
#include "squads/mappo.hpp"
#include "squads/rng.hpp"

using namespace squads;

namespace {
grouper::GrouperSpec toy_spec(int ctx = 5, int n_max = 6) {
  return grouper::GrouperSpec{ctx, ctx, n_max, 16};
}

std::vector<std::vector<double>> fixed_contexts(int n, int dim, double fill = 0.25) {
  return std::vector<std::vector<double>>(static_cast<size_t>(n),
                                          std::vector<double>(static_cast<size_t>(dim), fill));
}

data::SegmentBatch stub_batch(int n, int state_dim, std::uint64_t seed) {
  std::mt19937_64 rng = named_stream(seed, "stub");
  data::SegmentBatch b;
  b.task_id = "stub";
  b.n_agents = n;
  b.valid_steps = 1;
  for (int i = 0; i < state_dim; ++i) b.start_state.push_back(uniform_real(rng, -1, 1));
  for (int a = 0; a < n; ++a) {
    data::SkillSegment seg;
    seg.agent_index = a;
    seg.obs.push_back(std::vector<double>(static_cast<size_t>(state_dim), 0.1));
    seg.acts.push_back(0);
    b.segments.push_back(std::move(seg));
  }
  return b;
}
}  // namespace

TEST_CASE("partition_of examples and validation") {
  grouper::Partition p = grouper::partition_of({0, 0, 1}, 3);
  CHECK(p.groups == std::vector<std::vector<int>>{{0, 1}, {2}});
  grouper::Partition q = grouper::partition_of({2, 1, 0}, 3);
  CHECK(q.groups == std::vector<std::vector<int>>{{0}, {1}, {2}});
  CHECK_THROWS_AS(grouper::partition_of({0, 3, 1}, 3), ValidationError);
  CHECK_THROWS_AS(grouper::partition_of({0, -1, 1}, 3), ValidationError);
  CHECK_THROWS_AS(grouper::partition_of({0, 1}, 3), ValidationError);
}

TEST_CASE("random group ids over n=6: invariants hold, relabeling recomposes") {
  std::mt19937_64 rng = named_stream(3, "scan");
  for (int trial = 0; trial < 10000; ++trial) {
    int n = 6;
    std::vector<int> gids(static_cast<size_t>(n));
    for (int& g : gids) g = uniform_int(rng, n);
    grouper::Partition p = grouper::partition_of(gids, n);
    p.validate(n);  // throws on violation
    // Recompose: label each agent by its subgroup index; the partition of
    // the relabeled ids is the same partition.
    std::vector<int> relabeled(static_cast<size_t>(n));
    for (int a = 0; a < n; ++a) relabeled[static_cast<size_t>(a)] = p.group_of(a);
    grouper::Partition p2 = grouper::partition_of(relabeled, n);
    CHECK(p2.groups == p.groups);
  }
}

TEST_CASE("choose_groups: n=1 always one group") {
  std::mt19937_64 rng = named_stream(4, "init");
  grouper::GrouperSpec spec = toy_spec();
  nn::ParameterSet psi = grouper::init_grouper(spec, rng);
  grouper::GroupDecision d = grouper::choose_groups(psi, spec, fixed_contexts(1, 5), 1, nullptr);
  CHECK(d.gids == std::vector<int>{0});
  CHECK(d.logp[0] == doctest::Approx(0.0));
}

TEST_CASE("choose_groups: uniform logits and greedy mode collapse to one subgroup") {
  grouper::GrouperSpec spec = toy_spec();
  std::mt19937_64 rng = named_stream(5, "init");
  nn::ParameterSet psi = grouper::init_grouper(spec, rng);
  for (auto& [k, v] : psi) {
    for (double& x : v.data) x = 0.0;
  }
  grouper::GroupDecision d = grouper::choose_groups(psi, spec, fixed_contexts(4, 5), 4, nullptr);
  CHECK(d.gids == std::vector<int>{0, 0, 0, 0});
  grouper::Partition p = grouper::partition_of(d.gids, 4);
  CHECK(p.groups.size() == 1);
}

TEST_CASE("choose_groups sampling is seed-deterministic") {
  grouper::GrouperSpec spec = toy_spec();
  std::mt19937_64 init = named_stream(6, "init");
  nn::ParameterSet psi = grouper::init_grouper(spec, init);
  std::mt19937_64 r1 = named_stream(7, "sample");
  std::mt19937_64 r2 = named_stream(7, "sample");
  auto a = grouper::choose_groups(psi, spec, fixed_contexts(5, 5), 5, &r1);
  auto b = grouper::choose_groups(psi, spec, fixed_contexts(5, 5), 5, &r2);
  CHECK(a.gids == b.gids);
  CHECK(a.logp == b.logp);
}

TEST_CASE("gae: trivial cases") {
  std::vector<double> adv, ret;
  rl::gae({0, 0, 0}, {0, 0, 0}, {0, 0, 1}, 0.9, 0.95, &adv, &ret);
  for (double a : adv) CHECK(a == 0.0);
  rl::gae({1}, {0}, {1}, 0.9, 0.95, &adv, &ret);
  CHECK(adv[0] == doctest::Approx(1.0));
  CHECK(ret[0] == doctest::Approx(1.0));
  CHECK_THROWS_AS(rl::gae({1, 2}, {0}, {1}, 0.9, 0.95, &adv, &ret), StructuralError);
}

TEST_CASE("gae matches a direct recursive oracle on the 3-step episode") {
  std::vector<double> rewards = {1, 0, 2};
  std::vector<double> values = {0.5, 0.5, 0.5};
  std::vector<std::uint8_t> dones = {0, 0, 1};
  double gamma = 0.9, lam = 0.95;
  std::vector<double> adv, ret;
  rl::gae(rewards, values, dones, gamma, lam, &adv, &ret);
  // Independent evaluation: A_t = sum_l (gamma*lam)^l * delta_{t+l}.
  auto delta = [&](size_t t) {
    double next_v = t + 1 < values.size() ? values[t + 1] : 0.0;
    if (dones[t]) next_v = 0.0;
    return rewards[t] + gamma * next_v - values[t];
  };
  for (size_t t = 0; t < rewards.size(); ++t) {
    double acc = 0.0, w = 1.0;
    for (size_t l = t; l < rewards.size(); ++l) {
      acc += w * delta(l);
      if (dones[l]) break;
      w *= gamma * lam;
    }
    CHECK(adv[t] == doctest::Approx(acc).epsilon(1e-12));
    CHECK(ret[t] == doctest::Approx(acc + values[t]).epsilon(1e-12));
  }
}

TEST_CASE("compute_gae honors per-transition gammas and episode boundaries") {
  rl::RolloutBuffer buf;
  auto push = [&](double r, double v, double gamma, bool done) {
    rl::Transition t;
    t.reward = r;
    t.value = v;
    t.gamma = gamma;
    t.done = done;
    buf.steps.push_back(t);
  };
  push(1.0, 0.2, 0.9, false);
  push(2.0, 0.1, 0.5, true);
  push(3.0, 0.0, 0.9, true);  // second episode, single step
  rl::compute_gae(buf, 1.0);
  double d1 = 2.0 - 0.1;
  double d0 = 1.0 + 0.9 * 0.1 - 0.2;
  CHECK(buf.steps[1].advantage == doctest::Approx(d1));
  CHECK(buf.steps[0].advantage == doctest::Approx(d0 + 0.9 * d1));
  CHECK(buf.steps[2].advantage == doctest::Approx(3.0));
}

namespace {
struct TinyPolicy {
  nn::MlpSpec actor{"pi", {3, 8, 4}};
  nn::MlpSpec critic{"vf", {3, 8, 1}};
  nn::ParameterSet actor_ps;
  nn::ParameterSet critic_ps;
  rl::PolicyHeads heads;

  explicit TinyPolicy(std::uint64_t seed) {
    std::mt19937_64 rng = named_stream(seed, "tiny");
    actor_ps = nn::init_mlp(actor, rng, "actor");
    critic_ps = nn::init_mlp(critic, rng, "critic");
    heads.policy = [this](nn::Binder& b, const rl::Transition& t) {
      return rl::discrete_logp_entropy(b, actor, t.actor_input, t.action, t.n_valid);
    };
    heads.value = [this](nn::Binder& b, const rl::Transition& t) {
      return mlp_forward(b, critic, t.critic_input);
    };
  }

  rl::RolloutBuffer rollout(int steps, std::uint64_t seed) {
    std::mt19937_64 rng = named_stream(seed, "roll");
    rl::RolloutBuffer buf;
    for (int i = 0; i < steps; ++i) {
      rl::Transition t;
      t.actor_input = {uniform_real(rng, -1, 1), uniform_real(rng, -1, 1), uniform_real(rng, -1, 1)};
      t.critic_input = t.actor_input;
      rl::DiscreteSample ds = rl::discrete_sample(actor_ps, actor, t.actor_input, 4, false, rng);
      t.action = ds.action;
      t.logp = ds.logp;
      t.n_valid = 4;
      t.value = rl::critic_value(critic_ps, critic, t.critic_input);
      t.reward = uniform_real(rng, -1, 1);
      t.gamma = 0.9;
      t.done = (i % 5 == 4) || i == steps - 1;
      buf.steps.push_back(std::move(t));
    }
    rl::compute_gae(buf, 0.95);
    return buf;
  }
};
}  // namespace

TEST_CASE("fresh buffer: surrogate gradient equals the vanilla policy gradient") {
  TinyPolicy tp(11);
  rl::RolloutBuffer buf = tp.rollout(24, 12);
  std::vector<double> adv(buf.steps.size());
  for (size_t i = 0; i < buf.steps.size(); ++i) adv[i] = buf.steps[i].advantage;

  nn::Graph g1;
  nn::Binder b1(g1, {&tp.actor_ps});
  std::vector<nn::Value> surr;
  for (size_t i = 0; i < buf.steps.size(); ++i) {
    auto [logp, ent] = tp.heads.policy(b1, buf.steps[i]);
    nn::Value ratio = g1.exp_of(g1.add_scalar(logp, -buf.steps[i].logp));
    CHECK(g1.value(ratio)[0] == doctest::Approx(1.0).epsilon(1e-12));
    nn::Value s1 = g1.scale(ratio, adv[i]);
    nn::Value s2 = g1.scale(g1.clamp(ratio, 0.8, 1.2), adv[i]);
    surr.push_back(g1.minimum(s1, s2));
  }
  g1.backward(g1.scale(g1.mean(g1.concat(surr)), -1.0));
  auto g_surr = g1.param_grads();

  nn::Graph g2;
  nn::Binder b2(g2, {&tp.actor_ps});
  std::vector<nn::Value> pg;
  for (size_t i = 0; i < buf.steps.size(); ++i) {
    auto [logp, ent] = tp.heads.policy(b2, buf.steps[i]);
    pg.push_back(g2.scale(logp, adv[i]));
  }
  g2.backward(g2.scale(g2.mean(g2.concat(pg)), -1.0));
  auto g_vanilla = g2.param_grads();

  for (const auto& [name, t] : g_surr) {
    for (int i = 0; i < t.size(); ++i) {
      CHECK(t[i] == doctest::Approx(g_vanilla.at(name)[i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("clipped objective never exceeds the unclipped objective per sample") {
  std::mt19937_64 rng = named_stream(13, "prop");
  for (int i = 0; i < 2000; ++i) {
    double ratio = std::exp(uniform_real(rng, -2, 2));
    double adv = uniform_real(rng, -3, 3);
    double clip = 0.2;
    double clipped = std::min(ratio * adv, std::min(std::max(ratio, 1 - clip), 1 + clip) * adv);
    CHECK(clipped <= ratio * adv + 1e-15);
  }
}

TEST_CASE("all-equal advantages with normalization: actor moves only by entropy") {
  TinyPolicy tp(17);
  rl::RolloutBuffer buf = tp.rollout(16, 18);
  for (auto& t : buf.steps) {
    t.advantage = 0.7;  // equal advantages normalize to exactly zero
    t.ret = 0.5;
  }
  rl::PPOConfig cfg;
  cfg.epochs = 1;
  cfg.minibatch = 64;
  cfg.entropy_coef = 0.0;
  std::mt19937_64 r1 = named_stream(19, "upd");
  nn::AdamState aa = nn::AdamState::init(tp.actor_ps, {});
  nn::AdamState ca = nn::AdamState::init(tp.critic_ps, {});
  auto res = rl::ppo_update(tp.actor_ps, aa, tp.critic_ps, ca, buf, cfg, tp.heads, r1);
  CHECK(res.actor.same_values(tp.actor_ps));       // zero gradient on the actor
  CHECK_FALSE(res.critic.same_values(tp.critic_ps));  // value regression still runs

  cfg.entropy_coef = 0.01;
  std::mt19937_64 r2 = named_stream(19, "upd");
  auto res2 = rl::ppo_update(tp.actor_ps, aa, tp.critic_ps, ca, buf, cfg, tp.heads, r2);
  CHECK_FALSE(res2.actor.same_values(tp.actor_ps));  // entropy term moves it
}

TEST_CASE("reward scaling by 2 with advantage normalization: same actor update") {
  TinyPolicy tp(21);
  rl::RolloutBuffer buf = tp.rollout(20, 22);
  rl::RolloutBuffer buf2 = buf;
  for (auto& t : buf2.steps) {
    t.advantage *= 2.0;
    t.ret *= 2.0;
  }
  rl::PPOConfig cfg;
  cfg.epochs = 2;
  cfg.minibatch = 8;
  nn::AdamState aa = nn::AdamState::init(tp.actor_ps, {});
  nn::AdamState ca = nn::AdamState::init(tp.critic_ps, {});
  std::mt19937_64 r1 = named_stream(23, "upd");
  auto res1 = rl::ppo_update(tp.actor_ps, aa, tp.critic_ps, ca, buf, cfg, tp.heads, r1);
  std::mt19937_64 r2 = named_stream(23, "upd");
  auto res2 = rl::ppo_update(tp.actor_ps, aa, tp.critic_ps, ca, buf2, cfg, tp.heads, r2);
  for (const auto& [name, t] : res1.actor) {
    for (int i = 0; i < t.size(); ++i) {
      CHECK(res2.actor.at(name)[i] == doctest::Approx(t[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("surrogate loss gradient matches finite differences on a tiny net") {
  TinyPolicy tp(31);
  rl::RolloutBuffer buf = tp.rollout(6, 32);
  // Make ratios leave 1 so min/clamp sit away from their kinks.
  for (auto& t : buf.steps) t.logp -= 0.05;
  std::vector<double> adv = {0.8, -1.2, 0.4, 1.5, -0.3, 0.9};
  nn::GraphProgram prog = [&](nn::Graph& g, const nn::ParameterSet& p, const std::vector<nn::Tensor>&) {
    nn::Binder b(g, {&p});
    std::vector<nn::Value> surr;
    for (size_t i = 0; i < buf.steps.size(); ++i) {
      const rl::Transition& t = buf.steps[i];
      nn::Value logits = mlp_forward(b, tp.actor, t.actor_input);
      nn::Value logp = g.pick(g.log_softmax(logits), t.action);
      nn::Value ratio = g.exp_of(g.add_scalar(logp, -t.logp));
      nn::Value s1 = g.scale(ratio, adv[i]);
      nn::Value s2 = g.scale(g.clamp(ratio, 0.8, 1.2), adv[i]);
      surr.push_back(g.minimum(s1, s2));
    }
    return std::vector<nn::Value>{g.scale(g.mean(g.concat(surr)), -1.0)};
  };
  CHECK(nn::finite_diff_check(tp.actor_ps, prog, {}, 1e-5) < 1e-5);
}

TEST_CASE("ppo_update is deterministic and reports sane diagnostics") {
  TinyPolicy tp(41);
  rl::RolloutBuffer buf = tp.rollout(30, 42);
  rl::PPOConfig cfg;
  cfg.minibatch = 10;
  nn::AdamState aa = nn::AdamState::init(tp.actor_ps, {});
  nn::AdamState ca = nn::AdamState::init(tp.critic_ps, {});
  std::mt19937_64 r1 = named_stream(43, "upd");
  auto res1 = rl::ppo_update(tp.actor_ps, aa, tp.critic_ps, ca, buf, cfg, tp.heads, r1);
  std::mt19937_64 r2 = named_stream(43, "upd");
  auto res2 = rl::ppo_update(tp.actor_ps, aa, tp.critic_ps, ca, buf, cfg, tp.heads, r2);
  CHECK(res1.actor.same_values(res2.actor));
  CHECK(res1.critic.same_values(res2.critic));
  CHECK_FALSE(res1.diag.aborted);
  CHECK(res1.diag.clip_fraction >= 0.0);
  CHECK(res1.diag.clip_fraction <= 1.0);
  CHECK(std::isfinite(res1.diag.approx_kl));
  CHECK(std::isfinite(res1.diag.explained_variance));
  CHECK(res1.diag.entropy > 0.0);
  rl::RolloutBuffer empty;
  CHECK_THROWS_AS(rl::ppo_update(tp.actor_ps, aa, tp.critic_ps, ca, empty, cfg, tp.heads, r1),
                  StructuralError);
}

TEST_CASE("gaussian head: rollout logp matches the update-path recomputation") {
  std::mt19937_64 rng = named_stream(51, "gauss");
  rl::GaussianHead head;
  head.mean = nn::MlpSpec{"pi", {4, 8, 3}};
  head.log_std_name = "pi/log_std";
  nn::ParameterSet actor = nn::init_mlp(head.mean, rng, "actor");
  actor.insert("pi/log_std", nn::Tensor::full({3}, std::log(0.5)));
  std::vector<double> input = {0.2, -0.4, 0.8, 0.1};
  std::mt19937_64 srng = named_stream(52, "s");
  rl::GaussianSample gs = rl::gaussian_sample(actor, head, input, false, srng);
  {
    // The draw really is mu + sigma*noise, not mu.
    nn::Graph gm;
    nn::Binder bm(gm, {&actor});
    std::vector<double> mu_val = gm.value(mlp_forward(bm, head.mean, input)).data;
    double dist = 0.0;
    for (size_t i = 0; i < mu_val.size(); ++i) dist += (gs.z[i] - mu_val[i]) * (gs.z[i] - mu_val[i]);
    CHECK(std::sqrt(dist) > 0.1);
    double mean_noise = 0.0;
    std::mt19937_64 nrng = named_stream(53, "s2");
    for (int s2 = 0; s2 < 500; ++s2) {
      rl::GaussianSample more = rl::gaussian_sample(actor, head, input, false, nrng);
      double d2 = 0.0;
      for (size_t i = 0; i < mu_val.size(); ++i) d2 += (more.z[i] - mu_val[i]) * (more.z[i] - mu_val[i]);
      mean_noise += std::sqrt(d2);
    }
    mean_noise /= 500;
    CHECK(mean_noise == doctest::Approx(0.5 * std::sqrt(2.0) * std::tgamma(2.0) /
                                        std::tgamma(1.5)).epsilon(0.15));
  }
  nn::Graph g;
  nn::Binder b(g, {&actor});
  auto [logp, ent] = rl::gaussian_logp_entropy(b, head, input, gs.z);
  CHECK(g.value(logp)[0] == gs.logp);  // bitwise: same expression tree
  CHECK(g.value(ent)[0] > 0.0);
  // Greedy mode returns the mean.
  rl::GaussianSample greedy = rl::gaussian_sample(actor, head, input, true, srng);
  nn::Graph g2;
  nn::Binder b2(g2, {&actor});
  nn::Value mu = mlp_forward(b2, head.mean, input);
  CHECK(greedy.z == g2.value(mu).data);
}

TEST_CASE("grouper PPO phase: zero advantages move psi only through entropy") {
  grouper::GrouperSpec spec = toy_spec(4, 3);
  rl::PPOConfig cfg;
  cfg.entropy_coef = 0.0;
  cfg.lam = 1.0;
  std::mt19937_64 rng = named_stream(61, "grp");
  grouper::GrouperTrainState st =
      grouper::init_grouper_train_state(spec, grouper::GrouperContext::kState, cfg, rng);
  for (auto& [k, v] : st.critic) {
    for (double& x : v.data) x = 0.0;  // V == 0 everywhere
  }
  // With lambda = 1, a zero critic and a constant loss, every step of the
  // 2-agent grouping episodes carries the same advantage.
  std::vector<data::SegmentBatch> batches;
  for (int i = 0; i < 6; ++i) batches.push_back(stub_batch(2, 4, 100 + i));
  std::vector<const data::SegmentBatch*> ptrs;
  for (const auto& b : batches) ptrs.push_back(&b);
  grouper::DiscoveryLoss constant = [](const data::SegmentBatch&, const grouper::Partition&) {
    return 1.5;
  };
  nn::ParameterSet psi_before = st.psi;
  grouper::grouper_ppo_phase(st, constant, ptrs, cfg, rng);
  CHECK(st.psi.same_values(psi_before));

  cfg.entropy_coef = 0.01;
  std::mt19937_64 rng2 = named_stream(61, "grp");
  grouper::GrouperTrainState st2 =
      grouper::init_grouper_train_state(spec, grouper::GrouperContext::kState, cfg, rng2);
  for (auto& [k, v] : st2.critic) {
    for (double& x : v.data) x = 0.0;
  }
  nn::ParameterSet psi2_before = st2.psi;
  grouper::grouper_ppo_phase(st2, constant, ptrs, cfg, rng2);
  CHECK_FALSE(st2.psi.same_values(psi2_before));
}

TEST_CASE("grouper PPO phase skips batches with non-finite losses") {
  grouper::GrouperSpec spec = toy_spec(4, 3);
  rl::PPOConfig cfg;
  std::mt19937_64 rng = named_stream(71, "grp");
  grouper::GrouperTrainState st =
      grouper::init_grouper_train_state(spec, grouper::GrouperContext::kState, cfg, rng);
  std::vector<data::SegmentBatch> batches;
  for (int i = 0; i < 4; ++i) batches.push_back(stub_batch(2, 4, 200 + i));
  std::vector<const data::SegmentBatch*> ptrs;
  for (const auto& b : batches) ptrs.push_back(&b);
  int calls = 0;
  grouper::DiscoveryLoss flaky = [&](const data::SegmentBatch&, const grouper::Partition&) {
    calls += 1;
    return calls % 2 == 0 ? std::nan("") : 2.0;
  };
  auto stats = grouper::grouper_ppo_phase(st, flaky, ptrs, cfg, rng);
  CHECK(st.skipped_batches == 2);
  CHECK(stats.episodes == 2);
}

TEST_CASE("planted grouping structure is recovered by grouper PPO") {
  // The synthetic loss is minimized only when agents {0,1} of 3 share a
  // subgroup and agent 2 sits alone.
  grouper::DiscoveryLoss planted = [](const data::SegmentBatch&, const grouper::Partition& p) {
    return p.groups == std::vector<std::vector<int>>{{0, 1}, {2}} ? 0.0 : 1.0;
  };
  int recovered = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    grouper::GrouperSpec spec = toy_spec(4, 3);
    rl::PPOConfig cfg;
    cfg.actor_lr = 5e-3;
    cfg.critic_lr = 5e-3;
    cfg.minibatch = 64;
    std::mt19937_64 rng = named_stream(seed, "planted");
    grouper::GrouperTrainState st =
        grouper::init_grouper_train_state(spec, grouper::GrouperContext::kState, cfg, rng);
    std::vector<data::SegmentBatch> batches;
    for (int i = 0; i < 16; ++i) batches.push_back(stub_batch(3, 4, 300 + i));
    std::vector<const data::SegmentBatch*> ptrs;
    for (const auto& b : batches) ptrs.push_back(&b);
    bool done = false;
    for (int phase = 0; phase < 200 && !done; ++phase) {
      grouper::grouper_ppo_phase(st, planted, ptrs, cfg, rng);
      grouper::GroupDecision d =
          grouper::choose_groups(st.psi, spec, grouper::batch_contexts(batches[0], st.mode), 3, nullptr);
      done = grouper::partition_of(d.gids, 3).groups == std::vector<std::vector<int>>{{0, 1}, {2}};
    }
    recovered += done ? 1 : 0;
  }
  CHECK(recovered == 3);
}
