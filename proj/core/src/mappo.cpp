#include "squads/mappo.hpp"

#include <algorithm>
#include <cmath>

#include "squads/errors.hpp"
#include "squads/rng.hpp"

namespace squads::rl {

namespace {
constexpr double kHalfLog2Pi = 0.9189385332046727;  // 0.5 * ln(2*pi)
}

void RunningMeanStd::update(double x) {
  count += 1;
  double delta = x - mean;
  mean += delta / count;
  m2 += delta * (x - mean);
}

double RunningMeanStd::stddev() const { return std::sqrt(var()); }

double RunningMeanStd::normalize(double x) const {
  if (count < 2) return 0.0;
  return (x - mean) / (stddev() + 1e-8);
}

void gae(const std::vector<double>& rewards, const std::vector<double>& values,
         const std::vector<std::uint8_t>& dones, double gamma, double lam,
         std::vector<double>* advantages, std::vector<double>* returns) {
  size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) {
    throw StructuralError("gae: rewards, values and dones must have equal lengths");
  }
  advantages->assign(n, 0.0);
  returns->assign(n, 0.0);
  double next_adv = 0.0;
  double next_value = 0.0;
  for (size_t i = n; i-- > 0;) {
    if (dones[i]) {
      next_adv = 0.0;
      next_value = 0.0;
    }
    double delta = rewards[i] + gamma * next_value - values[i];
    next_adv = delta + gamma * lam * next_adv;
    (*advantages)[i] = next_adv;
    (*returns)[i] = next_adv + values[i];
    next_value = values[i];
  }
}

void compute_gae(RolloutBuffer& buf, double lam) {
  double next_adv = 0.0;
  double next_value = 0.0;
  for (size_t i = buf.steps.size(); i-- > 0;) {
    Transition& t = buf.steps[i];
    if (t.done) {
      next_adv = 0.0;
      next_value = 0.0;
    }
    double delta = t.reward + t.gamma * next_value - t.value;
    next_adv = delta + t.gamma * lam * next_adv;
    t.advantage = next_adv;
    t.ret = next_adv + t.value;
    next_value = t.value;
  }
}

std::pair<nn::Value, nn::Value> discrete_logp_entropy(nn::Binder& b, const nn::MlpSpec& actor,
                                                      const std::vector<double>& input, int action,
                                                      int n_valid) {
  nn::Graph& g = b.graph();
  nn::Value logits = mlp_forward(b, actor, input);
  if (n_valid < g.value(logits).size()) logits = g.slice(logits, 0, n_valid);
  nn::Value logp_all = g.log_softmax(logits);
  nn::Value logp = g.pick(logp_all, action);
  nn::Value probs = g.exp_of(logp_all);
  nn::Value entropy = g.scale(g.sum(g.mul(probs, logp_all)), -1.0);
  return {logp, entropy};
}

std::pair<nn::Value, nn::Value> gaussian_logp_entropy(nn::Binder& b, const GaussianHead& head,
                                                      const std::vector<double>& input,
                                                      const std::vector<double>& action) {
  nn::Graph& g = b.graph();
  nn::Value mu = mlp_forward(b, head.mean, input);
  int d = g.value(mu).size();
  if (static_cast<int>(action.size()) != d) {
    throw StructuralError("gaussian head: action width does not match the mean output");
  }
  nn::Value log_std = g.clamp(b(head.log_std_name), head.log_std_lo, head.log_std_hi);
  nn::Value inv_std = g.exp_of(g.scale(log_std, -1.0));
  nn::Value diff = g.sub(g.constant_vec(action), mu);
  nn::Value zscore = g.mul(diff, inv_std);
  nn::Value quad = g.scale(g.squared_norm(zscore), -0.5);
  nn::Value logdet = g.scale(g.sum(log_std), -1.0);
  nn::Value logp = g.add_scalar(g.add(quad, logdet), -kHalfLog2Pi * d);
  nn::Value entropy = g.add_scalar(g.sum(log_std), d * (0.5 + kHalfLog2Pi));
  return {logp, entropy};
}

GaussianSample gaussian_sample(const nn::ParameterSet& actor, const GaussianHead& head,
                               const std::vector<double>& input, bool greedy, std::mt19937_64& rng) {
  nn::Graph g;
  nn::Binder b(g, {&actor});
  nn::Value mu = mlp_forward(b, head.mean, input);
  GaussianSample out;
  out.z = g.value(mu).data;
  if (!greedy) {
    nn::Value log_std = g.clamp(b(head.log_std_name), head.log_std_lo, head.log_std_hi);
    std::vector<double> ls = g.value(log_std).data;
    for (size_t i = 0; i < out.z.size(); ++i) {
      out.z[i] += std::exp(ls[i]) * normal01(rng);
    }
    auto [logp, ent] = gaussian_logp_entropy(b, head, input, out.z);
    out.logp = g.value(logp)[0];
  }
  return out;
}

DiscreteSample discrete_sample(const nn::ParameterSet& actor, const nn::MlpSpec& spec,
                               const std::vector<double>& input, int n_valid, bool greedy,
                               std::mt19937_64& rng) {
  nn::Graph g;
  nn::Binder b(g, {&actor});
  nn::Value logits = mlp_forward(b, spec, input);
  if (n_valid < g.value(logits).size()) logits = g.slice(logits, 0, n_valid);
  nn::Value logp_all = g.log_softmax(logits);
  const nn::Tensor& lp = g.value(logp_all);
  DiscreteSample out;
  if (greedy) {
    int best = 0;
    for (int i = 1; i < lp.size(); ++i) {
      if (lp[i] > lp[best]) best = i;
    }
    out.action = best;
  } else {
    out.action = categorical_from_logp(lp.data, rng);
  }
  out.logp = lp[out.action];
  return out;
}

double critic_value(const nn::ParameterSet& critic, const nn::MlpSpec& spec,
                    const std::vector<double>& input) {
  nn::Graph g;
  nn::Binder b(g, {&critic});
  nn::Value v = mlp_forward(b, spec, input);
  return g.value(v)[0];
}

int categorical_from_logp(const std::vector<double>& logp, std::mt19937_64& rng) {
  double u = uniform01(rng);
  double acc = 0.0;
  for (size_t i = 0; i < logp.size(); ++i) {
    acc += std::exp(logp[i]);
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(logp.size()) - 1;
}

PPOUpdateResult ppo_update(const nn::ParameterSet& actor, const nn::AdamState& actor_adam,
                           const nn::ParameterSet& critic, const nn::AdamState& critic_adam,
                           const RolloutBuffer& buffer, const PPOConfig& cfg, const PolicyHeads& heads,
                           std::mt19937_64& rng) {
  if (buffer.empty()) throw StructuralError("ppo_update: empty rollout buffer");

  PPOUpdateResult res{actor, critic, actor_adam, critic_adam, {}};

  // Advantage normalization over the full buffer.
  std::vector<double> adv(buffer.steps.size());
  for (size_t i = 0; i < buffer.steps.size(); ++i) adv[i] = buffer.steps[i].advantage;
  if (cfg.normalize_adv) {
    double mean = 0.0;
    for (double a : adv) mean += a;
    mean /= adv.size();
    double var = 0.0;
    for (double a : adv) var += (a - mean) * (a - mean);
    var /= adv.size();
    double sd = std::sqrt(var);
    if (sd <= 1e-12 * (std::abs(mean) + 1.0)) {
      // All-equal advantages normalize to exactly zero (rounding residue in
      // the mean would otherwise leak through Adam's scale invariance).
      for (double& a : adv) a = 0.0;
    } else {
      for (double& a : adv) a = (a - mean) / (sd + 1e-8);
    }
  }

  // Explained variance before the update.
  {
    double mr = 0.0;
    for (const Transition& t : buffer.steps) mr += t.ret;
    mr /= buffer.size();
    double var_r = 0.0, var_e = 0.0;
    for (const Transition& t : buffer.steps) {
      var_r += (t.ret - mr) * (t.ret - mr);
      var_e += (t.ret - t.value) * (t.ret - t.value);
    }
    res.diag.explained_variance = var_r > 1e-12 ? 1.0 - var_e / var_r : 0.0;
  }

  int n = buffer.size();
  double clip_count = 0.0, kl_sum = 0.0, ent_sum = 0.0, ploss_sum = 0.0, vloss_sum = 0.0;
  long sample_count = 0;

  try {
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::vector<int> order = permutation(rng, n);
      for (int start = 0; start < n; start += cfg.minibatch) {
        int end = std::min(n, start + cfg.minibatch);
        nn::Graph g;
        g.reserve(static_cast<size_t>(end - start) * 24);
        nn::Binder b(g, {&res.actor, &res.critic});
        std::vector<nn::Value> surr, ents, vlosses;
        for (int s = start; s < end; ++s) {
          const Transition& t = buffer.steps[static_cast<size_t>(order[static_cast<size_t>(s)])];
          double a = adv[static_cast<size_t>(order[static_cast<size_t>(s)])];
          auto [logp, entropy] = heads.policy(b, t);
          nn::Value ratio = g.exp_of(g.add_scalar(logp, -t.logp));
          nn::Value s1 = g.scale(ratio, a);
          nn::Value s2 = g.scale(g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), a);
          surr.push_back(g.minimum(s1, s2));
          ents.push_back(entropy);
          nn::Value v = heads.value(b, t);
          nn::Value dv = g.add_scalar(v, -t.ret);
          vlosses.push_back(g.mul(dv, dv));
          double r = std::exp(g.value(logp)[0] - t.logp);
          if (std::abs(r - 1.0) > cfg.clip) clip_count += 1.0;
          kl_sum += t.logp - g.value(logp)[0];
          ent_sum += g.value(entropy)[0];
          sample_count += 1;
        }
        nn::Value policy_loss = g.scale(g.mean(g.concat(surr)), -1.0);
        nn::Value entropy_bonus = g.scale(g.mean(g.concat(ents)), -cfg.entropy_coef);
        nn::Value value_loss = g.scale(g.mean(g.concat(vlosses)), cfg.value_coef);
        nn::Value total = g.add(g.add(policy_loss, entropy_bonus), value_loss);
        ploss_sum += g.value(policy_loss)[0];
        vloss_sum += g.value(value_loss)[0];
        g.backward(total);
        auto grads = g.param_grads();

        auto step_set = [&](nn::ParameterSet& ps, nn::AdamState& st, double lr) {
          std::map<std::string, nn::Tensor> sub;
          for (const auto& [name, t] : ps) {
            auto it = grads.find(name);
            sub.emplace(name, it != grads.end() ? it->second : nn::Tensor::zeros(t.shape));
          }
          nn::AdamState tuned = st;
          tuned.cfg.lr = lr;
          auto out = nn::adam_step(ps, sub, tuned);
          ps = std::move(out.params);
          st = std::move(out.state);
        };
        step_set(res.actor, res.actor_adam, cfg.actor_lr);
        step_set(res.critic, res.critic_adam, cfg.critic_lr);
      }
    }
  } catch (const NumericError&) {
    // Divergent update: hand back the untouched inputs.
    res.actor = actor;
    res.critic = critic;
    res.actor_adam = actor_adam;
    res.critic_adam = critic_adam;
    res.diag.aborted = true;
    return res;
  }

  int minibatches = cfg.epochs * ((n + cfg.minibatch - 1) / cfg.minibatch);
  res.diag.policy_loss = ploss_sum / minibatches;
  res.diag.value_loss = vloss_sum / minibatches;
  res.diag.entropy = ent_sum / sample_count;
  res.diag.clip_fraction = clip_count / sample_count;
  res.diag.approx_kl = kl_sum / sample_count;
  return res;
}

}  // namespace squads::rl
