#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "squads/adam.hpp"
#include "squads/mlp.hpp"

namespace squads::rl {

struct PPOConfig {
  double gamma{0.99};
  double lam{0.95};
  double clip{0.2};
  int epochs{4};
  int minibatch{256};
  double entropy_coef{0.01};
  double value_coef{0.5};
  double actor_lr{3e-4};
  double critic_lr{1e-3};
  bool normalize_adv{true};
};

struct RunningMeanStd {
  long count{0};
  double mean{0.0};
  double m2{0.0};

  void update(double x);
  double var() const { return count > 1 ? m2 / count : 1.0; }
  double stddev() const;
  double normalize(double x) const;
};

// One decision of one agent. `gamma` is the discount applied between this
// transition and the next one (skill transitions span several env steps).
struct Transition {
  std::vector<double> actor_input;
  std::vector<double> critic_input;
  int action{-1};                  // discrete head
  std::vector<double> action_vec;  // continuous head
  int n_valid{0};                  // discrete head: valid action prefix
  double logp{0.0};
  double value{0.0};
  double reward{0.0};
  bool done{false};
  double gamma{0.99};
  double advantage{0.0};
  double ret{0.0};
};

struct RolloutBuffer {
  std::vector<Transition> steps;

  void clear() { steps.clear(); }
  bool empty() const { return steps.empty(); }
  int size() const { return static_cast<int>(steps.size()); }
};

// Standard generalized advantage recursion; returns = advantages + values.
void gae(const std::vector<double>& rewards, const std::vector<double>& values,
         const std::vector<std::uint8_t>& dones, double gamma, double lam,
         std::vector<double>* advantages, std::vector<double>* returns);

// In-place GAE over a buffer laid out in rollout order, honoring per-
// transition gammas and done boundaries (no bootstrap past a done).
void compute_gae(RolloutBuffer& buf, double lam);

struct PPODiagnostics {
  double policy_loss{0.0};
  double value_loss{0.0};
  double entropy{0.0};
  double clip_fraction{0.0};
  double approx_kl{0.0};
  double explained_variance{0.0};
  bool aborted{false};
};

// Head builders: given a bound graph and a transition, produce the log-prob
// of the stored action and the policy entropy / the value estimate under
// the current parameters.
struct PolicyHeads {
  std::function<std::pair<nn::Value, nn::Value>(nn::Binder&, const Transition&)> policy;
  std::function<nn::Value(nn::Binder&, const Transition&)> value;
};

struct PPOUpdateResult {
  nn::ParameterSet actor;
  nn::ParameterSet critic;
  nn::AdamState actor_adam;
  nn::AdamState critic_adam;
  PPODiagnostics diag;
};

// Clipped-surrogate policy loss + value MSE + entropy bonus over shuffled
// minibatches. Inputs stay untouched; a non-finite loss aborts the update
// and returns the original parameters with the aborted flag raised.
PPOUpdateResult ppo_update(const nn::ParameterSet& actor, const nn::AdamState& actor_adam,
                           const nn::ParameterSet& critic, const nn::AdamState& critic_adam,
                           const RolloutBuffer& buffer, const PPOConfig& cfg, const PolicyHeads& heads,
                           std::mt19937_64& rng);

// Discrete head over the first n_valid logits of an MLP.
std::pair<nn::Value, nn::Value> discrete_logp_entropy(nn::Binder& b, const nn::MlpSpec& actor,
                                                      const std::vector<double>& input, int action,
                                                      int n_valid);

// Diagonal-gaussian head: mean from an MLP, state-independent learned
// log-std (clamped in-graph).
struct GaussianHead {
  nn::MlpSpec mean;
  std::string log_std_name;
  double log_std_lo{-6.907755278982137};  // ln 1e-3
  double log_std_hi{0.6931471805599453};  // ln 2
};

std::pair<nn::Value, nn::Value> gaussian_logp_entropy(nn::Binder& b, const GaussianHead& head,
                                                      const std::vector<double>& input,
                                                      const std::vector<double>& action);

// Sampled draw + its log-prob (computed through the same graph expressions
// that ppo_update rebuilds, so a fresh buffer yields ratios of exactly 1).
struct GaussianSample {
  std::vector<double> z;
  double logp{0.0};
};
GaussianSample gaussian_sample(const nn::ParameterSet& actor, const GaussianHead& head,
                               const std::vector<double>& input, bool greedy, std::mt19937_64& rng);

struct DiscreteSample {
  int action{0};
  double logp{0.0};
};
DiscreteSample discrete_sample(const nn::ParameterSet& actor, const nn::MlpSpec& spec,
                               const std::vector<double>& input, int n_valid, bool greedy,
                               std::mt19937_64& rng);

double critic_value(const nn::ParameterSet& critic, const nn::MlpSpec& spec,
                    const std::vector<double>& input);

// Deterministic categorical draw from log-probabilities.
int categorical_from_logp(const std::vector<double>& logp, std::mt19937_64& rng);

}  // namespace squads::rl
