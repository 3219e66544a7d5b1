#pragma once

#include <functional>
#include <random>
#include <vector>

#include "squads/dataset.hpp"
#include "squads/mappo.hpp"

namespace squads::grouper {

// A disjoint cover of {0..n-1}: subgroups hold ascending agent indices and
// are ordered by smallest member.
struct Partition {
  std::vector<std::vector<int>> groups;

  int n_agents() const;
  int group_of(int agent) const;
  void validate(int n) const;
};

// Groups equal ids of g^{1:n}; ids must lie in [0, n).
Partition partition_of(const std::vector<int>& gids, int n);

// Builds a partition directly from subgroups (sorts, validates).
Partition partition_from_groups(std::vector<std::vector<int>> groups, int n);

enum class GrouperContext { kState, kObs };

struct GrouperSpec {
  int context_dim{0};  // state_dim or obs_dim, per mode
  int state_dim{0};    // centralized critic input
  int n_max{10};
  int hidden{64};

  int actor_input_dim() const { return context_dim + (n_max - 1) * n_max + n_max; }
  int critic_input_dim() const { return state_dim + (n_max - 1) * n_max + n_max; }
  nn::MlpSpec actor_spec() const;
  nn::MlpSpec critic_spec() const;
};

nn::ParameterSet init_grouper(const GrouperSpec& spec, std::mt19937_64& rng);
nn::ParameterSet init_grouper_critic(const GrouperSpec& spec, std::mt19937_64& rng);

// context_i || flattened one-hots of g^{1:i-1} (zero-padded to n_max-1
// slots) || one-hot agent index.
std::vector<double> grouper_actor_input(const GrouperSpec& spec, const std::vector<double>& context,
                                        const std::vector<int>& prev, int agent);
std::vector<double> grouper_critic_input(const GrouperSpec& spec, const std::vector<double>& state,
                                         const std::vector<int>& prev, int agent);

struct GroupDecision {
  std::vector<int> gids;     // group id per agent, in [0, n)
  std::vector<double> logp;  // log-prob of each choice
};

// Sequential autoregressive group choice; sampling (seeded) when rng is
// given, argmax with ties to the lowest id otherwise.
GroupDecision choose_groups(const nn::ParameterSet& psi, const GrouperSpec& spec,
                            const std::vector<std::vector<double>>& contexts, int n,
                            std::mt19937_64* rng);

// Trainer-owned state for the PPO phases.
struct GrouperTrainState {
  GrouperSpec spec;
  GrouperContext mode{GrouperContext::kState};
  nn::ParameterSet psi;
  nn::ParameterSet critic;
  nn::AdamState psi_adam;
  nn::AdamState critic_adam;
  rl::RunningMeanStd reward_norm;
  long skipped_batches{0};
};

GrouperTrainState init_grouper_train_state(const GrouperSpec& spec, GrouperContext mode,
                                           const rl::PPOConfig& cfg, std::mt19937_64& rng);

// Per-agent contexts for a segment batch under the given mode.
std::vector<std::vector<double>> batch_contexts(const data::SegmentBatch& batch, GrouperContext mode);

using DiscoveryLoss = std::function<double(const data::SegmentBatch&, const Partition&)>;

struct GrouperPhaseStats {
  double mean_raw_reward{0.0};
  int episodes{0};
  rl::PPODiagnostics diag;
};

// One PPO phase against the frozen discovery loss: an n-step grouping
// episode per batch with terminal shared reward -L, GAE with gamma = 1,
// clipped-surrogate updates for psi and value regression for the
// centralized critic. Batches with non-finite rewards are skipped.
GrouperPhaseStats grouper_ppo_phase(GrouperTrainState& st, const DiscoveryLoss& loss_fn,
                                    const std::vector<const data::SegmentBatch*>& batches,
                                    const rl::PPOConfig& cfg, std::mt19937_64& rng);

}  // namespace squads::grouper
