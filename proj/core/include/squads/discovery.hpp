#pragma once

#include <functional>
#include <random>
#include <vector>

#include "squads/grouper.hpp"

namespace squads::skills {

struct EnvDims {
  int obs_dim{0};
  int state_dim{0};
  int n_actions{6};
  int n_max{10};
};

struct LossParts {
  nn::Value total;
  nn::Value nll;
  nn::Value vq;
  nn::Value commit;
};

struct EpochStats {
  int epoch{0};
  double loss{0.0};
  double nll{0.0};
  double vq{0.0};
  double commit{0.0};
  double accuracy{0.0};
  double grouper_reward{0.0};
};

struct DiscoveryRun {
  std::vector<EpochStats> history;
  bool diverged{false};
  int epochs_run{0};
};

struct DiscoveryLoopConfig {
  int epochs{200};
  int batch_size{32};
  int ae_steps_per_phase{10};
  double lr{1e-3};
  rl::PPOConfig grouper_ppo;
  bool use_grouper_partitions{true};  // false: all-singleton partitions, no grouper phases
  // Early exit once both targets are met (0 disables either target).
  double stop_loss_drop{0.0};
  double stop_accuracy{0.0};
  int accuracy_probe_batches{128};
};

// The shared alternating trainer: (A) minibatch Adam steps on the
// autoencoder loss with the grouper frozen, (B) a grouper PPO phase on
// reward -L with the autoencoder frozen. Partitions are sampled from the
// grouper during training. Divergence restores the last epoch-end snapshot.
DiscoveryRun discovery_train_loop(
    const std::vector<data::SegmentBatch>& batches, const DiscoveryLoopConfig& cfg,
    const std::vector<std::pair<nn::ParameterSet*, nn::AdamState*>>& trainables,
    grouper::GrouperTrainState& grp,
    const std::function<LossParts(nn::Graph&, const data::SegmentBatch&, const grouper::Partition&)>&
        build_loss,
    const std::function<double(const data::SegmentBatch&, const grouper::Partition&)>& loss_value,
    const std::function<void(std::mt19937_64&)>& end_of_phase,
    const std::function<double(const std::vector<const data::SegmentBatch*>&)>& accuracy_probe,
    std::mt19937_64& rng);

// Splits subgroups whose size has no codebook into the largest enabled
// chunks (ascending member order); identity when every size is enabled.
grouper::Partition conform_partition(const grouper::Partition& part, const std::vector<int>& sizes);

// Dead-code bookkeeping: reseeds rows whose EMA usage dropped below
// 1% of uniform to a recent encoder output.
struct CodeUsage {
  std::vector<double> ema;
  explicit CodeUsage(int k) : ema(static_cast<size_t>(k), 1.0 / k) {}
  CodeUsage() = default;
  void record(int index, double decay = 0.99);
};

class EmbeddingReservoir {
 public:
  explicit EmbeddingReservoir(size_t cap = 64) : cap_(cap) {}
  void push(std::vector<double> v);
  bool empty() const { return items_.empty(); }
  const std::vector<double>& pick(std::mt19937_64& rng) const;

 private:
  size_t cap_;
  size_t next_{0};
  std::vector<std::vector<double>> items_;
};

// Reseeds dead codes of `codes` ([k, w]) in place; resets their usage.
void reseed_dead_codes(nn::Tensor& codes, CodeUsage& usage, const EmbeddingReservoir& recent,
                       std::mt19937_64& rng);

}  // namespace squads::skills
