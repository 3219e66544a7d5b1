#pragma once

#include "squads/codebook.hpp"
#include "squads/checkpoint.hpp"
#include "squads/discovery.hpp"

namespace squads::skills {

// Multi-head attention set pooling with a learned query per head; exactly
// permutation-invariant in its members.
struct AggregatorSpec {
  int d{8};
  int d_top{8};
  int heads{2};

  int head_width() const;  // per-head key/value width
};

nn::ParameterSet init_aggregator(const AggregatorSpec& spec, std::mt19937_64& rng);
nn::Value aggregate_top(nn::Binder& b, const AggregatorSpec& spec,
                        const std::vector<nn::Value>& members);
std::vector<double> aggregate_top_values(const nn::ParameterSet& agg, const AggregatorSpec& spec,
                                         const std::vector<std::vector<double>>& members);

struct DiscoveryConfigHier {
  int d{8};
  int d_top{8};
  int codes_btm{8};
  int codes_top{8};
  int heads{2};
  int H{5};
  double beta{0.25};
  int enc_hidden{64};
  int dec_hidden{64};
  bool single_agent_only{false};  // VO-MASD-Single: no top codebook, no aggregator
  DiscoveryLoopConfig loop;
  grouper::GrouperContext grouper_input{grouper::GrouperContext::kState};
};

// VO-MASD-Hier model: encoder, aggregator, shared decoder conditioned on
// (obs, q_btm, q_top), and the two-level codebook stored as "Ehier/btm" and
// "Ehier/top".
struct ModelHier {
  DiscoveryConfigHier cfg;
  EnvDims dims;
  nn::ParameterSet enc;    // role: encoder
  nn::ParameterSet dec;    // role: decoder
  nn::ParameterSet agg;    // role: aggregator (empty in single mode)
  nn::ParameterSet books;  // role: codebook
  CodeUsage usage_btm;
  CodeUsage usage_top;
  EmbeddingReservoir recent_btm;
  EmbeddingReservoir recent_top;

  nn::MlpSpec enc_spec() const;
  nn::MlpSpec dec_spec() const;
  AggregatorSpec agg_spec() const;
};

ModelHier init_model_hier(const DiscoveryConfigHier& cfg, const EnvDims& dims, std::mt19937_64& rng);

struct QuantHierPlan {
  std::vector<int> btm_index;  // per agent
  std::vector<int> top_index;  // per subgroup (empty in single mode)
};

// Eq. (3) loss: per-agent bottom quantization of z_btm, per-subgroup top
// quantization of the aggregated embedding, reconstruction through the
// shared decoder conditioned on both codes, and the four vq/commitment
// terms (top terms counted once per member).
LossParts build_loss_hier(nn::Graph& g, ModelHier& model, const data::SegmentBatch& batch,
                          const grouper::Partition& part, const QuantHierPlan* frozen = nullptr,
                          QuantHierPlan* plan_out = nullptr, bool record_usage = false);

double loss_hier_value(ModelHier& model, const data::SegmentBatch& batch,
                       const grouper::Partition& part);

double accuracy_hier(ModelHier& model, const grouper::GrouperTrainState& grp,
                     const std::vector<const data::SegmentBatch*>& batches);

struct TrainResultHier {
  ModelHier model;
  DiscoveryRun run;
};

nn::Checkpoint to_checkpoint(const ModelHier& model, const grouper::GrouperTrainState& grp);

TrainResultHier train_hier(const std::vector<data::SegmentBatch>& data,
                           const DiscoveryConfigHier& cfg, const EnvDims& dims,
                           grouper::GrouperTrainState& grp, std::mt19937_64& rng);

}  // namespace squads::skills
