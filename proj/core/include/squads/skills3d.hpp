#pragma once

#include "squads/codebook.hpp"
#include "squads/checkpoint.hpp"
#include "squads/discovery.hpp"

namespace squads::skills {

struct DiscoveryConfig3D {
  int d{8};
  int codes{8};                       // k_m for every enabled size
  std::vector<int> sizes{1, 2, 3, 4, 5};
  int H{5};
  double beta{0.25};
  int enc_hidden{64};
  int dec_hidden{64};
  DiscoveryLoopConfig loop;
  grouper::GrouperContext grouper_input{grouper::GrouperContext::kState};
};

// VO-MASD-3D model: encoder f_theta, shared decoder pi_phi, and the E_{1:n}
// family stored as parameter tensors "E3d/m{m}" of shape [k, m*d].
struct Model3D {
  DiscoveryConfig3D cfg;
  EnvDims dims;
  nn::ParameterSet enc;    // role: encoder
  nn::ParameterSet dec;    // role: decoder
  nn::ParameterSet books;  // role: codebook
  std::map<int, CodeUsage> usage;
  std::map<int, EmbeddingReservoir> recent;

  nn::MlpSpec enc_spec() const;
  nn::MlpSpec dec_spec() const;
  static std::string table_name(int m) { return "E3d/m" + std::to_string(m); }
};

Model3D init_model_3d(const DiscoveryConfig3D& cfg, const EnvDims& dims, std::mt19937_64& rng);

// Flattened (obs, one-hot action) pairs of one H-step segment.
std::vector<double> segment_input(const data::SkillSegment& seg, int n_actions);

// z_e = f_theta(segment); shared by all agents.
nn::Value encode_segment(nn::Binder& b, const Model3D& model, const data::SkillSegment& seg);

// Log-probabilities over actions from the shared decoder on (obs || cond).
nn::Value decode_logits(nn::Binder& b, const nn::MlpSpec& dec_spec, const std::vector<double>& obs,
                        nn::Value cond);

// Per-subgroup code choices frozen for gradient checking; entries align
// with partition.groups.
struct Quant3DPlan {
  std::vector<int> code_index;
};

// Eq. (1)/(2) loss for one segment batch under a partition: reconstruction
// NLL through straight-through codes plus per-member codebook and
// beta-weighted commitment terms, summed over subgroups.
LossParts build_loss_3d(nn::Graph& g, Model3D& model, const data::SegmentBatch& batch,
                        const grouper::Partition& part, const Quant3DPlan* frozen = nullptr,
                        Quant3DPlan* plan_out = nullptr, bool record_usage = false);

// Forward-only loss value (no usage recording).
double loss_3d_value(Model3D& model, const data::SegmentBatch& batch, const grouper::Partition& part);

// Greedy-partition reconstruction accuracy over the given batches.
double accuracy_3d(Model3D& model, const grouper::GrouperTrainState& grp,
                   const std::vector<const data::SegmentBatch*>& batches);

struct TrainResult3D {
  Model3D model;
  DiscoveryRun run;
};

// Skills checkpoint: encoder, decoder, codebooks and the co-trained grouper.
nn::Checkpoint to_checkpoint(const Model3D& model, const grouper::GrouperTrainState& grp);

// Alternating training per the shared discovery loop. The grouper state is
// co-trained in place.
TrainResult3D train_3d(const std::vector<data::SegmentBatch>& data, const DiscoveryConfig3D& cfg,
                       const EnvDims& dims, grouper::GrouperTrainState& grp, std::mt19937_64& rng);

}  // namespace squads::skills
