#include "squads/skills3d.hpp"

#include "squads/env.hpp"

#include <algorithm>

#include "squads/errors.hpp"
#include "squads/rng.hpp"

namespace squads::skills {

nn::MlpSpec Model3D::enc_spec() const {
  return nn::MlpSpec{"enc", {cfg.H * (dims.obs_dim + dims.n_actions), cfg.enc_hidden, cfg.d}};
}

nn::MlpSpec Model3D::dec_spec() const {
  return nn::MlpSpec{"dec", {dims.obs_dim + cfg.d, cfg.dec_hidden, dims.n_actions}};
}

Model3D init_model_3d(const DiscoveryConfig3D& cfg, const EnvDims& dims, std::mt19937_64& rng) {
  if (cfg.sizes.empty() || std::find(cfg.sizes.begin(), cfg.sizes.end(), 1) == cfg.sizes.end()) {
    throw ConfigError("enabled sizes must be non-empty and include 1");
  }
  if (cfg.beta <= 0.0) throw ConfigError("beta must be positive");
  Model3D m;
  m.cfg = cfg;
  m.cfg.sizes = cfg.sizes;
  std::sort(m.cfg.sizes.begin(), m.cfg.sizes.end());
  m.dims = dims;
  m.enc = init_mlp(m.enc_spec(), rng, "encoder");
  m.dec = init_mlp(m.dec_spec(), rng, "decoder");
  m.books.set_role("codebook");
  double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  for (int size : m.cfg.sizes) {
    nn::Tensor codes = nn::Tensor::zeros({cfg.codes, size * cfg.d});
    for (double& v : codes.data) v = uniform_real(rng, -bound, bound);
    m.books.insert(Model3D::table_name(size), std::move(codes));
    m.usage.emplace(size, CodeUsage(cfg.codes));
    m.recent.emplace(size, EmbeddingReservoir(64));
  }
  return m;
}

std::vector<double> segment_input(const data::SkillSegment& seg, int n_actions) {
  std::vector<double> in;
  in.reserve(seg.obs.size() * (seg.obs[0].size() + static_cast<size_t>(n_actions)));
  for (size_t l = 0; l < seg.obs.size(); ++l) {
    in.insert(in.end(), seg.obs[l].begin(), seg.obs[l].end());
    for (int a = 0; a < n_actions; ++a) in.push_back(seg.acts[l] == a ? 1.0 : 0.0);
  }
  return in;
}

nn::Value encode_segment(nn::Binder& b, const Model3D& model, const data::SkillSegment& seg) {
  if (static_cast<int>(seg.obs.size()) != model.cfg.H ||
      static_cast<int>(seg.acts.size()) != model.cfg.H) {
    throw StructuralError("segment must have exactly H=" + std::to_string(model.cfg.H) + " steps");
  }
  return mlp_forward(b, model.enc_spec(), segment_input(seg, model.dims.n_actions));
}

nn::Value decode_logits(nn::Binder& b, const nn::MlpSpec& dec_spec, const std::vector<double>& obs,
                        nn::Value cond) {
  nn::Graph& g = b.graph();
  nn::Value in = g.concat({g.input(nn::Tensor::vec(obs)), cond});
  return g.log_softmax(mlp_forward(b, dec_spec, in));
}

LossParts build_loss_3d(nn::Graph& g, Model3D& model, const data::SegmentBatch& batch,
                        const grouper::Partition& part, const Quant3DPlan* frozen,
                        Quant3DPlan* plan_out, bool record_usage) {
  part.validate(batch.n_agents);
  grouper::Partition cp = conform_partition(part, model.cfg.sizes);
  nn::Binder b(g, {&model.enc, &model.dec, &model.books});
  nn::MlpSpec dspec = model.dec_spec();
  int d = model.cfg.d;

  std::vector<nn::Value> nll_terms, vq_terms, commit_terms;
  for (size_t gi = 0; gi < cp.groups.size(); ++gi) {
    const std::vector<int>& group = cp.groups[gi];
    int m = static_cast<int>(group.size());
    std::vector<nn::Value> zs;
    zs.reserve(group.size());
    for (int agent : group) {
      zs.push_back(encode_segment(b, model, batch.segments[static_cast<size_t>(agent)]));
    }
    nn::Value z_joint = m == 1 ? zs[0] : g.concat(zs);
    int forced = frozen != nullptr ? frozen->code_index[gi] : -1;
    const std::string tname = Model3D::table_name(m);
    QuantNodes q = quantize_in_graph(b, tname, model.books.at(tname), z_joint, forced);
    if (record_usage) {
      model.usage.at(m).record(q.index);
      model.recent.at(m).push(g.value(z_joint).data);
    }
    if (plan_out != nullptr) plan_out->code_index.push_back(q.index);
    for (int r = 0; r < m; ++r) {
      int agent = group[static_cast<size_t>(r)];
      const data::SkillSegment& seg = batch.segments[static_cast<size_t>(agent)];
      nn::Value code_row = m == 1 ? q.z_q : g.slice(q.z_q, r * d, d);
      for (int l = 0; l < batch.valid_steps; ++l) {
        nn::Value logits = decode_logits(b, dspec, seg.obs[static_cast<size_t>(l)], code_row);
        nll_terms.push_back(g.pick(logits, seg.acts[static_cast<size_t>(l)]));
      }
    }
    vq_terms.push_back(q.vq_loss);
    commit_terms.push_back(q.commit_loss);
  }

  LossParts parts;
  parts.nll = g.scale(g.sum(g.concat(nll_terms)), -1.0);
  parts.vq = g.sum(g.concat(vq_terms));
  parts.commit = g.scale(g.sum(g.concat(commit_terms)), model.cfg.beta);
  parts.total = g.add(parts.nll, g.add(parts.vq, parts.commit));
  return parts;
}

double loss_3d_value(Model3D& model, const data::SegmentBatch& batch, const grouper::Partition& part) {
  nn::Graph g;
  LossParts parts = build_loss_3d(g, model, batch, part, nullptr, nullptr, false);
  return g.value(parts.total)[0];
}

double accuracy_3d(Model3D& model, const grouper::GrouperTrainState& grp,
                   const std::vector<const data::SegmentBatch*>& batches) {
  long correct = 0, total = 0;
  nn::MlpSpec dspec = model.dec_spec();
  for (const data::SegmentBatch* batch : batches) {
    auto contexts = grouper::batch_contexts(*batch, grp.mode);
    grouper::GroupDecision dec = grouper::choose_groups(grp.psi, grp.spec, contexts, batch->n_agents, nullptr);
    grouper::Partition part = conform_partition(grouper::partition_of(dec.gids, batch->n_agents),
                                                model.cfg.sizes);
    for (const std::vector<int>& group : part.groups) {
      int m = static_cast<int>(group.size());
      nn::Graph g;
      nn::Binder b(g, {&model.enc, &model.dec, &model.books});
      std::vector<nn::Value> zs;
      for (int agent : group) zs.push_back(encode_segment(b, model, batch->segments[static_cast<size_t>(agent)]));
      nn::Value z_joint = m == 1 ? zs[0] : g.concat(zs);
      const nn::Tensor& codes = model.books.at(Model3D::table_name(m));
      int idx = nearest_code(codes, g.value(z_joint).data);
      for (int r = 0; r < m; ++r) {
        int agent = group[static_cast<size_t>(r)];
        const data::SkillSegment& seg = batch->segments[static_cast<size_t>(agent)];
        std::vector<double> code_row(codes.data.begin() + static_cast<long>(idx) * codes.shape[1] + r * model.cfg.d,
                                     codes.data.begin() + static_cast<long>(idx) * codes.shape[1] + (r + 1) * model.cfg.d);
        for (int l = 0; l < batch->valid_steps; ++l) {
          nn::Value logits = decode_logits(b, dspec, seg.obs[static_cast<size_t>(l)], g.constant(nn::Tensor::vec(code_row)));
          const nn::Tensor& lv = g.value(logits);
          int best = 0;
          for (int a = 1; a < lv.size(); ++a) {
            if (lv[a] > lv[best]) best = a;
          }
          correct += best == seg.acts[static_cast<size_t>(l)] ? 1 : 0;
          total += 1;
        }
      }
    }
  }
  return total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

TrainResult3D train_3d(const std::vector<data::SegmentBatch>& data, const DiscoveryConfig3D& cfg,
                       const EnvDims& dims, grouper::GrouperTrainState& grp, std::mt19937_64& rng) {
  TrainResult3D out{init_model_3d(cfg, dims, rng), {}};
  Model3D& model = out.model;

  nn::AdamConfig ac;
  ac.lr = cfg.loop.lr;
  nn::AdamState enc_adam = nn::AdamState::init(model.enc, ac);
  nn::AdamState dec_adam = nn::AdamState::init(model.dec, ac);
  nn::AdamState book_adam = nn::AdamState::init(model.books, ac);

  auto build = [&](nn::Graph& g, const data::SegmentBatch& batch, const grouper::Partition& part) {
    return build_loss_3d(g, model, batch, part, nullptr, nullptr, true);
  };
  auto value = [&](const data::SegmentBatch& batch, const grouper::Partition& part) {
    return loss_3d_value(model, batch, part);
  };
  auto reseed = [&](std::mt19937_64& r) {
    for (int m : model.cfg.sizes) {
      reseed_dead_codes(model.books.at(Model3D::table_name(m)), model.usage.at(m), model.recent.at(m), r);
    }
  };
  auto acc = [&](const std::vector<const data::SegmentBatch*>& probe) {
    return accuracy_3d(model, grp, probe);
  };

  out.run = discovery_train_loop(data, cfg.loop,
                                 {{&model.enc, &enc_adam}, {&model.dec, &dec_adam}, {&model.books, &book_adam}},
                                 grp, build, value, reseed, acc, rng);
  return out;
}

}  // namespace squads::skills

namespace squads::skills {
namespace {
void fill_common_meta(nn::CheckpointMeta* m, const EnvDims& dims, int h, int d, double beta,
                      int enc_hidden, int dec_hidden, const grouper::GrouperTrainState& grp) {
  m->kind = "skills";
  m->h = h;
  m->d = d;
  m->beta = beta;
  m->obs_dim = dims.obs_dim;
  m->state_dim = dims.state_dim;
  m->n_actions = dims.n_actions;
  m->n_max = dims.n_max;
  m->enc_hidden = enc_hidden;
  m->dec_hidden = dec_hidden;
  m->grouper_hidden = grp.spec.hidden;
  m->grouper_input = grp.mode == grouper::GrouperContext::kObs ? "obs" : "state";
}
}  // namespace

nn::Checkpoint to_checkpoint(const Model3D& model, const grouper::GrouperTrainState& grp) {
  nn::Checkpoint ck;
  fill_common_meta(&ck.meta, model.dims, model.cfg.H, model.cfg.d, model.cfg.beta,
                   model.cfg.enc_hidden, model.cfg.dec_hidden, grp);
  ck.meta.method = "3d";
  ck.meta.d_top = model.cfg.d;
  ck.meta.codes = model.cfg.codes;
  ck.meta.codes_top = model.cfg.codes;
  ck.meta.sizes = model.cfg.sizes;
  ck.meta.e_max = env::kEMax;
  ck.meta.decoder_layout = "obs,code";
  ck.tensors.merge(model.enc);
  ck.tensors.merge(model.dec);
  ck.tensors.merge(model.books);
  ck.tensors.merge(grp.psi);
  ck.tensors.merge(grp.critic);
  return ck;
}

}  // namespace squads::skills
