#include "squads/skills_hier.hpp"

#include "squads/env.hpp"

#include <cmath>

#include "squads/errors.hpp"
#include "squads/rng.hpp"
#include "squads/skills3d.hpp"

namespace squads::skills {

int AggregatorSpec::head_width() const {
  if (heads < 1 || d_top % heads != 0) {
    throw ConfigError("aggregator: head count must divide the projection width");
  }
  return d_top / heads;
}

nn::ParameterSet init_aggregator(const AggregatorSpec& spec, std::mt19937_64& rng) {
  int hw = spec.head_width();
  nn::ParameterSet ps("aggregator");
  for (int h = 0; h < spec.heads; ++h) {
    std::string tag = std::to_string(h);
    ps.insert("agg/q" + tag, nn::init_uniform_fan_in({hw}, spec.d, rng));
    ps.insert("agg/Wk" + tag, nn::init_uniform_fan_in({hw, spec.d}, spec.d, rng));
    ps.insert("agg/bk" + tag, nn::init_uniform_fan_in({hw}, spec.d, rng));
    ps.insert("agg/Wv" + tag, nn::init_uniform_fan_in({hw, spec.d}, spec.d, rng));
    ps.insert("agg/bv" + tag, nn::init_uniform_fan_in({hw}, spec.d, rng));
  }
  ps.insert("agg/Wo", nn::init_uniform_fan_in({spec.d_top, spec.heads * hw}, spec.heads * hw, rng));
  ps.insert("agg/bo", nn::init_uniform_fan_in({spec.d_top}, spec.heads * hw, rng));
  return ps;
}

nn::Value aggregate_top(nn::Binder& b, const AggregatorSpec& spec,
                        const std::vector<nn::Value>& members) {
  if (members.empty()) throw StructuralError("aggregate_top: empty member list");
  nn::Graph& g = b.graph();
  std::vector<nn::Value> heads_out;
  for (int h = 0; h < spec.heads; ++h) {
    std::string tag = std::to_string(h);
    nn::Value wk = b("agg/Wk" + tag), bk = b("agg/bk" + tag);
    nn::Value wv = b("agg/Wv" + tag), bv = b("agg/bv" + tag);
    std::vector<nn::Value> keys, values;
    keys.reserve(members.size());
    values.reserve(members.size());
    for (nn::Value m : members) {
      keys.push_back(g.affine(wk, bk, m));
      values.push_back(g.affine(wv, bv, m));
    }
    heads_out.push_back(g.attention(b("agg/q" + tag), g.stack_rows(keys), g.stack_rows(values)));
  }
  nn::Value cat = spec.heads == 1 ? heads_out[0] : g.concat(heads_out);
  return g.affine(b("agg/Wo"), b("agg/bo"), cat);
}

std::vector<double> aggregate_top_values(const nn::ParameterSet& agg, const AggregatorSpec& spec,
                                         const std::vector<std::vector<double>>& members) {
  nn::Graph g;
  nn::Binder b(g, {&agg});
  std::vector<nn::Value> ms;
  ms.reserve(members.size());
  for (const auto& m : members) ms.push_back(g.input(nn::Tensor::vec(m)));
  return g.value(aggregate_top(b, spec, ms)).data;
}

nn::MlpSpec ModelHier::enc_spec() const {
  return nn::MlpSpec{"enc", {cfg.H * (dims.obs_dim + dims.n_actions), cfg.enc_hidden, cfg.d}};
}

nn::MlpSpec ModelHier::dec_spec() const {
  int cond = cfg.single_agent_only ? cfg.d : cfg.d + cfg.d_top;
  return nn::MlpSpec{"dec", {dims.obs_dim + cond, cfg.dec_hidden, dims.n_actions}};
}

AggregatorSpec ModelHier::agg_spec() const { return AggregatorSpec{cfg.d, cfg.d_top, cfg.heads}; }

ModelHier init_model_hier(const DiscoveryConfigHier& cfg, const EnvDims& dims, std::mt19937_64& rng) {
  if (cfg.beta <= 0.0) throw ConfigError("beta must be positive");
  ModelHier m;
  m.cfg = cfg;
  m.dims = dims;
  m.enc = init_mlp(m.enc_spec(), rng, "encoder");
  m.dec = init_mlp(m.dec_spec(), rng, "decoder");
  m.books.set_role("codebook");
  double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  nn::Tensor btm = nn::Tensor::zeros({cfg.codes_btm, cfg.d});
  for (double& v : btm.data) v = uniform_real(rng, -bound, bound);
  m.books.insert("Ehier/btm", std::move(btm));
  m.usage_btm = CodeUsage(cfg.codes_btm);
  if (!cfg.single_agent_only) {
    m.agg = init_aggregator(m.agg_spec(), rng);
    double bound_top = 1.0 / std::sqrt(static_cast<double>(cfg.d_top));
    nn::Tensor top = nn::Tensor::zeros({cfg.codes_top, cfg.d_top});
    for (double& v : top.data) v = uniform_real(rng, -bound_top, bound_top);
    m.books.insert("Ehier/top", std::move(top));
    m.usage_top = CodeUsage(cfg.codes_top);
  }
  return m;
}

LossParts build_loss_hier(nn::Graph& g, ModelHier& model, const data::SegmentBatch& batch,
                          const grouper::Partition& part, const QuantHierPlan* frozen,
                          QuantHierPlan* plan_out, bool record_usage) {
  part.validate(batch.n_agents);
  nn::Binder b(g, {&model.enc, &model.dec, &model.agg, &model.books});
  nn::MlpSpec dspec = model.dec_spec();
  nn::MlpSpec espec = model.enc_spec();
  int n = batch.n_agents;

  // Bottom embeddings and codes per agent.
  std::vector<nn::Value> z(static_cast<size_t>(n));
  std::vector<QuantNodes> qb(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const data::SkillSegment& seg = batch.segments[static_cast<size_t>(i)];
    if (static_cast<int>(seg.obs.size()) != model.cfg.H) {
      throw StructuralError("segment must have exactly H steps");
    }
    z[static_cast<size_t>(i)] = mlp_forward(b, espec, segment_input(seg, model.dims.n_actions));
    int forced = frozen != nullptr ? frozen->btm_index[static_cast<size_t>(i)] : -1;
    qb[static_cast<size_t>(i)] =
        quantize_in_graph(b, "Ehier/btm", model.books.at("Ehier/btm"), z[static_cast<size_t>(i)], forced);
    if (record_usage) {
      model.usage_btm.record(qb[static_cast<size_t>(i)].index);
      model.recent_btm.push(g.value(z[static_cast<size_t>(i)]).data);
    }
    if (plan_out != nullptr) plan_out->btm_index.push_back(qb[static_cast<size_t>(i)].index);
  }

  std::vector<nn::Value> nll_terms, vq_terms, commit_terms;
  for (int i = 0; i < n; ++i) {
    vq_terms.push_back(qb[static_cast<size_t>(i)].vq_loss);
    commit_terms.push_back(qb[static_cast<size_t>(i)].commit_loss);
  }

  // Top codes per subgroup (weighted by member count, per Eq. (3)'s
  // per-agent sum). Skipped entirely in single-agent mode.
  std::vector<nn::Value> top_code(part.groups.size());
  if (!model.cfg.single_agent_only) {
    AggregatorSpec aspec = model.agg_spec();
    for (size_t gi = 0; gi < part.groups.size(); ++gi) {
      const std::vector<int>& group = part.groups[gi];
      std::vector<nn::Value> members;
      members.reserve(group.size());
      for (int agent : group) members.push_back(z[static_cast<size_t>(agent)]);
      nn::Value z_top = aggregate_top(b, aspec, members);
      int forced = frozen != nullptr ? frozen->top_index[gi] : -1;
      QuantNodes qt = quantize_in_graph(b, "Ehier/top", model.books.at("Ehier/top"), z_top, forced);
      if (record_usage) {
        model.usage_top.record(qt.index);
        model.recent_top.push(g.value(z_top).data);
      }
      if (plan_out != nullptr) plan_out->top_index.push_back(qt.index);
      double mult = static_cast<double>(group.size());
      vq_terms.push_back(g.scale(qt.vq_loss, mult));
      commit_terms.push_back(g.scale(qt.commit_loss, mult));
      top_code[gi] = qt.z_q;
    }
  }

  for (size_t gi = 0; gi < part.groups.size(); ++gi) {
    for (int agent : part.groups[gi]) {
      const data::SkillSegment& seg = batch.segments[static_cast<size_t>(agent)];
      nn::Value cond = model.cfg.single_agent_only
                           ? qb[static_cast<size_t>(agent)].z_q
                           : g.concat({qb[static_cast<size_t>(agent)].z_q, top_code[gi]});
      for (int l = 0; l < batch.valid_steps; ++l) {
        nn::Value logits = decode_logits(b, dspec, seg.obs[static_cast<size_t>(l)], cond);
        nll_terms.push_back(g.pick(logits, seg.acts[static_cast<size_t>(l)]));
      }
    }
  }

  LossParts parts;
  parts.nll = g.scale(g.sum(g.concat(nll_terms)), -1.0);
  parts.vq = g.sum(g.concat(vq_terms));
  parts.commit = g.scale(g.sum(g.concat(commit_terms)), model.cfg.beta);
  parts.total = g.add(parts.nll, g.add(parts.vq, parts.commit));
  return parts;
}

double loss_hier_value(ModelHier& model, const data::SegmentBatch& batch,
                       const grouper::Partition& part) {
  nn::Graph g;
  LossParts parts = build_loss_hier(g, model, batch, part, nullptr, nullptr, false);
  return g.value(parts.total)[0];
}

double accuracy_hier(ModelHier& model, const grouper::GrouperTrainState& grp,
                     const std::vector<const data::SegmentBatch*>& batches) {
  long correct = 0, total = 0;
  nn::MlpSpec dspec = model.dec_spec();
  nn::MlpSpec espec = model.enc_spec();
  for (const data::SegmentBatch* batch : batches) {
    int n = batch->n_agents;
    grouper::Partition part;
    if (model.cfg.single_agent_only) {
      std::vector<int> gids(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) gids[static_cast<size_t>(i)] = i;
      part = grouper::partition_of(gids, n);
    } else {
      auto contexts = grouper::batch_contexts(*batch, grp.mode);
      grouper::GroupDecision dec = grouper::choose_groups(grp.psi, grp.spec, contexts, n, nullptr);
      part = grouper::partition_of(dec.gids, n);
    }
    nn::Graph g;
    nn::Binder b(g, {&model.enc, &model.dec, &model.agg, &model.books});
    std::vector<std::vector<double>> zv(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      zv[static_cast<size_t>(i)] = g.value(mlp_forward(b, espec, segment_input(
          batch->segments[static_cast<size_t>(i)], model.dims.n_actions))).data;
    }
    const nn::Tensor& btm = model.books.at("Ehier/btm");
    for (size_t gi = 0; gi < part.groups.size(); ++gi) {
      std::vector<double> top_row;
      if (!model.cfg.single_agent_only) {
        std::vector<std::vector<double>> members;
        for (int agent : part.groups[gi]) members.push_back(zv[static_cast<size_t>(agent)]);
        std::vector<double> z_top = aggregate_top_values(model.agg, model.agg_spec(), members);
        const nn::Tensor& top = model.books.at("Ehier/top");
        int ti = nearest_code(top, z_top);
        top_row.assign(top.data.begin() + static_cast<long>(ti) * top.shape[1],
                       top.data.begin() + static_cast<long>(ti + 1) * top.shape[1]);
      }
      for (int agent : part.groups[gi]) {
        int bi = nearest_code(btm, zv[static_cast<size_t>(agent)]);
        std::vector<double> cond(btm.data.begin() + static_cast<long>(bi) * btm.shape[1],
                                 btm.data.begin() + static_cast<long>(bi + 1) * btm.shape[1]);
        cond.insert(cond.end(), top_row.begin(), top_row.end());
        const data::SkillSegment& seg = batch->segments[static_cast<size_t>(agent)];
        for (int l = 0; l < batch->valid_steps; ++l) {
          nn::Value logits =
              decode_logits(b, dspec, seg.obs[static_cast<size_t>(l)], g.constant(nn::Tensor::vec(cond)));
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

TrainResultHier train_hier(const std::vector<data::SegmentBatch>& data,
                           const DiscoveryConfigHier& cfg, const EnvDims& dims,
                           grouper::GrouperTrainState& grp, std::mt19937_64& rng) {
  TrainResultHier out{init_model_hier(cfg, dims, rng), {}};
  ModelHier& model = out.model;

  nn::AdamConfig ac;
  ac.lr = cfg.loop.lr;
  nn::AdamState enc_adam = nn::AdamState::init(model.enc, ac);
  nn::AdamState dec_adam = nn::AdamState::init(model.dec, ac);
  nn::AdamState agg_adam = nn::AdamState::init(model.agg, ac);
  nn::AdamState book_adam = nn::AdamState::init(model.books, ac);

  DiscoveryLoopConfig loop = cfg.loop;
  if (cfg.single_agent_only) loop.use_grouper_partitions = false;

  auto build = [&](nn::Graph& g, const data::SegmentBatch& batch, const grouper::Partition& part) {
    return build_loss_hier(g, model, batch, part, nullptr, nullptr, true);
  };
  auto value = [&](const data::SegmentBatch& batch, const grouper::Partition& part) {
    return loss_hier_value(model, batch, part);
  };
  auto reseed = [&](std::mt19937_64& r) {
    reseed_dead_codes(model.books.at("Ehier/btm"), model.usage_btm, model.recent_btm, r);
    if (!model.cfg.single_agent_only) {
      reseed_dead_codes(model.books.at("Ehier/top"), model.usage_top, model.recent_top, r);
    }
  };
  auto acc = [&](const std::vector<const data::SegmentBatch*>& probe) {
    return accuracy_hier(model, grp, probe);
  };

  out.run = discovery_train_loop(data, loop,
                                 {{&model.enc, &enc_adam},
                                  {&model.dec, &dec_adam},
                                  {&model.agg, &agg_adam},
                                  {&model.books, &book_adam}},
                                 grp, build, value, reseed, acc, rng);
  return out;
}

}  // namespace squads::skills

namespace squads::skills {

nn::Checkpoint to_checkpoint(const ModelHier& model, const grouper::GrouperTrainState& grp) {
  nn::Checkpoint ck;
  ck.meta.kind = "skills";
  ck.meta.method = model.cfg.single_agent_only ? "single" : "hier";
  ck.meta.h = model.cfg.H;
  ck.meta.d = model.cfg.d;
  ck.meta.d_top = model.cfg.d_top;
  ck.meta.beta = model.cfg.beta;
  ck.meta.codes = model.cfg.codes_btm;
  ck.meta.codes_top = model.cfg.codes_top;
  ck.meta.heads = model.cfg.heads;
  ck.meta.obs_dim = model.dims.obs_dim;
  ck.meta.state_dim = model.dims.state_dim;
  ck.meta.n_actions = model.dims.n_actions;
  ck.meta.n_max = model.dims.n_max;
  ck.meta.e_max = env::kEMax;
  ck.meta.enc_hidden = model.cfg.enc_hidden;
  ck.meta.dec_hidden = model.cfg.dec_hidden;
  ck.meta.grouper_hidden = grp.spec.hidden;
  ck.meta.grouper_input = grp.mode == grouper::GrouperContext::kObs ? "obs" : "state";
  ck.meta.decoder_layout = model.cfg.single_agent_only ? "obs,q_btm" : "obs,q_btm,q_top";
  ck.tensors.merge(model.enc);
  ck.tensors.merge(model.dec);
  ck.tensors.merge(model.agg);
  ck.tensors.merge(model.books);
  ck.tensors.merge(grp.psi);
  ck.tensors.merge(grp.critic);
  return ck;
}

}  // namespace squads::skills
