#include "squads/discovery.hpp"

#include <algorithm>

#include "squads/errors.hpp"
#include "squads/rng.hpp"

namespace squads::skills {

grouper::Partition conform_partition(const grouper::Partition& part, const std::vector<int>& sizes) {
  bool ok = true;
  for (const auto& g : part.groups) {
    if (std::find(sizes.begin(), sizes.end(), static_cast<int>(g.size())) == sizes.end()) {
      ok = false;
      break;
    }
  }
  if (ok) return part;
  std::vector<std::vector<int>> groups;
  for (const auto& g : part.groups) {
    size_t at = 0;
    while (at < g.size()) {
      int remaining = static_cast<int>(g.size() - at);
      int take = 1;
      for (int m : sizes) {
        if (m <= remaining) take = std::max(take, m);
      }
      groups.emplace_back(g.begin() + static_cast<long>(at), g.begin() + static_cast<long>(at + take));
      at += static_cast<size_t>(take);
    }
  }
  return grouper::partition_from_groups(std::move(groups), part.n_agents());
}

void CodeUsage::record(int index, double decay) {
  for (double& u : ema) u *= decay;
  ema[static_cast<size_t>(index)] += 1.0 - decay;
}

void EmbeddingReservoir::push(std::vector<double> v) {
  if (items_.size() < cap_) {
    items_.push_back(std::move(v));
  } else {
    items_[next_] = std::move(v);
    next_ = (next_ + 1) % cap_;
  }
}

const std::vector<double>& EmbeddingReservoir::pick(std::mt19937_64& rng) const {
  if (items_.empty()) throw StructuralError("reservoir is empty");
  return items_[static_cast<size_t>(uniform_int(rng, static_cast<int>(items_.size())))];
}

void reseed_dead_codes(nn::Tensor& codes, CodeUsage& usage, const EmbeddingReservoir& recent,
                       std::mt19937_64& rng) {
  int k = codes.shape[0];
  int w = codes.shape[1];
  double threshold = 0.01 / k;
  for (int j = 0; j < k; ++j) {
    if (usage.ema[static_cast<size_t>(j)] >= threshold) continue;
    if (recent.empty()) continue;
    const std::vector<double>& src = recent.pick(rng);
    if (static_cast<int>(src.size()) != w) continue;
    for (int i = 0; i < w; ++i) codes.at2(j, i) = src[static_cast<size_t>(i)];
    usage.ema[static_cast<size_t>(j)] = 1.0 / k;
  }
}

DiscoveryRun discovery_train_loop(
    const std::vector<data::SegmentBatch>& batches, const DiscoveryLoopConfig& cfg,
    const std::vector<std::pair<nn::ParameterSet*, nn::AdamState*>>& trainables,
    grouper::GrouperTrainState& grp,
    const std::function<LossParts(nn::Graph&, const data::SegmentBatch&, const grouper::Partition&)>&
        build_loss,
    const std::function<double(const data::SegmentBatch&, const grouper::Partition&)>& loss_value,
    const std::function<void(std::mt19937_64&)>& end_of_phase,
    const std::function<double(const std::vector<const data::SegmentBatch*>&)>& accuracy_probe,
    std::mt19937_64& rng) {
  if (batches.empty()) throw StructuralError("discovery: empty dataset");
  DiscoveryRun run;
  int n_batches = static_cast<int>(batches.size());
  int bsz = std::min(cfg.batch_size, n_batches);

  std::vector<const data::SegmentBatch*> probe;
  for (int i = 0; i < std::min(cfg.accuracy_probe_batches, n_batches); ++i) probe.push_back(&batches[static_cast<size_t>(i)]);

  auto sampled_partition = [&](const data::SegmentBatch& batch, std::mt19937_64& r) {
    auto contexts = grouper::batch_contexts(batch, grp.mode);
    grouper::GroupDecision dec = grouper::choose_groups(grp.psi, grp.spec, contexts, batch.n_agents, &r);
    return grouper::partition_of(dec.gids, batch.n_agents);
  };
  auto singleton_partition = [&](const data::SegmentBatch& batch) {
    std::vector<int> gids(static_cast<size_t>(batch.n_agents));
    for (int i = 0; i < batch.n_agents; ++i) gids[static_cast<size_t>(i)] = i;
    return grouper::partition_of(gids, batch.n_agents);
  };

  // Pre-training evaluation over the probe: epoch 0 of the history.
  {
    EpochStats es;
    es.epoch = 0;
    for (const data::SegmentBatch* b : probe) {
      grouper::Partition part = cfg.use_grouper_partitions
                                    ? sampled_partition(*b, rng)
                                    : singleton_partition(*b);
      es.loss += loss_value(*b, part);
    }
    es.loss /= static_cast<double>(probe.size());
    es.accuracy = accuracy_probe(probe);
    run.history.push_back(es);
  }
  double initial_loss = run.history[0].loss;

  auto snapshot = [&]() {
    std::vector<nn::ParameterSet> s;
    for (const auto& [ps, ad] : trainables) s.push_back(*ps);
    return s;
  };
  std::vector<nn::ParameterSet> good = snapshot();

  int ae_step = 0;
  double last_phase_reward = 0.0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<int> order = permutation(rng, n_batches);
    EpochStats es;
    es.epoch = epoch;
    int count = 0;
    try {
      for (int start = 0; start + bsz <= n_batches; start += bsz) {
        nn::Graph g;
        std::vector<nn::Value> totals, nlls, vqs, commits;
        for (int s = start; s < start + bsz; ++s) {
          const data::SegmentBatch& batch = batches[static_cast<size_t>(order[static_cast<size_t>(s)])];
          grouper::Partition part = cfg.use_grouper_partitions ? sampled_partition(batch, rng)
                                                               : singleton_partition(batch);
          LossParts parts = build_loss(g, batch, part);
          totals.push_back(parts.total);
          nlls.push_back(parts.nll);
          vqs.push_back(parts.vq);
          commits.push_back(parts.commit);
        }
        nn::Value loss = g.mean(g.concat(totals));
        es.loss += g.value(loss)[0];
        es.nll += g.value(g.mean(g.concat(nlls)))[0];
        es.vq += g.value(g.mean(g.concat(vqs)))[0];
        es.commit += g.value(g.mean(g.concat(commits)))[0];
        count += 1;
        g.backward(loss);
        auto grads = g.param_grads();
        for (const auto& [ps, ad] : trainables) {
          if (ps->empty()) continue;
          std::map<std::string, nn::Tensor> sub;
          for (const auto& [name, t] : *ps) {
            auto it = grads.find(name);
            sub.emplace(name, it != grads.end() ? it->second : nn::Tensor::zeros(t.shape));
          }
          nn::AdamResult out = nn::adam_step(*ps, sub, *ad);
          *ps = std::move(out.params);
          *ad = std::move(out.state);
        }
        ae_step += 1;
        if (cfg.use_grouper_partitions && ae_step % cfg.ae_steps_per_phase == 0) {
          std::vector<int> pidx = sample_without_replacement(rng, n_batches, bsz);
          std::vector<const data::SegmentBatch*> pb;
          pb.reserve(pidx.size());
          for (int i : pidx) pb.push_back(&batches[static_cast<size_t>(i)]);
          grouper::GrouperPhaseStats stats = grouper::grouper_ppo_phase(grp, loss_value, pb, cfg.grouper_ppo, rng);
          if (stats.episodes > 0) last_phase_reward = stats.mean_raw_reward;
          end_of_phase(rng);
        }
      }
    } catch (const NumericError&) {
      for (size_t i = 0; i < trainables.size(); ++i) *trainables[i].first = good[i];
      run.diverged = true;
      break;
    }
    good = snapshot();
    if (count > 0) {
      es.loss /= count;
      es.nll /= count;
      es.vq /= count;
      es.commit /= count;
    }
    es.grouper_reward = last_phase_reward;
    es.accuracy = accuracy_probe(probe);
    run.history.push_back(es);
    run.epochs_run = epoch;
    bool drop_ok = cfg.stop_loss_drop <= 0.0 || es.loss <= initial_loss * (1.0 - cfg.stop_loss_drop);
    bool acc_ok = cfg.stop_accuracy <= 0.0 || es.accuracy >= cfg.stop_accuracy;
    if ((cfg.stop_loss_drop > 0.0 || cfg.stop_accuracy > 0.0) && drop_ok && acc_ok) break;
  }
  return run;
}

}  // namespace squads::skills
