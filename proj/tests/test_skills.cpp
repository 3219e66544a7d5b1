#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "squads/autodiff_check.hpp"
#include "squads/collector.hpp"
#include "squads/errors.hpp"
#include "squads/rng.hpp"
#include "squads/skills3d.hpp"
#include "squads/skills_hier.hpp"

using namespace squads;
using namespace squads::skills;

namespace {

constexpr double kLn6 = 1.791759469228055;

EnvDims toy_dims() { return EnvDims{6, 5, 6, 4}; }

data::SegmentBatch toy_batch(int n, int H, std::uint64_t seed) {
  std::mt19937_64 rng = named_stream(seed, "toybatch");
  data::SegmentBatch b;
  b.task_id = "toy";
  b.n_agents = n;
  b.start_time = 0;
  b.valid_steps = H;
  for (int i = 0; i < 5; ++i) b.start_state.push_back(uniform_real(rng, -1, 1));
  for (int a = 0; a < n; ++a) {
    data::SkillSegment seg;
    seg.agent_index = a;
    seg.start_time = 0;
    for (int l = 0; l < H; ++l) {
      std::vector<double> o;
      for (int i = 0; i < 6; ++i) o.push_back(uniform_real(rng, -1, 1));
      seg.obs.push_back(std::move(o));
      seg.acts.push_back(uniform_int(rng, 6));
    }
    b.segments.push_back(std::move(seg));
  }
  return b;
}

DiscoveryConfig3D toy_cfg3d(int H = 3) {
  DiscoveryConfig3D cfg;
  cfg.d = 4;
  cfg.codes = 4;
  cfg.sizes = {1, 2, 3};
  cfg.H = H;
  cfg.enc_hidden = 8;
  cfg.dec_hidden = 8;
  return cfg;
}

DiscoveryConfigHier toy_cfg_hier(int H = 3) {
  DiscoveryConfigHier cfg;
  cfg.d = 4;
  cfg.d_top = 4;
  cfg.codes_btm = 4;
  cfg.codes_top = 4;
  cfg.heads = 2;
  cfg.H = H;
  cfg.enc_hidden = 8;
  cfg.dec_hidden = 8;
  return cfg;
}

nn::ParameterSet merge_all(std::initializer_list<const nn::ParameterSet*> sets) {
  nn::ParameterSet out;
  for (const nn::ParameterSet* s : sets) out.merge(*s);
  return out;
}

void split_into(const nn::ParameterSet& merged, Model3D* m) {
  nn::ParameterSet enc, dec, books;
  for (const auto& [k, v] : merged) {
    if (k.rfind("enc/", 0) == 0) {
      enc.insert(k, v);
    } else if (k.rfind("dec/", 0) == 0) {
      dec.insert(k, v);
    } else {
      books.insert(k, v);
    }
  }
  m->enc = std::move(enc);
  m->dec = std::move(dec);
  m->books = std::move(books);
}

void split_into(const nn::ParameterSet& merged, ModelHier* m) {
  nn::ParameterSet enc, dec, agg, books;
  for (const auto& [k, v] : merged) {
    if (k.rfind("enc/", 0) == 0) {
      enc.insert(k, v);
    } else if (k.rfind("dec/", 0) == 0) {
      dec.insert(k, v);
    } else if (k.rfind("agg/", 0) == 0) {
      agg.insert(k, v);
    } else {
      books.insert(k, v);
    }
  }
  m->enc = std::move(enc);
  m->dec = std::move(dec);
  m->agg = std::move(agg);
  m->books = std::move(books);
}

grouper::Partition parts(std::vector<std::vector<int>> groups, int n) {
  return grouper::partition_from_groups(std::move(groups), n);
}

}  // namespace

TEST_CASE("quantize: exact match has index and zero losses") {
  std::mt19937_64 rng = named_stream(21, "q");
  Codebook3D book = Codebook3D::init(4, {1, 2}, 8, rng);
  std::vector<double> z(book.table(2).codes.data.begin() + 2 * 8,
                        book.table(2).codes.data.begin() + 3 * 8);
  QuantizationResult q = quantize_subgroup(z, book, 2);
  CHECK(q.code_index == 2);
  CHECK(q.vq_loss == 0.0);
  CHECK(q.commit_loss == 0.0);
  CHECK(q.member_rows.size() == 2);
  CHECK(q.member_rows[0].size() == 4);
}

TEST_CASE("quantize: equidistant codes pick the lowest index") {
  std::mt19937_64 rng = named_stream(22, "q");
  CodeTable t = CodeTable::init(3, 2, 0.5, rng);
  t.codes.at2(0, 0) = 1.0;
  t.codes.at2(0, 1) = 0.0;
  t.codes.at2(1, 0) = -1.0;
  t.codes.at2(1, 1) = 0.0;
  t.codes.at2(2, 0) = 1.0;
  t.codes.at2(2, 1) = 0.0;  // duplicate of code 0
  QuantizationResult q = quantize_flat({0.0, 0.0}, t);
  CHECK(q.code_index == 0);
}

TEST_CASE("quantize matches the exhaustive scan oracle on 500 random queries") {
  std::mt19937_64 rng = named_stream(23, "q");
  for (int trial = 0; trial < 500; ++trial) {
    int m = 1 + uniform_int(rng, 5);
    int d = 1 + uniform_int(rng, 8);
    int k = 1 + uniform_int(rng, 32);
    nn::Tensor codes = nn::Tensor::zeros({k, m * d});
    for (double& v : codes.data) v = uniform_real(rng, -1, 1);
    std::vector<double> query(static_cast<size_t>(m * d));
    for (double& v : query) v = uniform_real(rng, -1, 1);
    // Oracle: independent exhaustive scan.
    int best = 0;
    double bd = 1e300;
    for (int j = 0; j < k; ++j) {
      double dist = 0;
      for (int i = 0; i < m * d; ++i) {
        double delta = query[static_cast<size_t>(i)] - codes.at2(j, i);
        dist += delta * delta;
      }
      if (dist < bd) {
        bd = dist;
        best = j;
      }
    }
    CHECK(nearest_code(codes, query) == best);
  }
}

TEST_CASE("quantize updates the EMA usage counter of the chosen code") {
  std::mt19937_64 rng = named_stream(24, "q");
  CodeTable t = CodeTable::init(4, 3, 0.5, rng);
  std::vector<double> z(t.codes.data.begin(), t.codes.data.begin() + 3);  // exactly code 0
  double before = t.ema_usage[0];
  double other_before = t.ema_usage[1];
  quantize_flat(z, t);
  CHECK(t.ema_usage[0] > before);
  CHECK(t.ema_usage[1] < other_before);
  double sum = 0;
  for (double u : t.ema_usage) sum += u;
  CHECK(sum == doctest::Approx(1.0));
}

TEST_CASE("encode_segment: deterministic, zero at zero parameters, slot independent") {
  EnvDims dims = toy_dims();
  std::mt19937_64 rng = named_stream(30, "enc");
  Model3D m = init_model_3d(toy_cfg3d(), dims, rng);
  data::SegmentBatch b = toy_batch(3, 3, 1);

  nn::Graph g1;
  nn::Binder b1(g1, {&m.enc});
  auto z1 = g1.value(encode_segment(b1, m, b.segments[0])).data;
  nn::Graph g2;
  nn::Binder b2(g2, {&m.enc});
  auto z2 = g2.value(encode_segment(b2, m, b.segments[0])).data;
  CHECK(z1 == z2);

  // Zero parameters: embedding is exactly zero.
  Model3D mz = m;
  for (auto& [k, v] : mz.enc) {
    for (double& x : v.data) x = 0.0;
  }
  nn::Graph g3;
  nn::Binder b3(g3, {&mz.enc});
  for (double v : g3.value(encode_segment(b3, mz, b.segments[1])).data) CHECK(v == 0.0);

  // The encoder has no agent-index input: swapping two segments across
  // agent slots swaps the embeddings.
  nn::Graph g4;
  nn::Binder b4(g4, {&m.enc});
  auto za = g4.value(encode_segment(b4, m, b.segments[1])).data;
  data::SkillSegment swapped = b.segments[1];
  swapped.agent_index = 0;
  nn::Graph g5;
  nn::Binder b5(g5, {&m.enc});
  auto zb = g5.value(encode_segment(b5, m, swapped)).data;
  CHECK(za == zb);

  data::SkillSegment bad = b.segments[0];
  bad.obs.pop_back();
  nn::Graph g6;
  nn::Binder b6(g6, {&m.enc});
  CHECK_THROWS_AS(encode_segment(b6, m, bad), StructuralError);
}

TEST_CASE("decode_logits is a normalized distribution and code-sensitive input") {
  EnvDims dims = toy_dims();
  std::mt19937_64 rng = named_stream(31, "dec");
  Model3D m = init_model_3d(toy_cfg3d(), dims, rng);
  std::vector<double> obs(6, 0.3);
  nn::Graph g;
  nn::Binder b(g, {&m.dec});
  nn::Value lp = decode_logits(b, m.dec_spec(), obs, g.constant_vec({0.1, -0.2, 0.5, 0.0}));
  double sum = 0;
  for (double v : g.value(lp).data) sum += std::exp(v);
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  nn::Value lp2 = decode_logits(b, m.dec_spec(), obs, g.constant_vec({0.1, -0.2, 0.5, 0.0}));
  CHECK(g.value(lp).data == g.value(lp2).data);
}

TEST_CASE("untrained Eq.(1) NLL calibrates to H*n*ln6 within 10%") {
  EnvDims dims = toy_dims();
  std::mt19937_64 rng = named_stream(32, "cal");
  Model3D m = init_model_3d(toy_cfg3d(5), dims, rng);
  for (int trial = 0; trial < 10; ++trial) {
    data::SegmentBatch batch = toy_batch(3, 5, 100 + trial);
    nn::Graph g;
    LossParts out = build_loss_3d(g, m, batch, parts({{0, 1}, {2}}, 3), nullptr, nullptr, false);
    double nll = g.value(out.nll)[0];
    CHECK(nll == doctest::Approx(5 * 3 * kLn6).epsilon(0.10));
  }
}

TEST_CASE("embeddings sitting exactly on codes contribute zero VQ terms") {
  EnvDims dims = toy_dims();
  std::mt19937_64 rng = named_stream(33, "zero");
  Model3D m = init_model_3d(toy_cfg3d(), dims, rng);
  data::SegmentBatch batch = toy_batch(2, 3, 7);
  grouper::Partition part = parts({{0, 1}}, 2);
  // First pass to read off z_joint, then plant it as code 0.
  nn::Graph g0;
  nn::Binder b0(g0, {&m.enc});
  std::vector<double> joint;
  for (int a = 0; a < 2; ++a) {
    auto z = g0.value(encode_segment(b0, m, batch.segments[a])).data;
    joint.insert(joint.end(), z.begin(), z.end());
  }
  nn::Tensor& codes = m.books.at("E3d/m2");
  for (int i = 0; i < 8; ++i) codes.at2(0, i) = joint[static_cast<size_t>(i)];
  nn::Graph g;
  LossParts out = build_loss_3d(g, m, batch, part, nullptr, nullptr, false);
  CHECK(g.value(out.vq)[0] == doctest::Approx(0.0));
  CHECK(g.value(out.commit)[0] == doctest::Approx(0.0));
}

TEST_CASE("Eq.(1) gradient matches finite differences on a 2-agent batch") {
  EnvDims dims = toy_dims();
  std::mt19937_64 rng = named_stream(34, "fd");
  Model3D m = init_model_3d(toy_cfg3d(), dims, rng);
  data::SegmentBatch batch = toy_batch(2, 3, 11);
  grouper::Partition part = parts({{0, 1}}, 2);
  Quant3DPlan plan;
  {
    nn::Graph g;
    build_loss_3d(g, m, batch, part, nullptr, &plan, false);
  }
  nn::ParameterSet merged = merge_all({&m.enc, &m.dec, &m.books});
  nn::GraphProgram prog = [&](nn::Graph& g, const nn::ParameterSet& p, const std::vector<nn::Tensor>&) {
    Model3D tmp = m;
    split_into(p, &tmp);
    LossParts out = build_loss_3d(g, tmp, batch, part, &plan, nullptr, false);
    return std::vector<nn::Value>{out.total};
  };
  CHECK(finite_diff_check(merged, prog, {}, 1e-4) < 1e-5);
}

TEST_CASE("gradient routing: each Eq.(1) term reaches exactly its parameters") {
  EnvDims dims = toy_dims();
  std::mt19937_64 rng = named_stream(35, "route");
  Model3D m = init_model_3d(toy_cfg3d(), dims, rng);
  data::SegmentBatch batch = toy_batch(2, 3, 13);
  grouper::Partition part = parts({{0, 1}}, 2);

  auto grad_norms = [&](int which) {
    nn::Graph g;
    LossParts out = build_loss_3d(g, m, batch, part, nullptr, nullptr, false);
    g.backward(which == 0 ? out.nll : which == 1 ? out.vq : out.commit);
    auto grads = g.param_grads();
    double enc = 0, dec = 0, book = 0;
    for (const auto& [k, t] : grads) {
      double s = 0;
      for (double v : t.data) s += std::abs(v);
      if (k.rfind("enc/", 0) == 0) enc += s;
      if (k.rfind("dec/", 0) == 0) dec += s;
      if (k.rfind("E3d/", 0) == 0) book += s;
    }
    return std::array<double, 3>{enc, dec, book};
  };

  auto nll = grad_norms(0);
  CHECK(nll[0] > 0.0);   // encoder via straight-through
  CHECK(nll[1] > 0.0);   // decoder
  CHECK(nll[2] == 0.0);  // codebook untouched by reconstruction
  auto vq = grad_norms(1);
  CHECK(vq[0] == 0.0);  // sg(z_e)
  CHECK(vq[1] == 0.0);
  CHECK(vq[2] > 0.0);  // the only term updating the codes
  auto commit = grad_norms(2);
  CHECK(commit[0] > 0.0);
  CHECK(commit[1] == 0.0);
  CHECK(commit[2] == 0.0);  // sg(e)
}

TEST_CASE("straight-through contract: dL/dz_e equals dL/dz_q on the tape") {
  std::mt19937_64 rng = named_stream(36, "st");
  nn::ParameterSet ps;
  ps.insert("z", nn::init_uniform_fan_in({4}, 4, rng));
  ps.insert("T", nn::init_uniform_fan_in({3, 4}, 4, rng));
  nn::Graph g;
  nn::Binder b(g, {&ps});
  nn::Value z = b("z");
  QuantNodes q = quantize_in_graph(b, "T", ps.at("T"), z);
  // A reconstruction-like scalar through z_q only.
  nn::Value loss = g.squared_norm(g.tanh_act(q.z_q));
  g.backward(loss);
  CHECK(g.grad(q.z_q).data == g.grad(z).data);
  // And z_q's forward value is the code itself.
  CHECK(g.value(q.z_q).data == g.value(q.code).data);
}

TEST_CASE("Eq.(1) decomposes additively over subgroups") {
  EnvDims dims = toy_dims();
  std::mt19937_64 rng = named_stream(37, "add");
  Model3D m = init_model_3d(toy_cfg3d(), dims, rng);
  data::SegmentBatch batch = toy_batch(3, 3, 17);
  double whole = loss_3d_value(m, batch, parts({{0}, {1}, {2}}, 3));
  double acc = 0.0;
  for (int a = 0; a < 3; ++a) {
    data::SegmentBatch sub = batch;
    sub.n_agents = 1;
    sub.segments = {batch.segments[static_cast<size_t>(a)]};
    sub.segments[0].agent_index = 0;
    acc += loss_3d_value(m, sub, parts({{0}}, 1));
  }
  CHECK(whole == doctest::Approx(acc).epsilon(1e-12));
}

TEST_CASE("conform_partition splits disabled sizes into enabled chunks") {
  grouper::Partition p = parts({{0, 1, 2, 3, 4}}, 5);
  grouper::Partition c = conform_partition(p, {1, 2});
  c.validate(5);
  for (const auto& g : c.groups) CHECK(g.size() <= 2);
  CHECK(c.groups.size() == 3);
  // Identity when already conforming.
  grouper::Partition same = conform_partition(c, {1, 2});
  CHECK(same.groups == c.groups);
}

TEST_CASE("aggregate_top: singleton defined, permutation invariant, duplicates collapse") {
  std::mt19937_64 rng = named_stream(40, "agg");
  AggregatorSpec spec{4, 4, 2};
  nn::ParameterSet agg = init_aggregator(spec, rng);
  std::vector<double> x = {0.3, -0.1, 0.7, 0.2};
  std::vector<double> y = {-0.4, 0.9, 0.0, 0.1};
  std::vector<double> w = {0.05, 0.33, -0.6, 0.8};

  auto one = aggregate_top_values(agg, spec, {x});
  CHECK(one.size() == 4);

  auto abc = aggregate_top_values(agg, spec, {x, y, w});
  auto cba = aggregate_top_values(agg, spec, {w, y, x});
  auto bca = aggregate_top_values(agg, spec, {y, w, x});
  for (int i = 0; i < 4; ++i) {
    CHECK(std::abs(abc[i] - cba[i]) < 1e-12);
    CHECK(std::abs(abc[i] - bca[i]) < 1e-12);
  }

  auto dup = aggregate_top_values(agg, spec, {x, x});
  for (int i = 0; i < 4; ++i) CHECK(dup[i] == doctest::Approx(one[i]).epsilon(1e-12));

  nn::Graph g;
  nn::Binder b(g, {&agg});
  CHECK_THROWS_AS(aggregate_top(b, spec, {}), StructuralError);
}

TEST_CASE("Eq.(3) gradient matches finite differences on a 3-agent batch") {
  EnvDims dims = toy_dims();
  std::mt19937_64 rng = named_stream(41, "fdh");
  ModelHier m = init_model_hier(toy_cfg_hier(), dims, rng);
  data::SegmentBatch batch = toy_batch(3, 3, 19);
  grouper::Partition part = parts({{0, 1}, {2}}, 3);
  QuantHierPlan plan;
  {
    nn::Graph g;
    build_loss_hier(g, m, batch, part, nullptr, &plan, false);
  }
  nn::ParameterSet merged = merge_all({&m.enc, &m.dec, &m.agg, &m.books});
  nn::GraphProgram prog = [&](nn::Graph& g, const nn::ParameterSet& p, const std::vector<nn::Tensor>&) {
    ModelHier tmp = m;
    split_into(p, &tmp);
    LossParts out = build_loss_hier(g, tmp, batch, part, &plan, nullptr, false);
    return std::vector<nn::Value>{out.total};
  };
  CHECK(finite_diff_check(merged, prog, {}, 1e-4) < 1e-5);
}

namespace {
// Per-agent reconstruction NLL with explicit condition vectors.
std::vector<double> per_agent_nll(const ModelHier& m, const data::SegmentBatch& batch,
                                  const std::vector<std::vector<double>>& cond) {
  std::vector<double> out;
  nn::Graph g;
  nn::ParameterSet dec = m.dec;
  nn::Binder b(g, {&dec});
  for (int a = 0; a < batch.n_agents; ++a) {
    double nll = 0.0;
    for (int l = 0; l < batch.valid_steps; ++l) {
      nn::Value lp = decode_logits(b, m.dec_spec(), batch.segments[a].obs[l],
                                   g.constant(nn::Tensor::vec(cond[a])));
      nll -= g.value(lp)[batch.segments[a].acts[l]];
    }
    out.push_back(nll);
  }
  return out;
}
}  // namespace

TEST_CASE("Eq.(3) gradient routing: top codes touch the subgroup, bottom codes only the owner") {
  EnvDims dims = toy_dims();
  std::mt19937_64 rng = named_stream(42, "routeh");
  ModelHier m = init_model_hier(toy_cfg_hier(), dims, rng);
  data::SegmentBatch batch = toy_batch(3, 3, 23);
  grouper::Partition part = parts({{0, 1}, {2}}, 3);

  QuantHierPlan plan;
  {
    nn::Graph g;
    build_loss_hier(g, m, batch, part, nullptr, &plan, false);
  }
  const nn::Tensor& btm = m.books.at("Ehier/btm");
  const nn::Tensor& top = m.books.at("Ehier/top");
  auto btm_row = [&](int idx) {
    return std::vector<double>(btm.data.begin() + idx * 4, btm.data.begin() + (idx + 1) * 4);
  };
  auto top_row = [&](int idx) {
    return std::vector<double>(top.data.begin() + idx * 4, top.data.begin() + (idx + 1) * 4);
  };
  auto cond_of = [&](const std::vector<std::vector<double>>& btm_rows,
                     const std::vector<std::vector<double>>& top_rows) {
    std::vector<std::vector<double>> cond;
    for (int a = 0; a < 3; ++a) {
      std::vector<double> c = btm_rows[a];
      int grp = a == 2 ? 1 : 0;
      c.insert(c.end(), top_rows[grp].begin(), top_rows[grp].end());
      cond.push_back(std::move(c));
    }
    return cond;
  };

  std::vector<std::vector<double>> btm_rows = {btm_row(plan.btm_index[0]), btm_row(plan.btm_index[1]),
                                               btm_row(plan.btm_index[2])};
  std::vector<std::vector<double>> top_rows = {top_row(plan.top_index[0]), top_row(plan.top_index[1])};
  std::vector<double> base = per_agent_nll(m, batch, cond_of(btm_rows, top_rows));

  // Perturb subgroup {0,1}'s top code: both members change, agent 2 exact.
  auto top_pert = top_rows;
  for (double& v : top_pert[0]) v += 0.05;
  std::vector<double> after_top = per_agent_nll(m, batch, cond_of(btm_rows, top_pert));
  CHECK(std::abs(after_top[0] - base[0]) > 0.0);
  CHECK(std::abs(after_top[1] - base[1]) > 0.0);
  CHECK(after_top[2] == base[2]);

  // Perturb agent 0's bottom code: only agent 0 changes.
  auto btm_pert = btm_rows;
  for (double& v : btm_pert[0]) v += 0.05;
  std::vector<double> after_btm = per_agent_nll(m, batch, cond_of(btm_pert, top_rows));
  CHECK(std::abs(after_btm[0] - base[0]) > 0.0);
  CHECK(after_btm[1] == base[1]);
  CHECK(after_btm[2] == base[2]);
}

TEST_CASE("untrained Eq.(3) NLL calibrates to H*n*ln6 within 10%") {
  EnvDims dims = toy_dims();
  std::mt19937_64 rng = named_stream(43, "calh");
  ModelHier m = init_model_hier(toy_cfg_hier(5), dims, rng);
  for (int trial = 0; trial < 10; ++trial) {
    data::SegmentBatch batch = toy_batch(3, 5, 200 + trial);
    nn::Graph g;
    LossParts parts_out = build_loss_hier(g, m, batch, parts({{0, 1}, {2}}, 3), nullptr, nullptr, false);
    CHECK(g.value(parts_out.nll)[0] == doctest::Approx(5 * 3 * kLn6).epsilon(0.10));
  }
}

TEST_CASE("single-agent ablation: no top tensors, per-agent additive loss") {
  EnvDims dims = toy_dims();
  std::mt19937_64 rng = named_stream(44, "single");
  DiscoveryConfigHier cfg = toy_cfg_hier();
  cfg.single_agent_only = true;
  ModelHier m = init_model_hier(cfg, dims, rng);
  CHECK_FALSE(m.books.contains("Ehier/top"));
  CHECK(m.agg.empty());

  data::SegmentBatch batch = toy_batch(3, 3, 29);
  double whole = loss_hier_value(m, batch, parts({{0}, {1}, {2}}, 3));
  double acc = 0.0;
  for (int a = 0; a < 3; ++a) {
    data::SegmentBatch sub = batch;
    sub.n_agents = 1;
    sub.segments = {batch.segments[static_cast<size_t>(a)]};
    sub.segments[0].agent_index = 0;
    acc += loss_hier_value(m, sub, parts({{0}}, 1));
  }
  CHECK(whole == doctest::Approx(acc).epsilon(1e-12));
  // Partition independence in single mode.
  CHECK(loss_hier_value(m, batch, parts({{0, 1, 2}}, 3)) == doctest::Approx(whole).epsilon(1e-12));
}

TEST_CASE("toy discovery training: loss decreases and reruns are identical") {
  env::TaskConfig g3 = env::task_by_id("g3");
  auto collected = data::collect_expert_episodes(g3, 6, 0.0, 55);
  auto batches = data::segment_episodes(collected.episodes, 5, true);
  REQUIRE(batches.size() >= 8);

  EnvDims dims{env::obs_dim(), env::state_dim(), env::kNumActions, env::kNMax};

  auto run3d = [&](std::uint64_t seed) {
    DiscoveryConfig3D cfg;
    cfg.H = 5;
    cfg.d = 4;
    cfg.codes = 4;
    cfg.sizes = {1, 2, 3};
    cfg.enc_hidden = 16;
    cfg.dec_hidden = 16;
    cfg.loop.epochs = 4;
    cfg.loop.batch_size = 8;
    cfg.loop.ae_steps_per_phase = 2;
    cfg.loop.accuracy_probe_batches = 8;
    std::mt19937_64 rng = named_stream(seed, "train3d");
    grouper::GrouperSpec gs{dims.state_dim, dims.state_dim, dims.n_max, 16};
    grouper::GrouperTrainState grp =
        grouper::init_grouper_train_state(gs, grouper::GrouperContext::kState, cfg.loop.grouper_ppo, rng);
    return train_3d(batches, cfg, dims, grp, rng);
  };
  TrainResult3D a = run3d(9);
  CHECK(a.run.history.size() >= 2);
  CHECK(a.run.history.back().loss < a.run.history.front().loss);
  CHECK_FALSE(a.run.diverged);
  TrainResult3D b = run3d(9);
  CHECK(a.model.enc.same_values(b.model.enc));
  CHECK(a.model.dec.same_values(b.model.dec));
  CHECK(a.model.books.same_values(b.model.books));

  auto run_hier = [&](std::uint64_t seed, bool single) {
    DiscoveryConfigHier cfg;
    cfg.H = 5;
    cfg.d = 4;
    cfg.d_top = 4;
    cfg.codes_btm = 4;
    cfg.codes_top = 4;
    cfg.enc_hidden = 16;
    cfg.dec_hidden = 16;
    cfg.single_agent_only = single;
    cfg.loop.epochs = 4;
    cfg.loop.batch_size = 8;
    cfg.loop.ae_steps_per_phase = 2;
    cfg.loop.accuracy_probe_batches = 8;
    std::mt19937_64 rng = named_stream(seed, "trainh");
    grouper::GrouperSpec gs{dims.state_dim, dims.state_dim, dims.n_max, 16};
    grouper::GrouperTrainState grp =
        grouper::init_grouper_train_state(gs, grouper::GrouperContext::kState, cfg.loop.grouper_ppo, rng);
    return train_hier(batches, cfg, dims, grp, rng);
  };
  TrainResultHier h = run_hier(9, false);
  CHECK(h.run.history.back().loss < h.run.history.front().loss);
  TrainResultHier h2 = run_hier(9, false);
  CHECK(h.model.enc.same_values(h2.model.enc));
  CHECK(h.model.books.same_values(h2.model.books));

  TrainResultHier s = run_hier(9, true);
  CHECK_FALSE(s.model.books.contains("Ehier/top"));
  CHECK(s.model.agg.empty());
  CHECK(s.run.history.back().loss < s.run.history.front().loss);
}
