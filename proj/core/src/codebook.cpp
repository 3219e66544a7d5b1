#include "squads/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "squads/errors.hpp"
#include "squads/rng.hpp"

namespace squads::skills {

double squared_distance(const double* a, const double* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

int nearest_code(const Tensor& codes, const std::vector<double>& query) {
  if (codes.rank() != 2) throw StructuralError("nearest_code: codes must be [k, width]");
  int k = codes.shape[0];
  int w = codes.shape[1];
  if (static_cast<int>(query.size()) != w) {
    throw StructuralError("nearest_code: query width " + std::to_string(query.size()) +
                          " != table width " + std::to_string(w));
  }
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int j = 0; j < k; ++j) {
    double dist = squared_distance(query.data(), codes.data.data() + static_cast<size_t>(j) * w, w);
    if (dist < best_d) {
      best_d = dist;
      best = j;
    }
  }
  return best;
}

CodeTable CodeTable::init(int k, int width, double init_bound, std::mt19937_64& rng) {
  if (k < 1 || width < 1) throw ConfigError("code table needs k >= 1 and width >= 1");
  CodeTable t;
  t.k = k;
  t.width = width;
  t.codes = Tensor::zeros({k, width});
  for (double& v : t.codes.data) v = uniform_real(rng, -init_bound, init_bound);
  t.ema_usage.assign(static_cast<size_t>(k), 1.0 / k);
  return t;
}

CodeTable CodeTable::view(const Tensor& codes) {
  if (codes.rank() != 2) throw StructuralError("code table view needs a [k, width] tensor");
  CodeTable t;
  t.k = codes.shape[0];
  t.width = codes.shape[1];
  t.codes = codes;
  t.ema_usage.assign(static_cast<size_t>(t.k), 1.0 / t.k);
  return t;
}

void CodeTable::record_usage(int index, double decay) {
  for (double& u : ema_usage) u *= decay;
  ema_usage[static_cast<size_t>(index)] += 1.0 - decay;
}

Codebook3D Codebook3D::init(int d, const std::vector<int>& sizes, int codes_per_size,
                            std::mt19937_64& rng) {
  if (sizes.empty()) throw ConfigError("codebook: enabled sizes must be non-empty");
  if (std::find(sizes.begin(), sizes.end(), 1) == sizes.end()) {
    throw ConfigError("codebook: enabled sizes must include 1");
  }
  Codebook3D book;
  book.d = d;
  book.sizes = sizes;
  std::sort(book.sizes.begin(), book.sizes.end());
  double bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (int m : book.sizes) {
    book.tables.emplace(m, CodeTable::init(codes_per_size, m * d, bound, rng));
  }
  return book;
}

const CodeTable& Codebook3D::table(int m) const {
  auto it = tables.find(m);
  if (it == tables.end()) throw ConfigError("subgroup size " + std::to_string(m) + " is not enabled");
  return it->second;
}

CodeTable& Codebook3D::table(int m) {
  auto it = tables.find(m);
  if (it == tables.end()) throw ConfigError("subgroup size " + std::to_string(m) + " is not enabled");
  return it->second;
}

HierCodebooks HierCodebooks::init(int d, int d_top, int k_btm, int k_top, std::mt19937_64& rng) {
  HierCodebooks h;
  h.d = d;
  h.d_top = d_top;
  h.btm = CodeTable::init(k_btm, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  h.top = CodeTable::init(k_top, d_top, 1.0 / std::sqrt(static_cast<double>(d_top)), rng);
  return h;
}

namespace {
QuantizationResult quantize_values(const std::vector<double>& z, CodeTable& table, int d_row) {
  int idx = table.nearest(z);
  table.record_usage(idx);
  QuantizationResult res;
  res.code_index = idx;
  const double* row = table.codes.data.data() + static_cast<size_t>(idx) * table.width;
  double dist = squared_distance(z.data(), row, table.width);
  res.vq_loss = dist;
  res.commit_loss = dist;
  int m = table.width / d_row;
  for (int r = 0; r < m; ++r) {
    res.member_rows.emplace_back(row + static_cast<size_t>(r) * d_row,
                                 row + static_cast<size_t>(r + 1) * d_row);
  }
  return res;
}
}  // namespace

QuantizationResult quantize_subgroup(const std::vector<double>& z_joint, Codebook3D& book, int m) {
  CodeTable& table = book.table(m);  // throws ConfigError when m is not enabled
  if (static_cast<int>(z_joint.size()) != m * book.d) {
    throw StructuralError("quantize_subgroup: joint embedding has wrong width");
  }
  return quantize_values(z_joint, table, book.d);
}

QuantizationResult quantize_flat(const std::vector<double>& z, CodeTable& table) {
  return quantize_values(z, table, table.width);
}

QuantNodes quantize_in_graph(Binder& b, const std::string& table_name, const Tensor& codes, Value z,
                             int forced_index) {
  Graph& g = b.graph();
  const Tensor& zv = g.value(z);
  if (codes.rank() != 2 || zv.rank() != 1 || zv.size() != codes.shape[1]) {
    throw StructuralError("quantize_in_graph: embedding width does not match table '" + table_name + "'");
  }
  QuantNodes q;
  q.index = forced_index >= 0 ? forced_index : nearest_code(codes, zv.data);
  Value table_node = b(table_name);
  q.code = g.row(table_node, q.index);
  // Straight-through: value of the code, gradient of z.
  q.z_q = g.add(z, g.stop_gradient(g.sub(q.code, z)));
  q.vq_loss = g.squared_norm(g.sub(g.stop_gradient(z), q.code));
  q.commit_loss = g.squared_norm(g.sub(z, g.stop_gradient(q.code)));
  return q;
}

}  // namespace squads::skills
