#pragma once

#include <map>
#include <random>
#include <vector>

#include "squads/mlp.hpp"

namespace squads::skills {

using nn::Binder;
using nn::Graph;
using nn::Tensor;
using nn::Value;

// Exhaustive nearest row of codes [k, w] by squared euclidean distance;
// ties go to the lowest index.
int nearest_code(const Tensor& codes, const std::vector<double>& query);

double squared_distance(const double* a, const double* b, int n);

// One table of k codes with EMA usage counters.
struct CodeTable {
  int k{0};
  int width{0};
  Tensor codes;                   // [k, width]
  std::vector<double> ema_usage;  // sums to ~1

  static CodeTable init(int k, int width, double init_bound, std::mt19937_64& rng);
  static CodeTable view(const Tensor& codes);
  void record_usage(int index, double decay = 0.99);
  int nearest(const std::vector<double>& query) const { return nearest_code(codes, query); }
};

// The per-subgroup-size family E_{1:n}: each code of table m is an m-row
// stack of single-agent d-vectors.
struct Codebook3D {
  int d{0};
  std::vector<int> sizes;           // enabled subgroup sizes, ascending, includes 1
  std::map<int, CodeTable> tables;  // size m -> table of width m*d

  static Codebook3D init(int d, const std::vector<int>& sizes, int codes_per_size,
                         std::mt19937_64& rng);
  bool enabled(int m) const { return tables.count(m) > 0; }
  const CodeTable& table(int m) const;
  CodeTable& table(int m);
};

// Bottom (temporal) and top (subgroup) codebooks.
struct HierCodebooks {
  int d{0};
  int d_top{0};
  CodeTable btm;
  CodeTable top;

  static HierCodebooks init(int d, int d_top, int k_btm, int k_top, std::mt19937_64& rng);
};

// Forward-only quantization of one subgroup embedding (the public
// operation; updates the chosen code's EMA usage counter).
struct QuantizationResult {
  int code_index{-1};
  std::vector<std::vector<double>> member_rows;  // m rows of width d
  double vq_loss{0.0};      // ||sg(z_e) - e||^2
  double commit_loss{0.0};  // ||z_e - sg(e)||^2 (unweighted)
};

QuantizationResult quantize_subgroup(const std::vector<double>& z_joint, Codebook3D& book, int m);
QuantizationResult quantize_flat(const std::vector<double>& z, CodeTable& table);

// In-graph quantization against a code tensor bound as parameter
// `table_name`. The code choice is a constant of the tape (forced_index, or
// the nearest code to the current value of z). Gradient contract:
// straight-through — z_q forwards the code value and copies the decoder
// gradient to z unchanged; vq_loss reaches only the codebook row;
// commit_loss reaches only z.
struct QuantNodes {
  int index{-1};
  Value code;
  Value z_q;
  Value vq_loss;
  Value commit_loss;  // unweighted
};

QuantNodes quantize_in_graph(Binder& b, const std::string& table_name, const Tensor& codes, Value z,
                             int forced_index = -1);

}  // namespace squads::skills
