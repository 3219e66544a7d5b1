#include "squads/rng.hpp"

#include <cmath>

#include "squads/errors.hpp"

namespace squads {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t root, std::string_view name) {
  std::uint64_t h = splitmix64(root ^ 0x5851f42d4c957f2dULL);
  for (unsigned char c : name) {
    h = splitmix64(h ^ static_cast<std::uint64_t>(c));
  }
  return h;
}

std::mt19937_64 named_stream(std::uint64_t root, std::string_view name) {
  return std::mt19937_64(stream_seed(root, name));
}

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double uniform_real(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

int uniform_int(std::mt19937_64& rng, int n) {
  if (n <= 0) throw StructuralError("uniform_int needs n > 0");
  // Rejection sampling keeps the draw exactly uniform.
  const std::uint64_t un = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return static_cast<int>(x % un);
}

double normal01(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  double u2 = uniform01(rng);
  while (u1 <= 1e-300) u1 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::vector<int> permutation(std::mt19937_64& rng, int n) {
  return sample_without_replacement(rng, n, n);
}

std::vector<int> sample_without_replacement(std::mt19937_64& rng, int n, int k) {
  if (k > n) throw StructuralError("cannot sample " + std::to_string(k) + " from " + std::to_string(n));
  std::vector<int> idx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  for (int i = 0; i < k; ++i) {
    int j = i + uniform_int(rng, n - i);
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  idx.resize(static_cast<size_t>(k));
  return idx;
}

}  // namespace squads
