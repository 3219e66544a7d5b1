#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace squads {

// All randomness flows from one root seed split into named streams, so that
// individual components can be reseeded independently. Sampling helpers are
// hand-rolled (not std::*_distribution) to keep byte-level reproducibility
// independent of the standard library implementation.

std::uint64_t splitmix64(std::uint64_t x);

// Deterministic stream id from (root, name).
std::uint64_t stream_seed(std::uint64_t root, std::string_view name);

std::mt19937_64 named_stream(std::uint64_t root, std::string_view name);

// Uniform double in [0, 1).
double uniform01(std::mt19937_64& rng);

// Uniform double in [lo, hi).
double uniform_real(std::mt19937_64& rng, double lo, double hi);

// Uniform integer in [0, n).
int uniform_int(std::mt19937_64& rng, int n);

// Standard normal via Box-Muller.
double normal01(std::mt19937_64& rng);

// Fisher-Yates permutation of {0..n-1}.
std::vector<int> permutation(std::mt19937_64& rng, int n);

// First k entries of a random permutation of {0..n-1} (sampling without
// replacement).
std::vector<int> sample_without_replacement(std::mt19937_64& rng, int n, int k);

}  // namespace squads
