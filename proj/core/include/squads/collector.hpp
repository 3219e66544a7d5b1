#pragma once

#include <cstdint>

#include "squads/dataset.hpp"
#include "squads/env.hpp"

namespace squads::data {

struct CollectStats {
  int episodes{0};
  double win_rate{0.0};
  double mean_length{0.0};
  double mean_return{0.0};
};

struct CollectResult {
  std::vector<EpisodeRecord> episodes;
  CollectStats stats;
};

// Rolls the scripted expert (noise level eps) for the requested number of
// episodes; per-episode seeds derive from the root seed.
CollectResult collect_expert_episodes(const env::TaskConfig& cfg, int episodes, double eps,
                                      std::uint64_t seed);

}  // namespace squads::data
