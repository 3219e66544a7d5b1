#pragma once

#include <random>
#include <string>
#include <vector>

namespace squads::data {

struct StepRecord {
  std::vector<double> state;
  std::vector<std::vector<double>> obs;  // one per agent
  std::vector<int> actions;
  double reward{0.0};
};

struct EpisodeRecord {
  std::string task_id;
  int n_agents{0};
  std::vector<StepRecord> steps;
};

struct DatasetHeader {
  int version{1};
  std::vector<std::string> task_ids;
  int obs_dim{0};
  int state_dim{0};
  int n_actions{0};
};

struct Dataset {
  DatasetHeader header;
  std::vector<EpisodeRecord> episodes;
};

// Line-delimited text: line 1 is the header object, each following line one
// episode. Reals round-trip exactly.
void save_dataset(const std::vector<EpisodeRecord>& episodes, const std::string& path);
Dataset load_dataset(const std::string& path);

// One agent's H-step observation-action slice.
struct SkillSegment {
  int agent_index{0};
  int start_time{0};
  std::vector<std::vector<double>> obs;  // exactly H entries
  std::vector<int> acts;                 // exactly H entries
};

// Aligned segments, one per agent of the source episode, sharing
// (episode, start_time) and the start state. valid_steps < H only for
// padded trailing fragments.
struct SegmentBatch {
  std::string task_id;
  int n_agents{0};
  int start_time{0};
  int valid_steps{0};
  std::vector<double> start_state;
  std::vector<SkillSegment> segments;
};

// Splits each episode at t = 0, H, 2H, ...; trailing fragments shorter than
// H are dropped when drop_incomplete, else padded by repeating the last
// observation with the no-op action.
std::vector<SegmentBatch> segment_episodes(const std::vector<EpisodeRecord>& episodes, int H,
                                           bool drop_incomplete);

// Uniform sample without replacement from the seeded stream.
std::vector<int> sample_minibatch_indices(int population, int size, std::mt19937_64& rng);
std::vector<SegmentBatch> sample_minibatch(const std::vector<SegmentBatch>& batches, int size,
                                           std::mt19937_64& rng);

}  // namespace squads::data
