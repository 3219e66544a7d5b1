#include "squads/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "squads/errors.hpp"
#include "squads/rng.hpp"

namespace squads::data {

namespace {
using nlohmann::json;

json episode_to_json(const EpisodeRecord& ep) {
  json steps = json::array();
  for (const StepRecord& st : ep.steps) {
    json s;
    s["s"] = st.state;
    s["o"] = st.obs;
    s["a"] = st.actions;
    s["r"] = st.reward;
    steps.push_back(std::move(s));
  }
  json j;
  j["task_id"] = ep.task_id;
  j["n_agents"] = ep.n_agents;
  j["steps"] = std::move(steps);
  return j;
}

EpisodeRecord episode_from_json(const json& j) {
  EpisodeRecord ep;
  ep.task_id = j.at("task_id").get<std::string>();
  ep.n_agents = j.at("n_agents").get<int>();
  for (const json& s : j.at("steps")) {
    StepRecord st;
    st.state = s.at("s").get<std::vector<double>>();
    st.obs = s.at("o").get<std::vector<std::vector<double>>>();
    st.actions = s.at("a").get<std::vector<int>>();
    st.reward = s.at("r").get<double>();
    if (static_cast<int>(st.obs.size()) != ep.n_agents ||
        static_cast<int>(st.actions.size()) != ep.n_agents) {
      throw IoError("episode step has wrong per-agent counts");
    }
    ep.steps.push_back(std::move(st));
  }
  return ep;
}
}  // namespace

void save_dataset(const std::vector<EpisodeRecord>& episodes, const std::string& path) {
  DatasetHeader h;
  std::set<std::string> ids;
  for (const EpisodeRecord& ep : episodes) {
    ids.insert(ep.task_id);
    if (!ep.steps.empty()) {
      h.state_dim = static_cast<int>(ep.steps[0].state.size());
      if (!ep.steps[0].obs.empty()) h.obs_dim = static_cast<int>(ep.steps[0].obs[0].size());
      for (const StepRecord& st : ep.steps) {
        for (int a : st.actions) h.n_actions = std::max(h.n_actions, a + 1);
      }
    }
  }
  h.n_actions = std::max(h.n_actions, 6);
  h.task_ids.assign(ids.begin(), ids.end());

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  json hj;
  hj["version"] = h.version;
  hj["task_ids"] = h.task_ids;
  hj["obs_dim"] = h.obs_dim;
  hj["state_dim"] = h.state_dim;
  hj["n_actions"] = h.n_actions;
  out << hj.dump() << "\n";
  for (const EpisodeRecord& ep : episodes) out << episode_to_json(ep).dump() << "\n";
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset '" + path + "'");
  Dataset ds;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      throw IoError("parse error in '" + path + "' at line " + std::to_string(line_no) + ": " + e.what());
    }
    try {
      if (line_no == 1) {
        ds.header.version = j.at("version").get<int>();
        if (ds.header.version != 1) {
          throw IoError("unsupported dataset version " + std::to_string(ds.header.version) + " in '" +
                        path + "'");
        }
        ds.header.task_ids = j.at("task_ids").get<std::vector<std::string>>();
        ds.header.obs_dim = j.at("obs_dim").get<int>();
        ds.header.state_dim = j.at("state_dim").get<int>();
        ds.header.n_actions = j.at("n_actions").get<int>();
      } else {
        ds.episodes.push_back(episode_from_json(j));
      }
    } catch (const IoError&) {
      throw;
    } catch (const std::exception& e) {
      throw IoError("parse error in '" + path + "' at line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (line_no == 0) throw IoError("dataset '" + path + "' is empty (missing header)");
  return ds;
}

std::vector<SegmentBatch> segment_episodes(const std::vector<EpisodeRecord>& episodes, int H,
                                           bool drop_incomplete) {
  if (H < 1) throw StructuralError("segment: H must be >= 1");
  std::vector<SegmentBatch> out;
  for (const EpisodeRecord& ep : episodes) {
    int len = static_cast<int>(ep.steps.size());
    for (int t = 0; t < len; t += H) {
      int avail = std::min(H, len - t);
      if (avail < H && drop_incomplete) break;
      SegmentBatch b;
      b.task_id = ep.task_id;
      b.n_agents = ep.n_agents;
      b.start_time = t;
      b.valid_steps = avail;
      b.start_state = ep.steps[static_cast<size_t>(t)].state;
      for (int i = 0; i < ep.n_agents; ++i) {
        SkillSegment seg;
        seg.agent_index = i;
        seg.start_time = t;
        for (int l = 0; l < H; ++l) {
          int src = t + std::min(l, avail - 1);
          const StepRecord& st = ep.steps[static_cast<size_t>(src)];
          seg.obs.push_back(st.obs[static_cast<size_t>(i)]);
          seg.acts.push_back(l < avail ? st.actions[static_cast<size_t>(i)] : 0);
        }
        b.segments.push_back(std::move(seg));
      }
      out.push_back(std::move(b));
    }
  }
  return out;
}

std::vector<int> sample_minibatch_indices(int population, int size, std::mt19937_64& rng) {
  if (size > population) {
    throw StructuralError("sample_minibatch: size " + std::to_string(size) + " exceeds population " +
                          std::to_string(population));
  }
  return sample_without_replacement(rng, population, size);
}

std::vector<SegmentBatch> sample_minibatch(const std::vector<SegmentBatch>& batches, int size,
                                           std::mt19937_64& rng) {
  std::vector<int> idx = sample_minibatch_indices(static_cast<int>(batches.size()), size, rng);
  std::vector<SegmentBatch> out;
  out.reserve(static_cast<size_t>(size));
  for (int i : idx) out.push_back(batches[static_cast<size_t>(i)]);
  return out;
}

}  // namespace squads::data
