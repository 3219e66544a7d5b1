#include "squads/collector.hpp"

#include "squads/rng.hpp"

namespace squads::data {

CollectResult collect_expert_episodes(const env::TaskConfig& cfg, int episodes, double eps,
                                      std::uint64_t seed) {
  CollectResult out;
  out.stats.episodes = episodes;
  for (int e = 0; e < episodes; ++e) {
    std::uint64_t es = stream_seed(seed, "collect." + std::to_string(e));
    std::mt19937_64 noise = named_stream(es, "expert.noise");
    env::ResetOut r = env::reset_env(cfg, es);
    env::EnvState state = r.state;
    std::vector<std::vector<double>> obs = r.obs;

    EpisodeRecord ep;
    ep.task_id = cfg.task_id;
    ep.n_agents = cfg.n_agents;
    while (true) {
      StepRecord st;
      st.state = env::global_state(cfg, state);
      st.obs = obs;
      st.actions = env::scripted_expert(cfg, state, eps, noise);
      env::StepOut so = env::step_env(cfg, state, st.actions);
      st.reward = so.reward;
      ep.steps.push_back(std::move(st));
      state = so.state;
      obs = so.obs;
      out.stats.mean_return += so.reward;
      if (so.done) {
        out.stats.win_rate += so.won ? 1.0 : 0.0;
        break;
      }
    }
    out.stats.mean_length += static_cast<double>(ep.steps.size());
    out.episodes.push_back(std::move(ep));
  }
  if (episodes > 0) {
    out.stats.win_rate /= episodes;
    out.stats.mean_length /= episodes;
    out.stats.mean_return /= episodes;
  }
  return out;
}

}  // namespace squads::data
