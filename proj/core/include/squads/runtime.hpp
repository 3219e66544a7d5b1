#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>

#include "squads/checkpoint.hpp"
#include "squads/env.hpp"
#include "squads/mappo.hpp"
#include "squads/skills3d.hpp"
#include "squads/skills_hier.hpp"

namespace squads::runtime {

enum class Manner { k3d, kHier, kMixed, kRule, kFlat };

Manner manner_from_string(const std::string& s);
std::string manner_to_string(Manner m);

// Frozen skill components reconstructed from a skills checkpoint. All
// assignment operations are pure; nothing here is mutated after loading.
struct FrozenSkills {
  nn::CheckpointMeta meta;
  skills::EnvDims dims;
  nn::ParameterSet tensors;  // every frozen tensor, checkpoint names

  nn::MlpSpec enc_spec;
  nn::MlpSpec dec_spec;
  grouper::GrouperSpec gspec;
  skills::AggregatorSpec agg_spec;

  // Mixed-manner pool: all single-agent rows of all codes, lexicographic
  // (size, code, row) order, deduplicated by exact equality.
  std::vector<std::vector<double>> row_pool;
  std::vector<std::array<int, 3>> row_pool_keys;

  static FrozenSkills from_checkpoint(const nn::Checkpoint& ckpt);

  bool has_tensor(const std::string& name) const { return tensors.contains(name); }
  const nn::Tensor& codes3d(int m) const;
  bool supports(Manner manner) const;
  // Names the tensors a manner needs but the checkpoint lacks.
  std::string missing_for(Manner manner) const;

  // Frozen decoder log-probabilities on (obs || cond).
  std::vector<double> decode_logp(const std::vector<double>& obs, const std::vector<double>& cond) const;
};

// Result of mapping actor embeddings z^{1:n} to codes.
struct Assignment {
  grouper::Partition partition;
  std::vector<std::vector<double>> cond;  // per-agent decoder condition
  std::vector<int> code_index;            // per-agent code id in its table / pool
  std::vector<int> top_index;             // hier only, -1 elsewhere
  int e1_fallbacks{0};
};

// Grouper-based manners consume the grouping context (global state and
// per-agent observations; which one is used follows the checkpoint's
// grouper_input).
struct GroupingContext {
  std::vector<double> state;
  std::vector<std::vector<double>> obs;
};

Assignment assign_3d(const FrozenSkills& fs, const std::vector<std::vector<double>>& z,
                     const GroupingContext& ctx);
Assignment assign_hier(const FrozenSkills& fs, const std::vector<std::vector<double>>& z,
                       const GroupingContext& ctx);
Assignment assign_mixed(const FrozenSkills& fs, const std::vector<std::vector<double>>& z);
// Appendix-style greedy matching: min-heap over (subgroup, code) pairs
// keyed by squared distance / subgroup size.
Assignment assign_rule(const FrozenSkills& fs, const std::vector<std::vector<double>>& z);

Assignment assign(const FrozenSkills& fs, Manner manner, const std::vector<std::vector<double>>& z,
                  const GroupingContext& ctx);

// High-level actor (diagonal gaussian over R^d) and centralized critic.
struct ActorCritic {
  nn::ParameterSet actor;   // role: actor ("actor/pi/*", "actor/log_std")
  nn::ParameterSet critic;  // role: critic ("critic/vf/*")
  rl::GaussianHead gaussian;
  nn::MlpSpec actor_disc;  // flat manner: discrete head
  nn::MlpSpec critic_spec;
  bool discrete{false};
};

ActorCritic init_actor_critic(const skills::EnvDims& dims, int d, int actor_hidden, int critic_hidden,
                              bool discrete, int n_actions, std::mt19937_64& rng);

struct SkillTransition {
  std::vector<double> state;
  std::vector<std::vector<double>> actor_inputs;  // per agent, stacked obs
  std::vector<std::vector<double>> z;             // per agent
  std::vector<double> logp;                       // per agent
  double value{0.0};
  double reward{0.0};  // sum of env rewards spanned
  int steps_spanned{0};
  bool done{false};
};

struct TrajectoryRow {
  int t{0};
  std::vector<std::pair<int, int>> agents;
  std::vector<std::pair<int, int>> enemies;
  std::vector<int> actions;
  std::vector<int> codes;
  std::vector<int> top_codes;
  std::vector<std::vector<int>> partition;
};

using TrajectorySink = std::function<void(const TrajectoryRow&)>;

struct EpisodeResult {
  double total_return{0.0};
  int steps{0};
  bool won{false};
  std::vector<SkillTransition> transitions;
};

// One hierarchical episode: every H steps the actor emits z^{1:n}, codes are
// assigned per manner, the frozen decoder drives the next H steps, skill
// rewards accumulate. Mid-skill termination truncates the final transition.
EpisodeResult run_skill_episode(const env::TaskConfig& cfg, const ActorCritic& ac,
                                const FrozenSkills& fs, Manner manner, int H,
                                std::uint64_t episode_seed, bool actor_greedy, bool decoder_greedy,
                                const nn::ParameterSet* critic_for_values,
                                TrajectorySink* sink = nullptr);

// Flat baseline episode: primitive actions every step.
EpisodeResult run_flat_episode(const env::TaskConfig& cfg, const ActorCritic& ac,
                               std::uint64_t episode_seed, bool greedy,
                               const nn::ParameterSet* critic_for_values,
                               TrajectorySink* sink = nullptr);

struct DownstreamConfig {
  rl::PPOConfig ppo;
  long total_steps{300000};
  int episodes_per_iter{8};
  long eval_every{10000};
  int eval_episodes{32};
  int actor_hidden{64};
  int critic_hidden{64};
  int workers{1};
  double stop_at_win_rate{0.0};  // 0 disables early exit
  // Skills sample their actions during training rollouts (matching the
  // frozen decoder's policy semantics); argmax execution is available for
  // determinism checks.
  bool greedy_skill_execution{false};
  // The actor's initial z distribution matches the single-agent code rows:
  // output bias at their centroid, sigma at their per-dimension spread.
  bool center_actor_on_codes{true};
  double log_std_init{0.0};  // ln(1), used when centering is off
};

struct EvalRow {
  long step{0};
  double win_rate{0.0};
  double mean_return{0.0};
  rl::PPODiagnostics diag;
};

struct DownstreamResult {
  ActorCritic ac;
  std::vector<EvalRow> rows;
  long env_steps{0};
  bool frozen_intact{false};
  double best_win_rate{0.0};
};

// MAPPO over skill transitions (or primitive steps for the flat manner).
// Skill components are asserted byte-identical before/after.
DownstreamResult train_downstream(const env::TaskConfig& cfg, const FrozenSkills* fs, Manner manner,
                                  const DownstreamConfig& dcfg, std::uint64_t seed);

struct EvalSummary {
  int episodes{0};
  int wins{0};
  double win_rate{0.0};
  double ci_low{0.0};
  double ci_high{0.0};
  double mean_return{0.0};
  double mean_length{0.0};
};

// Greedy evaluation with a fixed seed stream; optional trajectory sink.
EvalSummary evaluate_policy(const env::TaskConfig& cfg, const ActorCritic& ac, const FrozenSkills* fs,
                            Manner manner, int episodes, std::uint64_t seed,
                            TrajectorySink* sink = nullptr);

// The scripted expert wrapped as a policy.
EvalSummary evaluate_expert(const env::TaskConfig& cfg, double eps, int episodes, std::uint64_t seed,
                            TrajectorySink* sink = nullptr);

// Wilson 95% binomial interval.
std::pair<double, double> binomial_ci95(int successes, int trials);

}  // namespace squads::runtime
