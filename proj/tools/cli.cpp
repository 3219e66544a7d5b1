#include "cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "squads/collector.hpp"
#include "squads/errors.hpp"
#include "squads/rng.hpp"
#include "squads/runtime.hpp"

namespace squads::cli {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

double parse_policy_eps(const std::string& policy) {
  if (policy == "expert") return 0.0;
  if (policy.rfind("noisy:", 0) == 0) {
    double eps = std::stod(policy.substr(6));
    if (eps < 0.0 || eps > 1.0) throw ConfigError("noise level must lie in [0,1]");
    return eps;
  }
  throw ConfigError("policy must be 'expert' or 'noisy:<eps>'");
}

std::vector<int> parse_sizes(const std::string& text) {
  std::vector<int> out;
  size_t at = 0;
  while (at < text.size()) {
    size_t comma = text.find(',', at);
    if (comma == std::string::npos) comma = text.size();
    out.push_back(std::stoi(text.substr(at, comma - at)));
    at = comma + 1;
  }
  if (out.empty()) throw ConfigError("--sizes needs at least one entry");
  return out;
}


// Flat "key = value" config files: values fill in flags the command line
// did not set; unknown keys surface as unknown flags and are rejected.
std::vector<std::string> apply_config_file(std::vector<std::string> args) {
  std::string path;
  for (size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<long>(i), args.begin() + static_cast<long>(i) + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<long>(i));
      break;
    }
  }
  if (path.empty()) return args;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  auto trim = [](std::string s) {
    size_t b = s.find_first_not_of(" \t\r");
    size_t e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line is not 'key = value': " + line);
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    std::string flag = "--" + key;
    bool overridden = false;
    for (const std::string& a : args) {
      if (a == flag || a.rfind(flag + "=", 0) == 0) {
        overridden = true;
        break;
      }
    }
    if (overridden) continue;
    if (value == "true") {
      args.push_back(flag);
    } else if (value == "false") {
      continue;
    } else {
      args.push_back(flag);
      args.push_back(value);
    }
  }
  return args;
}

int cmd_collect(const std::string& task, int episodes, const std::string& policy, std::uint64_t seed,
                const std::string& out) {
  env::TaskConfig cfg = env::task_by_id(task);
  double eps = parse_policy_eps(policy);
  if (episodes < 0) throw ConfigError("--episodes must be >= 0");
  data::CollectResult res = data::collect_expert_episodes(cfg, episodes, eps, seed);
  data::save_dataset(res.episodes, out);
  std::cout << "collected episodes=" << res.stats.episodes << " win_rate=" << fmt(res.stats.win_rate)
            << " mean_length=" << fmt(res.stats.mean_length) << " mean_return="
            << fmt(res.stats.mean_return) << " -> " << out << "\n";
  return 0;
}

struct DiscoverArgs {
  std::string method{"3d"};
  std::vector<std::string> datasets;
  int horizon{5};
  int dim{8};
  int codes{8};
  double beta{0.25};
  std::string sizes{"1,2,3,4,5"};
  std::string grouper_input{"state"};
  int epochs{200};
  std::uint64_t seed{0};
  std::string out;
  std::string loss_csv;
  int batch{32};
  double lr{1e-3};
  int interleave{10};
  double stop_loss_drop{0.0};
  double stop_accuracy{0.0};
  int enc_hidden{64};
  int dec_hidden{64};
  int grouper_hidden{64};
};

void write_loss_csv(const std::string& path, const std::vector<skills::EpochStats>& history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "epoch,loss,nll,vq,commit,accuracy,grouper_reward\n";
  for (const skills::EpochStats& e : history) {
    out << e.epoch << "," << fmt(e.loss) << "," << fmt(e.nll) << "," << fmt(e.vq) << ","
        << fmt(e.commit) << "," << fmt(e.accuracy) << "," << fmt(e.grouper_reward) << "\n";
  }
}

int cmd_discover(const DiscoverArgs& a) {
  if (a.datasets.empty()) throw ConfigError("--data is required");
  if (a.out.empty()) throw ConfigError("--out is required");

  std::vector<data::EpisodeRecord> episodes;
  data::DatasetHeader header;
  bool first = true;
  for (const std::string& path : a.datasets) {
    data::Dataset ds = data::load_dataset(path);
    if (first) {
      header = ds.header;
      first = false;
    } else if (ds.header.obs_dim != header.obs_dim || ds.header.state_dim != header.state_dim ||
               ds.header.n_actions != header.n_actions) {
      throw ConfigError("incompatible observation/state dimensions across datasets ('" + path + "')");
    }
    for (auto& ep : ds.episodes) episodes.push_back(std::move(ep));
  }
  if (episodes.empty()) throw ConfigError("datasets contain no episodes");

  std::vector<data::SegmentBatch> batches = data::segment_episodes(episodes, a.horizon, true);
  if (batches.empty()) throw ConfigError("no full segments at horizon " + std::to_string(a.horizon));

  skills::EnvDims dims{header.obs_dim, header.state_dim, header.n_actions, env::kNMax};
  grouper::GrouperContext mode =
      a.grouper_input == "obs" ? grouper::GrouperContext::kObs : grouper::GrouperContext::kState;

  skills::DiscoveryLoopConfig loop;
  loop.epochs = a.epochs;
  loop.batch_size = a.batch;
  loop.ae_steps_per_phase = a.interleave;
  loop.lr = a.lr;
  loop.stop_loss_drop = a.stop_loss_drop;
  loop.stop_accuracy = a.stop_accuracy;
  loop.grouper_ppo.actor_lr = 1e-3;
  loop.grouper_ppo.critic_lr = 1e-3;

  std::mt19937_64 init_rng = named_stream(a.seed, "discover.init");
  std::mt19937_64 train_rng = named_stream(a.seed, "discover.train");
  grouper::GrouperSpec gspec{mode == grouper::GrouperContext::kObs ? dims.obs_dim : dims.state_dim,
                             dims.state_dim, dims.n_max, a.grouper_hidden};
  grouper::GrouperTrainState grp =
      grouper::init_grouper_train_state(gspec, mode, loop.grouper_ppo, init_rng);

  nn::Checkpoint ck;
  std::vector<skills::EpochStats> history;
  if (a.method == "3d") {
    skills::DiscoveryConfig3D cfg;
    cfg.d = a.dim;
    cfg.codes = a.codes;
    cfg.sizes = parse_sizes(a.sizes);
    cfg.H = a.horizon;
    cfg.beta = a.beta;
    cfg.enc_hidden = a.enc_hidden;
    cfg.dec_hidden = a.dec_hidden;
    cfg.loop = loop;
    cfg.grouper_input = mode;
    skills::TrainResult3D res = skills::train_3d(batches, cfg, dims, grp, train_rng);
    history = res.run.history;
    ck = skills::to_checkpoint(res.model, grp);
    if (res.run.diverged) std::cerr << "warning: training diverged, checkpoint holds the last good epoch\n";
  } else if (a.method == "hier" || a.method == "single") {
    skills::DiscoveryConfigHier cfg;
    cfg.d = a.dim;
    cfg.d_top = a.dim;
    cfg.codes_btm = a.codes;
    cfg.codes_top = a.codes;
    cfg.H = a.horizon;
    cfg.beta = a.beta;
    cfg.enc_hidden = a.enc_hidden;
    cfg.dec_hidden = a.dec_hidden;
    cfg.single_agent_only = a.method == "single";
    cfg.loop = loop;
    cfg.grouper_input = mode;
    skills::TrainResultHier res = skills::train_hier(batches, cfg, dims, grp, train_rng);
    history = res.run.history;
    ck = skills::to_checkpoint(res.model, grp);
    if (res.run.diverged) std::cerr << "warning: training diverged, checkpoint holds the last good epoch\n";
  } else {
    throw ConfigError("unknown method '" + a.method + "'");
  }

  nn::save_checkpoint(ck, a.out);
  std::string csv = a.loss_csv.empty() ? a.out + ".loss.csv" : a.loss_csv;
  write_loss_csv(csv, history);
  const skills::EpochStats& last = history.back();
  std::cout << "discovered method=" << a.method << " epochs=" << last.epoch << " loss="
            << fmt(last.loss) << " accuracy=" << fmt(last.accuracy) << " -> " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string env_id;
  std::string skills_path;
  std::string assign{"mixed"};
  long steps{300000};
  bool sparse{false};
  std::uint64_t seed{0};
  std::string out;
  std::string metrics;
  long eval_every{10000};
  int eval_episodes{32};
  int workers{1};
  double stop_win_rate{0.0};
  int episodes_per_iter{8};
  double actor_lr{3e-4};
  double critic_lr{1e-3};
  double entropy_coef{0.01};
};

void write_metrics_csv(const std::string& path, const std::vector<runtime::EvalRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "step,win_rate,mean_return,policy_loss,value_loss,entropy,clip_fraction,approx_kl\n";
  for (const runtime::EvalRow& r : rows) {
    out << r.step << "," << fmt(r.win_rate) << "," << fmt(r.mean_return) << ","
        << fmt(r.diag.policy_loss) << "," << fmt(r.diag.value_loss) << "," << fmt(r.diag.entropy)
        << "," << fmt(r.diag.clip_fraction) << "," << fmt(r.diag.approx_kl) << "\n";
  }
}

int cmd_train(const TrainArgs& a) {
  if (a.out.empty()) throw ConfigError("--out is required");
  env::TaskConfig cfg = env::task_by_id(a.env_id);
  cfg.sparse = a.sparse;
  runtime::Manner manner = runtime::manner_from_string(a.assign);

  std::optional<runtime::FrozenSkills> fs;
  if (manner != runtime::Manner::kFlat) {
    if (a.skills_path.empty()) throw ConfigError("--skills is required for skill-based manners");
    nn::Checkpoint ck = nn::load_checkpoint(a.skills_path);
    if (ck.meta.kind != "skills") throw ConfigError("'" + a.skills_path + "' is not a skills checkpoint");
    fs = runtime::FrozenSkills::from_checkpoint(ck);
    if (fs->dims.obs_dim != env::obs_dim() || fs->dims.state_dim != env::state_dim()) {
      throw ConfigError("checkpoint dimensions do not match this environment build");
    }
    std::string missing = fs->missing_for(manner);
    if (!missing.empty()) {
      throw ConfigError("checkpoint does not support --assign " + a.assign + ", missing: " + missing);
    }
  }

  runtime::DownstreamConfig dcfg;
  dcfg.total_steps = a.steps;
  dcfg.eval_every = a.eval_every;
  dcfg.eval_episodes = a.eval_episodes;
  dcfg.workers = a.workers;
  dcfg.stop_at_win_rate = a.stop_win_rate;
  dcfg.episodes_per_iter = a.episodes_per_iter;
  dcfg.ppo.actor_lr = a.actor_lr;
  dcfg.ppo.critic_lr = a.critic_lr;
  dcfg.ppo.entropy_coef = a.entropy_coef;

  runtime::DownstreamResult res =
      runtime::train_downstream(cfg, fs ? &*fs : nullptr, manner, dcfg, a.seed);
  if (!res.frozen_intact) throw StructuralError("frozen skill tensors changed during training");

  nn::Checkpoint out;
  out.meta = fs ? fs->meta : nn::CheckpointMeta{};
  if (!fs) {
    out.meta.obs_dim = env::obs_dim();
    out.meta.state_dim = env::state_dim();
    out.meta.n_actions = env::kNumActions;
    out.meta.n_max = env::kNMax;
    out.meta.e_max = env::kEMax;
    out.meta.method = "flat";
    out.meta.decoder_layout = "";
  }
  out.meta.kind = "policy";
  out.meta.manner = a.assign;
  out.meta.task_id = a.env_id;
  out.meta.actor_hidden = dcfg.actor_hidden;
  out.meta.critic_hidden = dcfg.critic_hidden;
  if (fs) out.tensors.merge(fs->tensors);
  out.tensors.merge(res.ac.actor);
  out.tensors.merge(res.ac.critic);
  nn::save_checkpoint(out, a.out);

  std::string csv = a.metrics.empty() ? a.out + ".metrics.csv" : a.metrics;
  write_metrics_csv(csv, res.rows);
  std::cout << "trained manner=" << a.assign << " env_steps=" << res.env_steps << " final_win_rate="
            << fmt(res.rows.back().win_rate) << " best_win_rate=" << fmt(res.best_win_rate) << " -> "
            << a.out << "\n";
  return 0;
}

struct EvalArgs {
  std::string env_id;
  std::string policy;
  int episodes{100};
  std::uint64_t seed{0};
  std::string dump_traj;
  bool sparse{false};
};

nlohmann::json row_json(const runtime::TrajectoryRow& r, int episode) {
  nlohmann::json j;
  j["ep"] = episode;
  j["t"] = r.t;
  nlohmann::json agents = nlohmann::json::array();
  for (const auto& [x, y] : r.agents) agents.push_back({x, y});
  j["agents"] = agents;
  nlohmann::json enemies = nlohmann::json::array();
  for (const auto& [x, y] : r.enemies) enemies.push_back({x, y});
  j["enemies"] = enemies;
  j["acts"] = r.actions;
  j["codes"] = r.codes;
  j["top_codes"] = r.top_codes;
  j["partition"] = r.partition;
  return j;
}

int cmd_eval(const EvalArgs& a) {
  if (a.episodes < 1) throw ConfigError("--episodes must be >= 1");
  env::TaskConfig cfg = env::task_by_id(a.env_id);
  cfg.sparse = a.sparse;

  std::ofstream dump;
  int episode_counter = -1;
  runtime::TrajectorySink sink;
  runtime::TrajectorySink* sink_ptr = nullptr;
  if (!a.dump_traj.empty()) {
    dump.open(a.dump_traj, std::ios::binary);
    if (!dump) throw IoError("cannot open '" + a.dump_traj + "' for writing");
    sink = [&](const runtime::TrajectoryRow& r) {
      if (r.t == 0) episode_counter += 1;
      dump << row_json(r, episode_counter).dump() << "\n";
    };
    sink_ptr = &sink;
  }

  runtime::EvalSummary s;
  if (a.policy == "expert" || a.policy.rfind("noisy:", 0) == 0) {
    s = runtime::evaluate_expert(cfg, parse_policy_eps(a.policy), a.episodes, a.seed, sink_ptr);
  } else {
    nn::Checkpoint ck = nn::load_checkpoint(a.policy);
    if (ck.meta.kind != "policy") throw ConfigError("'" + a.policy + "' is not a policy checkpoint");
    if (ck.meta.obs_dim != env::obs_dim() || ck.meta.state_dim != env::state_dim()) {
      throw ConfigError("checkpoint dimensions do not match this environment build");
    }
    runtime::Manner manner = runtime::manner_from_string(ck.meta.manner);
    skills::EnvDims dims{ck.meta.obs_dim, ck.meta.state_dim, ck.meta.n_actions, ck.meta.n_max};
    std::mt19937_64 shape_rng = named_stream(0, "shape");
    runtime::ActorCritic ac =
        runtime::init_actor_critic(dims, ck.meta.d, ck.meta.actor_hidden, ck.meta.critic_hidden,
                                   manner == runtime::Manner::kFlat, ck.meta.n_actions, shape_rng);
    for (auto& [name, t] : ac.actor) t = ck.tensors.at(name);
    for (auto& [name, t] : ac.critic) t = ck.tensors.at(name);
    std::optional<runtime::FrozenSkills> fs;
    if (manner != runtime::Manner::kFlat) {
      nn::Checkpoint skills_part = ck;
      skills_part.meta.kind = "skills";
      fs = runtime::FrozenSkills::from_checkpoint(skills_part);
    }
    s = runtime::evaluate_policy(cfg, ac, fs ? &*fs : nullptr, manner, a.episodes, a.seed, sink_ptr);
  }
  std::cout << "episodes=" << s.episodes << " win_rate=" << fmt(s.win_rate) << " ci95=["
            << fmt(s.ci_low) << "," << fmt(s.ci_high) << "] mean_return=" << fmt(s.mean_return)
            << " mean_length=" << fmt(s.mean_length) << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Offline multi-agent skill discovery and hierarchical reuse on the Skirmish grid Dec-POMDP"};
  app.require_subcommand(1);

  auto* collect = app.add_subcommand("collect", "Roll the scripted collector and write a dataset");

  std::string c_task{"g3"}, c_policy{"expert"}, c_out{"dataset.jsonl"};
  int c_episodes = 200;
  std::uint64_t c_seed = 0;
  collect->add_option("--task", c_task, "Task id")->capture_default_str();
  collect->add_option("--episodes", c_episodes, "Episode count")->capture_default_str();
  collect->add_option("--policy", c_policy, "expert | noisy:<eps>")->capture_default_str();
  collect->add_option("--seed", c_seed, "Root seed")->capture_default_str();
  collect->add_option("--out", c_out, "Output dataset path")->capture_default_str();

  auto* discover = app.add_subcommand("discover", "Train skill codebooks from offline datasets");

  DiscoverArgs d;
  discover->add_option("--method", d.method, "3d | hier | single")->capture_default_str();
  discover->add_option("--data", d.datasets, "Dataset file(s)")->required()->take_all();
  discover->add_option("--horizon", d.horizon, "Skill horizon H")->capture_default_str();
  discover->add_option("--dim", d.dim, "Embedding width d")->capture_default_str();
  discover->add_option("--codes", d.codes, "Codes per table")->capture_default_str();
  discover->add_option("--beta", d.beta, "Commitment coefficient")->capture_default_str();
  discover->add_option("--sizes", d.sizes, "Enabled subgroup sizes (3d)")->capture_default_str();
  discover->add_option("--grouper-input", d.grouper_input, "state | obs")->capture_default_str();
  discover->add_option("--epochs", d.epochs, "Training epochs")->capture_default_str();
  discover->add_option("--seed", d.seed, "Root seed")->capture_default_str();
  discover->add_option("--out", d.out, "Checkpoint path")->required();
  discover->add_option("--loss-csv", d.loss_csv, "Loss CSV path (default <out>.loss.csv)");
  discover->add_option("--batch", d.batch, "Minibatch size")->capture_default_str();
  discover->add_option("--lr", d.lr, "Autoencoder learning rate")->capture_default_str();
  discover->add_option("--interleave", d.interleave, "AE steps per grouper phase")->capture_default_str();
  discover->add_option("--stop-loss-drop", d.stop_loss_drop, "Early stop: loss drop fraction");
  discover->add_option("--stop-accuracy", d.stop_accuracy, "Early stop: reconstruction accuracy");
  discover->add_option("--enc-hidden", d.enc_hidden, "Encoder hidden width")->capture_default_str();
  discover->add_option("--dec-hidden", d.dec_hidden, "Decoder hidden width")->capture_default_str();

  auto* train = app.add_subcommand("train", "Hierarchical MAPPO on frozen skills (or flat baseline)");

  TrainArgs t;
  train->add_option("--env", t.env_id, "Task id")->required();
  train->add_option("--skills", t.skills_path, "Skills checkpoint");
  train->add_option("--assign", t.assign, "3d | hier | mixed | rule | flat")->capture_default_str();
  train->add_option("--steps", t.steps, "Env step budget")->capture_default_str();
  train->add_flag("--sparse", t.sparse, "Sparse team reward");
  train->add_option("--seed", t.seed, "Root seed")->capture_default_str();
  train->add_option("--out", t.out, "Policy checkpoint path")->required();
  train->add_option("--metrics", t.metrics, "Metrics CSV path (default <out>.metrics.csv)");
  train->add_option("--eval-every", t.eval_every, "Eval period in env steps")->capture_default_str();
  train->add_option("--eval-episodes", t.eval_episodes, "Greedy episodes per eval")->capture_default_str();
  train->add_option("--workers", t.workers, "Rollout worker threads")->capture_default_str();
  train->add_option("--stop-win-rate", t.stop_win_rate, "Early stop at this eval win rate");
  train->add_option("--episodes-per-iter", t.episodes_per_iter, "Episodes per PPO iteration")
      ->capture_default_str();
  train->add_option("--actor-lr", t.actor_lr, "Actor learning rate")->capture_default_str();
  train->add_option("--critic-lr", t.critic_lr, "Critic learning rate")->capture_default_str();
  train->add_option("--entropy-coef", t.entropy_coef, "Entropy bonus coefficient")->capture_default_str();

  auto* eval = app.add_subcommand("eval", "Greedy evaluation of a policy checkpoint or the expert");

  EvalArgs e;
  eval->add_option("--env", e.env_id, "Task id")->required();
  eval->add_option("--policy", e.policy, "Policy checkpoint path, or expert | noisy:<eps>")->required();
  eval->add_option("--episodes", e.episodes, "Episode count")->capture_default_str();
  eval->add_option("--seed", e.seed, "Root seed")->capture_default_str();
  eval->add_option("--dump-traj", e.dump_traj, "Per-step trajectory dump path");
  eval->add_flag("--sparse", e.sparse, "Sparse team reward");

  std::string config_doc;
  for (CLI::App* sub : {collect, discover, train, eval}) {
    sub->add_option("--config", config_doc, "Flat key = value config file; flags override");
  }

  try {
    std::vector<std::string> merged = apply_config_file(args);
    std::vector<std::string> reversed(merged.rbegin(), merged.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& err) {
    int code = app.exit(err);
    return code == 0 ? 0 : 1;
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }

  try {
    if (collect->parsed()) return cmd_collect(c_task, c_episodes, c_policy, c_seed, c_out);
    if (discover->parsed()) return cmd_discover(d);
    if (train->parsed()) return cmd_train(t);
    if (eval->parsed()) return cmd_eval(e);
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const IoError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const ValidationError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "runtime failure: " << err.what() << "\n";
    return 2;
  }
  return 1;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace squads::cli
