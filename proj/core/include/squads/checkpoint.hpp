#pragma once

#include <map>
#include <string>
#include <vector>

#include "squads/params.hpp"

namespace squads::nn {

// Checkpoint header. One struct covers skill and policy checkpoints; unused
// fields keep their defaults and are round-tripped as-is.
struct CheckpointMeta {
  int version{1};
  std::string kind;    // "skills" | "policy"
  std::string method;  // "3d" | "hier" | "single"
  int h{5};
  int d{8};
  int d_top{8};
  double beta{0.25};
  int codes{8};
  int codes_top{8};
  int heads{2};
  std::vector<int> sizes;
  std::string grouper_input{"state"};  // "state" | "obs"
  std::string decoder_layout;          // e.g. "obs,code" or "obs,q_btm,q_top"
  int obs_dim{0};
  int state_dim{0};
  int n_actions{0};
  int n_max{0};
  int e_max{0};
  int enc_hidden{64};
  int dec_hidden{64};
  int grouper_hidden{64};
  int actor_hidden{64};
  int critic_hidden{64};
  int frame_stack{2};
  // Policy checkpoints only.
  std::string manner;
  std::string task_id;
};

// A checkpoint is a single text document mapping parameter name to
// {shape, base64 little-endian 64-bit reals}. Round-trips are bit exact.
struct Checkpoint {
  CheckpointMeta meta;
  ParameterSet tensors;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::string base64_encode(const std::vector<unsigned char>& bytes);
std::vector<unsigned char> base64_decode(const std::string& text);

std::vector<unsigned char> doubles_to_le_bytes(const std::vector<double>& v);
std::vector<double> le_bytes_to_doubles(const std::vector<unsigned char>& b);

}  // namespace squads::nn
