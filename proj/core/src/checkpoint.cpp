#include "squads/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "squads/errors.hpp"

namespace squads::nn {

namespace {
constexpr char kB64Table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int b64_index(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}
}  // namespace

std::string base64_encode(const std::vector<unsigned char>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  while (i + 3 <= bytes.size()) {
    unsigned v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out.push_back(kB64Table[(v >> 18) & 63]);
    out.push_back(kB64Table[(v >> 12) & 63]);
    out.push_back(kB64Table[(v >> 6) & 63]);
    out.push_back(kB64Table[v & 63]);
    i += 3;
  }
  size_t rem = bytes.size() - i;
  if (rem == 1) {
    unsigned v = bytes[i] << 16;
    out.push_back(kB64Table[(v >> 18) & 63]);
    out.push_back(kB64Table[(v >> 12) & 63]);
    out.push_back('=');
    out.push_back('=');
  } else if (rem == 2) {
    unsigned v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out.push_back(kB64Table[(v >> 18) & 63]);
    out.push_back(kB64Table[(v >> 12) & 63]);
    out.push_back(kB64Table[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

std::vector<unsigned char> base64_decode(const std::string& text) {
  std::vector<unsigned char> out;
  out.reserve(text.size() / 4 * 3);
  int buf = 0, bits = 0;
  for (char c : text) {
    if (c == '=' || c == '\n' || c == '\r') continue;
    int v = b64_index(c);
    if (v < 0) throw IoError(std::string("invalid base64 character '") + c + "'");
    buf = (buf << 6) | v;
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<unsigned char>((buf >> bits) & 0xff));
    }
  }
  return out;
}

std::vector<unsigned char> doubles_to_le_bytes(const std::vector<double>& v) {
  std::vector<unsigned char> out(v.size() * 8);
  for (size_t i = 0; i < v.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &v[i], 8);
    for (int b = 0; b < 8; ++b) out[i * 8 + b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
  }
  return out;
}

std::vector<double> le_bytes_to_doubles(const std::vector<unsigned char>& b) {
  if (b.size() % 8 != 0) throw IoError("tensor byte payload is not a multiple of 8");
  std::vector<double> out(b.size() / 8);
  for (size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(b[i * 8 + k]) << (8 * k);
    std::memcpy(&out[i], &bits, 8);
  }
  return out;
}

namespace {
using nlohmann::json;

json meta_to_json(const CheckpointMeta& m) {
  json j;
  j["version"] = m.version;
  j["kind"] = m.kind;
  j["method"] = m.method;
  j["h"] = m.h;
  j["d"] = m.d;
  j["d_top"] = m.d_top;
  j["beta"] = m.beta;
  j["codes"] = m.codes;
  j["codes_top"] = m.codes_top;
  j["heads"] = m.heads;
  j["sizes"] = m.sizes;
  j["grouper_input"] = m.grouper_input;
  j["decoder_layout"] = m.decoder_layout;
  j["obs_dim"] = m.obs_dim;
  j["state_dim"] = m.state_dim;
  j["n_actions"] = m.n_actions;
  j["n_max"] = m.n_max;
  j["e_max"] = m.e_max;
  j["enc_hidden"] = m.enc_hidden;
  j["dec_hidden"] = m.dec_hidden;
  j["grouper_hidden"] = m.grouper_hidden;
  j["actor_hidden"] = m.actor_hidden;
  j["critic_hidden"] = m.critic_hidden;
  j["frame_stack"] = m.frame_stack;
  j["manner"] = m.manner;
  j["task_id"] = m.task_id;
  return j;
}

CheckpointMeta meta_from_json(const json& j) {
  CheckpointMeta m;
  m.version = j.at("version").get<int>();
  m.kind = j.at("kind").get<std::string>();
  m.method = j.at("method").get<std::string>();
  m.h = j.at("h").get<int>();
  m.d = j.at("d").get<int>();
  m.d_top = j.at("d_top").get<int>();
  m.beta = j.at("beta").get<double>();
  m.codes = j.at("codes").get<int>();
  m.codes_top = j.at("codes_top").get<int>();
  m.heads = j.at("heads").get<int>();
  m.sizes = j.at("sizes").get<std::vector<int>>();
  m.grouper_input = j.at("grouper_input").get<std::string>();
  m.decoder_layout = j.at("decoder_layout").get<std::string>();
  m.obs_dim = j.at("obs_dim").get<int>();
  m.state_dim = j.at("state_dim").get<int>();
  m.n_actions = j.at("n_actions").get<int>();
  m.n_max = j.at("n_max").get<int>();
  m.e_max = j.at("e_max").get<int>();
  m.enc_hidden = j.at("enc_hidden").get<int>();
  m.dec_hidden = j.at("dec_hidden").get<int>();
  m.grouper_hidden = j.at("grouper_hidden").get<int>();
  m.actor_hidden = j.at("actor_hidden").get<int>();
  m.critic_hidden = j.at("critic_hidden").get<int>();
  m.frame_stack = j.at("frame_stack").get<int>();
  m.manner = j.at("manner").get<std::string>();
  m.task_id = j.at("task_id").get<std::string>();
  return m;
}
}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  json j;
  j["meta"] = meta_to_json(ckpt.meta);
  json tensors = json::object();
  for (const auto& [name, t] : ckpt.tensors) {
    json entry;
    entry["shape"] = t.shape;
    entry["data"] = base64_encode(doubles_to_le_bytes(t.data));
    tensors[name] = entry;
  }
  j["tensors"] = tensors;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(1) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw IoError("failed to parse checkpoint '" + path + "': " + e.what());
  }
  Checkpoint c;
  try {
    c.meta = meta_from_json(j.at("meta"));
    if (c.meta.version != 1) {
      throw IoError("unsupported checkpoint version " + std::to_string(c.meta.version));
    }
    for (const auto& [name, entry] : j.at("tensors").items()) {
      Shape shape = entry.at("shape").get<Shape>();
      std::vector<double> data = le_bytes_to_doubles(base64_decode(entry.at("data").get<std::string>()));
      c.tensors.insert(name, Tensor(shape, std::move(data)));
    }
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError("malformed checkpoint '" + path + "': " + e.what());
  }
  return c;
}

}  // namespace squads::nn
