// Checkpoint container. Layout (all integers and floats little endian):
//
//   magic "SCKP", u32 version (1)
//   u32 config_len, config bytes        key=value echo of the backbone config
//   u32 tensor_count, then per tensor:
//     u32 name_len, name bytes          e.g. "m03.enc.blk1.qkv.w"
//     i32 modality (-1 = shared), u8 role, i32 layer (-1 = unlayered)
//     u32 ndim, u32 dims[ndim], float64 payload
//   u8 has_trainer_state, and if set:
//     u64 step, u64 rng_state
//     u32 slot_count, then per slot:
//       u32 name_len, name bytes, u8 which (0 = first moment, 1 = second)
//       u32 numel, float64 payload
//
// Roles: 0 encoder, 1 decoder, 2 cls-head, 3 img-head, 4 temperature.
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "solarchip/models.hpp"

namespace solarchip {

namespace detail {

inline void put_u64le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF),
                        static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  put_u64le(os, u);
}

inline double get_f64(std::istream& is) {
  std::uint64_t u = get_u64le(is);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

inline void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_str(std::istream& is) {
  const std::uint32_t n = get_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

}  // namespace detail

inline std::string config_to_text(const BackboneConfig& cfg) {
  std::ostringstream os;
  os << "kind=" << backbone_name(cfg.kind) << "\n";
  os << "side=" << cfg.side << "\n";
  os << "patch=" << cfg.patch << "\n";
  os << "d_model=" << cfg.d_model << "\n";
  os << "d_ctr=" << cfg.d_ctr << "\n";
  os << "depth=" << cfg.depth << "\n";
  os << "heads=" << cfg.heads << "\n";
  return os.str();
}

inline BackboneConfig config_from_text(const std::string& text) {
  BackboneConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "kind") cfg.kind = backbone_from_name(val);
    else if (key == "side") cfg.side = std::stoi(val);
    else if (key == "patch") cfg.patch = std::stoi(val);
    else if (key == "d_model") cfg.d_model = std::stoi(val);
    else if (key == "d_ctr") cfg.d_ctr = std::stoi(val);
    else if (key == "depth") cfg.depth = std::stoi(val);
    else if (key == "heads") cfg.heads = std::stoi(val);
  }
  return cfg;
}

struct TrainerSnapshot {
  std::int64_t step = 0;
  std::uint64_t rng_state = 0;
  // moment accumulators keyed by (param name, which)
  std::map<std::pair<std::string, int>, std::vector<double>> slots;
};

inline void save_checkpoint(const MultiModalModel& model, const std::string& path,
                            const TrainerSnapshot* trainer = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write("SCKP", 4);
  detail::put_u32(os, 1);
  detail::put_str(os, config_to_text(model.config()));
  const auto params = model.parameters();
  detail::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::put_str(os, p.name);
    detail::put_u32(os, static_cast<std::uint32_t>(p.modality));
    os.put(static_cast<char>(static_cast<int>(p.role)));
    detail::put_u32(os, static_cast<std::uint32_t>(p.layer));
    const auto& shape = p.var->value.shape();
    detail::put_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (int i = 0; i < p.var->value.numel(); ++i)
      detail::put_f64(os, p.var->value[static_cast<std::size_t>(i)]);
  }
  os.put(trainer ? 1 : 0);
  if (trainer) {
    detail::put_u64le(os, static_cast<std::uint64_t>(trainer->step));
    detail::put_u64le(os, trainer->rng_state);
    detail::put_u32(os, static_cast<std::uint32_t>(trainer->slots.size()));
    for (const auto& [key, payload] : trainer->slots) {
      detail::put_str(os, key.first);
      os.put(static_cast<char>(key.second));
      detail::put_u32(os, static_cast<std::uint32_t>(payload.size()));
      for (double v : payload) detail::put_f64(os, v);
    }
  }
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

struct LoadedCheckpoint {
  MultiModalModel model;
  std::optional<TrainerSnapshot> trainer;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (std::memcmp(magic, "SCKP", 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  if (detail::get_u32(is) != 1) throw std::runtime_error("load_checkpoint: unknown version");
  const BackboneConfig cfg = config_from_text(detail::get_str(is));

  LoadedCheckpoint out{MultiModalModel(cfg, 0), std::nullopt};
  std::map<std::string, Var> by_name;
  for (const auto& p : out.model.parameters()) by_name[p.name] = p.var;

  const std::uint32_t count = detail::get_u32(is);
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name = detail::get_str(is);
    detail::get_u32(is);  // modality (redundant with name)
    is.get();             // role
    detail::get_u32(is);  // layer
    const std::uint32_t ndim = detail::get_u32(is);
    int numel = 1;
    std::vector<int> shape;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      shape.push_back(static_cast<int>(detail::get_u32(is)));
      numel *= shape.back();
    }
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("load_checkpoint: unknown tensor " + name);
    if (it->second->value.numel() != numel)
      throw std::runtime_error("load_checkpoint: size mismatch for " + name);
    for (int i = 0; i < numel; ++i)
      it->second->value[static_cast<std::size_t>(i)] = detail::get_f64(is);
  }

  if (is.get() == 1) {
    TrainerSnapshot snap;
    snap.step = static_cast<std::int64_t>(detail::get_u64le(is));
    snap.rng_state = detail::get_u64le(is);
    const std::uint32_t slots = detail::get_u32(is);
    for (std::uint32_t s = 0; s < slots; ++s) {
      const std::string name = detail::get_str(is);
      const int which = is.get();
      const std::uint32_t numel = detail::get_u32(is);
      std::vector<double> payload(numel);
      for (auto& v : payload) v = detail::get_f64(is);
      snap.slots[{name, which}] = std::move(payload);
    }
    out.trainer = std::move(snap);
  }
  if (!is) throw std::runtime_error("load_checkpoint: truncated file " + path);
  return out;
}

}  // namespace solarchip
