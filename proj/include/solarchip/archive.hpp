// On-disk archive layout:
//   <dir>/manifest.txt       key=value: format, side, count, seed, patch_size,
//                            domain, thresholds
//   <dir>/labels.csv         timestamp,class (class as ordinal 0..5)
//   <dir>/s%06d_m%02d.bin    one grid per sample per modality
//
// Grid files carry a 16-byte header: magic "SGRD", u32 dtype code (1 =
// float64), u32 height, u32 width, all little endian, followed by the
// row-major float64 payload.
#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "solarchip/data.hpp"

namespace solarchip {

namespace detail {

inline void put_u32le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF),
                        static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64le(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

inline std::string grid_filename(std::int64_t sample, int modality) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%06lld_m%02d.bin", static_cast<long long>(sample), modality);
  return buf;
}

}  // namespace detail

inline void save_grid(const ImageGrid& g, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_grid: cannot open " + path);
  os.write("SGRD", 4);
  detail::put_u32le(os, 1);  // dtype: float64
  detail::put_u32le(os, static_cast<std::uint32_t>(g.side));
  detail::put_u32le(os, static_cast<std::uint32_t>(g.side));
  for (double v : g.v) detail::put_f64le(os, v);
  if (!os) throw std::runtime_error("save_grid: write failed for " + path);
}

inline ImageGrid load_grid(const std::string& path, Domain domain) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_grid: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (std::memcmp(magic, "SGRD", 4) != 0)
    throw std::runtime_error("load_grid: bad magic in " + path);
  const std::uint32_t dtype = detail::get_u32le(is);
  if (dtype != 1) throw std::runtime_error("load_grid: unsupported dtype in " + path);
  const int h = static_cast<int>(detail::get_u32le(is));
  const int w = static_cast<int>(detail::get_u32le(is));
  if (h != w) throw std::runtime_error("load_grid: non-square grid in " + path);
  ImageGrid g(h, domain);
  for (auto& v : g.v) v = detail::get_f64le(is);
  if (!is) throw std::runtime_error("load_grid: truncated file " + path);
  return g;
}

struct ArchiveMeta {
  int side = 0;
  int count = 0;
  std::uint64_t seed = 0;
  int patch_size = 8;
  std::string thresholds;
};

inline void save_archive(const GeneratedArchive& arc, int patch_size, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  std::ofstream mf(dir + "/manifest.txt");
  mf << "format=solarchip-archive-v1\n";
  mf << "side=" << arc.side << "\n";
  mf << "count=" << arc.samples.size() << "\n";
  mf << "seed=" << arc.seed << "\n";
  mf << "patch_size=" << patch_size << "\n";
  mf << "domain=raw\n";
  mf << "thresholds=" << arc.thresholds.to_string() << "\n";

  std::ofstream lf(dir + "/labels.csv");
  lf << "timestamp,class\n";
  for (const auto& s : arc.samples)
    lf << s.timestamp << "," << static_cast<int>(s.label.value_or(FlareClass::None)) << "\n";

  for (const auto& s : arc.samples)
    for (int m = 0; m < ModalityId::kCount; ++m)
      save_grid(s.images[static_cast<std::size_t>(m)],
                dir + "/" + detail::grid_filename(s.timestamp, m));
}

struct LoadedArchive {
  std::vector<SolarSample> samples;
  ArchiveMeta meta;
};

inline LoadedArchive load_archive(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.txt");
  if (!mf) throw std::runtime_error("load_archive: no manifest in " + dir);
  LoadedArchive out;
  std::string line;
  while (std::getline(mf, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "side") out.meta.side = std::stoi(val);
    else if (key == "count") out.meta.count = std::stoi(val);
    else if (key == "seed") out.meta.seed = std::stoull(val);
    else if (key == "patch_size") out.meta.patch_size = std::stoi(val);
    else if (key == "thresholds") out.meta.thresholds = val;
  }

  std::map<std::int64_t, FlareClass> labels;
  std::ifstream lf(dir + "/labels.csv");
  if (!lf) throw std::runtime_error("load_archive: no labels.csv in " + dir);
  std::getline(lf, line);  // header
  while (std::getline(lf, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    labels[std::stoll(line.substr(0, comma))] =
        static_cast<FlareClass>(std::stoi(line.substr(comma + 1)));
  }

  for (const auto& [t, cls] : labels) {
    SolarSample s;
    s.timestamp = t;
    s.label = cls;
    for (int m = 0; m < ModalityId::kCount; ++m)
      s.images[static_cast<std::size_t>(m)] =
          load_grid(dir + "/" + detail::grid_filename(t, m), Domain::RawCounts);
    out.samples.push_back(std::move(s));
  }
  return out;
}

}  // namespace solarchip
