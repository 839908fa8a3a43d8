// Run manifests, plain-text config files, and the CSV table formats the CLI
// emits. All tables are written with deterministic formatting so identical
// config + seed reruns are byte-identical; the manifest is the one artifact
// that records wall-clock times and is excluded from that guarantee.
#pragma once

#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "solarchip/eval.hpp"
#include "solarchip/losses.hpp"

namespace solarchip {

inline constexpr const char* kCodeVersion = "0.1.0";

// ---------------------------------------------------------------------------
// key=value config files
// ---------------------------------------------------------------------------

class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return from_text(buf.str());
  }

  static KvConfig from_text(const std::string& text) {
    KvConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      const std::string key = trim(line.substr(0, eq));
      if (!key.empty()) cfg.values_[key] = trim(line.substr(eq + 1));
    }
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : std::stoll(it->second);
  }
  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : std::stod(it->second);
  }
  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return it->second == "1" || it->second == "true" || it->second == "yes";
  }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  // Canonical text: sorted keys, one per line. Used for hashing.
  std::string canonical() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
    return os.str();
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hash_hex(const std::string& s) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(s)));
  return buf;
}

// ---------------------------------------------------------------------------
// run manifests
// ---------------------------------------------------------------------------

// One manifest per output directory, written with status=running before the
// work starts and rewritten finalized afterwards. Eval manifests record the
// hash of the checkpoint manifest they consumed, forming a chain.
class RunManifest {
 public:
  RunManifest(std::string dir, const std::string& command, const std::string& config_hash,
              std::uint64_t seed)
      : dir_(std::move(dir)) {
    fields_["command"] = command;
    fields_["config_hash"] = config_hash;
    fields_["seed"] = std::to_string(seed);
    fields_["code_version"] = kCodeVersion;
    fields_["start_time"] = now();
    fields_["status"] = "running";
  }

  void set(const std::string& key, const std::string& value) { fields_[key] = value; }

  void begin() { write(); }

  void finalize(const std::vector<std::string>& outputs) {
    std::ostringstream os;
    for (std::size_t i = 0; i < outputs.size(); ++i) os << (i ? "|" : "") << outputs[i];
    fields_["outputs"] = os.str();
    fields_["end_time"] = now();
    fields_["status"] = "finalized";
    write();
  }

  const std::map<std::string, std::string>& fields() const { return fields_; }

  static std::string path_in(const std::string& dir) { return dir + "/manifest.txt"; }

  // Hash of an existing manifest file, for chaining eval runs to the
  // checkpoint they consumed.
  static std::string hash_of(const std::string& dir) {
    std::ifstream is(path_in(dir));
    if (!is) return "none";
    std::ostringstream buf;
    buf << is.rdbuf();
    return hash_hex(buf.str());
  }

 private:
  static std::string now() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
  }

  void write() const {
    std::filesystem::create_directories(dir_);
    std::ofstream os(path_in(dir_));
    if (!os) throw std::runtime_error("manifest: cannot write in " + dir_);
    for (const auto& [k, v] : fields_) os << k << "=" << v << "\n";
  }

  std::string dir_;
  std::map<std::string, std::string> fields_;
};

// ---------------------------------------------------------------------------
// CSV emission (deterministic %.17g formatting)
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_opt(const std::optional<double>& v) {
  return v ? fmt_double(*v) : std::string("NA");
}

}  // namespace detail

inline void write_loss_csv(const std::vector<LossReport>& history, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_loss_csv: cannot open " + path);
  os << "step,rec,cls,pat,int,total,alpha_cls,alpha_pat,alpha_int,sampled_modalities\n";
  for (const auto& r : history) {
    os << r.step << "," << detail::fmt_double(r.rec) << "," << detail::fmt_double(r.cls) << ","
       << detail::fmt_double(r.pat) << "," << detail::fmt_double(r.intra) << ","
       << detail::fmt_double(r.total) << "," << detail::fmt_double(r.alpha_cls) << ","
       << detail::fmt_double(r.alpha_pat) << "," << detail::fmt_double(r.alpha_int) << ","
       << r.sampled_str() << "\n";
  }
}

// Skill-score table: one row per binary threshold plus the six-way ALL row.
inline void write_probe_csv(const SkillScores& ge_m, const SkillScores& ge_c, double acc_all,
                            const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_probe_csv: cannot open " + path);
  os << "threshold,pod,csi,far,hss,tss,acc\n";
  auto row = [&](const char* name, const SkillScores& s) {
    os << name << "," << detail::fmt_opt(s.pod) << "," << detail::fmt_opt(s.csi) << ","
       << detail::fmt_opt(s.far) << "," << detail::fmt_opt(s.hss) << ","
       << detail::fmt_opt(s.tss) << "," << detail::fmt_opt(s.acc) << "\n";
  };
  row("geM", ge_m);
  row("geC", ge_c);
  os << "ALL,NA,NA,NA,NA,NA," << detail::fmt_double(acc_all) << "\n";
}

inline void write_fewshot_csv(const std::vector<FewShotCell>& cells, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_fewshot_csv: cannot open " + path);
  os << "fraction,arm,seed,train_count,acc_all,acc_ge_m,acc_ge_c\n";
  for (const auto& c : cells)
    os << detail::fmt_double(c.fraction) << "," << c.arm << "," << c.seed << "," << c.train_count
       << "," << detail::fmt_double(c.acc_all) << "," << detail::fmt_double(c.acc_ge_m) << ","
       << detail::fmt_double(c.acc_ge_c) << "\n";
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_ablation_csv: cannot open " + path);
  os << "backbone,rec,cls,pat,int,aia_mse_mean,aia_mse_sd,hmi_mse_mean,hmi_mse_sd,"
        "ge_m_acc_mean,ge_m_acc_sd,ge_c_acc_mean,ge_c_acc_sd,all_acc_mean,all_acc_sd\n";
  for (const auto& r : rows)
    os << backbone_name(r.backbone) << "," << (r.mask.rec ? 1 : 0) << "," << (r.mask.cls ? 1 : 0)
       << "," << (r.mask.pat ? 1 : 0) << "," << (r.mask.intra ? 1 : 0) << ","
       << detail::fmt_double(r.aia_mse_mean) << "," << detail::fmt_double(r.aia_mse_sd) << ","
       << detail::fmt_double(r.hmi_mse_mean) << "," << detail::fmt_double(r.hmi_mse_sd) << ","
       << detail::fmt_double(r.acc_m_mean) << "," << detail::fmt_double(r.acc_m_sd) << ","
       << detail::fmt_double(r.acc_c_mean) << "," << detail::fmt_double(r.acc_c_sd) << ","
       << detail::fmt_double(r.acc_all_mean) << "," << detail::fmt_double(r.acc_all_sd) << "\n";
}

inline void write_translation_csv(const std::vector<TranslationRow>& rows,
                                  const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_translation_csv: cannot open " + path);
  os << "direction,band,mse,psnr,ssim\n";
  for (const auto& r : rows)
    os << r.direction << "," << (r.band < 0 ? "Avg" : ModalityId::name(r.band)) << ","
       << detail::fmt_double(r.mse) << "," << detail::fmt_double(r.psnr) << ","
       << detail::fmt_double(r.ssim) << "\n";
}

// 8-bit grayscale dump (binary PGM). Values are scaled linearly from the
// image's own [min, max] to 0..255.
inline void write_pgm(const ImageGrid& g, const std::string& path) {
  double lo = g.v[0], hi = g.v[0];
  for (double v : g.v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
  os << "P5\n" << g.side << " " << g.side << "\n255\n";
  for (double v : g.v)
    os.put(static_cast<char>(static_cast<unsigned char>((v - lo) * scale + 0.5)));
}

}  // namespace solarchip
