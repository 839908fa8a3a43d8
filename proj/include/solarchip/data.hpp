// Solar image domain types, preprocessing, synchronized geometric
// augmentation, flare labeling, and a deterministic synthetic multi-modal
// archive generator that stands in for a real instrument record at desk
// scale.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "solarchip/rng.hpp"

namespace solarchip {

// ---------------------------------------------------------------------------
// domain types
// ---------------------------------------------------------------------------

// Modality 0 is the magnetograph (HMI); 1..10 are imager passbands in fixed
// wavelength order.
struct ModalityId {
  int index = 0;

  static constexpr int kCount = 11;
  static ModalityId hmi() { return {0}; }
  bool is_hmi() const { return index == 0; }

  static const char* name(int index) {
    static const char* kNames[kCount] = {"HMI",  "0094", "0131", "0171", "0193", "0211",
                                         "0304", "0335", "1600", "1700", "4500"};
    if (index < 0 || index >= kCount) throw std::out_of_range("ModalityId: bad index");
    return kNames[index];
  }
};

enum class Domain { RawCounts, SignedLog };

// Square single-channel image. Values are raw instrument-like counts or their
// signed-log compression, tracked by the domain flag.
struct ImageGrid {
  int side = 0;
  Domain domain = Domain::RawCounts;
  std::vector<double> v;

  ImageGrid() = default;
  ImageGrid(int side_, Domain domain_) : side(side_), domain(domain_) {
    v.assign(static_cast<std::size_t>(side) * side, 0.0);
  }

  double& at(int r, int c) { return v[static_cast<std::size_t>(r) * side + c]; }
  double at(int r, int c) const { return v[static_cast<std::size_t>(r) * side + c]; }
};

enum class FlareClass : int { None = 0, A = 1, B = 2, C = 3, M = 4, X = 5 };

inline const char* flare_class_name(FlareClass c) {
  static const char* kNames[6] = {"None", "A", "B", "C", "M", "X"};
  return kNames[static_cast<int>(c)];
}

// One co-registered multi-instrument observation at a whole-hour timestamp.
struct SolarSample {
  std::int64_t timestamp = 0;  // hours since epoch
  std::array<ImageGrid, ModalityId::kCount> images;
  std::optional<FlareClass> label;
};

// Element of the dihedral group of the square: quarter-turn clockwise
// rotations followed by an optional horizontal (left-right) flip. This is the
// entire augmentation vocabulary; photometric or cropping changes are not
// expressible.
struct GeomAug {
  int quarter_turns = 0;  // 0..3, clockwise
  bool hflip = false;

  static std::array<GeomAug, 8> all() {
    std::array<GeomAug, 8> out{};
    for (int r = 0; r < 4; ++r)
      for (int f = 0; f < 2; ++f) out[static_cast<std::size_t>(r * 2 + f)] = {r, f == 1};
    return out;
  }

  bool operator==(const GeomAug& o) const {
    return quarter_turns == o.quarter_turns && hflip == o.hflip;
  }
};

// Event times are minutes since epoch; flare intervals do not align to the
// whole-hour sample cadence.
struct FlareEvent {
  std::int64_t start_minute = 0, peak_minute = 0, end_minute = 0;
  FlareClass cls = FlareClass::A;
  int region = 0;
};

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

// sign(v) * log(1 + |v|), channel-wise. Odd and strictly increasing.
inline double signed_log_value(double v) {
  return v >= 0.0 ? std::log1p(v) : -std::log1p(-v);
}

inline ImageGrid signed_log(const ImageGrid& grid) {
  if (grid.domain != Domain::RawCounts)
    throw std::invalid_argument("signed_log: grid already in signed-log domain");
  ImageGrid out(grid.side, Domain::SignedLog);
  for (int r = 0; r < grid.side; ++r)
    for (int c = 0; c < grid.side; ++c) {
      const double v = grid.at(r, c);
      if (!std::isfinite(v)) {
        std::ostringstream os;
        os << "signed_log: non-finite value at pixel (" << r << "," << c << ")";
        throw std::invalid_argument(os.str());
      }
      out.at(r, c) = signed_log_value(v);
    }
  return out;
}

inline SolarSample signed_log(const SolarSample& s) {
  SolarSample out = s;
  for (auto& g : out.images) g = signed_log(g);
  return out;
}

// ---------------------------------------------------------------------------
// geometric augmentation
// ---------------------------------------------------------------------------

inline ImageGrid rotate90_cw(const ImageGrid& g) {
  ImageGrid out(g.side, g.domain);
  for (int r = 0; r < g.side; ++r)
    for (int c = 0; c < g.side; ++c) out.at(r, c) = g.at(g.side - 1 - c, r);
  return out;
}

inline ImageGrid hflip(const ImageGrid& g) {
  ImageGrid out(g.side, g.domain);
  for (int r = 0; r < g.side; ++r)
    for (int c = 0; c < g.side; ++c) out.at(r, c) = g.at(r, g.side - 1 - c);
  return out;
}

// Rotation first, then flip.
inline ImageGrid apply_aug(const ImageGrid& g, const GeomAug& aug) {
  ImageGrid out = g;
  for (int i = 0; i < aug.quarter_turns; ++i) out = rotate90_cw(out);
  if (aug.hflip) out = hflip(out);
  return out;
}

// Every modality transformed by the identical rotation-then-flip; timestamp
// and label are untouched.
inline SolarSample apply_aug(const SolarSample& s, const GeomAug& aug) {
  SolarSample out = s;
  for (auto& g : out.images) g = apply_aug(g, aug);
  return out;
}

// Row-major index permutation the augmentation induces on a grid_side x
// grid_side patch lattice: perm[i] = index of the patch whose contents land
// at position i.
inline std::vector<int> patch_permutation(const GeomAug& aug, int grid_side) {
  if (grid_side < 1) throw std::invalid_argument("patch_permutation: grid_side must be >= 1");
  const int g = grid_side;
  auto src_of = [&](int r, int c) {
    // invert the flip, then invert the rotation
    int rr = r, cc = aug.hflip ? g - 1 - c : c;
    switch (aug.quarter_turns) {
      case 0: return std::pair<int, int>{rr, cc};
      case 1: return std::pair<int, int>{g - 1 - cc, rr};        // out(r,c) = in(g-1-c, r)
      case 2: return std::pair<int, int>{g - 1 - rr, g - 1 - cc};
      default: return std::pair<int, int>{cc, g - 1 - rr};       // 270 cw
    }
  };
  std::vector<int> perm(static_cast<std::size_t>(g) * g);
  for (int r = 0; r < g; ++r)
    for (int c = 0; c < g; ++c) {
      auto [sr, sc] = src_of(r, c);
      perm[static_cast<std::size_t>(r) * g + c] = sr * g + sc;
    }
  return perm;
}

// ---------------------------------------------------------------------------
// flare labeling
// ---------------------------------------------------------------------------

// Whole-hour timestamps (hours) falling inside [start, end] of any event get
// that event's class; overlaps take the greatest class; everything else is
// None.
inline std::map<std::int64_t, FlareClass> assign_labels(const std::vector<FlareEvent>& events,
                                                        const std::vector<std::int64_t>& timestamps) {
  std::map<std::int64_t, FlareClass> out;
  for (auto t : timestamps) out[t] = FlareClass::None;
  for (const auto& e : events) {
    if (!(e.start_minute <= e.peak_minute && e.peak_minute <= e.end_minute))
      throw std::invalid_argument("assign_labels: event start/peak/end out of order");
    for (auto& [t, cls] : out) {
      const std::int64_t minute = t * 60;
      if (minute >= e.start_minute && minute <= e.end_minute &&
          static_cast<int>(e.cls) > static_cast<int>(cls))
        cls = e.cls;
    }
  }
  return out;
}

// All flare timestamps plus an equally sized, seed-deterministic uniform
// subset of the non-flare timestamps. If there are too few non-flare moments
// the shortfall is reported on stderr and all available are used.
inline std::vector<std::int64_t> balance_nonflare(const std::map<std::int64_t, FlareClass>& labeled,
                                                  std::uint64_t seed) {
  std::vector<std::int64_t> flare, quiet;
  for (const auto& [t, cls] : labeled)
    (cls == FlareClass::None ? quiet : flare).push_back(t);
  if (flare.empty()) return {};
  const int want = static_cast<int>(flare.size());
  Rng rng = Rng::derive(seed, 0x6261);
  std::vector<std::int64_t> out = flare;
  if (static_cast<int>(quiet.size()) < want) {
    std::cerr << "balance_nonflare: only " << quiet.size() << " non-flare moments for " << want
              << " flare moments\n";
    out.insert(out.end(), quiet.begin(), quiet.end());
  } else {
    auto picks = rng.sample_without_replacement(static_cast<int>(quiet.size()), want);
    for (int i : picks) out.push_back(quiet[static_cast<std::size_t>(i)]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Train strictly before the boundary, test at-or-after.
inline std::pair<std::vector<SolarSample>, std::vector<SolarSample>> split_by_time(
    const std::vector<SolarSample>& archive, std::int64_t boundary) {
  std::vector<SolarSample> train, test;
  for (const auto& s : archive) (s.timestamp < boundary ? train : test).push_back(s);
  if (train.empty() || test.empty())
    std::cerr << "split_by_time: boundary " << boundary << " leaves one side empty\n";
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// synthetic archive generator
// ---------------------------------------------------------------------------

// Amplitude thresholds for the six activity classes, chosen so that class
// frequencies decay roughly geometrically on the default archive (None most
// common, X rarest). An hour's class is the smallest class whose threshold
// exceeds the hour's peak blob amplitude.
struct FlareThresholds {
  double a = 330.0, b = 520.0, c = 820.0, m = 1350.0, x = 2500.0;

  FlareClass classify(double peak_amplitude) const {
    if (peak_amplitude >= x) return FlareClass::X;
    if (peak_amplitude >= m) return FlareClass::M;
    if (peak_amplitude >= c) return FlareClass::C;
    if (peak_amplitude >= b) return FlareClass::B;
    if (peak_amplitude >= a) return FlareClass::A;
    return FlareClass::None;
  }

  std::string to_string() const {
    std::ostringstream os;
    os << a << "," << b << "," << c << "," << m << "," << x;
    return os.str();
  }
};

namespace detail {

// One bipolar active region: a pair of opposite-polarity Gaussians that
// drifts slowly across the disk over its lifetime, with an envelope, short
// bursts, and hour-to-hour amplitude flicker.
struct Blob {
  double x0 = 0, y0 = 0;       // position at birth (pixels)
  double vx = 0, vy = 0;       // drift per hour
  double sigma = 3.0;          // footprint size
  double base_amp = 100.0;     // peak raw-count amplitude
  double birth = 0, life = 80;
  std::array<double, 2> burst_t0 = {-1, -1};
  std::array<double, 2> burst_len = {0, 0};
  std::array<double, 2> burst_gain = {1, 1};
  std::uint64_t flicker_stream = 0;

  bool alive(double t) const { return t >= birth && t < birth + life; }

  double envelope(double t) const {
    const double u = (t - birth) / life;
    const double s = std::sin(3.14159265358979323846 * u);
    return std::pow(s, 0.6);
  }

  double burst(double t) const {
    double g = 1.0;
    for (int i = 0; i < 2; ++i)
      if (burst_t0[static_cast<std::size_t>(i)] >= 0 && t >= burst_t0[static_cast<std::size_t>(i)] &&
          t < burst_t0[static_cast<std::size_t>(i)] + burst_len[static_cast<std::size_t>(i)])
        g = std::max(g, burst_gain[static_cast<std::size_t>(i)]);
    return g;
  }

  // Hour-specific multiplicative flicker shared by all modalities.
  double flicker(std::int64_t hour) const {
    Rng r = Rng::derive(flicker_stream, static_cast<std::uint64_t>(hour));
    return std::exp(0.35 * r.normal());
  }

  double amplitude(std::int64_t hour) const {
    const double t = static_cast<double>(hour);
    if (!alive(t)) return 0.0;
    return base_amp * envelope(t) * burst(t) * flicker(hour);
  }

  double cx(double t) const { return x0 + vx * (t - birth); }
  double cy(double t) const { return y0 + vy * (t - birth); }
};

// Band response of each imager passband applied to the latent activity
// magnitude: out = gain * smooth(M)^gamma + glow inside the disk.
struct BandResponse {
  double gain, gamma, blur_sigma, glow, noise;
};

inline const std::array<BandResponse, 10>& band_table() {
  static const std::array<BandResponse, 10> kBands = {{
      {0.8, 1.30, 0.0, 4.0, 1.5},   // 0094
      {1.0, 1.20, 0.5, 6.0, 1.5},   // 0131
      {3.0, 0.85, 1.0, 40.0, 3.0},  // 0171
      {2.5, 0.90, 1.0, 30.0, 3.0},  // 0193
      {2.0, 0.95, 1.5, 20.0, 2.5},  // 0211
      {1.5, 1.05, 0.5, 10.0, 2.0},  // 0304
      {0.9, 1.25, 0.0, 5.0, 1.5},   // 0335
      {1.2, 0.70, 2.0, 15.0, 2.0},  // 1600
      {1.0, 0.65, 2.0, 18.0, 2.0},  // 1700
      {0.6, 0.55, 2.5, 25.0, 2.0},  // 4500
  }};
  return kBands;
}

inline void gaussian_blur_inplace(std::vector<double>& img, int side, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    norm += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= norm;
  std::vector<double> tmp(img.size());
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int cc = std::clamp(c + i, 0, side - 1);
        acc += kernel[static_cast<std::size_t>(i + radius)] * img[static_cast<std::size_t>(r) * side + cc];
      }
      tmp[static_cast<std::size_t>(r) * side + c] = acc;
    }
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int rr = std::clamp(r + i, 0, side - 1);
        acc += kernel[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(rr) * side + c];
      }
      img[static_cast<std::size_t>(r) * side + c] = acc;
    }
}

}  // namespace detail

// Generator output: the samples plus the latent per-hour peak amplitude the
// label was derived from, so labels can be independently re-derived.
struct GeneratedArchive {
  std::vector<SolarSample> samples;
  std::vector<double> peak_amplitude;
  FlareThresholds thresholds;
  int side = 0;
  std::uint64_t seed = 0;
};

// Deterministic in (seed, count, side). Hour t's sample depends only on the
// blob schedule (a pure function of seed) and the per-sample noise stream
// derived from (seed, t), so samples may be generated in any order.
inline GeneratedArchive generate_archive(std::uint64_t seed, int count, int side) {
  if (count < 1) throw std::invalid_argument("generate_archive: count must be >= 1");
  if (side < 16) throw std::invalid_argument("generate_archive: side must be >= 16");

  GeneratedArchive out;
  out.side = side;
  out.seed = seed;
  const double scale = side / 64.0;
  const double cx = (side - 1) / 2.0, cy = (side - 1) / 2.0;
  const double disk_r = 0.45 * side;

  // Blob schedule: staggered births so several regions are alive at any hour.
  Rng sched = Rng::derive(seed, 0xB10B);
  const int n_blobs = std::max(5, count / 26);
  std::vector<detail::Blob> blobs;
  for (int b = 0; b < n_blobs; ++b) {
    detail::Blob bl;
    Rng br = Rng::derive(seed, 0xB10B0 + static_cast<std::uint64_t>(b));
    const double r = disk_r * 0.70 * std::sqrt(br.uniform());
    const double th = br.uniform(0.0, 6.283185307179586);
    bl.x0 = cx + r * std::cos(th);
    bl.y0 = cy + r * std::sin(th);
    bl.vx = br.uniform(0.35, 0.85) * scale;  // slow eastward drift
    bl.vy = br.uniform(-0.08, 0.08) * scale;
    bl.sigma = br.uniform(2.2, 4.0) * scale;
    bl.base_amp = 140.0 * std::exp(0.7 * br.normal());
    bl.birth = (static_cast<double>(b) + br.uniform(0.0, 0.8)) * count / n_blobs - 20.0;
    bl.life = br.uniform(70.0, 150.0);
    for (int k = 0; k < 2; ++k) {
      if (br.uniform() < (k == 0 ? 0.85 : 0.5)) {
        bl.burst_t0[static_cast<std::size_t>(k)] = bl.birth + br.uniform(0.15, 0.85) * bl.life;
        bl.burst_len[static_cast<std::size_t>(k)] = br.uniform(2.0, 7.0);
        bl.burst_gain[static_cast<std::size_t>(k)] = std::exp(br.uniform(0.5, 2.3));
      }
    }
    bl.flicker_stream = sched.next_u64();
    blobs.push_back(bl);
  }

  out.samples.reserve(static_cast<std::size_t>(count));
  out.peak_amplitude.reserve(static_cast<std::size_t>(count));
  const auto& bands = detail::band_table();

  for (std::int64_t t = 0; t < count; ++t) {
    Rng noise = Rng::derive(seed, 0x5A8B1E00ull + static_cast<std::uint64_t>(t));
    SolarSample s;
    s.timestamp = t;

    // Latent signed field and unsigned magnitude from the live blobs.
    std::vector<double> signed_field(static_cast<std::size_t>(side) * side, 0.0);
    std::vector<double> magnitude(static_cast<std::size_t>(side) * side, 0.0);
    double peak = 0.0;
    for (const auto& bl : blobs) {
      const double amp = bl.amplitude(t);
      if (amp <= 0.0) continue;
      peak = std::max(peak, amp);
      const double bx = bl.cx(static_cast<double>(t)), by = bl.cy(static_cast<double>(t));
      const double off = 1.2 * bl.sigma;
      const double dirx = bl.vx, diry = bl.vy;
      const double dn = std::sqrt(dirx * dirx + diry * diry) + 1e-9;
      const double ox = off * dirx / dn, oy = off * diry / dn;
      const double inv2s2 = 1.0 / (2.0 * bl.sigma * bl.sigma);
      const int lo_x = std::max(0, static_cast<int>(bx - 5 * bl.sigma - off));
      const int hi_x = std::min(side - 1, static_cast<int>(bx + 5 * bl.sigma + off));
      const int lo_y = std::max(0, static_cast<int>(by - 5 * bl.sigma - off));
      const int hi_y = std::min(side - 1, static_cast<int>(by + 5 * bl.sigma + off));
      for (int yy = lo_y; yy <= hi_y; ++yy)
        for (int xx = lo_x; xx <= hi_x; ++xx) {
          const double dp = (xx - bx - ox) * (xx - bx - ox) + (yy - by - oy) * (yy - by - oy);
          const double dm = (xx - bx + ox) * (xx - bx + ox) + (yy - by + oy) * (yy - by + oy);
          const double gp = amp * std::exp(-dp * inv2s2);
          const double gm = amp * std::exp(-dm * inv2s2);
          signed_field[static_cast<std::size_t>(yy) * side + xx] += gp - gm;
          magnitude[static_cast<std::size_t>(yy) * side + xx] += gp + gm;
        }
    }

    // Disk mask: outside is exactly zero in every modality.
    auto in_disk = [&](int yy, int xx) {
      const double dx = xx - cx, dy = yy - cy;
      return dx * dx + dy * dy <= disk_r * disk_r;
    };

    ImageGrid hmi(side, Domain::RawCounts);
    for (int yy = 0; yy < side; ++yy)
      for (int xx = 0; xx < side; ++xx) {
        if (!in_disk(yy, xx)) continue;
        hmi.at(yy, xx) = signed_field[static_cast<std::size_t>(yy) * side + xx] + 6.0 * noise.normal();
      }
    s.images[0] = hmi;

    for (int band = 0; band < 10; ++band) {
      const auto& rsp = bands[static_cast<std::size_t>(band)];
      std::vector<double> img = magnitude;
      detail::gaussian_blur_inplace(img, side, rsp.blur_sigma * scale);
      ImageGrid g(side, Domain::RawCounts);
      for (int yy = 0; yy < side; ++yy)
        for (int xx = 0; xx < side; ++xx) {
          if (!in_disk(yy, xx)) continue;
          const double m = img[static_cast<std::size_t>(yy) * side + xx];
          double v = rsp.gain * std::pow(std::max(m, 0.0), rsp.gamma) + rsp.glow +
                     rsp.noise * noise.normal();
          g.at(yy, xx) = std::max(v, 0.0);
        }
      s.images[static_cast<std::size_t>(band + 1)] = g;
    }

    s.label = out.thresholds.classify(peak);
    out.peak_amplitude.push_back(peak);
    out.samples.push_back(std::move(s));
  }
  return out;
}

}  // namespace solarchip
