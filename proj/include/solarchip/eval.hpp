// Downstream evaluation protocols: full-disk flare classification with
// forecast-verification skill scores, linear probes for flare class and
// cross-modal translation, class-token retrieval and intra-sample locality
// diagnostics, the few-shot schedule, and the ablation grid.
#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "solarchip/data.hpp"
#include "solarchip/losses.hpp"
#include "solarchip/models.hpp"
#include "solarchip/trainer.hpp"

namespace solarchip {

// ---------------------------------------------------------------------------
// contingency counts and skill scores
// ---------------------------------------------------------------------------

struct ContingencyTable {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::int64_t total() const { return tp + fp + fn + tn; }
};

// Positive iff predicted class >= threshold (inclusive).
inline bool binary_positive(FlareClass pred, FlareClass threshold) {
  return static_cast<int>(pred) >= static_cast<int>(threshold);
}

inline std::vector<bool> derive_binary(const std::vector<FlareClass>& preds,
                                       FlareClass threshold) {
  std::vector<bool> out;
  out.reserve(preds.size());
  for (auto p : preds) out.push_back(binary_positive(p, threshold));
  return out;
}

inline ContingencyTable contingency(const std::vector<FlareClass>& preds,
                                    const std::vector<FlareClass>& truths,
                                    FlareClass threshold) {
  if (preds.size() != truths.size())
    throw std::invalid_argument("contingency: prediction/truth length mismatch");
  ContingencyTable t;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool p = binary_positive(preds[i], threshold);
    const bool y = binary_positive(truths[i], threshold);
    if (p && y) ++t.tp;
    else if (p && !y) ++t.fp;
    else if (!p && y) ++t.fn;
    else ++t.tn;
  }
  return t;
}

// Standard forecast-verification scores. A score whose denominator is zero is
// reported as an empty optional, never silently as 0.
struct SkillScores {
  std::optional<double> pod, csi, far, hss, tss, acc;
};

inline SkillScores skill_scores(const ContingencyTable& t) {
  SkillScores s;
  const double tp = static_cast<double>(t.tp), fp = static_cast<double>(t.fp);
  const double fn = static_cast<double>(t.fn), tn = static_cast<double>(t.tn);
  if (tp + fn > 0) s.pod = tp / (tp + fn);
  if (tp + fp > 0) s.far = fp / (tp + fp);
  if (tp + fp + fn > 0) s.csi = tp / (tp + fp + fn);
  if (t.total() > 0) s.acc = (tp + tn) / static_cast<double>(t.total());
  if (tp + fn > 0 && fp + tn > 0) s.tss = tp / (tp + fn) - fp / (fp + tn);
  const double hss_den = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn);
  if (hss_den > 0) s.hss = 2.0 * (tp * tn - fn * fp) / hss_den;
  return s;
}

// ---------------------------------------------------------------------------
// image quality metrics
// ---------------------------------------------------------------------------

struct ImageMetrics {
  double mse = 0, psnr = 0, ssim = 0;
};

namespace detail {

// Valid-region separable Gaussian window filter used by SSIM; returns the
// filtered map at positions where the full window fits.
inline std::vector<double> window_filter(const std::vector<double>& img, int side, int radius,
                                         const std::vector<double>& kernel) {
  const int out_side = side - 2 * radius;
  std::vector<double> horiz(static_cast<std::size_t>(side) * out_side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < out_side; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k)
        acc += kernel[static_cast<std::size_t>(k + radius)] *
               img[static_cast<std::size_t>(r) * side + c + radius + k];
      horiz[static_cast<std::size_t>(r) * out_side + c] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(out_side) * out_side);
  for (int r = 0; r < out_side; ++r)
    for (int c = 0; c < out_side; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k)
        acc += kernel[static_cast<std::size_t>(k + radius)] *
               horiz[static_cast<std::size_t>(r + radius + k) * out_side + c];
      out[static_cast<std::size_t>(r) * out_side + c] = acc;
    }
  return out;
}

}  // namespace detail

// MSE is the per-pixel mean. PSNR uses the observed truth range and is capped
// at 100 dB when MSE is exactly zero. SSIM uses an 11x11 Gaussian window with
// sigma 1.5, K1 = 0.01, K2 = 0.03, evaluated on the valid region; its dynamic
// range is the joint range of both images, keeping SSIM(a,b) = SSIM(b,a).
inline ImageMetrics image_metrics(const ImageGrid& pred, const ImageGrid& truth) {
  if (pred.side != truth.side)
    throw std::invalid_argument("image_metrics: shape mismatch");
  const int side = pred.side;
  const int n = side * side;
  ImageMetrics m;

  double sq = 0.0;
  double tmin = truth.v[0], tmax = truth.v[0];
  double jmin = std::min(pred.v[0], truth.v[0]), jmax = std::max(pred.v[0], truth.v[0]);
  for (int i = 0; i < n; ++i) {
    const double d = pred.v[static_cast<std::size_t>(i)] - truth.v[static_cast<std::size_t>(i)];
    sq += d * d;
    tmin = std::min(tmin, truth.v[static_cast<std::size_t>(i)]);
    tmax = std::max(tmax, truth.v[static_cast<std::size_t>(i)]);
    jmin = std::min({jmin, pred.v[static_cast<std::size_t>(i)], truth.v[static_cast<std::size_t>(i)]});
    jmax = std::max({jmax, pred.v[static_cast<std::size_t>(i)], truth.v[static_cast<std::size_t>(i)]});
  }
  m.mse = sq / n;
  const double range = tmax - tmin;
  m.psnr = (m.mse == 0.0) ? 100.0 : 10.0 * std::log10(range * range / m.mse);

  // SSIM
  const int radius = 5;  // 11x11 window
  if (side < 2 * radius + 1)
    throw std::invalid_argument("image_metrics: image smaller than SSIM window");
  const double l = jmax - jmin;
  if (l == 0.0) {
    m.ssim = 1.0;  // both images are one identical constant
    return m;
  }
  const double c1 = (0.01 * l) * (0.01 * l);
  const double c2 = (0.03 * l) * (0.03 * l);
  std::vector<double> kernel(11);
  double norm = 0.0;
  for (int k = -radius; k <= radius; ++k) {
    kernel[static_cast<std::size_t>(k + radius)] = std::exp(-0.5 * k * k / (1.5 * 1.5));
    norm += kernel[static_cast<std::size_t>(k + radius)];
  }
  for (auto& k : kernel) k /= norm;

  std::vector<double> a2(static_cast<std::size_t>(n)), b2(static_cast<std::size_t>(n)),
      ab(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    a2[static_cast<std::size_t>(i)] = pred.v[static_cast<std::size_t>(i)] * pred.v[static_cast<std::size_t>(i)];
    b2[static_cast<std::size_t>(i)] = truth.v[static_cast<std::size_t>(i)] * truth.v[static_cast<std::size_t>(i)];
    ab[static_cast<std::size_t>(i)] = pred.v[static_cast<std::size_t>(i)] * truth.v[static_cast<std::size_t>(i)];
  }
  auto mu_a = detail::window_filter(pred.v, side, radius, kernel);
  auto mu_b = detail::window_filter(truth.v, side, radius, kernel);
  auto e_a2 = detail::window_filter(a2, side, radius, kernel);
  auto e_b2 = detail::window_filter(b2, side, radius, kernel);
  auto e_ab = detail::window_filter(ab, side, radius, kernel);
  double acc = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double va = e_a2[i] - mu_a[i] * mu_a[i];
    const double vb = e_b2[i] - mu_b[i] * mu_b[i];
    const double cov = e_ab[i] - mu_a[i] * mu_b[i];
    acc += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
           ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
  }
  m.ssim = acc / static_cast<double>(mu_a.size());
  return m;
}

// ---------------------------------------------------------------------------
// batched encode helpers (value level, graphs discarded per chunk)
// ---------------------------------------------------------------------------

// Class tokens (pre-head, d_model) for every sample: N x d_model.
inline Tensor encode_cls_tokens(const MultiModalModel& model,
                                const std::vector<SolarSample>& samples, int modality,
                                int chunk = 32) {
  const int d = model.config().d_model;
  Tensor out({static_cast<int>(samples.size()), d});
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(chunk));
    std::vector<SolarSample> part(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                  samples.begin() + static_cast<std::ptrdiff_t>(end));
    Var x = constant(make_batch_tensor(part, modality));
    Var cls = model.encode(modality, x).cls();
    std::memcpy(out.data() + start * static_cast<std::size_t>(d), cls->value.data(),
                sizeof(double) * static_cast<std::size_t>(cls->value.numel()));
  }
  return out;
}

// Class embeddings (post-head, d_ctr), L2-normalized rows: N x d_ctr.
inline Tensor encode_cls_embeddings(const MultiModalModel& model,
                                    const std::vector<SolarSample>& samples, int modality,
                                    int chunk = 32) {
  const int d = model.config().d_ctr;
  Tensor out({static_cast<int>(samples.size()), d});
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(chunk));
    std::vector<SolarSample> part(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                  samples.begin() + static_cast<std::ptrdiff_t>(end));
    Var x = constant(make_batch_tensor(part, modality));
    TokenSequence seq = model.encode(modality, x);
    Var emb = l2_normalize_rows(model.project(seq, modality).cls);
    std::memcpy(out.data() + start * static_cast<std::size_t>(d), emb->value.data(),
                sizeof(double) * static_cast<std::size_t>(emb->value.numel()));
  }
  return out;
}

// Patch embeddings (post-head): N x L x d_ctr.
inline Tensor encode_patch_embeddings(const MultiModalModel& model,
                                      const std::vector<SolarSample>& samples, int modality,
                                      int chunk = 16) {
  const int d = model.config().d_ctr;
  const int l = model.config().num_patches();
  Tensor out({static_cast<int>(samples.size()), l, d});
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(chunk));
    std::vector<SolarSample> part(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                  samples.begin() + static_cast<std::ptrdiff_t>(end));
    Var x = constant(make_batch_tensor(part, modality));
    TokenSequence seq = model.encode(modality, x);
    Var emb = model.project(seq, modality).patches;
    std::memcpy(out.data() + start * static_cast<std::size_t>(l) * d, emb->value.data(),
                sizeof(double) * static_cast<std::size_t>(emb->value.numel()));
  }
  return out;
}

// Patch tokens (pre-head, d_model): N x L x d_model.
inline Tensor encode_patch_tokens(const MultiModalModel& model,
                                  const std::vector<SolarSample>& samples, int modality,
                                  int chunk = 16) {
  const int d = model.config().d_model;
  const int l = model.config().num_patches();
  Tensor out({static_cast<int>(samples.size()), l, d});
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(chunk));
    std::vector<SolarSample> part(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                  samples.begin() + static_cast<std::ptrdiff_t>(end));
    Var x = constant(make_batch_tensor(part, modality));
    Var tok = model.encode(modality, x).patches();
    std::memcpy(out.data() + start * static_cast<std::size_t>(l) * d, tok->value.data(),
                sizeof(double) * static_cast<std::size_t>(tok->value.numel()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// flare classification probe (consumes only the modality-0 class token)
// ---------------------------------------------------------------------------

struct ProbeHead {
  Tensor w;  // d_model x 6
  Tensor b;  // 6
};

struct ProbeConfig {
  bool frozen = true;
  int epochs = 300;       // full-batch iterations when frozen
  double lr = 0.05;
  int finetune_steps = 60;  // minibatch steps when fine-tuning
  int finetune_batch = 8;
  double finetune_lr = 1e-3;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<int> label_targets(const std::vector<SolarSample>& labeled) {
  std::vector<int> t;
  t.reserve(labeled.size());
  for (const auto& s : labeled) {
    if (!s.label) throw std::invalid_argument("train_probe: sample without label");
    t.push_back(static_cast<int>(*s.label));
  }
  std::set<int> distinct(t.begin(), t.end());
  if (distinct.size() < 2)
    throw std::invalid_argument("train_probe: labeled set contains a single class");
  return t;
}

inline void adam_update(Tensor& val, const Tensor& grad, Tensor& m, Tensor& v, double lr,
                        int step) {
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step + 1));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step + 1));
  for (int i = 0; i < val.numel(); ++i) {
    const double g = grad[static_cast<std::size_t>(i)];
    m[static_cast<std::size_t>(i)] = b1 * m[static_cast<std::size_t>(i)] + (1 - b1) * g;
    v[static_cast<std::size_t>(i)] = b2 * v[static_cast<std::size_t>(i)] + (1 - b2) * g * g;
    val[static_cast<std::size_t>(i)] -=
        lr * (m[static_cast<std::size_t>(i)] / bc1) /
        (std::sqrt(v[static_cast<std::size_t>(i)] / bc2) + eps);
  }
}

}  // namespace detail

// Full-batch multinomial logistic regression on fixed features, from zero
// init (deterministic without any rng).
inline ProbeHead fit_logistic(const Tensor& features, const std::vector<int>& targets,
                              int epochs, double lr) {
  const int d = features.dim(1);
  Var w = parameter(Tensor::zeros({d, 6}));
  Var b = parameter(Tensor::zeros({6}));
  Tensor mw({d, 6}), vw({d, 6}), mb({6}), vb({6});
  Var feats = constant(features);
  for (int e = 0; e < epochs; ++e) {
    zero_grad({w, b});
    Var loss = softmax_ce_mean(linear(feats, w, b), targets);
    backward(loss);
    detail::adam_update(w->value, w->grad, mw, vw, lr, e);
    detail::adam_update(b->value, b->grad, mb, vb, lr, e);
  }
  return {w->value, b->value};
}

// Trains the six-way linear head on modality-0 class tokens. When frozen the
// encoder is read-only (features are extracted once); otherwise minibatch
// gradients also flow into the modality-0 encoder.
inline ProbeHead train_probe(MultiModalModel& model, const std::vector<SolarSample>& labeled,
                             const ProbeConfig& cfg) {
  const auto targets = detail::label_targets(labeled);
  const int d = model.config().d_model;

  if (cfg.frozen) return fit_logistic(encode_cls_tokens(model, labeled, 0), targets, cfg.epochs, cfg.lr);

  Var w = parameter(Tensor::zeros({d, 6}));
  Var b = parameter(Tensor::zeros({6}));
  Tensor mw({d, 6}), vw({d, 6}), mb({6}), vb({6});
  {
    // fine-tune: encoder parameters of modality 0 move too
    Rng rng = Rng::derive(cfg.seed, 0xF17E);
    std::vector<ParamInfo> enc_params;
    for (const auto& p : model.parameters())
      if (p.modality == 0 && p.role == ParamRole::Encoder) enc_params.push_back(p);
    std::vector<AdamSlot> slots;
    for (const auto& p : enc_params)
      slots.push_back({Tensor(p.var->value.shape()), Tensor(p.var->value.shape())});

    for (int step = 0; step < cfg.finetune_steps; ++step) {
      std::vector<SolarSample> batch;
      std::vector<int> batch_targets;
      for (int i = 0; i < cfg.finetune_batch; ++i) {
        const int idx = rng.uniform_int(static_cast<int>(labeled.size()));
        batch.push_back(labeled[static_cast<std::size_t>(idx)]);
        batch_targets.push_back(targets[static_cast<std::size_t>(idx)]);
      }
      std::vector<Var> vars{w, b};
      for (const auto& p : enc_params) vars.push_back(p.var);
      zero_grad(vars);
      Var x = constant(make_batch_tensor(batch, 0));
      Var cls = model.encode(0, x).cls();
      Var loss = softmax_ce_mean(linear(cls, w, b), batch_targets);
      backward(loss);
      detail::adam_update(w->value, w->grad, mw, vw, cfg.finetune_lr, step);
      detail::adam_update(b->value, b->grad, mb, vb, cfg.finetune_lr, step);
      for (std::size_t p = 0; p < enc_params.size(); ++p)
        if (!enc_params[p].var->grad.empty())
          detail::adam_update(enc_params[p].var->value, enc_params[p].var->grad, slots[p].m,
                              slots[p].v, cfg.finetune_lr, step);
    }
  }
  return {w->value, b->value};
}

inline std::vector<FlareClass> probe_predict(const MultiModalModel& model, const ProbeHead& head,
                                             const std::vector<SolarSample>& samples) {
  Tensor feats = encode_cls_tokens(model, samples, 0);
  const int d = model.config().d_model;
  std::vector<FlareClass> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    double best = -1e300;
    int best_c = 0;
    for (int c = 0; c < 6; ++c) {
      double logit = head.b[static_cast<std::size_t>(c)];
      for (int j = 0; j < d; ++j)
        logit += feats[i * static_cast<std::size_t>(d) + j] * head.w[static_cast<std::size_t>(j) * 6 + c];
      if (logit > best) {
        best = logit;
        best_c = c;
      }
    }
    out.push_back(static_cast<FlareClass>(best_c));
  }
  return out;
}

// Six-way exact-match accuracy plus the two binary accuracies derived from
// the same prediction vector.
struct ClassificationAccuracy {
  double all = 0, ge_m = 0, ge_c = 0;
};

inline ClassificationAccuracy classification_accuracy(const std::vector<FlareClass>& preds,
                                                      const std::vector<FlareClass>& truths) {
  if (preds.size() != truths.size() || preds.empty())
    throw std::invalid_argument("classification_accuracy: bad inputs");
  ClassificationAccuracy acc;
  int exact = 0, okm = 0, okc = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == truths[i]) ++exact;
    if (binary_positive(preds[i], FlareClass::M) == binary_positive(truths[i], FlareClass::M)) ++okm;
    if (binary_positive(preds[i], FlareClass::C) == binary_positive(truths[i], FlareClass::C)) ++okc;
  }
  const double n = static_cast<double>(preds.size());
  acc.all = exact / n;
  acc.ge_m = okm / n;
  acc.ge_c = okc / n;
  return acc;
}

// ---------------------------------------------------------------------------
// translation probe: per-patch linear map from source patch tokens to target
// patch pixels
// ---------------------------------------------------------------------------

struct TranslationProbe {
  int source = 0, target = 1;
  Tensor w;  // (d_model + 1) x patch^2, last row is the bias
};

namespace detail {

// Cholesky solve of (A + ridge*I) X = B with A symmetric positive definite.
inline Tensor cholesky_solve(Tensor a, Tensor b, double ridge) {
  const int n = a.dim(0);
  const int k = b.dim(1);
  for (int i = 0; i < n; ++i) a[static_cast<std::size_t>(i) * n + i] += ridge;
  // in-place lower Cholesky
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = a[static_cast<std::size_t>(i) * n + j];
      for (int p = 0; p < j; ++p)
        s -= a[static_cast<std::size_t>(i) * n + p] * a[static_cast<std::size_t>(j) * n + p];
      if (i == j) {
        if (s <= 0.0) throw std::runtime_error("cholesky_solve: matrix not positive definite");
        a[static_cast<std::size_t>(i) * n + j] = std::sqrt(s);
      } else {
        a[static_cast<std::size_t>(i) * n + j] = s / a[static_cast<std::size_t>(j) * n + j];
      }
    }
  }
  // forward/back substitution per column of B
  Tensor x({n, k});
  std::vector<double> y(static_cast<std::size_t>(n));
  for (int c = 0; c < k; ++c) {
    for (int i = 0; i < n; ++i) {
      double s = b[static_cast<std::size_t>(i) * k + c];
      for (int p = 0; p < i; ++p) s -= a[static_cast<std::size_t>(i) * n + p] * y[static_cast<std::size_t>(p)];
      y[static_cast<std::size_t>(i)] = s / a[static_cast<std::size_t>(i) * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
      double s = y[static_cast<std::size_t>(i)];
      for (int p = i + 1; p < n; ++p)
        s -= a[static_cast<std::size_t>(p) * n + i] * x[static_cast<std::size_t>(p) * k + c];
      x[static_cast<std::size_t>(i) * k + c] = s / a[static_cast<std::size_t>(i) * n + i];
    }
  }
  return x;
}

inline std::vector<double> patch_pixels(const ImageGrid& g, int patch, int patch_index) {
  const int gpl = g.side / patch;
  const int py = patch_index / gpl, px = patch_index % gpl;
  std::vector<double> out(static_cast<std::size_t>(patch) * patch);
  for (int iy = 0; iy < patch; ++iy)
    for (int ix = 0; ix < patch; ++ix)
      out[static_cast<std::size_t>(iy) * patch + ix] = g.at(py * patch + iy, px * patch + ix);
  return out;
}

}  // namespace detail

// Ridge regression from source-modality patch tokens to target-modality patch
// pixels, solved in closed form. Samples must be in signed-log domain.
inline TranslationProbe train_translation_probe(const MultiModalModel& model,
                                                const std::vector<SolarSample>& samples,
                                                int source, int target) {
  const int d = model.config().d_model;
  const int patch = model.config().patch;
  const int l = model.config().num_patches();
  const int dim = d + 1;  // bias column
  const int pp = patch * patch;

  Tensor tokens = encode_patch_tokens(model, samples, source);
  Tensor xtx({dim, dim});
  Tensor xty({dim, pp});
  std::vector<double> row(static_cast<std::size_t>(dim));
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const auto& truth = samples[s].images[static_cast<std::size_t>(target)];
    for (int j = 0; j < l; ++j) {
      for (int c = 0; c < d; ++c)
        row[static_cast<std::size_t>(c)] =
            tokens[(s * static_cast<std::size_t>(l) + j) * d + c];
      row[static_cast<std::size_t>(d)] = 1.0;
      const auto y = detail::patch_pixels(truth, patch, j);
      for (int a = 0; a < dim; ++a) {
        for (int b2 = a; b2 < dim; ++b2)
          xtx[static_cast<std::size_t>(a) * dim + b2] += row[static_cast<std::size_t>(a)] * row[static_cast<std::size_t>(b2)];
        for (int q = 0; q < pp; ++q)
          xty[static_cast<std::size_t>(a) * pp + q] += row[static_cast<std::size_t>(a)] * y[static_cast<std::size_t>(q)];
      }
    }
  }
  for (int a = 0; a < dim; ++a)
    for (int b2 = 0; b2 < a; ++b2)
      xtx[static_cast<std::size_t>(a) * dim + b2] = xtx[static_cast<std::size_t>(b2) * dim + a];

  const double ridge = 1e-6 * static_cast<double>(samples.size() * static_cast<std::size_t>(l));
  TranslationProbe probe;
  probe.source = source;
  probe.target = target;
  probe.w = detail::cholesky_solve(std::move(xtx), std::move(xty), ridge);
  return probe;
}

// Applies the probe to one signed-log sample, producing the predicted target
// image in signed-log domain.
inline ImageGrid translate(const MultiModalModel& model, const TranslationProbe& probe,
                           const SolarSample& sample) {
  const int d = model.config().d_model;
  const int patch = model.config().patch;
  const int side = model.config().side;
  const int gpl = side / patch;
  const int pp = patch * patch;

  Tensor tokens = encode_patch_tokens(model, {sample}, probe.source);
  ImageGrid out(side, Domain::SignedLog);
  for (int j = 0; j < gpl * gpl; ++j) {
    const int py = j / gpl, px = j % gpl;
    for (int q = 0; q < pp; ++q) {
      double v = probe.w[static_cast<std::size_t>(d) * pp + q];  // bias row
      for (int c = 0; c < d; ++c)
        v += tokens[static_cast<std::size_t>(j) * d + c] * probe.w[static_cast<std::size_t>(c) * pp + q];
      out.at(py * patch + q / patch, px * patch + q % patch) = v;
    }
  }
  return out;
}

struct TranslationRow {
  std::string direction;  // "HMI to AIA" or "AIA to HMI"
  int band = 0;           // 1..10, or -1 for the Avg row
  double mse = 0, psnr = 0, ssim = 0;
};

// Both directions, one row per band plus an Avg row each, mirroring the
// translation-quality table layout.
inline std::vector<TranslationRow> run_translation_probe(const MultiModalModel& model,
                                                         const std::vector<SolarSample>& train,
                                                         const std::vector<SolarSample>& test) {
  std::vector<TranslationRow> rows;
  for (int direction = 0; direction < 2; ++direction) {
    const std::string name = direction == 0 ? "HMI to AIA" : "AIA to HMI";
    double mse_sum = 0, psnr_sum = 0, ssim_sum = 0;
    for (int band = 1; band <= 10; ++band) {
      const int source = direction == 0 ? 0 : band;
      const int target = direction == 0 ? band : 0;
      TranslationProbe probe = train_translation_probe(model, train, source, target);
      double mse = 0, psnr = 0, ssim = 0;
      for (const auto& s : test) {
        ImageGrid pred = translate(model, probe, s);
        ImageMetrics m = image_metrics(pred, s.images[static_cast<std::size_t>(target)]);
        mse += m.mse;
        psnr += m.psnr;
        ssim += m.ssim;
      }
      const double n = static_cast<double>(test.size());
      rows.push_back({name, band, mse / n, psnr / n, ssim / n});
      mse_sum += mse / n;
      psnr_sum += psnr / n;
      ssim_sum += ssim / n;
    }
    rows.push_back({name, -1, mse_sum / 10.0, psnr_sum / 10.0, ssim_sum / 10.0});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// representation diagnostics
// ---------------------------------------------------------------------------

// Cross-modal class-token retrieval: held-out samples are partitioned into
// galleries of the given size; within each gallery the modality-0 query must
// rank its co-temporal band-i candidate first. Returns top-1 accuracy.
inline double retrieval_top1(const MultiModalModel& model,
                             const std::vector<SolarSample>& held_out, int band,
                             int gallery_size, std::uint64_t seed) {
  if (static_cast<int>(held_out.size()) < gallery_size)
    throw std::invalid_argument("retrieval_top1: not enough held-out samples");
  Tensor q = encode_cls_embeddings(model, held_out, 0);
  Tensor g = encode_cls_embeddings(model, held_out, band);
  const int d = model.config().d_ctr;

  std::vector<int> order(held_out.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::derive(seed, 0x9A11E6);
  rng.shuffle(order);

  int hits = 0, queries = 0;
  const int n_galleries = static_cast<int>(held_out.size()) / gallery_size;
  for (int gi = 0; gi < n_galleries; ++gi) {
    const int* members = nullptr;
    std::vector<int> gal(order.begin() + static_cast<std::ptrdiff_t>(gi) * gallery_size,
                         order.begin() + static_cast<std::ptrdiff_t>(gi + 1) * gallery_size);
    (void)members;
    for (int a : gal) {
      double best = -1e300;
      int best_idx = -1;
      for (int b : gal) {
        double dot = 0.0;
        for (int c = 0; c < d; ++c)
          dot += q[static_cast<std::size_t>(a) * d + c] * g[static_cast<std::size_t>(b) * d + c];
        if (dot > best) {
          best = dot;
          best_idx = b;
        }
      }
      if (best_idx == a) ++hits;
      ++queries;
    }
  }
  return static_cast<double>(hits) / queries;
}

// Fraction of rows of the per-sample L x L cross-modal patch similarity
// matrix whose argmax lands on the diagonal, averaged over samples.
inline double intra_diagonal_rate(const MultiModalModel& model,
                                  const std::vector<SolarSample>& held_out, int band) {
  Tensor p0 = encode_patch_embeddings(model, held_out, 0);
  Tensor pi = encode_patch_embeddings(model, held_out, band);
  const int l = model.config().num_patches();
  const int d = model.config().d_ctr;
  auto norm_rows = [&](Tensor& t) {
    for (int r = 0; r < t.numel() / d; ++r) {
      double s = 0.0;
      for (int c = 0; c < d; ++c)
        s += t[static_cast<std::size_t>(r) * d + c] * t[static_cast<std::size_t>(r) * d + c];
      const double inv = 1.0 / std::sqrt(s + 1e-12);
      for (int c = 0; c < d; ++c) t[static_cast<std::size_t>(r) * d + c] *= inv;
    }
  };
  norm_rows(p0);
  norm_rows(pi);

  int hits = 0, rows = 0;
  for (std::size_t s = 0; s < held_out.size(); ++s) {
    const double* a = p0.data() + s * static_cast<std::size_t>(l) * d;
    const double* b = pi.data() + s * static_cast<std::size_t>(l) * d;
    for (int i = 0; i < l; ++i) {
      double best = -1e300;
      int best_j = -1;
      for (int j = 0; j < l; ++j) {
        double dot = 0.0;
        for (int c = 0; c < d; ++c)
          dot += a[static_cast<std::size_t>(i) * d + c] * b[static_cast<std::size_t>(j) * d + c];
        if (dot > best) {
          best = dot;
          best_j = j;
        }
      }
      if (best_j == i) ++hits;
      ++rows;
    }
  }
  return static_cast<double>(hits) / rows;
}

// ---------------------------------------------------------------------------
// few-shot schedule
// ---------------------------------------------------------------------------

struct FewShotCell {
  double fraction = 1.0;
  std::string arm;  // "pretrained" or "scratch"
  std::uint64_t seed = 0;
  double acc_all = 0, acc_ge_m = 0, acc_ge_c = 0;
  int train_count = 0;
  std::vector<std::int64_t> used_timestamps;  // nested across fractions per seed
};

inline const std::vector<double>& default_fractions() {
  static const std::vector<double> kFractions = {1.0, 0.5, 0.2, 0.1, 0.05};
  return kFractions;
}

struct FewShotConfig {
  std::vector<double> fractions = default_fractions();
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  ProbeConfig probe;
  std::uint64_t balance_seed = 99;
};

// For each fraction x arm x seed, trains the probe on a nested labeled subset
// and reports the three accuracies on the balanced held-out set. The scratch
// arm uses a freshly initialized backbone of the same configuration.
inline std::vector<FewShotCell> few_shot(const MultiModalModel& pretrained,
                                         const std::vector<SolarSample>& train_raw,
                                         const std::vector<SolarSample>& test_raw,
                                         const FewShotConfig& cfg) {
  std::map<std::int64_t, FlareClass> train_labels, test_labels;
  std::map<std::int64_t, SolarSample> train_by_t, test_by_t;
  for (const auto& s : train_raw) {
    train_labels[s.timestamp] = s.label.value_or(FlareClass::None);
    train_by_t[s.timestamp] = signed_log(s);
  }
  for (const auto& s : test_raw) {
    test_labels[s.timestamp] = s.label.value_or(FlareClass::None);
    test_by_t[s.timestamp] = signed_log(s);
  }
  const auto train_pool = balance_nonflare(train_labels, cfg.balance_seed);
  const auto test_pool = balance_nonflare(test_labels, cfg.balance_seed + 1);
  if (train_pool.empty() || test_pool.empty())
    throw std::runtime_error("few_shot: balanced pools are empty");

  std::vector<SolarSample> test_set;
  std::vector<FlareClass> test_truth;
  for (auto t : test_pool) {
    test_set.push_back(test_by_t.at(t));
    test_truth.push_back(test_labels.at(t));
  }

  std::vector<FewShotCell> cells;
  for (std::uint64_t seed : cfg.seeds) {
    std::vector<int> order(train_pool.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng::derive(seed, 0xFE57);
    rng.shuffle(order);

    for (double fraction : cfg.fractions) {
      const int want =
          std::max(1, static_cast<int>(std::lround(fraction * static_cast<double>(train_pool.size()))));
      if (want < 6) {
        std::cerr << "few_shot: fraction " << fraction << " yields " << want
                  << " samples (< 6), skipping\n";
        continue;
      }
      std::vector<SolarSample> subset;
      std::vector<std::int64_t> used;
      for (int i = 0; i < want; ++i) {
        const std::int64_t t = train_pool[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        subset.push_back(train_by_t.at(t));
        used.push_back(t);
      }

      for (int arm = 0; arm < 2; ++arm) {
        MultiModalModel scratch;
        const bool is_scratch = arm == 1;
        if (is_scratch) scratch = MultiModalModel(pretrained.config(), seed ^ 0x5C7A7C8ull);
        MultiModalModel& model = is_scratch ? scratch : const_cast<MultiModalModel&>(pretrained);
        ProbeConfig pc = cfg.probe;
        pc.seed = seed;
        ProbeHead head;
        try {
          head = train_probe(model, subset, pc);
        } catch (const std::invalid_argument& e) {
          std::cerr << "few_shot: " << e.what() << ", skipping cell\n";
          continue;
        }
        auto preds = probe_predict(model, head, test_set);
        auto acc = classification_accuracy(preds, test_truth);
        FewShotCell cell;
        cell.fraction = fraction;
        cell.arm = is_scratch ? "scratch" : "pretrained";
        cell.seed = seed;
        cell.acc_all = acc.all;
        cell.acc_ge_m = acc.ge_m;
        cell.acc_ge_c = acc.ge_c;
        cell.train_count = want;
        cell.used_timestamps = used;
        cells.push_back(std::move(cell));
      }
    }
  }
  return cells;
}

// ---------------------------------------------------------------------------
// ablation grid
// ---------------------------------------------------------------------------

struct AblationMask {
  bool rec, cls, pat, intra;
};

inline const std::vector<AblationMask>& ablation_masks() {
  // rec only; contrastive only; rec+cls; rec+pat+int; no pat; no int
  static const std::vector<AblationMask> kMasks = {
      {true, false, false, false}, {false, true, true, true},  {true, true, false, false},
      {true, false, true, true},   {true, true, false, true},  {true, true, true, false},
  };
  return kMasks;
}

struct AblationRow {
  BackboneKind backbone;
  AblationMask mask;
  double aia_mse_mean = 0, aia_mse_sd = 0;
  double hmi_mse_mean = 0, hmi_mse_sd = 0;
  double acc_m_mean = 0, acc_m_sd = 0;
  double acc_c_mean = 0, acc_c_sd = 0;
  double acc_all_mean = 0, acc_all_sd = 0;
};

struct AblationConfig {
  BackboneConfig conv, transformer;
  TrainConfig train;                   // steps/batch for each pretraining run
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  ProbeConfig probe;
  std::uint64_t balance_seed = 99;
};

namespace detail {

inline std::pair<double, double> mean_sd(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double sq = 0.0;
  for (double x : v) sq += (x - mean) * (x - mean);
  return {mean, std::sqrt(sq / static_cast<double>(v.size() - 1))};
}

}  // namespace detail

// 12 rows: 6 loss-term masks per backbone, each pretrained per seed and
// scored with the translation probes (mean MSE per direction) and the frozen
// classification probe.
inline std::vector<AblationRow> ablation_grid(const std::vector<SolarSample>& train_raw,
                                              const std::vector<SolarSample>& test_raw,
                                              const AblationConfig& cfg) {
  std::vector<SolarSample> train_sl, test_sl;
  for (const auto& s : train_raw) train_sl.push_back(signed_log(s));
  for (const auto& s : test_raw) test_sl.push_back(signed_log(s));

  std::map<std::int64_t, FlareClass> train_labels;
  std::map<std::int64_t, const SolarSample*> train_by_t;
  for (std::size_t i = 0; i < train_raw.size(); ++i) {
    train_labels[train_raw[i].timestamp] = train_raw[i].label.value_or(FlareClass::None);
    train_by_t[train_raw[i].timestamp] = &train_sl[i];
  }
  std::vector<SolarSample> probe_train;
  for (auto t : balance_nonflare(train_labels, cfg.balance_seed))
    probe_train.push_back(*train_by_t.at(t));

  std::vector<FlareClass> test_truth;
  for (const auto& s : test_raw) test_truth.push_back(s.label.value_or(FlareClass::None));

  std::vector<AblationRow> rows;
  for (BackboneKind kind : {BackboneKind::Conv, BackboneKind::Transformer}) {
    const BackboneConfig& bcfg = kind == BackboneKind::Conv ? cfg.conv : cfg.transformer;
    for (const auto& mask : ablation_masks()) {
      std::vector<double> aia_mse, hmi_mse, acc_m, acc_c, acc_all;
      for (std::uint64_t seed : cfg.seeds) {
        TrainConfig tcfg = cfg.train;
        tcfg.seed = seed;
        tcfg.weights.use_rec = mask.rec;
        tcfg.weights.lambda1 = mask.cls ? cfg.train.weights.lambda1 : 0.0;
        tcfg.weights.lambda2 = mask.pat ? cfg.train.weights.lambda2 : 0.0;
        tcfg.weights.lambda3 = mask.intra ? cfg.train.weights.lambda3 : 0.0;
        FitResult fitted = fit(bcfg, tcfg, train_raw);

        // translation quality in both directions, averaged over the 10 bands
        double aia_acc = 0, hmi_acc = 0;
        for (int band = 1; band <= 10; ++band) {
          TranslationProbe to_band =
              train_translation_probe(fitted.state.model, train_sl, 0, band);
          TranslationProbe to_hmi =
              train_translation_probe(fitted.state.model, train_sl, band, 0);
          double m1 = 0, m2 = 0;
          for (const auto& s : test_sl) {
            m1 += image_metrics(translate(fitted.state.model, to_band, s),
                                s.images[static_cast<std::size_t>(band)]).mse;
            m2 += image_metrics(translate(fitted.state.model, to_hmi, s), s.images[0]).mse;
          }
          aia_acc += m1 / static_cast<double>(test_sl.size());
          hmi_acc += m2 / static_cast<double>(test_sl.size());
        }
        aia_mse.push_back(aia_acc / 10.0);
        hmi_mse.push_back(hmi_acc / 10.0);

        ProbeConfig pc = cfg.probe;
        pc.seed = seed;
        ProbeHead head = train_probe(fitted.state.model, probe_train, pc);
        auto preds = probe_predict(fitted.state.model, head, test_sl);
        auto acc = classification_accuracy(preds, test_truth);
        acc_m.push_back(acc.ge_m);
        acc_c.push_back(acc.ge_c);
        acc_all.push_back(acc.all);
      }
      AblationRow row;
      row.backbone = kind;
      row.mask = mask;
      std::tie(row.aia_mse_mean, row.aia_mse_sd) = detail::mean_sd(aia_mse);
      std::tie(row.hmi_mse_mean, row.hmi_mse_sd) = detail::mean_sd(hmi_mse);
      std::tie(row.acc_m_mean, row.acc_m_sd) = detail::mean_sd(acc_m);
      std::tie(row.acc_c_mean, row.acc_c_sd) = detail::mean_sd(acc_c);
      std::tie(row.acc_all_mean, row.acc_all_sd) = detail::mean_sd(acc_all);
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace solarchip
