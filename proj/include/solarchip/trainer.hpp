// Seeded pretraining loop: batch assembly with one shared geometric
// augmentation per sample across modalities, loss evaluation over a sampled
// band subset, Adam-style updates of every active parameter including the
// temperatures, and bit-exact checkpoint round trips.
//
// Everything runs single threaded; two runs from the same seed produce
// identical loss streams.
#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "solarchip/checkpoint.hpp"
#include "solarchip/data.hpp"
#include "solarchip/losses.hpp"
#include "solarchip/models.hpp"

namespace solarchip {

struct TrainConfig {
  std::uint64_t seed = 7;
  int steps = 500;
  int batch = 16;
  double lr = 1e-3;
  LossWeights weights;
  int modality_sample = 3;  // bands drawn per step, uniform without replacement
  int checkpoint_every = 0;  // 0 = no intermediate checkpoints
  double clip_norm = 5.0;    // global gradient norm clip; <= 0 disables
  bool augment = true;

  void validate() const {
    if (batch < 2)
      throw std::invalid_argument("TrainConfig: batch must be >= 2 (contrastive negatives)");
    if (steps < 0) throw std::invalid_argument("TrainConfig: steps must be >= 0");
    if (modality_sample < 0 || modality_sample > 10)
      throw std::invalid_argument("TrainConfig: modality_sample must be in [0,10]");
    if (lr <= 0) throw std::invalid_argument("TrainConfig: lr must be positive");
  }
};

struct AdamSlot {
  Tensor m, v;
};

struct TrainState {
  MultiModalModel model;
  std::vector<AdamSlot> opt;  // parallel to model.parameters()
  std::int64_t step = 0;
  Rng rng;
  TrainConfig cfg;
};

inline TrainState init_state(const BackboneConfig& bcfg, const TrainConfig& tcfg) {
  tcfg.validate();
  TrainState st;
  st.model = MultiModalModel(bcfg, tcfg.seed);
  const auto params = st.model.parameters();
  st.opt.reserve(params.size());
  for (const auto& p : params)
    st.opt.push_back({Tensor(p.var->value.shape()), Tensor(p.var->value.shape())});
  st.rng = Rng::derive(tcfg.seed, 0x7A41);
  st.cfg = tcfg;
  return st;
}

// Stacks one modality of a signed-log batch into a B x 1 x S x S tensor.
inline Tensor make_batch_tensor(const std::vector<SolarSample>& batch, int modality) {
  if (batch.empty()) throw std::invalid_argument("make_batch_tensor: empty batch");
  const int side = batch[0].images[static_cast<std::size_t>(modality)].side;
  Tensor t({static_cast<int>(batch.size()), 1, side, side});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& g = batch[b].images[static_cast<std::size_t>(modality)];
    if (g.domain != Domain::SignedLog)
      throw std::invalid_argument("make_batch_tensor: batch must be in signed-log domain");
    if (g.side != side) throw std::invalid_argument("make_batch_tensor: mixed grid sides");
    std::memcpy(t.data() + b * static_cast<std::size_t>(side) * side, g.v.data(),
                sizeof(double) * static_cast<std::size_t>(side) * side);
  }
  return t;
}

namespace detail {

inline void check_finite_report(const LossReport& r) {
  auto bad = [](double v) { return !std::isfinite(v); };
  const char* term = nullptr;
  if (bad(r.rec)) term = "reconstruction";
  else if (bad(r.cls)) term = "class-level contrastive";
  else if (bad(r.pat)) term = "patch-level contrastive";
  else if (bad(r.intra)) term = "intra-sample contrastive";
  else if (bad(r.total)) term = "total";
  if (term) {
    std::ostringstream os;
    os << "train_step: " << term << " term is non-finite at step " << r.step;
    throw std::runtime_error(os.str());
  }
}

}  // namespace detail

// One gradient update. The batch must already be preprocessed (signed-log)
// and augmented with one shared GeomAug per sample across modalities. The
// band subset for the step is drawn from the state's seeded stream.
inline LossReport train_step(TrainState& st, const std::vector<SolarSample>& batch) {
  if (static_cast<int>(batch.size()) < 2)
    throw std::invalid_argument("train_step: need at least 2 samples");

  std::vector<int> sampled = st.rng.sample_without_replacement(10, st.cfg.modality_sample);
  for (auto& i : sampled) i += 1;
  std::sort(sampled.begin(), sampled.end());

  std::map<int, Var> inputs, recons;
  std::map<int, Embeddings> embeds;
  std::vector<int> active = sampled;
  active.insert(active.begin(), 0);
  for (int m : active) {
    Var x = constant(make_batch_tensor(batch, m));
    TokenSequence seq = st.model.encode(m, x);
    embeds[m] = st.model.project(seq, m);
    recons[m] = st.model.decode(seq.patches(), m);
    inputs[m] = x;
  }

  auto out = total_loss(inputs, recons, embeds, st.model.temps(), st.cfg.weights, sampled);
  out.report.step = st.step;
  detail::check_finite_report(out.report);

  const auto params = st.model.parameters();
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(p.var);
  zero_grad(vars);
  backward(out.value);

  // global-norm clip over every gradient
  double scale_g = 1.0;
  if (st.cfg.clip_norm > 0) {
    double sq = 0.0;
    for (const auto& p : params) {
      if (p.var->grad.empty()) continue;
      for (int i = 0; i < p.var->grad.numel(); ++i) {
        const double g = p.var->grad[static_cast<std::size_t>(i)];
        sq += g * g;
      }
    }
    const double norm = std::sqrt(sq);
    if (norm > st.cfg.clip_norm) scale_g = st.cfg.clip_norm / norm;
  }

  // Adam with bias correction. Every parameter updates every step; ones
  // outside this step's graph contribute g = 0 so their moments decay
  // identically whether or not the run was resumed from a checkpoint.
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double t = static_cast<double>(st.step + 1);
  const double bc1 = 1.0 - std::pow(b1, t);
  const double bc2 = 1.0 - std::pow(b2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& slot = st.opt[p];
    Tensor& val = params[p].var->value;
    const bool has_grad = !params[p].var->grad.empty();
    for (int i = 0; i < val.numel(); ++i) {
      const double g = has_grad ? params[p].var->grad[static_cast<std::size_t>(i)] * scale_g : 0.0;
      slot.m[static_cast<std::size_t>(i)] = b1 * slot.m[static_cast<std::size_t>(i)] + (1 - b1) * g;
      slot.v[static_cast<std::size_t>(i)] = b2 * slot.v[static_cast<std::size_t>(i)] + (1 - b2) * g * g;
      const double mhat = slot.m[static_cast<std::size_t>(i)] / bc1;
      const double vhat = slot.v[static_cast<std::size_t>(i)] / bc2;
      val[static_cast<std::size_t>(i)] -= st.cfg.lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
  ++st.step;
  return out.report;
}

inline void save_train_state(const TrainState& st, const std::string& path);

// Recording hook for augmentation audits: (step, sample slot, modality, aug).
using AugHook = std::function<void(std::int64_t, int, int, const GeomAug&)>;

struct FitResult {
  TrainState state;
  std::vector<LossReport> history;
};

// Runs the pretraining loop over a raw-domain archive split. Applies the
// signed-log transform once up front, then per step draws batch indices and
// one augmentation per sample (shared by all modalities) from the seeded
// stream.
inline FitResult fit(const BackboneConfig& bcfg, const TrainConfig& tcfg,
                     const std::vector<SolarSample>& archive,
                     const std::string& checkpoint_dir = "", const AugHook& aug_hook = nullptr) {
  if (archive.empty()) throw std::invalid_argument("fit: empty archive");
  FitResult out{init_state(bcfg, tcfg), {}};
  TrainState& st = out.state;

  std::vector<SolarSample> prepared;
  prepared.reserve(archive.size());
  for (const auto& s : archive) prepared.push_back(signed_log(s));

  const auto augs = GeomAug::all();
  for (int step = 0; step < tcfg.steps; ++step) {
    std::vector<SolarSample> batch;
    batch.reserve(static_cast<std::size_t>(tcfg.batch));
    for (int b = 0; b < tcfg.batch; ++b) {
      const int idx = st.rng.uniform_int(static_cast<int>(prepared.size()));
      GeomAug aug{0, false};
      if (tcfg.augment) aug = augs[static_cast<std::size_t>(st.rng.uniform_int(8))];
      SolarSample sample = prepared[static_cast<std::size_t>(idx)];
      for (int m = 0; m < ModalityId::kCount; ++m) {
        sample.images[static_cast<std::size_t>(m)] =
            apply_aug(prepared[static_cast<std::size_t>(idx)].images[static_cast<std::size_t>(m)], aug);
        if (aug_hook) aug_hook(st.step, b, m, aug);
      }
      batch.push_back(std::move(sample));
    }
    out.history.push_back(train_step(st, batch));
    if (!checkpoint_dir.empty() && tcfg.checkpoint_every > 0 &&
        (step + 1) % tcfg.checkpoint_every == 0)
      save_train_state(st, checkpoint_dir + "/ckpt_step" + std::to_string(st.step) + ".bin");
  }
  return out;
}

// ---------------------------------------------------------------------------
// checkpoint round trip for full trainer state
// ---------------------------------------------------------------------------

inline void save_train_state(const TrainState& st, const std::string& path) {
  TrainerSnapshot snap;
  snap.step = st.step;
  snap.rng_state = st.rng.state();
  const auto params = st.model.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& slot = st.opt[p];
    snap.slots[{params[p].name, 0}] =
        std::vector<double>(slot.m.data(), slot.m.data() + slot.m.numel());
    snap.slots[{params[p].name, 1}] =
        std::vector<double>(slot.v.data(), slot.v.data() + slot.v.numel());
  }
  save_checkpoint(st.model, path, &snap);
}

inline TrainState load_train_state(const std::string& path, const TrainConfig& tcfg) {
  LoadedCheckpoint ck = load_checkpoint(path);
  if (!ck.trainer) throw std::runtime_error("load_train_state: checkpoint has no trainer state");
  TrainState st;
  st.model = std::move(ck.model);
  st.cfg = tcfg;
  st.step = ck.trainer->step;
  st.rng.set_state(ck.trainer->rng_state);
  const auto params = st.model.parameters();
  st.opt.reserve(params.size());
  for (const auto& p : params) {
    AdamSlot slot{Tensor(p.var->value.shape()), Tensor(p.var->value.shape())};
    auto m = ck.trainer->slots.find({p.name, 0});
    auto v = ck.trainer->slots.find({p.name, 1});
    if (m == ck.trainer->slots.end() || v == ck.trainer->slots.end())
      throw std::runtime_error("load_train_state: missing optimizer slot for " + p.name);
    std::copy(m->second.begin(), m->second.end(), slot.m.data());
    std::copy(v->second.begin(), v->second.end(), slot.v.data());
    st.opt.push_back(std::move(slot));
  }
  return st;
}

// ---------------------------------------------------------------------------
// gradient verification harness
// ---------------------------------------------------------------------------

enum class LossSelector { Rec, Class, Patch, Intra, Total };

inline const char* loss_selector_name(LossSelector s) {
  switch (s) {
    case LossSelector::Rec: return "rec";
    case LossSelector::Class: return "class";
    case LossSelector::Patch: return "patch";
    case LossSelector::Intra: return "intra";
    default: return "total";
  }
}

struct GradCheckSizes {
  int batch = 3;
  int side = 16;   // with patch 8 gives L = 4
  int patch = 8;
  int dim = 5;     // d_model and d_ctr
  int modalities = 3;  // model sets 0..modalities-1 participate
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int checked_params = 0;
  bool pass = false;
};

// Compares analytic gradients of the selected loss, evaluated through the
// full backbone stack, against central finite differences over every
// participating parameter (including the temperatures).
inline GradCheckReport grad_check(LossSelector which, BackboneKind kind,
                                  const GradCheckSizes& sz, double tolerance,
                                  std::uint64_t seed = 123) {
  BackboneConfig cfg;
  cfg.kind = kind;
  cfg.side = sz.side;
  cfg.patch = sz.patch;
  cfg.d_model = sz.dim;
  cfg.d_ctr = sz.dim;
  cfg.depth = 1;
  cfg.heads = 1;
  MultiModalModel model(cfg, seed);

  Rng rng = Rng::derive(seed, 99);
  std::vector<Tensor> batches;
  for (int m = 0; m < sz.modalities; ++m) {
    Tensor t({sz.batch, 1, sz.side, sz.side});
    for (int i = 0; i < t.numel(); ++i) t[static_cast<std::size_t>(i)] = rng.uniform(-2.0, 2.0);
    batches.push_back(std::move(t));
  }

  std::vector<int> sampled;
  for (int m = 1; m < sz.modalities; ++m) sampled.push_back(m);

  auto forward = [&]() -> Var {
    std::map<int, Var> inputs, recons;
    std::map<int, Embeddings> embeds;
    for (int m = 0; m < sz.modalities; ++m) {
      Var x = constant(batches[static_cast<std::size_t>(m)]);
      TokenSequence seq = model.encode(m, x);
      embeds[m] = model.project(seq, m);
      recons[m] = model.decode(seq.patches(), m);
      inputs[m] = x;
    }
    switch (which) {
      case LossSelector::Rec: return rec_loss(inputs, recons);
      case LossSelector::Class: return class_loss(embeds, model.temps().alpha_cls, sampled);
      case LossSelector::Patch: return patch_loss(embeds, model.temps().alpha_pat, sampled);
      case LossSelector::Intra: return intra_loss(embeds, model.temps().alpha_int, sampled);
      default:
        return total_loss(inputs, recons, embeds, model.temps(), LossWeights{}, sampled).value;
    }
  };

  std::vector<ParamInfo> checked;
  for (const auto& p : model.parameters())
    if (p.modality < sz.modalities) checked.push_back(p);  // includes temperatures (-1)

  std::vector<Var> vars;
  for (const auto& p : checked) vars.push_back(p.var);
  zero_grad(vars);
  backward(forward());

  GradCheckReport report;
  const double h = 1e-5;
  for (const auto& p : checked) {
    for (int i = 0; i < p.var->value.numel(); ++i) {
      const double saved = p.var->value[static_cast<std::size_t>(i)];
      const double step = h * std::max(1.0, std::abs(saved));
      p.var->value[static_cast<std::size_t>(i)] = saved + step;
      const double fp = forward()->value[0];
      p.var->value[static_cast<std::size_t>(i)] = saved - step;
      const double fm = forward()->value[0];
      p.var->value[static_cast<std::size_t>(i)] = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      const double analytic = p.var->grad.empty() ? 0.0 : p.var->grad[static_cast<std::size_t>(i)];
      const double rel =
          std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = p.name + "[" + std::to_string(i) + "]";
      }
      ++report.checked_params;
    }
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

}  // namespace solarchip
