// The four training loss terms and their building blocks: temperature-scaled
// cosine similarity matrices and bidirectional InfoNCE (mean of row-target
// and column-target cross entropy against the diagonal).
//
// Class-level loss aligns magnetograph/imager class embeddings per sampled
// band; patch-level aligns co-located patch embeddings across the batch per
// spatial index; intra-sample aligns the L x L cross-modal patch matrix of
// each sample, making same-image patches mutual negatives. Reconstruction is
// the plain summed squared error over the active modalities.
#pragma once

#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "solarchip/autograd.hpp"
#include "solarchip/models.hpp"

namespace solarchip {

namespace detail {

inline void reject_zero_rows(const Var& x, const char* side) {
  const int rows = x->value.dim(0), d = x->value.dim(1);
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      const double v = x->value[static_cast<std::size_t>(r) * d + j];
      s += v * v;
    }
    if (s == 0.0) {
      std::ostringstream os;
      os << "similarity: zero-norm row " << r << " in " << side << " input";
      throw std::domain_error(os.str());
    }
  }
}

}  // namespace detail

// R[p,q] = exp(alpha) * <a_p/|a_p|, b_q/|b_q|>. a, b: B x D (rows are
// embeddings); alpha: scalar variable.
inline Var similarity(const Var& a, const Var& b, const Var& alpha) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(1) != b->value.dim(1))
    throw std::invalid_argument("similarity: expects [N,D] pairs with equal D");
  detail::reject_zero_rows(a, "left");
  detail::reject_zero_rows(b, "right");
  return scale_by(matmul_nt(l2_normalize_rows(a), l2_normalize_rows(b)), exp_elem(alpha));
}

// Mean of row-wise and column-wise cross entropy against diagonal targets.
inline Var bidir_infonce(const Var& r) {
  return scale(add(ce_diag_mean(r), ce_diag_mean(transpose2d(r))), 0.5);
}

// Sum over the sampled imager bands of bidirectional InfoNCE on the
// (modality 0, band i) class-embedding similarity matrix. Pairs are always
// magnetograph-vs-imager, never imager-vs-imager.
inline Var class_loss(const std::map<int, Embeddings>& embeds, const Var& alpha_cls,
                      const std::vector<int>& sampled) {
  auto hmi = embeds.find(0);
  if (hmi == embeds.end()) throw std::invalid_argument("class_loss: modality 0 missing");
  Var total = constant(Tensor::scalar(0.0));
  for (int i : sampled) {
    if (i < 1 || i >= ModalityId::kCount)
      throw std::invalid_argument("class_loss: sampled modality out of range");
    total = add(total, bidir_infonce(similarity(hmi->second.cls, embeds.at(i).cls, alpha_cls)));
  }
  return total;
}

// Per spatial index j, the B x B cross-modal similarity matrix of position-j
// patch embeddings; averaged over the L positions, summed over sampled bands.
inline Var patch_loss(const std::map<int, Embeddings>& embeds, const Var& alpha_pat,
                      const std::vector<int>& sampled) {
  auto hmi = embeds.find(0);
  if (hmi == embeds.end()) throw std::invalid_argument("patch_loss: modality 0 missing");
  const int l = hmi->second.patches->value.dim(1);
  Var total = constant(Tensor::scalar(0.0));
  for (int i : sampled) {
    const auto& other = embeds.at(i).patches;
    if (other->value.dim(1) != l) throw std::invalid_argument("patch_loss: mismatched L");
    Var acc = constant(Tensor::scalar(0.0));
    for (int j = 0; j < l; ++j) {
      Var a = token_at(hmi->second.patches, j);
      Var b = token_at(other, j);
      acc = add(acc, bidir_infonce(similarity(a, b, alpha_pat)));
    }
    total = add(total, scale(acc, 1.0 / l));
  }
  return total;
}

// Per sample k, the L x L cross-modal matrix over all patch embeddings of
// that sample; averaged over the batch, summed over sampled bands. Needs at
// least two patches for negatives to exist.
inline Var intra_loss(const std::map<int, Embeddings>& embeds, const Var& alpha_int,
                      const std::vector<int>& sampled) {
  auto hmi = embeds.find(0);
  if (hmi == embeds.end()) throw std::invalid_argument("intra_loss: modality 0 missing");
  const int b = hmi->second.patches->value.dim(0);
  const int l = hmi->second.patches->value.dim(1);
  if (l < 2) throw std::invalid_argument("intra_loss: needs L >= 2 (no negatives otherwise)");
  Var total = constant(Tensor::scalar(0.0));
  for (int i : sampled) {
    Var acc = constant(Tensor::scalar(0.0));
    for (int k = 0; k < b; ++k) {
      Var a = batch_row(hmi->second.patches, k);
      Var o = batch_row(embeds.at(i).patches, k);
      acc = add(acc, bidir_infonce(similarity(a, o, alpha_int)));
    }
    total = add(total, scale(acc, 1.0 / b));
  }
  return total;
}

// Summed squared reconstruction error over the active modalities.
inline Var rec_loss(const std::map<int, Var>& inputs, const std::map<int, Var>& recons) {
  if (inputs.size() != recons.size())
    throw std::invalid_argument("rec_loss: input/reconstruction modality sets differ");
  Var total = constant(Tensor::scalar(0.0));
  for (const auto& [m, x] : inputs) {
    const auto& xhat = recons.at(m);
    if (!xhat->value.same_shape(x->value))
      throw std::invalid_argument("rec_loss: shape mismatch for modality " + std::to_string(m));
    total = add(total, sse(xhat, x));
  }
  return total;
}

struct LossWeights {
  double lambda1 = 1.0, lambda2 = 1.0, lambda3 = 1.0;
  bool use_rec = true;  // the contrastive-only ablation drops reconstruction
};

// The reported loss terms for one step, with the weights echoed and the
// sampled band set recorded. total = rec + l1*cls + l2*pat + l3*int.
struct LossReport {
  std::int64_t step = 0;
  double rec = 0, cls = 0, pat = 0, intra = 0, total = 0;
  double lambda1 = 0, lambda2 = 0, lambda3 = 0;
  double alpha_cls = 0, alpha_pat = 0, alpha_int = 0;
  std::vector<int> sampled;

  std::string sampled_str() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < sampled.size(); ++i) os << (i ? "|" : "") << sampled[i];
    return os.str();
  }
};

struct TotalLoss {
  Var value;
  LossReport report;
};

// Assembles the weighted objective over the sampled bands. Reconstruction
// covers sampled bands plus modality 0. Zero-weight terms are skipped
// entirely, so their parameters receive exactly zero gradient.
inline TotalLoss total_loss(const std::map<int, Var>& inputs, const std::map<int, Var>& recons,
                            const std::map<int, Embeddings>& embeds, const Temperatures& temps,
                            const LossWeights& w, const std::vector<int>& sampled) {
  if (w.lambda1 < 0 || w.lambda2 < 0 || w.lambda3 < 0)
    throw std::invalid_argument("total_loss: weights must be non-negative");
  TotalLoss out;
  Var total = constant(Tensor::scalar(0.0));

  Var rec;
  if (w.use_rec) {
    rec = rec_loss(inputs, recons);
    total = add(total, rec);
    out.report.rec = rec->value[0];
  }
  if (w.lambda1 > 0) {
    Var cls = class_loss(embeds, temps.alpha_cls, sampled);
    total = add(total, scale(cls, w.lambda1));
    out.report.cls = cls->value[0];
  }
  if (w.lambda2 > 0) {
    Var pat = patch_loss(embeds, temps.alpha_pat, sampled);
    total = add(total, scale(pat, w.lambda2));
    out.report.pat = pat->value[0];
  }
  if (w.lambda3 > 0) {
    Var intra = intra_loss(embeds, temps.alpha_int, sampled);
    total = add(total, scale(intra, w.lambda3));
    out.report.intra = intra->value[0];
  }
  out.value = total;
  out.report.total = total->value[0];
  out.report.lambda1 = w.lambda1;
  out.report.lambda2 = w.lambda2;
  out.report.lambda3 = w.lambda3;
  out.report.alpha_cls = temps.alpha_cls->value[0];
  out.report.alpha_pat = temps.alpha_pat->value[0];
  out.report.alpha_int = temps.alpha_int->value[0];
  out.report.sampled = sampled;
  return out;
}

}  // namespace solarchip
