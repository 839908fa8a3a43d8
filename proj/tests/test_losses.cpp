#include "solarchip/losses.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "solarchip/autograd.hpp"
#include "test_util.hpp"

using namespace solarchip;
using test_util::max_grad_rel_err;
using test_util::random_tensor;

namespace {

Var unit_rows(int n, int d, Rng& rng) {
  Tensor t = random_tensor({n, d}, rng);
  for (int r = 0; r < n; ++r) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += t[static_cast<std::size_t>(r) * d + j] * t[static_cast<std::size_t>(r) * d + j];
    const double inv = 1.0 / std::sqrt(s);
    for (int j = 0; j < d; ++j) t[static_cast<std::size_t>(r) * d + j] *= inv;
  }
  return constant(std::move(t));
}

Var eye(int n) {
  Tensor t({n, n});
  for (int i = 0; i < n; ++i) t[static_cast<std::size_t>(i) * n + i] = 1.0;
  return constant(std::move(t));
}

const double kIdentity2Infonce = std::log1p(std::exp(-1.0));  // log(1 + e^-1)

TEST(Similarity, OrthonormalIdentity) {
  auto a = eye(3);
  auto alpha = constant(Tensor::scalar(0.0));
  Var r = similarity(a, a, alpha);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      EXPECT_NEAR(r->value[static_cast<std::size_t>(i) * 3 + j], i == j ? 1.0 : 0.0, 1e-9);
}

TEST(Similarity, TemperatureDoubles) {
  Rng rng(1);
  auto a = unit_rows(4, 6, rng);
  auto b = unit_rows(4, 6, rng);
  Var r0 = similarity(a, b, constant(Tensor::scalar(0.0)));
  Var r2 = similarity(a, b, constant(Tensor::scalar(std::log(2.0))));
  for (int i = 0; i < 16; ++i)
    EXPECT_NEAR(r2->value[static_cast<std::size_t>(i)], 2.0 * r0->value[static_cast<std::size_t>(i)], 1e-12);
}

TEST(Similarity, HandComputedTwoByTwo) {
  const double s = 1.0 / std::sqrt(2.0);
  auto a = constant(Tensor({2, 2}, {1, 0, 0, 1}));
  auto b = constant(Tensor({2, 2}, {s, s, 0, 1}));
  Var r = similarity(a, b, constant(Tensor::scalar(0.0)));
  EXPECT_NEAR(r->value[0], 0.70711, 5e-6);
  EXPECT_NEAR(r->value[1], 0.0, 1e-9);
  EXPECT_NEAR(r->value[2], 0.70711, 5e-6);
  EXPECT_NEAR(r->value[3], 1.0, 1e-9);
}

TEST(Similarity, TransposeSymmetry) {
  Rng rng(2);
  auto a = constant(random_tensor({3, 5}, rng));
  auto b = constant(random_tensor({4, 5}, rng));
  auto alpha = constant(Tensor::scalar(0.4));
  Var rab = similarity(a, b, alpha);
  Var rba = similarity(b, a, alpha);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j)
      EXPECT_EQ(rab->value[static_cast<std::size_t>(i) * 4 + j],
                rba->value[static_cast<std::size_t>(j) * 3 + i]);  // bit exact
}

TEST(Similarity, RowScaleInvariance) {
  Rng rng(3);
  Tensor t = random_tensor({3, 4}, rng);
  Tensor t2 = t;
  const double scales[3] = {0.5, 2.0, 7.0};
  for (int r = 0; r < 3; ++r)
    for (int j = 0; j < 4; ++j) t2[static_cast<std::size_t>(r) * 4 + j] *= scales[r];
  auto b = constant(random_tensor({3, 4}, rng));
  auto alpha = constant(Tensor::scalar(0.0));
  Var r1 = similarity(constant(t), b, alpha);
  Var r2 = similarity(constant(t2), b, alpha);
  for (int i = 0; i < 9; ++i)
    EXPECT_NEAR(r1->value[static_cast<std::size_t>(i)], r2->value[static_cast<std::size_t>(i)], 1e-9);
}

TEST(Similarity, RejectsZeroNormRowByName) {
  Tensor t({2, 3});
  t[0] = 1.0;  // row 0 fine, row 1 all zeros
  try {
    similarity(constant(t), constant(t), constant(Tensor::scalar(0.0)));
    FAIL() << "expected rejection";
  } catch (const std::domain_error& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
}

TEST(BidirInfonce, IdentityTwoByTwo) {
  EXPECT_NEAR(bidir_infonce(eye(2))->value[0], kIdentity2Infonce, 1e-9);
  EXPECT_NEAR(bidir_infonce(eye(2))->value[0], 0.313262, 1e-6);
}

TEST(BidirInfonce, UniformLogitsGiveLogN) {
  for (int n : {2, 8, 64}) {
    Var r = constant(Tensor::full({n, n}, 1.7));
    EXPECT_NEAR(bidir_infonce(r)->value[0], std::log(static_cast<double>(n)), 1e-12);
  }
}

TEST(BidirInfonce, SymmetricMatrixBalancesTerms) {
  Rng rng(4);
  Tensor t = random_tensor({5, 5}, rng);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < i; ++j)
      t[static_cast<std::size_t>(i) * 5 + j] = t[static_cast<std::size_t>(j) * 5 + i];
  Var r = constant(t);
  EXPECT_EQ(ce_diag_mean(r)->value[0], ce_diag_mean(transpose2d(r))->value[0]);
}

TEST(BidirInfonce, NonNegative) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    Var r = constant(random_tensor({4, 4}, rng, 3.0));
    EXPECT_GE(bidir_infonce(r)->value[0], 0.0);
  }
}

TEST(BidirInfonce, DiagonalBoostNeverIncreasesLoss) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor t = random_tensor({6, 6}, rng, 2.0);
    const double before = bidir_infonce(constant(t))->value[0];
    Tensor boosted = t;
    for (int i = 0; i < 6; ++i) boosted[static_cast<std::size_t>(i) * 6 + i] += rng.uniform(0.01, 1.0);
    const double after = bidir_infonce(constant(boosted))->value[0];
    EXPECT_LE(after, before + 1e-12);
  }
}

std::map<int, Embeddings> identity_embeds(int n_modalities, int b) {
  // orthonormal class embeddings shared across modalities; tiny patch set
  std::map<int, Embeddings> e;
  Tensor cls({b, b});
  for (int i = 0; i < b; ++i) cls[static_cast<std::size_t>(i) * b + i] = 1.0;
  Tensor patches({b, 2, 3});
  for (int i = 0; i < patches.numel(); ++i) patches[static_cast<std::size_t>(i)] = 0.1 * (i % 5) + 0.3;
  for (int m = 0; m < n_modalities; ++m) e[m] = {constant(cls), constant(patches)};
  return e;
}

TEST(ClassLoss, EmptySampledIsZero) {
  auto e = identity_embeds(2, 3);
  auto alpha = constant(Tensor::scalar(0.0));
  EXPECT_EQ(class_loss(e, alpha, {})->value[0], 0.0);
}

TEST(ClassLoss, IdentityCaseMatchesInfonce) {
  auto e = identity_embeds(2, 2);
  auto alpha = constant(Tensor::scalar(0.0));
  EXPECT_NEAR(class_loss(e, alpha, {1})->value[0], kIdentity2Infonce, 1e-9);
}

TEST(ClassLoss, RequiresModalityZero) {
  std::map<int, Embeddings> e;
  Rng rng(7);
  e[1] = {unit_rows(3, 4, rng), unit_rows(3, 4, rng)};
  EXPECT_THROW(class_loss(e, constant(Tensor::scalar(0.0)), {1}), std::invalid_argument);
}

TEST(ClassLoss, RandomEmbeddingsNearLogB) {
  // Near-zero logits give a near-uniform softmax: Monte Carlo over 20 seeds.
  const int b = 8;
  double acc = 0.0;
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(static_cast<std::uint64_t>(100 + seed));
    std::map<int, Embeddings> e;
    e[0] = {unit_rows(b, 16, rng), nullptr};
    e[1] = {unit_rows(b, 16, rng), nullptr};
    acc += class_loss(e, constant(Tensor::scalar(0.0)), {1})->value[0];
  }
  EXPECT_NEAR(acc / 20.0, std::log(8.0), 0.3);
}

TEST(ClassLoss, SumOverBandsIsAdditive) {
  Rng rng(8);
  std::map<int, Embeddings> e;
  for (int m = 0; m <= 3; ++m) e[m] = {unit_rows(4, 6, rng), nullptr};
  auto alpha = constant(Tensor::scalar(0.2));
  const double joint = class_loss(e, alpha, {1, 2, 3})->value[0];
  double sum = 0.0;
  for (int i : {1, 2, 3}) sum += class_loss(e, alpha, {i})->value[0];
  EXPECT_NEAR(joint, sum, 1e-12);
}

TEST(PatchLoss, SinglePositionEqualsClassLossOnIt) {
  Rng rng(9);
  const int b = 3, d = 5;
  Tensor p0 = random_tensor({b, 1, d}, rng);
  Tensor p1 = random_tensor({b, 1, d}, rng);
  std::map<int, Embeddings> patch_embeds;
  patch_embeds[0] = {nullptr, constant(p0)};
  patch_embeds[1] = {nullptr, constant(p1)};
  std::map<int, Embeddings> cls_embeds;
  cls_embeds[0] = {constant(Tensor({b, d}, std::vector<double>(p0.data(), p0.data() + b * d))), nullptr};
  cls_embeds[1] = {constant(Tensor({b, d}, std::vector<double>(p1.data(), p1.data() + b * d))), nullptr};
  auto alpha = constant(Tensor::scalar(0.1));
  EXPECT_NEAR(patch_loss(patch_embeds, alpha, {1})->value[0],
              class_loss(cls_embeds, alpha, {1})->value[0], 1e-12);
}

TEST(PatchLoss, IdenticalOrthonormalPatchEmbeddings) {
  // Every position reduces to the identity-matrix case at B=2.
  const int b = 2, l = 3, d = 2;
  Tensor p({b, l, d});
  for (int k = 0; k < b; ++k)
    for (int j = 0; j < l; ++j) p[(static_cast<std::size_t>(k) * l + j) * d + k] = 1.0;
  std::map<int, Embeddings> e;
  e[0] = {nullptr, constant(p)};
  e[1] = {nullptr, constant(p)};
  EXPECT_NEAR(patch_loss(e, constant(Tensor::scalar(0.0)), {1})->value[0], kIdentity2Infonce, 1e-9);
}

TEST(PatchLoss, InvariantToPositionReordering) {
  Rng rng(10);
  const int b = 3, l = 4, d = 5;
  Tensor p0 = random_tensor({b, l, d}, rng);
  Tensor p1 = random_tensor({b, l, d}, rng);
  auto permute = [&](const Tensor& t, const std::vector<int>& perm) {
    Tensor out({b, l, d});
    for (int k = 0; k < b; ++k)
      for (int j = 0; j < l; ++j)
        for (int c = 0; c < d; ++c)
          out[(static_cast<std::size_t>(k) * l + j) * d + c] =
              t[(static_cast<std::size_t>(k) * l + perm[static_cast<std::size_t>(j)]) * d + c];
    return out;
  };
  const std::vector<int> perm = {2, 0, 3, 1};
  std::map<int, Embeddings> e1, e2;
  e1[0] = {nullptr, constant(p0)};
  e1[1] = {nullptr, constant(p1)};
  e2[0] = {nullptr, constant(permute(p0, perm))};
  e2[1] = {nullptr, constant(permute(p1, perm))};
  auto alpha = constant(Tensor::scalar(0.3));
  EXPECT_NEAR(patch_loss(e1, alpha, {1})->value[0], patch_loss(e2, alpha, {1})->value[0], 1e-12);
}

TEST(IntraLoss, OrthonormalPairAtTwoPatches) {
  const int b = 1, l = 2, d = 2;
  Tensor p({b, l, d});
  p[0] = 1.0;  // patch 0 = e0
  p[3] = 1.0;  // patch 1 = e1
  std::map<int, Embeddings> e;
  e[0] = {nullptr, constant(p)};
  e[1] = {nullptr, constant(p)};
  EXPECT_NEAR(intra_loss(e, constant(Tensor::scalar(0.0)), {1})->value[0], kIdentity2Infonce, 1e-9);
}

TEST(IntraLoss, EqualPatchesGiveLogL) {
  const int b = 2, l = 5, d = 3;
  Tensor p({b, l, d});
  for (int k = 0; k < b; ++k)
    for (int j = 0; j < l; ++j)
      for (int c = 0; c < d; ++c) p[(static_cast<std::size_t>(k) * l + j) * d + c] = 0.7 + k;
  std::map<int, Embeddings> e;
  e[0] = {nullptr, constant(p)};
  e[1] = {nullptr, constant(p)};
  EXPECT_NEAR(intra_loss(e, constant(Tensor::scalar(0.0)), {1})->value[0],
              std::log(static_cast<double>(l)), 1e-12);
}

TEST(IntraLoss, BatchOrderInvariant) {
  Rng rng(11);
  const int b = 4, l = 3, d = 5;
  Tensor p0 = random_tensor({b, l, d}, rng);
  Tensor p1 = random_tensor({b, l, d}, rng);
  auto shuffle_batch = [&](const Tensor& t, const std::vector<int>& perm) {
    Tensor out({b, l, d});
    for (int k = 0; k < b; ++k)
      for (int i = 0; i < l * d; ++i)
        out[static_cast<std::size_t>(k) * l * d + i] =
            t[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)]) * l * d + i];
    return out;
  };
  const std::vector<int> perm = {3, 1, 0, 2};
  std::map<int, Embeddings> e1, e2;
  e1[0] = {nullptr, constant(p0)};
  e1[1] = {nullptr, constant(p1)};
  e2[0] = {nullptr, constant(shuffle_batch(p0, perm))};
  e2[1] = {nullptr, constant(shuffle_batch(p1, perm))};
  auto alpha = constant(Tensor::scalar(0.0));
  EXPECT_NEAR(intra_loss(e1, alpha, {1})->value[0], intra_loss(e2, alpha, {1})->value[0], 1e-12);
}

TEST(IntraLoss, RejectsSinglePatch) {
  Rng rng(12);
  std::map<int, Embeddings> e;
  e[0] = {nullptr, constant(random_tensor({2, 1, 4}, rng))};
  e[1] = {nullptr, constant(random_tensor({2, 1, 4}, rng))};
  EXPECT_THROW(intra_loss(e, constant(Tensor::scalar(0.0)), {1}), std::invalid_argument);
}

TEST(RecLoss, ExactZeroAndSingleTerm) {
  Rng rng(13);
  Tensor x = random_tensor({2, 1, 4, 4}, rng);
  std::map<int, Var> inputs{{0, constant(x)}};
  std::map<int, Var> recons{{0, constant(x)}};
  EXPECT_EQ(rec_loss(inputs, recons)->value[0], 0.0);

  Tensor xhat = x;
  xhat[5] += 2.0;  // one pixel off by 2 -> squared error 4
  recons[0] = constant(xhat);
  EXPECT_NEAR(rec_loss(inputs, recons)->value[0], 4.0, 1e-12);
}

TEST(RecLoss, QuadraticHomogeneity) {
  Rng rng(14);
  Tensor x = random_tensor({1, 1, 3, 3}, rng);
  Tensor r = random_tensor({1, 1, 3, 3}, rng);
  Tensor x1 = x, x2 = x;
  for (int i = 0; i < 9; ++i) {
    x1[static_cast<std::size_t>(i)] += r[static_cast<std::size_t>(i)];
    x2[static_cast<std::size_t>(i)] += 2.0 * r[static_cast<std::size_t>(i)];
  }
  std::map<int, Var> inputs{{0, constant(x)}};
  const double l1 = rec_loss(inputs, {{0, constant(x1)}})->value[0];
  const double l2 = rec_loss(inputs, {{0, constant(x2)}})->value[0];
  EXPECT_NEAR(l2, 4.0 * l1, 1e-9 * std::max(1.0, l2));
}

TEST(RecLoss, ShapeMismatchRejected) {
  std::map<int, Var> inputs{{0, constant(Tensor::zeros({1, 1, 4, 4}))}};
  std::map<int, Var> recons{{0, constant(Tensor::zeros({1, 1, 3, 3}))}};
  EXPECT_THROW(rec_loss(inputs, recons), std::invalid_argument);
}

TEST(TotalLoss, ZeroWeightsGiveRecOnly) {
  Rng rng(15);
  Tensor x = random_tensor({2, 1, 4, 4}, rng);
  Tensor xh = random_tensor({2, 1, 4, 4}, rng);
  std::map<int, Var> inputs{{0, constant(x)}};
  std::map<int, Var> recons{{0, constant(xh)}};
  std::map<int, Embeddings> e;
  e[0] = {unit_rows(2, 4, rng), constant(random_tensor({2, 3, 4}, rng))};
  Temperatures temps{parameter(Tensor::scalar(0.0)), parameter(Tensor::scalar(0.0)),
                     parameter(Tensor::scalar(0.0))};
  LossWeights w;
  w.lambda1 = w.lambda2 = w.lambda3 = 0.0;
  auto out = total_loss(inputs, recons, e, temps, w, {});
  EXPECT_EQ(out.report.total, out.report.rec);
  EXPECT_EQ(out.report.cls, 0.0);
  EXPECT_EQ(out.report.pat, 0.0);
  EXPECT_EQ(out.report.intra, 0.0);
  // total = rec + l1*cls + l2*pat + l3*int holds in the report
  EXPECT_NEAR(out.report.total,
              out.report.rec + out.report.lambda1 * out.report.cls +
                  out.report.lambda2 * out.report.pat + out.report.lambda3 * out.report.intra,
              1e-12);
}

TEST(TotalLoss, ClassTermAddsVerifiedConstant) {
  Rng rng(16);
  Tensor x = random_tensor({2, 1, 4, 4}, rng);
  Tensor xh = random_tensor({2, 1, 4, 4}, rng);
  std::map<int, Var> inputs{{0, constant(x)}, {1, constant(x)}};
  std::map<int, Var> recons{{0, constant(xh)}, {1, constant(xh)}};
  auto e = identity_embeds(2, 2);
  Temperatures temps{parameter(Tensor::scalar(0.0)), parameter(Tensor::scalar(0.0)),
                     parameter(Tensor::scalar(0.0))};
  LossWeights w;
  w.lambda1 = 1.0;
  w.lambda2 = w.lambda3 = 0.0;
  auto out = total_loss(inputs, recons, e, temps, w, {1});
  EXPECT_NEAR(out.report.total, out.report.rec + kIdentity2Infonce, 1e-9);
}

TEST(LossGradients, FiniteDifferenceAtSpecSizes) {
  // B=3, L=4, D=5 with embeddings as leaves, including the temperatures.
  Rng rng(17);
  const int b = 3, l = 4, d = 5;
  auto cls0 = parameter(random_tensor({b, d}, rng));
  auto cls1 = parameter(random_tensor({b, d}, rng));
  auto pat0 = parameter(random_tensor({b, l, d}, rng));
  auto pat1 = parameter(random_tensor({b, l, d}, rng));
  auto a_cls = parameter(Tensor::scalar(0.1));
  auto a_pat = parameter(Tensor::scalar(-0.2));
  auto a_int = parameter(Tensor::scalar(0.05));

  auto embeds = [&] {
    std::map<int, Embeddings> e;
    e[0] = {cls0, pat0};
    e[1] = {cls1, pat1};
    return e;
  };
  auto f_cls = [&] { auto e = embeds(); return class_loss(e, a_cls, {1}); };
  auto f_pat = [&] { auto e = embeds(); return patch_loss(e, a_pat, {1}); };
  auto f_int = [&] { auto e = embeds(); return intra_loss(e, a_int, {1}); };
  EXPECT_LT(max_grad_rel_err({cls0, cls1, a_cls}, f_cls), 1e-6);
  EXPECT_LT(max_grad_rel_err({pat0, pat1, a_pat}, f_pat), 1e-6);
  EXPECT_LT(max_grad_rel_err({pat0, pat1, a_int}, f_int), 1e-6);

  auto xin = parameter(random_tensor({b, 1, 4, 4}, rng));
  auto xhat = parameter(random_tensor({b, 1, 4, 4}, rng));
  auto f_rec = [&] {
    std::map<int, Var> i{{0, xin}};
    std::map<int, Var> r{{0, xhat}};
    return rec_loss(i, r);
  };
  EXPECT_LT(max_grad_rel_err({xin, xhat}, f_rec), 1e-7);
}

}  // namespace
