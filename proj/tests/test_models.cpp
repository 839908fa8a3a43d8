#include "solarchip/models.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "solarchip/losses.hpp"
#include "test_util.hpp"

using namespace solarchip;
using test_util::random_tensor;

namespace {

BackboneConfig tiny_cfg(BackboneKind kind) {
  BackboneConfig cfg;
  cfg.kind = kind;
  cfg.side = 16;
  cfg.patch = 8;  // L = 4
  cfg.d_model = 8;
  cfg.d_ctr = 5;
  cfg.depth = 1;
  cfg.heads = 2;
  return cfg;
}

class BothBackbones : public ::testing::TestWithParam<BackboneKind> {};

INSTANTIATE_TEST_SUITE_P(Kinds, BothBackbones,
                         ::testing::Values(BackboneKind::Conv, BackboneKind::Transformer),
                         [](const auto& info) { return backbone_name(info.param); });

TEST(Models, DeskScaleTokenShapes) {
  BackboneConfig cfg;  // defaults: transformer, side 64, patch 8, d_model 32
  MultiModalModel model(cfg, 7);
  Rng rng(1);
  Var batch = constant(random_tensor({2, 1, 64, 64}, rng));
  TokenSequence seq = model.encode(0, batch);
  EXPECT_EQ(seq.tokens->value.shape(), (std::vector<int>{2, 65, 32}));
  Embeddings emb = model.project(seq, 0);
  EXPECT_EQ(emb.cls->value.shape(), (std::vector<int>{2, 16}));
  EXPECT_EQ(emb.patches->value.shape(), (std::vector<int>{2, 64, 16}));
  Var rec = model.decode(seq.patches(), 0);
  EXPECT_EQ(rec->value.shape(), (std::vector<int>{2, 1, 64, 64}));
}

TEST_P(BothBackbones, TokenShapesAndFiniteness) {
  MultiModalModel model(tiny_cfg(GetParam()), 3);
  Rng rng(2);
  Var batch = constant(random_tensor({3, 1, 16, 16}, rng));
  TokenSequence seq = model.encode(1, batch);
  EXPECT_EQ(seq.tokens->value.shape(), (std::vector<int>{3, 5, 8}));
  for (int i = 0; i < seq.tokens->value.numel(); ++i)
    ASSERT_TRUE(std::isfinite(seq.tokens->value[static_cast<std::size_t>(i)]));

  Var zero_batch = constant(Tensor::zeros({2, 1, 16, 16}));
  TokenSequence zseq = model.encode(1, zero_batch);
  for (int i = 0; i < zseq.tokens->value.numel(); ++i)
    ASSERT_TRUE(std::isfinite(zseq.tokens->value[static_cast<std::size_t>(i)]));
}

TEST_P(BothBackbones, IdenticalRowsGiveIdenticalTokens) {
  MultiModalModel model(tiny_cfg(GetParam()), 5);
  Rng rng(3);
  Tensor one = random_tensor({1, 1, 16, 16}, rng);
  Tensor two({2, 1, 16, 16});
  for (int i = 0; i < one.numel(); ++i) {
    two[static_cast<std::size_t>(i)] = one[static_cast<std::size_t>(i)];
    two[static_cast<std::size_t>(i + one.numel())] = one[static_cast<std::size_t>(i)];
  }
  TokenSequence seq = model.encode(0, constant(two));
  const int row = seq.tokens->value.numel() / 2;
  for (int i = 0; i < row; ++i)
    EXPECT_EQ(seq.tokens->value[static_cast<std::size_t>(i)],
              seq.tokens->value[static_cast<std::size_t>(i + row)]);
}

TEST_P(BothBackbones, ProjectionIsLinear) {
  MultiModalModel model(tiny_cfg(GetParam()), 9);
  Rng rng(4);
  // biases initialize to zero, so zero tokens must give zero embeddings
  TokenSequence zeros{constant(Tensor::zeros({2, 5, 8}))};
  Embeddings ez = model.project(zeros, 2);
  for (int i = 0; i < ez.cls->value.numel(); ++i)
    EXPECT_EQ(ez.cls->value[static_cast<std::size_t>(i)], 0.0);
  for (int i = 0; i < ez.patches->value.numel(); ++i)
    EXPECT_EQ(ez.patches->value[static_cast<std::size_t>(i)], 0.0);

  // additivity: project(a+b) = project(a) + project(b)
  Tensor a = random_tensor({2, 5, 8}, rng);
  Tensor b = random_tensor({2, 5, 8}, rng);
  Tensor ab = a;
  for (int i = 0; i < ab.numel(); ++i) ab[static_cast<std::size_t>(i)] += b[static_cast<std::size_t>(i)];
  Embeddings ea = model.project({constant(a)}, 2);
  Embeddings eb = model.project({constant(b)}, 2);
  Embeddings eab = model.project({constant(ab)}, 2);
  for (int i = 0; i < eab.cls->value.numel(); ++i)
    EXPECT_NEAR(eab.cls->value[static_cast<std::size_t>(i)],
                ea.cls->value[static_cast<std::size_t>(i)] + eb.cls->value[static_cast<std::size_t>(i)], 1e-12);
}

TEST_P(BothBackbones, DecodeRoundTripShapeAndDeterminism) {
  MultiModalModel model(tiny_cfg(GetParam()), 11);
  Rng rng(5);
  Var batch = constant(random_tensor({2, 1, 16, 16}, rng));
  TokenSequence seq = model.encode(4, batch);
  Var r1 = model.decode(seq.patches(), 4);
  Var r2 = model.decode(seq.patches(), 4);
  EXPECT_EQ(r1->value.shape(), (std::vector<int>{2, 1, 16, 16}));
  for (int i = 0; i < r1->value.numel(); ++i)
    EXPECT_EQ(r1->value[static_cast<std::size_t>(i)], r2->value[static_cast<std::size_t>(i)]);
}

TEST_P(BothBackbones, DecodeRejectsWrongTokenCount) {
  MultiModalModel model(tiny_cfg(GetParam()), 13);
  EXPECT_THROW(model.decode(constant(Tensor::zeros({2, 3, 8})), 0), std::invalid_argument);
  EXPECT_THROW(model.decode(constant(Tensor::zeros({2, 5, 8})), 0), std::invalid_argument);
}

TEST_P(BothBackbones, DecodeDependsOnTokenOrder) {
  MultiModalModel model(tiny_cfg(GetParam()), 17);
  Rng rng(6);
  Tensor tokens = random_tensor({1, 4, 8}, rng);
  Tensor permuted({1, 4, 8});
  const int perm[4] = {1, 0, 3, 2};
  for (int t = 0; t < 4; ++t)
    for (int d = 0; d < 8; ++d)
      permuted[static_cast<std::size_t>(t) * 8 + d] = tokens[static_cast<std::size_t>(perm[t]) * 8 + d];
  Var r1 = model.decode(constant(tokens), 0);
  Var r2 = model.decode(constant(permuted), 0);
  double max_diff = 0.0;
  for (int i = 0; i < r1->value.numel(); ++i)
    max_diff = std::max(max_diff, std::abs(r1->value[static_cast<std::size_t>(i)] -
                                           r2->value[static_cast<std::size_t>(i)]));
  EXPECT_GT(max_diff, 1e-9);
}

TEST_P(BothBackbones, ModalityIsolation) {
  MultiModalModel model(tiny_cfg(GetParam()), 19);
  Rng rng(7);
  Var batch = constant(random_tensor({2, 1, 16, 16}, rng));
  TokenSequence before = model.encode(2, batch);

  // mutate every encoder parameter of modality 1
  for (auto& info : model.parameters())
    if (info.modality == 1 && info.role == ParamRole::Encoder)
      for (int i = 0; i < info.var->value.numel(); ++i)
        info.var->value[static_cast<std::size_t>(i)] += 0.37;

  TokenSequence after = model.encode(2, batch);
  for (int i = 0; i < before.tokens->value.numel(); ++i)
    EXPECT_EQ(before.tokens->value[static_cast<std::size_t>(i)],
              after.tokens->value[static_cast<std::size_t>(i)]);
}

TEST_P(BothBackbones, FullLossStackRuns) {
  // Both backbone kinds satisfy the same token contract end to end.
  MultiModalModel model(tiny_cfg(GetParam()), 23);
  Rng rng(8);
  Var batch0 = constant(random_tensor({3, 1, 16, 16}, rng));
  Var batch1 = constant(random_tensor({3, 1, 16, 16}, rng));
  std::map<int, Var> inputs{{0, batch0}, {1, batch1}};
  std::map<int, Var> recons;
  std::map<int, Embeddings> embeds;
  for (const auto& [m, x] : inputs) {
    TokenSequence seq = model.encode(m, x);
    embeds[m] = model.project(seq, m);
    recons[m] = model.decode(seq.patches(), m);
  }
  auto out = total_loss(inputs, recons, embeds, model.temps(), LossWeights{}, {1});
  EXPECT_TRUE(std::isfinite(out.report.total));
  EXPECT_GT(out.report.total, 0.0);
  EXPECT_NEAR(out.report.total, out.report.rec + out.report.cls + out.report.pat + out.report.intra,
              1e-9);
  backward(out.value);
  // gradients reach the temperatures
  EXPECT_FALSE(model.temps().alpha_cls->grad.empty());
}

TEST(Models, EncodeValidatesInputShape) {
  MultiModalModel model(tiny_cfg(BackboneKind::Transformer), 29);
  EXPECT_THROW(model.encode(0, constant(Tensor::zeros({2, 1, 8, 8}))), std::invalid_argument);
}

TEST(Models, ConfigValidation) {
  BackboneConfig bad;
  bad.side = 60;
  bad.patch = 8;
  EXPECT_THROW(bad.validate(), std::invalid_argument);

  BackboneConfig conv_bad;
  conv_bad.kind = BackboneKind::Conv;
  conv_bad.side = 48;
  conv_bad.patch = 6;  // not a power of two
  EXPECT_THROW(conv_bad.validate(), std::invalid_argument);

  BackboneConfig heads_bad;
  heads_bad.d_model = 10;
  heads_bad.heads = 4;
  EXPECT_THROW(heads_bad.validate(), std::invalid_argument);
}

TEST(Models, ParameterEnumerationIsStable) {
  MultiModalModel a(tiny_cfg(BackboneKind::Transformer), 31);
  MultiModalModel b(tiny_cfg(BackboneKind::Transformer), 31);
  auto pa = a.parameters();
  auto pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_EQ(pa[i].modality, pb[i].modality);
    ASSERT_EQ(pa[i].var->value.numel(), pb[i].var->value.numel());
    for (int j = 0; j < pa[i].var->value.numel(); ++j)
      EXPECT_EQ(pa[i].var->value[static_cast<std::size_t>(j)],
                pb[i].var->value[static_cast<std::size_t>(j)]);  // same seed, same init
  }
}

TEST(Models, SeparateSeedsGiveDifferentInit) {
  MultiModalModel a(tiny_cfg(BackboneKind::Conv), 1);
  MultiModalModel b(tiny_cfg(BackboneKind::Conv), 2);
  auto pa = a.parameters();
  auto pb = b.parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size() && !any_diff; ++i)
    for (int j = 0; j < pa[i].var->value.numel(); ++j)
      if (pa[i].var->value[static_cast<std::size_t>(j)] !=
          pb[i].var->value[static_cast<std::size_t>(j)]) {
        any_diff = true;
        break;
      }
  EXPECT_TRUE(any_diff);
}

}  // namespace
