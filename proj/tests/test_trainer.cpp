#include "solarchip/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "solarchip/archive.hpp"

using namespace solarchip;

namespace {

BackboneConfig small_cfg(BackboneKind kind = BackboneKind::Transformer) {
  BackboneConfig cfg;
  cfg.kind = kind;
  cfg.side = 32;
  cfg.patch = 8;  // L = 16
  cfg.d_model = 12;
  cfg.d_ctr = 8;
  cfg.depth = 1;
  cfg.heads = 2;
  return cfg;
}

TrainConfig small_train(int steps, std::uint64_t seed = 5) {
  TrainConfig t;
  t.seed = seed;
  t.steps = steps;
  t.batch = 4;
  t.modality_sample = 2;
  return t;
}

std::vector<SolarSample> prepared_samples(int n, int side = 32, std::uint64_t seed = 3) {
  GeneratedArchive arc = generate_archive(seed, n, side);
  std::vector<SolarSample> out;
  for (const auto& s : arc.samples) out.push_back(signed_log(s));
  return out;
}

TEST(TrainStep, ZeroLambdasLeaveHeadsAndTemperaturesUntouched) {
  TrainConfig tcfg = small_train(1);
  tcfg.weights.lambda1 = tcfg.weights.lambda2 = tcfg.weights.lambda3 = 0.0;
  TrainState st = init_state(small_cfg(), tcfg);
  auto batch = prepared_samples(4);

  std::map<std::string, std::vector<double>> head_values;
  for (const auto& p : st.model.parameters())
    if (p.role == ParamRole::ClsHead || p.role == ParamRole::ImgHead ||
        p.role == ParamRole::Temperature)
      head_values[p.name] =
          std::vector<double>(p.var->value.data(), p.var->value.data() + p.var->value.numel());

  LossReport r = train_step(st, batch);
  EXPECT_EQ(r.cls, 0.0);
  EXPECT_EQ(r.total, r.rec);

  bool saw_decoder_grad = false;
  for (const auto& p : st.model.parameters()) {
    if (p.role == ParamRole::ClsHead || p.role == ParamRole::ImgHead ||
        p.role == ParamRole::Temperature) {
      // exactly zero gradient: values must be bit-identical after the update
      const auto& before = head_values[p.name];
      for (int i = 0; i < p.var->value.numel(); ++i)
        ASSERT_EQ(p.var->value[static_cast<std::size_t>(i)], before[static_cast<std::size_t>(i)])
            << p.name;
      if (!p.var->grad.empty())
        for (int i = 0; i < p.var->grad.numel(); ++i)
          ASSERT_EQ(p.var->grad[static_cast<std::size_t>(i)], 0.0);
    }
    if (p.role == ParamRole::Decoder && !p.var->grad.empty()) {
      for (int i = 0; i < p.var->grad.numel(); ++i)
        if (p.var->grad[static_cast<std::size_t>(i)] != 0.0) saw_decoder_grad = true;
    }
  }
  EXPECT_TRUE(saw_decoder_grad);
}

TEST(TrainStep, DeterministicStreams) {
  auto run = [&] {
    TrainState st = init_state(small_cfg(), small_train(3, 11));
    auto batch = prepared_samples(4);
    std::vector<LossReport> reports;
    for (int i = 0; i < 3; ++i) reports.push_back(train_step(st, batch));
    return reports;
  };
  auto a = run();
  auto b = run();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].total, b[i].total);
    EXPECT_EQ(a[i].rec, b[i].rec);
    EXPECT_EQ(a[i].sampled, b[i].sampled);
  }
}

TEST(TrainStep, RejectsTinyBatchAndRawDomain) {
  TrainState st = init_state(small_cfg(), small_train(1));
  auto batch = prepared_samples(4);
  std::vector<SolarSample> one(batch.begin(), batch.begin() + 1);
  EXPECT_THROW(train_step(st, one), std::invalid_argument);

  GeneratedArchive raw = generate_archive(3, 2, 32);
  EXPECT_THROW(train_step(st, raw.samples), std::invalid_argument);
}

TEST(TrainStep, NonFiniteLossNamesTheTerm) {
  TrainState st = init_state(small_cfg(), small_train(1));
  auto batch = prepared_samples(4);
  // poison one decoder weight so reconstruction blows up
  for (const auto& p : st.model.parameters())
    if (p.role == ParamRole::Decoder) {
      p.var->value[0] = std::nan("");
      break;
    }
  try {
    train_step(st, batch);
    FAIL() << "expected abort";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("reconstruction"), std::string::npos);
  }
}

TEST(Fit, ZeroStepsGivesEmptyHistory) {
  GeneratedArchive arc = generate_archive(3, 6, 32);
  FitResult r = fit(small_cfg(), small_train(0), arc.samples);
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(r.state.step, 0);
}

TEST(Fit, HistoryLengthEqualsSteps) {
  GeneratedArchive arc = generate_archive(3, 6, 32);
  FitResult r = fit(small_cfg(), small_train(5), arc.samples);
  EXPECT_EQ(r.history.size(), 5u);
  for (std::size_t i = 0; i < r.history.size(); ++i)
    EXPECT_EQ(r.history[i].step, static_cast<std::int64_t>(i));
}

TEST(Fit, AugmentationIsSharedAcrossModalitiesWithinSample) {
  GeneratedArchive arc = generate_archive(3, 6, 32);
  // key: (step, sample slot) -> augs seen across modalities
  std::map<std::pair<std::int64_t, int>, std::vector<GeomAug>> seen;
  AugHook hook = [&](std::int64_t step, int slot, int modality, const GeomAug& aug) {
    (void)modality;
    seen[{step, slot}].push_back(aug);
  };
  FitResult r = fit(small_cfg(), small_train(3), arc.samples, "", hook);
  (void)r;
  ASSERT_FALSE(seen.empty());
  bool any_nonidentity = false;
  for (const auto& [key, augs] : seen) {
    ASSERT_EQ(augs.size(), static_cast<std::size_t>(ModalityId::kCount));
    for (const auto& a : augs) EXPECT_TRUE(a == augs[0]);
    if (!(augs[0] == GeomAug{0, false})) any_nonidentity = true;
  }
  EXPECT_TRUE(any_nonidentity);  // the augmentation stream actually varies
}

TEST(Fit, OverfitRecOnFixedBatchDropsTenfold) {
  // 300 steps on a fixed 4-sample toy batch; reconstruction must fall below
  // a tenth of its initial value, decreasing at every recorded checkpoint.
  // All bands are active so the rec term covers the same set every step.
  TrainConfig tcfg = small_train(1, 17);
  tcfg.weights.lambda1 = tcfg.weights.lambda2 = tcfg.weights.lambda3 = 0.0;
  tcfg.modality_sample = 10;
  tcfg.lr = 1e-2;
  TrainState st = init_state(small_cfg(), tcfg);
  auto batch = prepared_samples(4);

  std::vector<double> recorded;
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 300; ++step) {
    LossReport r = train_step(st, batch);
    if (step == 0) first = r.rec;
    last = r.rec;
    if (step % 50 == 0) recorded.push_back(r.rec);
  }
  EXPECT_LT(last, 0.1 * first);
  for (std::size_t i = 1; i < recorded.size(); ++i) EXPECT_LT(recorded[i], recorded[i - 1]);
}

TEST(Trainer, TemperaturesAreLearned) {
  GeneratedArchive arc = generate_archive(5, 12, 32);
  TrainConfig tcfg = small_train(100, 23);
  FitResult r = fit(small_cfg(), tcfg, arc.samples);
  EXPECT_NE(r.state.model.temps().alpha_cls->value[0], 0.0);
  EXPECT_NE(r.state.model.temps().alpha_pat->value[0], 0.0);
  EXPECT_NE(r.state.model.temps().alpha_int->value[0], 0.0);
}

double pinned_batch_total(TrainState& st, const std::vector<SolarSample>& batch) {
  // fixed band set so the evaluation does not consume the rng stream
  std::map<int, Var> inputs, recons;
  std::map<int, Embeddings> embeds;
  for (int m : {0, 1, 2}) {
    Var x = constant(make_batch_tensor(batch, m));
    TokenSequence seq = st.model.encode(m, x);
    embeds[m] = st.model.project(seq, m);
    recons[m] = st.model.decode(seq.patches(), m);
    inputs[m] = x;
  }
  return total_loss(inputs, recons, embeds, st.model.temps(), st.cfg.weights, {1, 2})
      .report.total;
}

TEST(Trainer, CheckpointRoundTripBitExact) {
  namespace fs = std::filesystem;
  const std::string path = fs::temp_directory_path() / "solarchip_ckpt_test.bin";
  GeneratedArchive arc = generate_archive(5, 8, 32);
  FitResult r = fit(small_cfg(), small_train(5, 29), arc.samples);
  auto batch = prepared_samples(4);

  const double before = pinned_batch_total(r.state, batch);
  save_train_state(r.state, path);
  TrainState restored = load_train_state(path, r.state.cfg);
  const double after = pinned_batch_total(restored, batch);
  EXPECT_EQ(before, after);  // bit exact
  fs::remove(path);
}

TEST(Trainer, ResumeReproducesUninterruptedStream) {
  namespace fs = std::filesystem;
  const std::string path = fs::temp_directory_path() / "solarchip_resume_test.bin";
  GeneratedArchive arc = generate_archive(5, 8, 32);
  auto prepared = prepared_samples(8, 32, 5);

  // uninterrupted: 8 steps on a fixed batch sequence driven by state rng
  TrainConfig tcfg = small_train(0, 31);
  TrainState full = init_state(small_cfg(), tcfg);
  std::vector<LossReport> full_reports;
  for (int i = 0; i < 8; ++i) full_reports.push_back(train_step(full, prepared));

  TrainState part = init_state(small_cfg(), tcfg);
  for (int i = 0; i < 4; ++i) train_step(part, prepared);
  save_train_state(part, path);
  TrainState resumed = load_train_state(path, tcfg);
  for (int i = 4; i < 8; ++i) {
    LossReport r = train_step(resumed, prepared);
    EXPECT_EQ(r.total, full_reports[static_cast<std::size_t>(i)].total);
    EXPECT_EQ(r.sampled, full_reports[static_cast<std::size_t>(i)].sampled);
  }
  fs::remove(path);
}

TEST(GradCheck, RecQuadraticIsNearExact) {
  GradCheckSizes sz;
  sz.batch = 2;
  auto report = grad_check(LossSelector::Rec, BackboneKind::Transformer, sz, 1e-6);
  EXPECT_TRUE(report.pass) << report.worst_param << " rel err " << report.max_rel_err;
}

TEST(GradCheck, ClassLossThroughConvBackbone) {
  GradCheckSizes sz;
  auto report = grad_check(LossSelector::Class, BackboneKind::Conv, sz, 1e-4);
  EXPECT_TRUE(report.pass) << report.worst_param << " rel err " << report.max_rel_err;
  EXPECT_GT(report.checked_params, 100);
}

TEST(TrainConfig, Validation) {
  TrainConfig t;
  t.batch = 1;
  EXPECT_THROW(t.validate(), std::invalid_argument);
  t.batch = 2;
  t.modality_sample = 11;
  EXPECT_THROW(t.validate(), std::invalid_argument);
}

}  // namespace
