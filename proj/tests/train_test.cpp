#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "deepstack/error.hpp"
#include "deepstack/serialize.hpp"
#include "deepstack/train.hpp"
#include "support/support.hpp"

using namespace deepstack;
using deepstack::testkit::Gen;

namespace {

std::vector<std::vector<float>> weights(const TransformerModel<float>& m) {
  std::vector<std::vector<float>> out;
  for (const auto& e : m.params().entries()) out.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

EngineConfig test_engine(std::uint64_t seed) {
  EngineConfig e;
  e.schedule.peak_lr = 1e-3;
  e.schedule.min_lr = 1e-4;
  e.schedule.warmup_steps = 2;
  e.schedule.total_steps = 20;
  e.seed = seed;
  return e;
}

}  // namespace

TEST(Schedule, GptAnchors) {
  const auto s = TrainSchedule::gpt();
  EXPECT_EQ(lr_at(s, 0), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 1500), 0.75e-4);
  EXPECT_DOUBLE_EQ(lr_at(s, 3000), 1.5e-4);
  EXPECT_NEAR(lr_at(s, 3000 + 297000 / 2), 8.0e-5, 1e-18);
  EXPECT_DOUBLE_EQ(lr_at(s, 300000), 1e-5);
  EXPECT_DOUBLE_EQ(lr_at(s, 900000), 1e-5);
}

TEST(Schedule, BertAnchors) {
  const auto s = TrainSchedule::bert();
  EXPECT_DOUBLE_EQ(lr_at(s, 10000), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(s, 5000), 0.5e-4);
  EXPECT_NEAR(lr_at(s, 10000 + 990000 / 2), 0.5e-4, 1e-18);
  EXPECT_EQ(lr_at(s, 1000000), 0.0);
}

TEST(Schedule, ContinuousAtWarmupAndNonIncreasingAfter) {
  for (const auto& s : {TrainSchedule::gpt(), TrainSchedule::bert()}) {
    EXPECT_NEAR(lr_at(s, s.warmup_steps - 1), lr_at(s, s.warmup_steps), s.peak_lr / s.warmup_steps + 1e-15);
    double prev = lr_at(s, s.warmup_steps);
    for (std::uint64_t k = s.warmup_steps; k <= s.total_steps + 10; k += 997) {
      const double v = lr_at(s, k);
      EXPECT_LE(v, prev + 1e-18);
      prev = v;
    }
  }
}

TEST(Schedule, Validation) {
  TrainSchedule s;
  s.warmup_steps = s.total_steps + 1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = TrainSchedule{};
  s.min_lr = 1.0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Clip, ThreeFourFive) {
  std::vector<std::vector<double>> g{{3.0, 4.0}};
  const auto r = clip_global_norm<double>(g);
  EXPECT_DOUBLE_EQ(r.norm, 5.0);
  EXPECT_TRUE(r.clipped);
  EXPECT_DOUBLE_EQ(g[0][0], 0.6);
  EXPECT_DOUBLE_EQ(g[0][1], 0.8);
}

TEST(Clip, GroupingDoesNotMatterAndSmallNormsStay) {
  std::vector<std::vector<double>> split{{3.0}, {4.0}};
  clip_global_norm<double>(split);
  EXPECT_DOUBLE_EQ(split[0][0], 0.6);
  EXPECT_DOUBLE_EQ(split[1][0], 0.8);
  std::vector<std::vector<double>> small{{0.3, 0.4}};
  EXPECT_FALSE(clip_global_norm<double>(small).clipped);
  EXPECT_EQ(small[0][1], 0.4);
}

TEST(Clip, PostClipNormNeverExceedsCap) {
  Gen gen(1);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::vector<float>> g(gen.size(1, 4));
    for (auto& v : g) {
      for (double x : gen.values(gen.size(1, 30), -50, 50)) v.push_back(static_cast<float>(x));
    }
    clip_global_norm<float>(g);
    double s = 0.0;
    for (const auto& v : g) for (float x : v) s += static_cast<double>(x) * x;
    EXPECT_LE(std::sqrt(s), 1.0 + 1e-6);
  }
}

TEST(Clip, NonFiniteSignalsOverflow) {
  std::vector<std::vector<float>> g{{1.0f, std::numeric_limits<float>::infinity()}};
  const auto r = clip_global_norm<float>(g);
  EXPECT_FALSE(r.finite);
  EXPECT_FALSE(all_finite<float>(g));
}

TEST(Adam, FirstStepHandEvaluated) {
  std::vector<double> p{0.0}, g{1.0}, m{0.0}, v{0.0};
  AdamConfig cfg;
  adam_update<double>(p, g, m, v, 1, 1e-3, cfg, true);
  // m_hat = 1, v_hat = 1: step = lr / (1 + eps).
  EXPECT_NEAR(p[0], -1e-3 / (1.0 + 1e-8), 1e-18);
}

TEST(Adam, ZeroGradientAndDecay) {
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  std::vector<double> p{2.0}, g{0.0}, m{0.0}, v{0.0};
  adam_update<double>(p, g, m, v, 1, 1e-3, cfg, true);
  EXPECT_EQ(p[0], 2.0);
  cfg.weight_decay = 0.01;
  for (std::uint64_t t = 2; t < 5; ++t) adam_update<double>(p, g, m, v, t, 1e-3, cfg, true);
  EXPECT_NEAR(p[0], 2.0 * std::pow(1.0 - 1e-5, 3), 1e-15);
  std::vector<double> q{2.0};
  adam_update<double>(q, g, m, v, 5, 1e-3, cfg, false);
  EXPECT_EQ(q[0], 2.0);
}

TEST(Adam, ZeroLearningRateIsIdentity) {
  Gen gen(2);
  ModelConfig c;
  auto model = build_model<float>(c, 3);
  const auto before = weights(model);
  Adam<float> adam;
  std::vector<std::vector<float>> grads;
  for (const auto& w : before) {
    std::vector<float> g(w.size());
    for (auto& x : g) x = static_cast<float>(gen.real(-1, 1));
    grads.push_back(g);
  }
  adam.step(model.params(), grads, 0.0);
  EXPECT_EQ(weights(model), before);
}

TEST(LossScaler, Transitions) {
  LossScalerConfig cfg;
  cfg.growth_interval = 3;
  LossScaler s(cfg);
  EXPECT_EQ(s.scale(), 65536.0);
  EXPECT_TRUE(s.observe(true));
  EXPECT_TRUE(s.observe(true));
  EXPECT_TRUE(s.observe(true));
  EXPECT_EQ(s.scale(), 131072.0);
  EXPECT_FALSE(s.observe(false));
  EXPECT_EQ(s.scale(), 65536.0);
  EXPECT_EQ(s.good_steps(), 0u);
}

TEST(LossScaler, ThreeOverflows) {
  LossScaler s;
  for (int i = 0; i < 3; ++i) s.observe(false);
  EXPECT_EQ(s.scale(), 8192.0);
}

TEST(LossScaler, UnscalesWithPreUpdateScale) {
  LossScalerConfig cfg;
  cfg.initial_scale = 4.0;
  cfg.growth_interval = 1;
  LossScaler s(cfg);
  std::vector<std::vector<float>> g{{8.0f, -4.0f}};
  EXPECT_TRUE(s.step<float>(g));
  EXPECT_EQ(g[0][0], 2.0f);
  EXPECT_EQ(s.scale(), 8.0);
  std::vector<std::vector<float>> bad{{std::nanf("")}};
  EXPECT_FALSE(s.step<float>(bad));
  EXPECT_EQ(s.scale(), 4.0);
}

TEST(Trainer, LossScalingSkipsOnOverflowAndMatchesUnscaledOtherwise) {
  Gen gen(3);
  const auto c = testkit::tiny_config(Family::decoder_only, gen, 2);
  const TrainBatch batch = testkit::random_batch(c, gen, 2, 6);
  auto plain = build_model<float>(c, 5);
  auto scaled = build_model<float>(c, 5);
  EngineConfig e = test_engine(1);
  Trainer a(plain, e);
  e.use_loss_scaler = true;
  e.scaler.initial_scale = 1024.0;  // power of two: scaling is exact
  Trainer b(scaled, e);
  const auto ma = a.train_step(batch);
  const auto mb = b.train_step(batch);
  EXPECT_FALSE(mb.skipped);
  EXPECT_EQ(ma.loss, mb.loss);
  for (std::size_t i = 0; i < plain.params().size(); ++i) {
    EXPECT_LT(testkit::relative_distance(weights(scaled)[i], weights(plain)[i]), 1e-6);
  }

  e.scaler.initial_scale = 1e300;  // overflows float
  auto over = build_model<float>(c, 5);
  const auto before = weights(over);
  Trainer t(over, e);
  const auto m = t.train_step(batch);
  EXPECT_TRUE(m.skipped);
  EXPECT_EQ(weights(over), before);
  EXPECT_EQ(t.step(), 1u);
}

TEST(Trainer, RecomputeIsBitIdentical) {
  Gen gen(4);
  for (int t = 0; t < 6; ++t) {
    const Family f = std::array{Family::decoder_only, Family::encoder_only,
                                Family::encoder_decoder}[static_cast<std::size_t>(t % 3)];
    auto c = testkit::tiny_config(f, gen, 4);
    c.dropout_p = 0.1;
    const TrainBatch batch = testkit::random_batch(c, gen, 2, 6);
    auto ma = build_model<float>(c, 9);
    auto mb = build_model<float>(c, 9);
    EngineConfig e = test_engine(7);
    Trainer a(ma, e);
    e.recompute = true;
    Trainer b(mb, e);
    for (int k = 0; k < 2; ++k) {
      EXPECT_EQ(a.train_step(batch).loss, b.train_step(batch).loss);
    }
    EXPECT_EQ(weights(ma), weights(mb)) << to_string(f);
  }
}

TEST(Trainer, DataParallelMatchesFullBatch) {
  Gen gen(5);
  for (Family f : {Family::decoder_only, Family::encoder_only, Family::encoder_decoder}) {
    const auto c = testkit::tiny_config(f, gen, 2);
    const TrainBatch batch = testkit::random_batch(c, gen, 4, 6);
    auto full = build_model<float>(c, 1);
    Trainer tf(full, test_engine(3));
    const auto mf = tf.train_step(batch);
    for (std::size_t shards : {1u, 2u, 4u}) {
      auto m = build_model<float>(c, 1);
      Trainer t(m, test_engine(3));
      const auto ms = t.data_parallel_step(batch, shards);
      EXPECT_NEAR(ms.loss, mf.loss, 1e-6 * std::abs(mf.loss));
      const auto wf = weights(full), ws = weights(m);
      for (std::size_t i = 0; i < wf.size(); ++i) {
        EXPECT_LT(testkit::relative_distance(ws[i], wf[i]), 1e-6) << to_string(f) << " " << shards;
      }
      if (shards == 1) EXPECT_EQ(ws, wf);
    }
  }
}

TEST(Trainer, DataParallelRejectsUnevenShards) {
  Gen gen(6);
  const auto c = testkit::tiny_config(Family::decoder_only, gen, 2);
  auto m = build_model<float>(c, 1);
  Trainer t(m, test_engine(1));
  EXPECT_THROW(t.data_parallel_step(testkit::random_batch(c, gen, 3, 4), 2), ConfigError);
}

TEST(Trainer, SameSeedSameTrajectory) {
  Gen gen(7);
  const auto c = testkit::tiny_config(Family::encoder_only, gen, 2);
  std::vector<TrainBatch> batches;
  for (int k = 0; k < 5; ++k) batches.push_back(testkit::random_batch(c, gen, 2, 6));
  std::vector<double> runs[2];
  for (auto& losses : runs) {
    auto m = build_model<float>(c, 4);
    Trainer t(m, test_engine(2));
    for (const auto& b : batches) losses.push_back(t.train_step(b).loss);
  }
  EXPECT_EQ(runs[0], runs[1]);
}

TEST(Trainer, MetricsAreOneJsonLinePerStep) {
  StepMetrics m;
  m.step = 3;
  m.loss = 1.5;
  const std::string line = m.to_json();
  EXPECT_EQ(line.find('\n'), std::string::npos);
  EXPECT_NE(line.find("\"step\":3"), std::string::npos);
}

TEST(Checkpoint, ResumeIsBitIdentical) {
  Gen gen(8);
  const auto c = testkit::tiny_config(Family::decoder_only, gen, 2);
  std::vector<TrainBatch> batches;
  for (int k = 0; k < 4; ++k) batches.push_back(testkit::random_batch(c, gen, 2, 6));
  EngineConfig e = test_engine(5);
  e.use_loss_scaler = true;

  auto straight = build_model<float>(c, 2);
  Trainer ts(straight, e);
  for (const auto& b : batches) ts.train_step(b);

  auto first = build_model<float>(c, 2);
  Trainer t1(first, e);
  t1.train_step(batches[0]);
  t1.train_step(batches[1]);
  std::stringstream ss;
  const TrainerState state = t1.state();
  save_checkpoint(ss, first, &state);
  auto loaded = load_checkpoint(ss);
  ASSERT_TRUE(loaded.trainer.has_value());
  Trainer t2(loaded.model, e);
  t2.restore(*loaded.trainer);
  t2.train_step(batches[2]);
  t2.train_step(batches[3]);
  EXPECT_EQ(weights(loaded.model), weights(straight));
  EXPECT_EQ(t2.step(), 4u);
}

TEST(Checkpoint, RejectsCorruptInput) {
  std::stringstream bad("NOPE");
  EXPECT_THROW(load_checkpoint(bad), InputError);
  ModelConfig c;
  const auto m = build_model<float>(c, 1);
  std::stringstream ss;
  save_checkpoint(ss, m);
  std::string bytes = ss.str();
  bytes.resize(bytes.size() / 2);
  std::stringstream cut(bytes);
  EXPECT_THROW(load_checkpoint(cut), InputError);
}
