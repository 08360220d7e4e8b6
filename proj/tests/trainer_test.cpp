// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "teq/corpus.hpp"
#include "teq/errors.hpp"
#include "teq/optim.hpp"
#include "teq/pretrain.hpp"
#include "teq/trainer.hpp"
#include "test_support.hpp"

namespace teq {
namespace {

using testing::centered_probe;
using testing::mean_nll;
using testing::random_scales;
using testing::random_tensor;
using testing::small_config;

constexpr std::size_t kSeq = 16;

/// Small model pretrained long enough that fake quantization hurts it.
const ModelGraph& tiny_pretrained() {
  static const ModelGraph model = [] {
    PretrainConfig cfg;
    cfg.model = small_config();
    cfg.steps = 1500;
    cfg.seq_len = kSeq;
    cfg.seed = 1;
    return pretrain(bytes_to_tokens(synthetic_corpus(200000, 1)), cfg).model;
  }();
  return model;
}

const std::vector<std::int32_t>& calibration() {
  static const std::vector<std::int32_t> tokens = bytes_to_tokens(synthetic_corpus(100000, 2));
  return tokens;
}

WindowBatch one_window(std::size_t index) {
  const std::vector<std::size_t> windows{index};
  return make_window_batch(calibration(), windows, kSeq);
}

TrainConfig tiny_config(std::int64_t steps, int n_bits = 3) {
  TrainConfig cfg;
  cfg.steps = steps;
  cfg.seq_len = kSeq;
  cfg.quant = QuantSpec{n_bits, -1, 0};
  return cfg;
}

double transformed_loss(const ModelGraph& model, const ScaleSet& scales, const WindowBatch& batch,
                        const std::optional<QuantSpec>& quant, FrozenRounding* frozen = nullptr,
                        SteMode ste = SteMode::kStepAware) {
  ag::Tape tape;
  const auto sites = find_fusion_sites(model);
  return transformed_fake_quant_forward(tape, model, sites, scales, batch, quant, false, frozen, 0, ste)
      .loss.value()
      .item();
}

/// Loss in double, for central differences.
double precise_loss(const ModelGraph& model, const ScaleSet& scales, const WindowBatch& batch, const QuantSpec& quant,
                    FrozenRounding* frozen, SteMode ste) {
  ag::Tape tape;
  const auto sites = find_fusion_sites(model);
  const TeqForward fwd = transformed_fake_quant_forward(tape, model, sites, scales, batch, quant, false, frozen, 0, ste);
  return mean_nll(fwd.logits.value(), batch.targets);
}

bool same_weights(const ModelGraph& a, const ModelGraph& b) {
  for (const std::string& name : a.param_names()) {
    if (!bitwise_equal(a.param(name), b.param(name))) return false;
  }
  return true;
}

TEST(InitScales, OnesAndInverseSqrt) {
  const auto sites = find_fusion_sites(build_model(ModelConfig{}, 0));
  ASSERT_EQ(sites.size(), 4u);
  const ScaleSet ones = init_scales(sites, InitStrategy::kOnes);
  const ScaleSet inv = init_scales(sites, InitStrategy::kInvSqrtCin);
  for (const FusionSite& site : sites) {
    ASSERT_EQ(site.channel_count, 64u);
    for (float v : ones.at(site.id).data()) EXPECT_EQ(v, 1.0f);
    for (float v : inv.at(site.id).data()) EXPECT_EQ(v, 0.125f);
  }
  EXPECT_EQ(ones.total_count(), 256u);
  EXPECT_THROW(init_scales(sites, InitStrategy::kAuto), ContractError);
}

TEST(InitScales, ParsesNames) {
  EXPECT_EQ(parse_init_strategy("ones"), InitStrategy::kOnes);
  EXPECT_EQ(parse_init_strategy("inv-sqrt"), InitStrategy::kInvSqrtCin);
  EXPECT_EQ(parse_init_strategy("auto"), InitStrategy::kAuto);
  EXPECT_THROW(parse_init_strategy("zeros"), UsageError);
  EXPECT_EQ(parse_ste_mode("identity"), SteMode::kIdentity);
  EXPECT_EQ(parse_ste_mode("step-aware"), SteMode::kStepAware);
  EXPECT_THROW(parse_ste_mode("straight"), UsageError);
}

TEST(TransformedForward, OnesWithoutQuantizationEqualsPlainLoss) {
  const ModelGraph& model = tiny_pretrained();
  const ScaleSet ones = init_scales(find_fusion_sites(model), InitStrategy::kOnes);
  for (std::size_t w : {0u, 7u, 33u}) {
    const WindowBatch batch = one_window(w);
    EXPECT_EQ(transformed_loss(model, ones, batch, std::nullopt), fake_quant_loss(model, batch, std::nullopt));
  }
}

TEST(TransformedForward, OnesAtFourBitsEqualsRtnLoss) {
  const ModelGraph& model = tiny_pretrained();
  const ScaleSet ones = init_scales(find_fusion_sites(model), InitStrategy::kOnes);
  const QuantSpec spec{4, -1, 0};
  for (std::size_t w : {0u, 7u, 33u}) {
    const WindowBatch batch = one_window(w);
    const double rtn = fake_quant_loss(model, batch, spec);
    EXPECT_EQ(transformed_loss(model, ones, batch, spec, nullptr, SteMode::kStepAware), rtn);
    EXPECT_EQ(transformed_loss(model, ones, batch, spec, nullptr, SteMode::kIdentity), rtn);
  }
}

TEST(TransformedForward, RandomScalesLeaveFloatLossUnchanged) {
  const ModelGraph& model = tiny_pretrained();
  const auto sites = find_fusion_sites(model);
  Rng rng(5);
  const WindowBatch batch = one_window(3);
  const double reference = fake_quant_loss(model, batch, std::nullopt);
  for (int trial = 0; trial < 10; ++trial) {
    const ScaleSet s = random_scales(sites, rng, 0.25f, 4.0f);
    EXPECT_NEAR(transformed_loss(model, s, batch, std::nullopt), reference, 1e-4 * std::abs(reference));
  }
}

TEST(TransformedForward, NonFiniteLossIsDivergence) {
  ModelGraph model = tiny_pretrained();
  model.param("lm_head.weight")[0] = std::numeric_limits<float>::infinity();
  const ScaleSet ones = init_scales(find_fusion_sites(model), InitStrategy::kOnes);
  try {
    transformed_loss(model, ones, one_window(0), QuantSpec{4, -1, 0});
    FAIL() << "expected TrainingDivergenceError";
  } catch (const TrainingDivergenceError& e) {
    EXPECT_EQ(e.step(), 0u);
  }
}

// Central differences over one site's scale vector, with rounding decisions
// frozen at the evaluation point so the loss is smooth in the scales.
// Normwise error: max |analytic - numeric| / max(|analytic|, |numeric|).
double scale_gradient_error(SteMode ste, const ScaleSet& at, const std::string& site_id) {
  const ModelGraph& model = tiny_pretrained();
  const auto sites = find_fusion_sites(model);
  const std::vector<std::size_t> windows{11, 12, 13, 14, 15, 16, 17, 18};
  const WindowBatch batch = make_window_batch(calibration(), windows, kSeq);
  const QuantSpec spec{3, -1, 0};

  ag::Tape tape;
  TeqForward fwd = transformed_fake_quant_forward(tape, model, sites, at, batch, spec, true, nullptr, 0, ste);
  tape.backward(fwd.loss);
  const Tensor analytic = tape.grad_or_zeros(fwd.scales.at(site_id));
  FrozenRounding frozen;
  transformed_loss(model, at, batch, spec, &frozen, ste);

  constexpr float kStep = 1e-3f;
  double diff = 0.0;
  double scale = 1e-6;
  for (std::size_t j = 0; j < analytic.numel(); ++j) {
    ScaleSet plus = at;
    ScaleSet minus = at;
    plus.by_site.at(site_id)[j] += kStep;
    minus.by_site.at(site_id)[j] -= kStep;
    const double realized = double(plus.at(site_id)[j]) - double(minus.at(site_id)[j]);
    const double numeric = (precise_loss(model, plus, batch, spec, &frozen, ste) -
                            precise_loss(model, minus, batch, spec, &frozen, ste)) /
                           realized;
    diff = std::max(diff, std::abs(double(analytic[j]) - numeric));
    scale = std::max({scale, std::abs(double(analytic[j])), std::abs(numeric)});
  }
  return diff / scale;
}

class ScaleGradient : public ::testing::TestWithParam<SteMode> {};

TEST_P(ScaleGradient, MatchesFiniteDifferencesAtOnes) {
  const auto sites = find_fusion_sites(tiny_pretrained());
  EXPECT_LE(scale_gradient_error(GetParam(), init_scales(sites, InitStrategy::kOnes), "blocks.0.ln1"), 1e-2);
}

TEST_P(ScaleGradient, MatchesFiniteDifferencesAtRandomScales) {
  const auto sites = find_fusion_sites(tiny_pretrained());
  Rng rng(9);
  EXPECT_LE(scale_gradient_error(GetParam(), random_scales(sites, rng, 0.8f, 1.25f), "blocks.0.ln1"), 1e-2);
}

INSTANTIATE_TEST_SUITE_P(SteModes, ScaleGradient, ::testing::Values(SteMode::kStepAware, SteMode::kIdentity),
                         [](const auto& info) { return info.param == SteMode::kIdentity ? "Identity" : "StepAware"; });

TEST(StepAwareFakeQuant, FrozenSurrogateMatchesFiniteDifferences) {
  Rng rng(4);
  for (int group_size : {-1, 4}) {
    const QuantSpec spec{3, group_size, 0};
    const Tensor x = random_tensor({8, 5}, rng);
    const FrozenGrid grid = freeze_grid(x, spec);
    const auto f = centered_probe([&](ag::Tape&, ag::Var v) { return frozen_fake_quant(v, spec, grid); }, x, rng);
    EXPECT_LE(ag::finite_diff_check(f, x, 1e-3f).max_rel_error, 1e-3) << "group_size " << group_size;
  }
}

TEST(StepAwareFakeQuant, ForwardMatchesFakeQuantAndSurrogate) {
  Rng rng(6);
  const QuantSpec spec{4, 4, 0};
  const Tensor x = random_tensor({12, 3}, rng);
  ag::Tape tape;
  const ag::Var v = tape.leaf(x, true);
  EXPECT_TRUE(bitwise_equal(fake_quant(v, spec, SteMode::kStepAware).value(), fake_quant_values(x, spec)));
  const Tensor surrogate = frozen_fake_quant(v, spec, freeze_grid(x, spec)).value();
  EXPECT_LE(testing::normwise_rel_diff(surrogate, fake_quant_values(x, spec)), 1e-6);
  EXPECT_THROW(frozen_fake_quant(v, spec, FrozenGrid{Tensor({3, 12}), {}}), DimensionError);
}

TEST(StepAwareFakeQuant, GradientAddsStepTermAtGroupMaximum) {
  // One group [0.5, -1.0, 0.2] at 2 bits: clip 1, step 1.0, codes [1, -1, 0],
  // residual q - w/s = [0.5, 0, -0.2]. With upstream ones the step term is
  // sign(-1.0) / 1 * (0.5 + 0 - 0.2) = -0.3 at the max-abs element.
  const QuantSpec spec{2, -1, 0};
  ag::Tape tape;
  const ag::Var v = tape.leaf(Tensor({3}, std::vector<float>{0.5f, -1.0f, 0.2f}), true);
  tape.backward(ag::sum(fake_quant(v, spec, SteMode::kStepAware)));
  const Tensor g = tape.grad_or_zeros(v);
  EXPECT_FLOAT_EQ(g[0], 1.0f);
  EXPECT_FLOAT_EQ(g[1], 1.0f - 0.3f);
  EXPECT_FLOAT_EQ(g[2], 1.0f);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<float> p{0.5f, 1.0f, 2.0f};
  const std::vector<float> g(3, 0.0f);
  AdamState state;
  adam_step(p, g, state, AdamParams{}, 1e-3f, 1e-5f);
  EXPECT_EQ(p, (std::vector<float>{0.5f, 1.0f, 2.0f}));
  EXPECT_EQ(state.step, 1);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstGradientSign) {
  std::vector<float> p{1.0f, 1.0f, 1.0f};
  const std::vector<float> g{0.3f, -2.0f, 1e-3f};
  AdamState state;
  const float lr = 1e-3f;
  adam_step(p, g, state, AdamParams{0.9f, 0.9f, 1e-8f, 0.0f}, lr);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double expected = 1.0 - lr * g[i] / (std::abs(g[i]) + 1e-8);
    EXPECT_NEAR(p[i], expected, 1e-6);
  }
  EXPECT_EQ(state.m.size(), 3u);
  EXPECT_EQ(state.v.size(), 3u);
}

TEST(Adam, ClampKeepsScalesPositive) {
  std::vector<float> p{1e-4f};
  const std::vector<float> g{1.0f};
  AdamState state;
  adam_step(p, g, state, AdamParams{}, 1.0f, 1e-5f);
  EXPECT_EQ(p[0], 1e-5f);
}

TEST(Adam, LinearDecayEndsAtZero) {
  EXPECT_EQ(linear_decay_lr(1e-3f, 0, 1000), 1e-3f);
  EXPECT_FLOAT_EQ(linear_decay_lr(1e-3f, 500, 1000), 5e-4f);
  EXPECT_EQ(linear_decay_lr(1e-3f, 1000, 1000), 0.0f);
  EXPECT_EQ(linear_decay_lr(1e-3f, 1200, 1000), 0.0f);
  std::vector<float> p{0.7f};
  const std::vector<float> g{5.0f};
  AdamState state;
  adam_step(p, g, state, AdamParams{}, linear_decay_lr(1e-3f, 1000, 1000));
  EXPECT_EQ(p[0], 0.7f);
}

TEST(Train, RejectsZeroSteps) {
  EXPECT_THROW(train(tiny_pretrained(), calibration(), tiny_config(0)), ContractError);
  TrainConfig cfg = tiny_config(10);
  cfg.lr = 0.0f;
  EXPECT_THROW(train(tiny_pretrained(), calibration(), cfg), ContractError);
}

TEST(Train, OneStepRunsOneUpdate) {
  const TrainResult r = train(tiny_pretrained(), calibration(), tiny_config(1));
  ASSERT_EQ(r.trace.records.size(), 1u);
  EXPECT_EQ(r.trace.records[0].step, 0);
  EXPECT_EQ(r.trace.records[0].lr, 1e-3f);
  EXPECT_NE(r.scales, init_scales(find_fusion_sites(tiny_pretrained()), InitStrategy::kOnes));
}

TEST(Train, SameSeedIsBitwiseReproducible) {
  const TrainResult a = train(tiny_pretrained(), calibration(), tiny_config(40));
  const TrainResult b = train(tiny_pretrained(), calibration(), tiny_config(40));
  EXPECT_EQ(a.trace, b.trace);
  EXPECT_EQ(a.scales, b.scales);
  TrainConfig other = tiny_config(40);
  other.seed = 1;
  EXPECT_NE(train(tiny_pretrained(), calibration(), other).trace, a.trace);
}

TEST(Train, ModelWeightsStayFrozen) {
  const ModelGraph before = tiny_pretrained();
  train(tiny_pretrained(), calibration(), tiny_config(30));
  EXPECT_TRUE(same_weights(before, tiny_pretrained()));
}

TEST(Train, ExhaustedCalibrationIsDataError) {
  const std::vector<std::int32_t> short_stream(kSeq * 5 + 1, 65);
  EXPECT_THROW(train(tiny_pretrained(), short_stream, tiny_config(6)), DataError);
  EXPECT_NO_THROW(train(tiny_pretrained(), short_stream, tiny_config(5)));
}

TEST(Train, DivergenceCarriesStep) {
  ModelGraph model = tiny_pretrained();
  model.param("lm_head.weight")[3] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(train(model, calibration(), tiny_config(5)), TrainingDivergenceError);
}

TEST(Train, TraceCsvHasOneRowPerStep) {
  const TrainResult r = train(tiny_pretrained(), calibration(), tiny_config(12));
  std::istringstream in(r.trace.to_csv());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,lr,loss");
  std::int64_t rows = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(line.rfind(std::to_string(rows) + ",", 0), 0u) << line;
    ++rows;
  }
  EXPECT_EQ(rows, 12);
}

TEST(Train, TraceStaysFiniteAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig cfg = tiny_config(1000, 4);
    cfg.seed = seed;
    const TrainResult r = train(tiny_pretrained(), calibration(), cfg);
    ASSERT_EQ(r.trace.records.size(), 1000u);
    for (const TraceRecord& rec : r.trace.records) ASSERT_TRUE(std::isfinite(rec.loss)) << "seed " << seed;
    for (const auto& [site, s] : r.scales.by_site) {
      for (float v : s.data()) EXPECT_GE(v, cfg.min_scale);
    }
  }
}

TEST(Train, ThreeBitTrainingLowersCalibrationLoss) {
  const TrainResult r = train(tiny_pretrained(), calibration(), tiny_config(1000));
  EXPECT_LT(r.trace.tail_mean(50), r.trace.head_mean(50));
}

TEST(SelectInit, LowerTailMeanWins) {
  LossTrace ones;
  LossTrace inv;
  for (std::int64_t i = 0; i < 100; ++i) {
    ones.records.push_back({i, 0.0f, 2.0});
    inv.records.push_back({i, 0.0f, i < 50 ? 1.0 : 2.0});
  }
  EXPECT_FALSE(prefer_inv_sqrt(ones, inv, 50));  // equal tails: ones
  inv.records.back().loss = 1.99;
  EXPECT_TRUE(prefer_inv_sqrt(ones, inv, 50));
  EXPECT_FALSE(prefer_inv_sqrt(inv, ones, 50));
}

TEST(SelectInit, ExactTiePicksOnes) {
  // With every consumer weight zero the loss does not depend on the scales,
  // so both runs produce identical traces.
  ModelGraph model = tiny_pretrained();
  const auto sites = find_fusion_sites(model);
  for (const FusionSite& site : sites) {
    for (std::size_t c : site.consumers) {
      Tensor& w = model.layers[c].params.at("weight");
      w = Tensor(w.shape(), 0.0f);
    }
  }
  const TrainResult r = select_init(model, calibration(), tiny_config(60));
  EXPECT_EQ(r.strategy, InitStrategy::kOnes);
  EXPECT_EQ(r.scales, init_scales(sites, InitStrategy::kOnes));
}

TEST(SelectInit, PicksInverseSqrtWhenItsStartIsNearTheGoodTransform) {
  // Fusing s[0] = 30 at every site leaves the float model unchanged but makes
  // input channel 0 dominate every consumer column, so at 3 bits the good
  // transform shrinks s[0] far below the other scales. Adam moves each scale
  // by about lr per step, which covers that distance from 0.25 but not from 1.
  const auto sites = find_fusion_sites(tiny_pretrained());
  ScaleSet outlier = init_scales(sites, InitStrategy::kOnes);
  for (auto& [site, s] : outlier.by_site) s[0] = 30.0f;
  const ModelGraph model = fuse_scales(tiny_pretrained(), outlier);

  TrainConfig cfg = tiny_config(300);
  const TrainResult r = select_init(model, calibration(), cfg);
  EXPECT_EQ(r.strategy, InitStrategy::kInvSqrtCin);
  const TrainResult again = select_init(model, calibration(), cfg);
  EXPECT_EQ(again.strategy, r.strategy);
  EXPECT_EQ(again.scales, r.scales);
  EXPECT_EQ(again.trace, r.trace);

  cfg.init = InitStrategy::kAuto;
  EXPECT_EQ(train(model, calibration(), cfg).strategy, InitStrategy::kInvSqrtCin);
}

}  // namespace
}  // namespace teq
