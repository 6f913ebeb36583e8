#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "ldl/training.hpp"

using namespace ldl;

namespace {

Dataset synth_split(std::size_t n, std::size_t train, std::uint64_t seed) {
  SynthConfig cfg;
  cfg.n = n;
  cfg.seed = seed;
  return split(synth_dataset(cfg), train, n - train, seed);
}

TrainConfig quick_config() {
  TrainConfig c = TrainConfig::desk_default();
  c.batch_size = 16;
  c.max_iter = 50;
  c.eval_every = 10;
  c.lr_step = 1000;
  return c;
}

}  // namespace

TEST(LearningRate, StepSchedule) {
  const TrainConfig c;
  EXPECT_DOUBLE_EQ(lr_at(c, 0), 0.001);
  EXPECT_DOUBLE_EQ(lr_at(c, 3999), 0.001);
  EXPECT_NEAR(lr_at(c, 4000), 1e-4, 1e-18);
  EXPECT_NEAR(lr_at(c, 16999), 1e-7, 1e-20);
  EXPECT_THROW(lr_at(c, 17000), ConfigurationError);
}

TEST(LearningRate, PlateauCountIsCeilingOfIterationsOverStep) {
  for (auto [max_iter, step] : {std::pair<std::size_t, std::size_t>{17000, 4000}, {400, 150}, {300, 100}, {7, 10}, {1, 1}}) {
    TrainConfig c;
    c.max_iter = max_iter;
    c.lr_step = step;
    std::size_t plateaus = 1;
    for (std::size_t i = 1; i < max_iter; ++i)
      if (lr_at(c, i) != lr_at(c, i - 1)) ++plateaus;
    EXPECT_EQ(plateaus, (max_iter + step - 1) / step) << max_iter << "/" << step;
  }
}

TEST(TrainConfig, DefaultsAndValidation) {
  const TrainConfig c;
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.weight_decay, 0.0005);
  EXPECT_EQ(c.max_iter, 17000u);
  EXPECT_NO_THROW(c.validate());
  TrainConfig bad = c;
  bad.lr_factor = 1.0;
  EXPECT_THROW(bad.validate(), ConfigurationError);
  bad = c;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ConfigurationError);
  bad = c;
  bad.base_lr = -1;
  EXPECT_THROW(bad.validate(), ConfigurationError);
}

TEST(Sgd, PlainStep) {
  ParameterStore<double> s;
  auto& p = s.add("w", Tensor<double>({1}, {1.0}));
  p.grad[0] = 0.5;
  TrainConfig c;
  c.momentum = 0;
  c.weight_decay = 0;
  c.base_lr = 0.1;
  SgdOptimizer<double> opt(s);
  opt.step(s, c, 0);
  EXPECT_DOUBLE_EQ(s.at("w").value[0], 0.95);
}

TEST(Sgd, ZeroGradientIsFixedPoint) {
  ParameterStore<double> s;
  s.add("w", Tensor<double>({3}, {1, -2, 3}), ParamRole::conv_weight);
  TrainConfig c;
  c.weight_decay = 0;
  SgdOptimizer<double> opt(s);
  for (std::size_t i = 0; i < 5; ++i) opt.step(s, c, i);
  EXPECT_EQ(s.at("w").value, Tensor<double>({3}, {1, -2, 3}));
}

TEST(Sgd, MomentumAccumulates) {
  ParameterStore<double> s;
  auto& p = s.add("w", Tensor<double>({1}, {0.0}));
  TrainConfig c;
  c.weight_decay = 0;
  c.base_lr = 0.1;
  c.momentum = 0.5;
  SgdOptimizer<double> opt(s);
  p.grad[0] = 1.0;
  opt.step(s, c, 0);
  EXPECT_DOUBLE_EQ(s.at("w").value[0], -0.1);
  opt.step(s, c, 1);
  EXPECT_DOUBLE_EQ(s.at("w").value[0], -0.1 + (0.5 * -0.1 - 0.1));
}

TEST(Sgd, LayerMultipliers) {
  const TrainConfig c;
  EXPECT_NEAR(effective_lr(c, ParamRole::dense_weight, 0), 0.01, 1e-15);
  EXPECT_NEAR(effective_lr(c, ParamRole::dense_bias, 0), 0.01, 1e-15);
  EXPECT_NEAR(effective_lr(c, ParamRole::conv_weight, 0), 0.001, 1e-15);
  EXPECT_NEAR(effective_decay(c, ParamRole::dense_weight), 0.05, 1e-15);
  EXPECT_NEAR(effective_decay(c, ParamRole::conv_weight), 0.0005, 1e-15);
  EXPECT_EQ(effective_decay(c, ParamRole::bn_gamma), 0.0);
  EXPECT_EQ(effective_decay(c, ParamRole::bn_beta), 0.0);
}

TEST(Sgd, WeightDecayUsesLayerValues) {
  ParameterStore<double> s;
  s.add("conv", Tensor<double>({1}, {2.0}), ParamRole::conv_weight);
  s.add("fc", Tensor<double>({1}, {2.0}), ParamRole::dense_weight);
  s.add("gamma", Tensor<double>({1}, {2.0}), ParamRole::bn_gamma);
  TrainConfig c;
  c.momentum = 0;
  SgdOptimizer<double> opt(s);
  opt.step(s, c, 0);
  EXPECT_NEAR(s.at("conv").value[0], 2.0 - 0.001 * 0.0005 * 2.0, 1e-15);
  EXPECT_NEAR(s.at("fc").value[0], 2.0 - 0.01 * 0.05 * 2.0, 1e-15);
  EXPECT_EQ(s.at("gamma").value[0], 2.0);
}

TEST(Sgd, NonFiniteGradientNamesIterationAndParameter) {
  ParameterStore<float> s;
  s.add("stage1.block1.conv1.weight", Tensor<float>({2}, 1.0f), ParamRole::conv_weight).grad[1] = std::nanf("");
  SgdOptimizer<float> opt(s);
  try {
    opt.step(s, TrainConfig{}, 42);
    FAIL();
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("42"), std::string::npos) << msg;
    EXPECT_NE(msg.find("stage1.block1.conv1.weight"), std::string::npos) << msg;
  }
}

TEST(Sgd, SmallStepDecreasesBatchLoss) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    NetworkSpec spec;
    spec.stage_widths = {4, 4, 8, 8};
    spec.stem_width = 4;
    spec.input_size = 16;
    Network<double> net(spec);
    net.init_weights(seed);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor<double> images({4, 3, 16, 16});
    for (auto& v : images.data()) v = u(rng);
    Tensor<double> target({4, 5});
    for (std::size_t i = 0; i < 4; ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < 5; ++j) sum += target.at(i, j) = u(rng);
      for (std::size_t j = 0; j < 5; ++j) target.at(i, j) /= sum;
    }
    auto loss_value = [&](bool backward) {
      auto g = net.graph();
      Var loss = ad::euclidean_loss(g, net.forward(g, images, Mode::train).distribution, target, false);
      if (backward) {
        net.parameters().zero_grad();
        g.backward(loss);
      }
      return g.value(loss)[0];
    };
    const double before = loss_value(true);
    TrainConfig c;
    c.momentum = 0;
    c.weight_decay = 0;
    c.base_lr = 1e-5;
    SgdOptimizer<double> opt(net.parameters());
    opt.step(net.parameters(), c, 0);
    EXPECT_LT(loss_value(false), before) << "seed " << seed;
  }
}

TEST(MetricsLog, HeaderAndStrictOrder) {
  MetricsLog log;
  log.append({10, 0.5, 0.6, 0.9, 0.2, 0.1});
  EXPECT_THROW(log.append({10, 0.5, 0.6, 0.9, 0.2, 0.1}), ConfigurationError);
  log.append({20, 0.25, 0.3, std::nullopt, 0.1, 0.05});
  const auto csv = log.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "iter,train_loss,test_loss,test_pc,test_kl,test_chebyshev");
  EXPECT_NE(csv.find("10,0.5,0.6,0.9,0.2,0.1\n"), std::string::npos) << csv;
  EXPECT_NE(csv.find("20,0.25,0.3,nan,0.1,0.05\n"), std::string::npos) << csv;
}

TEST(Summarize, OraclePredictor) {
  std::vector<SamplePrediction> preds;
  const std::vector<ScoreDistribution> targets{ScoreDistribution({0.1, 0.2, 0.3, 0.2, 0.2}),
                                               ScoreDistribution({0, 0, 1, 0, 0}),
                                               ScoreDistribution({0.5, 0.5, 0, 0, 0})};
  for (const auto& t : targets) {
    SamplePrediction p;
    p.target = p.pred_distribution = t;
    p.true_mean = p.pred_mean = weighted_mean(t, ScoreScale{});
    preds.push_back(p);
  }
  const auto ev = summarize(preds);
  ASSERT_TRUE(ev.pc.has_value());
  EXPECT_NEAR(*ev.pc, 1.0, 1e-12);
  EXPECT_NEAR(ev.mean_kl, 0.0, 1e-12);
  EXPECT_EQ(ev.mean_chebyshev, 0.0);
}

TEST(Summarize, OffsetPredictionsStillCorrelatePerfectly) {
  std::vector<SamplePrediction> preds;
  for (double m : {1.5, 2.25, 3.0, 4.75}) {
    SamplePrediction p;
    p.target = p.pred_distribution = ScoreDistribution::point_mass(5, 0);
    p.true_mean = m;
    p.pred_mean = m + 0.5;
    preds.push_back(p);
  }
  EXPECT_NEAR(*summarize(preds).pc, 1.0, 1e-12);
}

TEST(Evaluate, UniformPredictorReportsUndefinedCorrelation) {
  auto ds = synth_split(40, 30, 3);
  Network<float> net(NetworkSpec::desk_default());
  net.init_weights(1);
  net.parameters().at("fc.weight").value.fill(0);
  const auto ev = evaluate(net, ds, ds.test);
  EXPECT_FALSE(ev.pc.has_value());
  EXPECT_FALSE(ev.pc_error.empty());
  EXPECT_EQ(ev.predictions.size(), 10u);
  for (const auto& p : ev.predictions) EXPECT_NEAR(p.pred_mean, 3.0, 1e-5);
}

TEST(Evaluate, CheckpointOverloadMatchesNetwork) {
  auto ds = synth_split(40, 30, 4);
  Network<float> net(NetworkSpec::desk_default());
  net.init_weights(2);
  const auto a = evaluate(net, ds, ds.test);
  const auto b = evaluate(make_checkpoint(net), ds, ds.test);
  EXPECT_EQ(a.pc, b.pc);
  EXPECT_EQ(a.mean_kl, b.mean_kl);
}

TEST(Train, SmokeRunReducesLoss) {
  const auto ds = synth_split(64, 48, 5);
  const auto res = train(ds, NetworkSpec::desk_default(), quick_config());
  ASSERT_EQ(res.log.records.size(), 5u);
  EXPECT_LT(res.log.records.back().train_loss, res.log.records.front().train_loss);
  EXPECT_EQ(res.checkpoint.iteration, 50u);
}

TEST(Train, SameSeedGivesIdenticalLogAndCheckpoint) {
  const auto ds = synth_split(64, 48, 6);
  auto cfg = quick_config();
  cfg.max_iter = 20;
  cfg.seed = 9;
  const auto a = train(ds, NetworkSpec::desk_default(), cfg);
  const auto b = train(ds, NetworkSpec::desk_default(), cfg);
  EXPECT_EQ(a.log.to_csv(), b.log.to_csv());
  EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint));
  cfg.seed = 10;
  EXPECT_NE(train(ds, NetworkSpec::desk_default(), cfg).log.to_csv(), a.log.to_csv());
}

TEST(Train, KlAgainstUniformTargetsStartsAtZero) {
  SynthConfig sc;
  sc.n = 20;
  auto base = synth_dataset(sc);
  for (auto& s : base.samples) s = make_sample(s.image, ScoreDistribution({0.2, 0.2, 0.2, 0.2, 0.2}), base.scale);
  const auto ds = split(base, 16, 4, 1);
  auto cfg = quick_config();
  cfg.loss = LossKind::kl;
  cfg.zero_init_head = true;
  cfg.max_iter = 1;
  cfg.eval_every = 1;
  const auto res = train(ds, NetworkSpec::desk_default(), cfg);
  EXPECT_NEAR(res.log.records.at(0).train_loss, 0.0, 1e-6);
}

TEST(Train, RejectsMismatchesBeforeTraining) {
  auto ds = synth_split(20, 16, 7);
  NetworkSpec spec;
  spec.input_size = 16;
  EXPECT_THROW(train(ds, spec, quick_config()), DimensionError);
  NetworkSpec scalar;
  scalar.head = HeadKind::scalar;
  auto cfg = quick_config();
  cfg.loss = LossKind::kl;
  EXPECT_THROW(train(ds, scalar, cfg), ConfigurationError);
  ds.test.clear();
  EXPECT_THROW(train(ds, NetworkSpec::desk_default(), quick_config()), ConfigurationError);
}

TEST(Train, DivergenceAbortsWithNumericalError) {
  const auto ds = synth_split(40, 32, 8);
  auto cfg = quick_config();
  cfg.base_lr = 1e30;
  EXPECT_THROW(train(ds, NetworkSpec::desk_default(), cfg), NumericalError);
}

TEST(Train, ScalarHeadRegressionRuns) {
  const auto ds = synth_split(64, 48, 9);
  NetworkSpec spec;
  spec.head = HeadKind::scalar;
  auto cfg = quick_config();
  cfg.loss = LossKind::euclidean_sq;
  cfg.max_iter = 20;
  const auto res = train(ds, spec, cfg);
  EXPECT_EQ(res.log.records.size(), 2u);
  const auto ev = evaluate(res.checkpoint, ds, ds.test, LossKind::euclidean_sq);
  for (const auto& p : ev.predictions) {
    std::size_t mass = 0;
    for (double v : p.pred_distribution.degrees()) mass += v == 1.0;
    EXPECT_EQ(mass, 1u);
  }
}

TEST(Train, AugmentationExpandsTrainingSet) {
  const auto ds = synth_split(30, 20, 10);
  auto cfg = quick_config();
  cfg.augmentation_factor = 3;
  cfg.max_iter = 5;
  cfg.eval_every = 5;
  EXPECT_NO_THROW(train(ds, NetworkSpec::desk_default(), cfg));
}
