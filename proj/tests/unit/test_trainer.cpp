#include "mnarrl/trainer.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <numeric>

namespace mnarrl::train {
namespace {

using testing::TempDir;

TrainConfig quick_config(int s1, int s2, int s3) {
  TrainConfig c;
  c.stage1_epochs = s1;
  c.stage2_epochs = s2;
  c.stage3_epochs = s3;
  c.batch_size = 16;
  c.validation_every = 1;
  c.validation_fqe.iterations = 3;
  c.validation_fqe.widths = {16};
  c.validation_fqe.batch_size = 64;
  c.entropy_states = 64;
  return c;
}

void zero_mlp(const nn::Mlp& mlp) {
  nn::ParameterList list;
  mlp.register_parameters("m", list);
  for (const auto& item : list.items()) {
    ad::Var v = item.var;
    v.mutable_value().setZero();
  }
}

std::vector<model::PreparedEpisode> prepared_split(const sim::Cohort& c, const model::ModelBundle& b,
                                                   sim::Split split) {
  return model::prepare_episodes(c.episodes, c.indices(split), b);
}

TEST(EntropyMonitor, SteadyEntropyIsHealthy) {
  const std::vector<double> h(20, 2.0);
  const auto d = entropy_monitor(h, 1e-3, 3.0, {});
  EXPECT_FALSE(d.collapse);
}

TEST(EntropyMonitor, AbsoluteCollapseRollsBackToLastHealthyEpoch) {
  const std::vector<double> h{2.0, 1.8, 1.6, 0.4};
  const auto d = entropy_monitor(h, 1e-3, 3.0, {});
  EXPECT_TRUE(d.collapse);
  EXPECT_EQ(d.rollback_epoch, 2);
  EXPECT_DOUBLE_EQ(d.new_lr, 5e-4);
  EXPECT_DOUBLE_EQ(d.new_beta, 4.5);
}

TEST(EntropyMonitor, RelativeDropWithinWindow) {
  const std::vector<double> h{2.0, 1.5, 0.9};
  const auto d = entropy_monitor(h, 1e-3, 3.0, {});
  EXPECT_TRUE(d.collapse);  // 0.9 < 0.5 * 2.0 is false; 0.9 < (1 - 0.5) * 2.0 = 1.0 is true
  EXPECT_EQ(d.rollback_epoch, 1);
  // a peak outside the window does not count
  std::vector<double> old{2.0};
  for (int i = 0; i < 12; ++i) old.push_back(1.2);
  old.push_back(0.9);
  EXPECT_FALSE(entropy_monitor(old, 1e-3, 3.0, {}).collapse);
}

TEST(EntropyMonitor, NoHealthyEpochGivesMinusOne) {
  const std::vector<double> h{0.9, 0.3};
  const auto d = entropy_monitor(h, 1e-3, 3.0, {});
  EXPECT_TRUE(d.collapse);
  EXPECT_EQ(d.rollback_epoch, -1);
}

TEST(EarlyStopper, FiresExactlyAtPatience) {
  EarlyStopper s(3);
  EXPECT_FALSE(s.update(1.0));
  EXPECT_TRUE(s.improved());
  EXPECT_FALSE(s.update(0.5));
  EXPECT_FALSE(s.update(1.0));  // ties do not improve
  EXPECT_TRUE(s.update(0.9));
  EXPECT_EQ(s.stale(), 3);
  EXPECT_DOUBLE_EQ(s.best(), 1.0);
  EarlyStopper t(2);
  t.update(0.0);
  t.update(-1.0);
  EXPECT_FALSE(t.update(0.5));  // improvement resets the count
  EXPECT_EQ(t.stale(), 0);
}

TEST(Trainer, ConfigValidation) {
  EXPECT_NO_THROW(TrainConfig{}.validate());
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.entropy.relative_drop = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.rl.tau = 0.2;
  EXPECT_THROW(c.validate(), std::exception);
}

TEST(Trainer, OneEpochPerStageWritesThreeStageCheckpoints) {
  TempDir dir("train_small");
  const auto cohort = testing::tiny_cohort(50, 31);
  const auto r = run_training(cohort, testing::tiny_model(), quick_config(1, 1, 1), dir.path());
  for (const char* name : {"stage1.ckpt", "stage2.ckpt", "stage3.ckpt"}) {
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "checkpoints" / name)) << name;
  }
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "metrics.jsonl"));
  EXPECT_EQ(r.metrics.size(), 3u);
  EXPECT_EQ(r.encoder_checksum_before_stage2, r.encoder_checksum_after_stage2);
  EXPECT_GT(r.max_clipped_grad_norm, 0.0);
  EXPECT_LE(r.max_clipped_grad_norm, 1.0 + 1e-6);
  EXPECT_TRUE(r.best_validation_fqe.has_value());
}

TEST(Trainer, EncoderFrozenThroughStageTwoButNotStageThree) {
  const auto cohort = testing::tiny_cohort(50, 32);
  auto cfg = quick_config(1, 3, 0);
  const auto a = run_training(cohort, testing::tiny_model(), cfg);
  EXPECT_EQ(a.encoder_checksum_before_stage2, a.encoder_checksum_after_stage2);
  EXPECT_EQ(a.bundle.representation_parameters().checksum(), a.encoder_checksum_after_stage2);
  cfg.stage3_epochs = 1;
  cfg.validation_every = 100;  // no best-snapshot restore
  const auto b = run_training(cohort, testing::tiny_model(), cfg);
  EXPECT_NE(b.bundle.representation_parameters().checksum(), b.encoder_checksum_after_stage2);
}

TEST(Trainer, TrainingIsDeterministic) {
  const auto cohort = testing::tiny_cohort(40, 33);
  const auto a = run_training(cohort, testing::tiny_model(), quick_config(1, 1, 1));
  const auto b = run_training(cohort, testing::tiny_model(), quick_config(1, 1, 1));
  EXPECT_EQ(a.bundle.all_parameters().checksum(), b.bundle.all_parameters().checksum());
  EXPECT_EQ(a.metrics, b.metrics);
}

TEST(Trainer, StageOneLossDropsOverTwoHundredSteps) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto cohort = testing::tiny_cohort(64, 40 + seed);
    auto bundle = testing::tiny_bundle(cohort, seed);
    const auto eps = prepared_split(cohort, bundle, sim::Split::kTrain);
    std::vector<const model::PreparedEpisode*> batch;
    for (const auto& e : eps) batch.push_back(&e);
    auto params = bundle.representation_parameters();
    nn::AdamW opt(params, {1e-3, 0.9, 0.999, 1e-8, 1e-5});
    Rng rng(seed);
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 200; ++step) {
      const auto fwd = model::forward(bundle, batch, {false, true, &rng});
      const auto loss = model::representation_loss(bundle, batch, fwd, model::LossWeights{});
      if (step < 10) first += loss.total.scalar() / 10.0;
      if (step >= 190) last += loss.total.scalar() / 10.0;
      params.zero_grad();
      ad::backward(loss.total);
      nn::clip_grad_norm(params, 1.0);
      opt.step();
    }
    EXPECT_LE(last, 0.8 * first) << "seed " << seed << " first " << first << " last " << last;
  }
}

TEST(Collapse, PosteriorEqualToPriorHasNoActiveDims) {
  const auto cohort = testing::tiny_cohort(30, 50);
  auto bundle = testing::tiny_bundle(cohort);
  zero_mlp(bundle.dynamics.prior);
  zero_mlp(bundle.dynamics.posterior);
  const auto eps = prepared_split(cohort, bundle, sim::Split::kTrain);
  const auto d = collapse_diagnostics(bundle, eps, 256, 1);
  EXPECT_NEAR(d.mean_kl, 0.0, 1e-12);
  EXPECT_EQ(d.active_dims, 0);
  EXPECT_EQ(d.latent_dims, bundle.config.latent);
  EXPECT_NEAR(d.mutual_information, 0.0, 1e-9);
}

TEST(Collapse, TrainedRepresentationKeepsMostDimsActive) {
  const auto cohort = testing::tiny_cohort(120, 51);
  auto cfg = quick_config(25, 0, 0);
  const auto r = run_training(cohort, testing::tiny_model(), cfg);
  const auto eps = prepared_split(cohort, r.bundle, sim::Split::kTrain);
  const auto d = collapse_diagnostics(r.bundle, eps, 512, 2);
  EXPECT_GT(d.active_dims, r.bundle.config.latent / 2) << d.kl_per_dim;
  EXPECT_GT(d.mutual_information, 0.0);
  const auto again = collapse_diagnostics(r.bundle, eps, 512, 2);
  EXPECT_EQ(d.mutual_information, again.mutual_information);
  EXPECT_EQ(d.kl_per_dim, again.kl_per_dim);
}

TEST(Collapse, MutualInformationProxyExamples) {
  // identical posteriors carry no information
  const Matrix mu = Matrix::Zero(50, 2), sd = Matrix::Ones(50, 2);
  EXPECT_NEAR(mutual_information_proxy(mu, sd, 50, 1), 0.0, 1e-12);
  // well-separated narrow posteriors approach log N
  Matrix far(8, 1);
  for (int i = 0; i < 8; ++i) far(i, 0) = 100.0 * i;
  EXPECT_NEAR(mutual_information_proxy(far, Matrix::Constant(8, 1, 0.1), 8, 1), std::log(8.0), 1e-6);
}

TEST(Trainer, ForcedCollapseHalvesLrAndRaisesBeta) {
  const auto cohort = testing::tiny_cohort(40, 60);
  auto cfg = quick_config(1, 3, 0);
  cfg.patience = 100;
  TrainHooks hooks;
  hooks.entropy_override = [](int stage, int epoch, double) {
    return stage == 2 && epoch == 1 ? 0.3 : 2.0;
  };
  const auto r = run_training(cohort, testing::tiny_model(), cfg, {}, {}, hooks);
  EXPECT_EQ(r.rollbacks, 1);
  EXPECT_DOUBLE_EQ(r.final_beta, cfg.rl.beta * 1.5);
  bool found = false;
  for (const auto& m : r.metrics) {
    if (!m.contains("event")) continue;
    found = true;
    EXPECT_EQ(m.at("stage").get<int>(), 2);
    EXPECT_EQ(m.at("epoch").get<int>(), 1);
    EXPECT_EQ(m.at("event").at("rollback_epoch").get<int>(), 0);
    EXPECT_DOUBLE_EQ(m.at("event").at("lr_after").get<double>(), cfg.stage2_lr * 0.5);
    EXPECT_DOUBLE_EQ(m.at("event").at("beta_after").get<double>(), cfg.rl.beta * 1.5);
  }
  EXPECT_TRUE(found);
  // the epoch after the rollback runs at the reduced rate
  for (const auto& m : r.metrics) {
    if (m.at("stage").get<int>() == 2 && m.at("epoch").get<int>() == 2) {
      EXPECT_DOUBLE_EQ(m.at("lr").get<double>(), cfg.stage2_lr * 0.5);
    }
  }
}

TEST(Trainer, RollbackBudgetIsRespected) {
  const auto cohort = testing::tiny_cohort(40, 61);
  auto cfg = quick_config(1, 6, 0);
  cfg.patience = 100;
  cfg.entropy.max_rollbacks = 2;
  TrainHooks hooks;
  hooks.entropy_override = [](int, int epoch, double) { return epoch == 0 ? 2.0 : 0.1; };
  const auto r = run_training(cohort, testing::tiny_model(), cfg, {}, {}, hooks);
  EXPECT_EQ(r.rollbacks, 2);
  EXPECT_DOUBLE_EQ(r.final_beta, cfg.rl.beta * 1.5 * 1.5);
}

TEST(Trainer, AblationFlagsToggleOneMechanism) {
  const auto cohort = testing::tiny_cohort(30, 70);
  const auto full = testing::tiny_bundle(cohort);
  auto group = [](const model::ModelBundle& b) {
    nn::ParameterList enc, fus, dyn, dec, rl;
    b.encoder.register_parameters("e", enc);
    b.fusion.register_parameters("f", fus);
    b.dynamics.register_parameters("d", dyn);
    b.decoders.register_parameters("r", dec);
    b.heads.register_parameters("h", rl);
    return std::vector<std::uint64_t>{enc.checksum(), fus.checksum(), dyn.checksum(),
                                      dec.checksum(), rl.checksum()};
  };
  const auto base = group(full);
  struct Case {
    std::function<void(model::ModelConfig&)> flip;
    std::size_t module;
  };
  const std::vector<Case> cases{
      {[](model::ModelConfig& c) { c.mnar_features = false; }, 0},
      {[](model::ModelConfig& c) { c.doc_factor = false; }, 1},
      {[](model::ModelConfig& c) { c.text_channel = false; }, 1},
      {[](model::ModelConfig& c) { c.action_conditioning = false; }, 2},
  };
  const auto eps = prepared_split(cohort, full, sim::Split::kTrain);
  std::vector<const model::PreparedEpisode*> batch;
  for (const auto& e : eps) batch.push_back(&e);
  const auto ref = model::forward(full, batch, {});
  for (const auto& c : cases) {
    auto cfg = testing::tiny_model();
    c.flip(cfg);
    const auto b = testing::tiny_bundle(cohort, 3, cfg);
    const auto g = group(b);
    for (std::size_t m = 0; m < g.size(); ++m) {
      if (m != c.module) {
        EXPECT_EQ(g[m], base[m]) << "module " << m;
      }
    }
    // the flip is observable: states for the encoder and fusion switches,
    // the prior for action conditioning (states use the posterior)
    const auto fwd = model::forward(b, batch, {});
    const Matrix& got = c.module == 2 ? fwd.prior.back().mean.value() : fwd.state.back().value();
    const Matrix& want = c.module == 2 ? ref.prior.back().mean.value() : ref.state.back().value();
    EXPECT_GT((got - want).cwiseAbs().maxCoeff(), 1e-9) << "module " << c.module;
  }
}

TEST(Trainer, PolicyHelpers) {
  const auto cohort = testing::tiny_cohort(20, 80);
  const auto bundle = testing::tiny_bundle(cohort);
  Rng rng(1);
  const Matrix s = testing::random_matrix(10, bundle.config.hidden, rng);
  const Matrix p = policy_matrix(bundle, s);
  EXPECT_EQ(p.cols(), bundle.data.actions);
  for (int i = 0; i < 10; ++i) EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-12);
  const Matrix uniform = Matrix::Constant(4, 3, 1.0 / 3.0);
  EXPECT_NEAR(mean_entropy(uniform), std::log(3.0), 1e-12);
}

}  // namespace
}  // namespace mnarrl::train
