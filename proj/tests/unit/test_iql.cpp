#include "mnarrl/iql.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace mnarrl::iql {
namespace {

using testing::random_matrix;

Matrix col(std::initializer_list<double> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

TEST(Iql, BootstrapTargetExamples) {
  EXPECT_DOUBLE_EQ(bootstrap_target(col({1.0}), col({1.0}), col({5.0}), 0.99)(0, 0), 1.0);
  EXPECT_NEAR(bootstrap_target(col({0.0}), col({0.0}), col({2.0}), 0.99)(0, 0), 1.98, 1e-12);
  const Matrix r = col({0.0, -1.0, 0.5, 0.0});
  const Matrix d = col({0.0, 1.0, 0.0, 1.0});
  const Matrix v = col({1.5, 3.0, -2.0, 7.0});
  const Matrix y = bootstrap_target(r, d, v, 0.9);
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(y(i, 0), r(i, 0) + 0.9 * (1.0 - d(i, 0)) * v(i, 0), 1e-14);
  }
  const Matrix disc = col({0.81, 0.9, 0.729, 0.5});
  const Matrix y2 = bootstrap_target(r, d, v, disc);
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(y2(i, 0), r(i, 0) + disc(i, 0) * (1.0 - d(i, 0)) * v(i, 0), 1e-14);
  }
}

TEST(Iql, ExpectileWeightIsAsymmetric) {
  EXPECT_DOUBLE_EQ(expectile_weight(0.3, 0.7), 0.7);
  EXPECT_NEAR(expectile_weight(-0.3, 0.7), 0.3, 1e-15);
  EXPECT_DOUBLE_EQ(expectile_weight(1.0, 0.5), expectile_weight(-1.0, 0.5));
}

TEST(Iql, ValueLossVanishesWhenQEqualsV) {
  Rng rng(1);
  const Matrix q = random_matrix(7, 1, rng);
  Var v = ad::parameter(q);
  EXPECT_DOUBLE_EQ(value_loss(q, v, 0.7).scalar(), 0.0);
}

TEST(Iql, ValueLossMatchesWeightedSquares) {
  const Matrix q = col({1.0, -1.0});
  Var v = ad::parameter(col({0.0, 0.0}));
  // (0.7 * 1 + 0.3 * 1) / 2
  EXPECT_NEAR(value_loss(q, v, 0.7).scalar(), 0.5, 1e-15);
}

double expectile_objective(const Matrix& q, double v, double tau) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const double a = q(i, 0) - v;
    s += expectile_weight(a, tau) * a * a;
  }
  return s / static_cast<double>(q.rows());
}

double golden_section(const Matrix& q, double tau) {
  double lo = q.minCoeff(), hi = q.maxCoeff();
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  for (int it = 0; it < 200; ++it) {
    const double a = hi - g * (hi - lo), b = lo + g * (hi - lo);
    if (expectile_objective(q, a, tau) < expectile_objective(q, b, tau)) {
      hi = b;
    } else {
      lo = a;
    }
  }
  return 0.5 * (lo + hi);
}

double fit_constant_value(const Matrix& q, double tau) {
  Var param = ad::parameter(Matrix::Zero(1, 1));
  nn::ParameterList list;
  list.add("v", param);
  nn::AdamW::Options opt;
  opt.lr = 0.02;
  opt.weight_decay = 0.0;
  nn::AdamW adam(list, opt);
  const Var ones = ad::constant(Matrix::Ones(q.rows(), 1));
  for (int step = 0; step < 3000; ++step) {
    list.zero_grad();
    ad::backward(value_loss(q, ad::matmul(ones, param), tau));
    adam.step();
  }
  return param.value()(0, 0);
}

TEST(Iql, ExpectileRecoveryMatchesOracle) {
  for (std::uint64_t seed : {3u, 4u}) {
    Rng rng(seed);
    Matrix q = random_matrix(300, 1, rng);
    q = q.array().exp().matrix();  // skewed
    for (double tau : {0.7, 0.9}) {
      EXPECT_NEAR(fit_constant_value(q, tau), golden_section(q, tau), 1e-2)
          << "seed " << seed << " tau " << tau;
    }
  }
}

TEST(Iql, SymmetricExpectileIsTheMean) {
  Rng rng(8);
  const Matrix q = random_matrix(200, 1, rng);
  EXPECT_NEAR(fit_constant_value(q, 0.5), q.mean(), 1e-2);
  EXPECT_NEAR(golden_section(q, 0.5), q.mean(), 1e-6);
}

TEST(Iql, QLossOfConstantOffsetIsSquare) {
  Rng rng(2);
  const Matrix y = random_matrix(9, 1, rng);
  Var q1 = ad::parameter(y.array() + 0.5);
  Var q2 = ad::parameter(y.array() - 2.0);
  const auto l = q_loss(q1, q2, y);
  EXPECT_NEAR(l.q1.scalar(), 0.25, 1e-12);
  EXPECT_NEAR(l.q2.scalar(), 4.0, 1e-12);
}

TEST(Iql, CriticLossesAreIndependent) {
  Rng rng(2);
  const Matrix y = random_matrix(5, 1, rng);
  Var q1 = ad::parameter(random_matrix(5, 1, rng));
  Var q2 = ad::parameter(random_matrix(5, 1, rng));
  const auto l = q_loss(q1, q2, y);
  ad::backward(l.q1);
  EXPECT_TRUE(q1.has_grad());
  EXPECT_TRUE(!q2.has_grad() || q2.grad().isZero());
}

TEST(Iql, PolicyLossWeights) {
  Var logits = ad::parameter(Matrix::Zero(2, 3));
  const std::vector<int> a{0, 2};
  Matrix w;
  const double nll = policy_loss(logits, a, Matrix::Zero(2, 1), 3.0, 20.0, &w).scalar();
  EXPECT_NEAR(nll, std::log(3.0), 1e-12);
  EXPECT_DOUBLE_EQ(w(0, 0), 1.0);

  const Matrix adv = col({30.0, 3.0});  // A / beta = 10 and 1
  const double l = policy_loss(logits, a, adv, 3.0, 20.0, &w).scalar();
  EXPECT_DOUBLE_EQ(w(0, 0), 20.0);
  EXPECT_NEAR(w(1, 0), std::exp(1.0), 1e-12);
  EXPECT_NEAR(l, (20.0 + std::exp(1.0)) * std::log(3.0) / 2.0, 1e-12);
}

TEST(Iql, PolicyWeightsStayInRange) {
  Rng rng(5);
  Var logits = ad::parameter(random_matrix(200, 4, rng));
  std::vector<int> a(200);
  for (int i = 0; i < 200; ++i) a[i] = i % 4;
  const Matrix adv = random_matrix(200, 1, rng, 20.0);
  Matrix w;
  policy_loss(logits, a, adv, 1.0, 20.0, &w);
  EXPECT_GT(w.minCoeff(), 0.0);
  EXPECT_LE(w.maxCoeff(), 20.0);
}

TEST(Iql, PolyakUpdate) {
  Rng rng(6);
  const Matrix o0 = random_matrix(3, 2, rng), t0 = random_matrix(3, 2, rng);
  auto make = [](const Matrix& m) {
    nn::ParameterList l;
    l.add("p", ad::parameter(m));
    return l;
  };
  auto online = make(o0);
  auto target = make(t0);
  polyak_update(target, online, 0.0);
  EXPECT_EQ(target.items()[0].var.value(), t0);
  polyak_update(target, online, 0.005);
  polyak_update(target, online, 0.005);
  const Matrix expect = o0 + 0.995 * 0.995 * (t0 - o0);
  EXPECT_NEAR((target.items()[0].var.value() - expect).cwiseAbs().maxCoeff(), 0.0, 1e-14);
  polyak_update(target, online, 1.0);
  EXPECT_EQ(target.items()[0].var.value(), o0);
}

TEST(Iql, TargetValueStartsAsCopy) {
  Rng rng(7);
  HeadDims d;
  d.state = 4;
  d.actions = 3;
  d.widths = {8};
  RLHeads heads(d, rng);
  const Matrix s = random_matrix(5, 4, rng);
  EXPECT_EQ(heads.v(ad::constant(s)).value(), heads.v_target(ad::constant(s)).value());
  nn::ParameterList online, target;
  heads.register_parameters("h", online);
  heads.register_target("h", target);
  for (const auto& t : target.items()) {
    for (const auto& o : online.items()) EXPECT_NE(t.var.node().get(), o.var.node().get());
  }
}

TEST(Iql, EntropyExamples) {
  EXPECT_NEAR(policy_entropy(Eigen::RowVectorXd::Constant(9, 1.0 / 9.0)), 2.1972245773, 1e-9);
  Eigen::RowVectorXd one_hot = Eigen::RowVectorXd::Zero(9);
  one_hot(4) = 1.0;
  EXPECT_DOUBLE_EQ(policy_entropy(one_hot), 0.0);
}

struct SelectFixture {
  belief::DynamicsDims dims;
  belief::DynamicsParams dynamics;
  nn::Mlp policy;
  Matrix phi, mu;

  explicit SelectFixture(std::uint64_t seed) {
    Rng rng(seed);
    dims.latent = 3;
    dims.hidden = 5;
    dims.static_features = 2;
    dims.actions = 4;
    dims.action_embed = 2;
    dims.widths = {6};
    dynamics = belief::DynamicsParams(dims, rng);
    policy = nn::Mlp({dims.hidden, 8, dims.actions}, rng);
    phi = random_matrix(1, dims.hidden, rng);
    mu = random_matrix(1, dims.latent, rng);
  }
};

TEST(Iql, SelectActionProbsSumToOne) {
  SelectFixture f(11);
  Rng rng(1);
  for (auto mode : {SelectMode::kSample, SelectMode::kArgmax, SelectMode::kMeanLatent}) {
    const auto s = select_action(f.phi, f.mu, Matrix::Ones(1, 3), f.dynamics, f.policy, 16, mode,
                                 rng);
    EXPECT_NEAR(s.probs.sum(), 1.0, 1e-6);
    EXPECT_GE(s.action, 0);
    EXPECT_LT(s.action, 4);
  }
}

TEST(Iql, NarrowBeliefMatchesMeanLatent) {
  SelectFixture f(12);
  Rng rng(2);
  const Matrix floor = Matrix::Constant(1, 3, f.dims.sigma_floor);
  const auto a = select_action(f.phi, f.mu, floor, f.dynamics, f.policy, 1, SelectMode::kArgmax, rng);
  const auto b =
      select_action(f.phi, f.mu, floor, f.dynamics, f.policy, 1, SelectMode::kMeanLatent, rng);
  EXPECT_LT(0.5 * (a.probs - b.probs).cwiseAbs().sum(), 1e-3);
  EXPECT_EQ(a.action, b.action);
}

TEST(Iql, SampleCountAgreesWithinMonteCarloError) {
  SelectFixture f(13);
  Rng rng(3);
  const Matrix wide = Matrix::Constant(1, 3, 2.0);
  // per-draw spread from single-sample calls
  Eigen::RowVectorXd m1 = Eigen::RowVectorXd::Zero(4), m2 = Eigen::RowVectorXd::Zero(4);
  for (int i = 0; i < 2000; ++i) {
    const auto p = select_action(f.phi, f.mu, wide, f.dynamics, f.policy, 1, SelectMode::kArgmax, rng).probs;
    m1 += p;
    m2 += p.cwiseProduct(p);
  }
  m1 /= 2000.0;
  m2 /= 2000.0;
  const Eigen::RowVectorXd sd = (m2 - m1.cwiseProduct(m1)).cwiseMax(0.0).cwiseSqrt();
  const auto a = select_action(f.phi, f.mu, wide, f.dynamics, f.policy, 256, SelectMode::kArgmax, rng);
  const auto b = select_action(f.phi, f.mu, wide, f.dynamics, f.policy, 4096, SelectMode::kArgmax, rng);
  for (int k = 0; k < 4; ++k) {
    const double se = sd(k) * std::sqrt(1.0 / 256 + 1.0 / 4096);
    EXPECT_LE(std::abs(a.probs(k) - b.probs(k)), 4.0 * se + 1e-12) << k;
  }
}

TEST(Iql, SelectActionRejectsBadInput) {
  SelectFixture f(14);
  Rng rng(4);
  const Matrix sd = Matrix::Ones(1, 3);
  EXPECT_THROW(select_action(Matrix::Zero(2, 5), f.mu, sd, f.dynamics, f.policy, 4,
                             SelectMode::kArgmax, rng),
               std::invalid_argument);
  EXPECT_THROW(select_action(f.phi, f.mu, sd, f.dynamics, f.policy, 0, SelectMode::kSample, rng),
               std::invalid_argument);
}

TEST(Iql, SampleModeFollowsDistribution) {
  SelectFixture f(15);
  Rng rng(5);
  const Matrix sd = Matrix::Ones(1, 3);
  std::vector<int> counts(4, 0);
  Eigen::RowVectorXd probs;
  for (int i = 0; i < 4000; ++i) {
    Rng inner(100);  // same latent draws every call
    auto s = select_action(f.phi, f.mu, sd, f.dynamics, f.policy, 32, SelectMode::kMeanLatent, inner);
    probs = s.probs;
    std::discrete_distribution<int> d(probs.data(), probs.data() + 4);
    ++counts[d(rng)];
  }
  for (int k = 0; k < 4; ++k) {
    const double p = probs(k);
    EXPECT_NEAR(counts[k] / 4000.0, p, 4.0 * std::sqrt(p * (1 - p) / 4000.0) + 1e-9);
  }
}

// Two states, two actions, deterministic. Value iteration gives
// Q(1, .) = (1, 0), Q(0, .) = (0.9, 0.5); greedy picks action 0 in both.
TEST(Iql, TabularIqlRecoversGreedyPolicy) {
  const int n = 4;
  Matrix states(n, 2), next_states(n, 2);
  states << 1, 0, 1, 0, 0, 1, 0, 1;
  next_states << 0, 1, 1, 0, 1, 0, 1, 0;
  const std::vector<int> actions{0, 1, 0, 1};
  const Matrix rewards = col({0.0, 0.5, 1.0, 0.0});
  const Matrix dones = col({0.0, 1.0, 1.0, 1.0});
  const double gamma = 0.9;

  Var q1 = ad::parameter(Matrix::Zero(2, 2));
  Var q2 = ad::parameter(Matrix::Constant(2, 2, 0.1));
  Var v = ad::parameter(Matrix::Zero(2, 1));
  Var logits = ad::parameter(Matrix::Zero(2, 2));
  nn::ParameterList list;
  list.add("q1", q1);
  list.add("q2", q2);
  list.add("v", v);
  list.add("pi", logits);
  nn::AdamW::Options opt;
  opt.lr = 0.02;
  opt.weight_decay = 0.0;
  nn::AdamW adam(list, opt);
  const Var s = ad::constant(states);
  RLConfig rl;
  rl.tau = 0.9;
  for (int step = 0; step < 4000; ++step) {
    list.zero_grad();
    const Matrix y = bootstrap_target(rewards, dones, next_states * v.value(), gamma);
    Var qa1 = ad::pick(ad::matmul(s, q1), actions);
    Var qa2 = ad::pick(ad::matmul(s, q2), actions);
    const auto ql = q_loss(qa1, qa2, y);
    const Matrix q_min = qa1.value().cwiseMin(qa2.value());
    Var vs = ad::matmul(s, v);
    Var vl = value_loss(q_min, vs, rl.tau);
    Var pl = policy_loss(ad::matmul(s, logits), actions, q_min - vs.value(), 1.0, 100.0);
    ad::backward(ad::add(ad::add(ql.q1, ql.q2), ad::add(vl, pl)));
    adam.step();
  }
  const Matrix q = q1.value().cwiseMin(q2.value());
  EXPECT_NEAR(q(1, 0), 1.0, 2e-2);
  EXPECT_NEAR(q(1, 1), 0.0, 2e-2);
  EXPECT_NEAR(v.value()(1, 0), 0.9, 2e-2);  // 0.9-expectile of {1, 0}
  EXPECT_NEAR(q(0, 0), gamma * 0.9, 2e-2);
  EXPECT_NEAR(q(0, 1), 0.5, 2e-2);
  Eigen::Index a0, a1;
  logits.value().row(0).maxCoeff(&a0);
  logits.value().row(1).maxCoeff(&a1);
  EXPECT_EQ(a0, 0);
  EXPECT_EQ(a1, 0);
}

TEST(Iql, ConfigValidation) {
  RLConfig ok;
  EXPECT_NO_THROW(ok.validate());
  auto bad = [](auto mutate) {
    RLConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), std::exception);
  };
  bad([](RLConfig& c) { c.tau = 0.5; });
  bad([](RLConfig& c) { c.tau = 1.0; });
  bad([](RLConfig& c) { c.beta = 0.0; });
  bad([](RLConfig& c) { c.w_max = 0.5; });
  bad([](RLConfig& c) { c.tau_target = 1.5; });
  bad([](RLConfig& c) { c.gamma = 1.0; });
}

}  // namespace
}  // namespace mnarrl::iql
