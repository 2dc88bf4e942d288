#pragma once

// Off-policy evaluation: fitted Q-evaluation, weighted importance sampling
// with effective sample size, percentile bootstrap intervals, and AUROC.

#include "mnarrl/ad.hpp"
#include "mnarrl/nn.hpp"
#include "mnarrl/rng.hpp"

#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

namespace mnarrl::ope {

using ad::Matrix;

// ---- fitted Q-evaluation ----

struct FqeDataset {
  Matrix states;       // [N x d]
  Matrix next_states;  // [N x d]
  std::vector<int> actions;
  Matrix rewards;      // [N x 1]
  Matrix dones;        // [N x 1]
  Matrix discounts;    // [N x 1]
  Matrix next_policy;  // pi(. | s') [N x A]
  Matrix weights;      // [N x 1] regression weights; empty means 1
  Matrix initial_states;  // [n0 x d]
  Matrix initial_policy;  // pi(. | s_0) [n0 x A]
};

class QRegressor {
 public:
  virtual ~QRegressor() = default;
  virtual int action_count() const = 0;
  // Weighted least-squares fit of Q(s_i, a_i) to targets.
  virtual void fit(const Matrix& states, std::span<const int> actions, const Matrix& targets,
                   const Matrix& weights) = 0;
  // Q(s, a) for every action [N x A].
  virtual Matrix predict(const Matrix& states) const = 0;
};

// States are one-hot rows; Q(s, a) is the weighted mean target per cell.
// Cells without data keep their previous value.
class TabularQ : public QRegressor {
 public:
  TabularQ(int states, int actions);
  int action_count() const override { return static_cast<int>(table_.cols()); }
  void fit(const Matrix& states, std::span<const int> actions, const Matrix& targets,
           const Matrix& weights) override;
  Matrix predict(const Matrix& states) const override;
  const Matrix& table() const { return table_; }

 private:
  static int index_of(const Eigen::Ref<const Eigen::RowVectorXd>& row);
  Matrix table_;
};

// MLP on [s; onehot(a)], warm-started across FQE iterations.
class NeuralQ : public QRegressor {
 public:
  struct Options {
    std::vector<int> widths = {256, 256};
    int epochs_per_fit = 2;
    int batch_size = 256;
    double lr = 1e-3;
    double grad_clip = 1.0;
  };
  NeuralQ(int state_dim, int actions, const Options& options, std::uint64_t seed);
  int action_count() const override { return actions_; }
  void fit(const Matrix& states, std::span<const int> actions, const Matrix& targets,
           const Matrix& weights) override;
  Matrix predict(const Matrix& states) const override;

 private:
  int actions_;
  Options options_;
  nn::Mlp net_;
  nn::ParameterList params_;
  nn::AdamW optimizer_;
  Rng rng_;
};

struct FqeConfig {
  int iterations = 50;
  double tolerance = 0.0;  // stop early once max |Q_k - Q_{k-1}| on the data <= tolerance
  double divergence_margin = 1.0;
};

struct FqeResult {
  double value = 0.0;              // mean over initial states of E_{a~pi} Q(s_0, a)
  Eigen::VectorXd initial_values;  // per initial state
  int iterations = 0;
  bool converged = false;
};

class FqeDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Iterates Q <- r + gamma (1 - d) E_{a'~pi} Q(s', a'). Throws FqeDivergence
// when |Q| exceeds max|r| / (1 - max discount) + margin.
FqeResult fqe(const FqeDataset& data, QRegressor& q, const FqeConfig& config);

// Per-state values from a fitted regressor.
Eigen::VectorXd state_values(const QRegressor& q, const Matrix& states, const Matrix& policy);

// ---- tabular oracle ----

struct TabularMdp {
  int states = 0;
  int actions = 0;
  std::vector<Matrix> transition;  // per action [S x S], rows sum to 1 (or less: termination)
  Matrix reward;                   // [S x A]
  double gamma = 0.9;
};

TabularMdp random_mdp(int states, int actions, double gamma, Rng& rng);
Matrix random_policy(int states, int actions, Rng& rng);
// Solves (I - gamma P_pi) V = r_pi.
Eigen::VectorXd evaluate_policy_dp(const TabularMdp& mdp, const Matrix& policy);
// One row per (s, a, s') with weight P(s'|s,a); rows of a state-action pair
// whose transition mass is below 1 get a terminal row carrying the rest.
FqeDataset expected_dataset(const TabularMdp& mdp, const Matrix& policy);

// ---- importance sampling ----

struct LoggedEpisode {
  std::vector<double> target;    // pi(a_h | s_h)
  std::vector<double> behavior;  // pi_beta(a_h | s_h)
  double ret = 0.0;
};

struct WisResult {
  double value = 0.0;
  Eigen::VectorXd weights;
  double ess = 0.0;
};

// Throws std::domain_error when a logged action has zero behavior
// probability, or when every weight is zero.
WisResult wis(std::span<const LoggedEpisode> episodes);

// ---- intervals and ranking ----

struct Interval {
  double point = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

using Estimator = std::function<double(std::span<const int>)>;

// Percentile interval over episode-level resamples (with replacement).
// Resample b draws from its own seed derive_seed(seed, b).
Interval bootstrap_ci(int n, const Estimator& estimator, int n_boot, double alpha,
                      std::uint64_t seed);

// Linear-interpolated empirical quantile of sorted values.
double quantile_sorted(std::span<const double> sorted, double q);

// Mann-Whitney AUROC; tied scores earn half credit.
double auroc(std::span<const double> scores, std::span<const int> labels);

// ---- behavior policy fallback ----

// Softmax regression MLP on states; probabilities floored at `floor` and
// renormalized so importance weights stay finite.
Matrix fit_behavior_policy(const Matrix& states, std::span<const int> actions, int action_count,
                           int epochs, std::uint64_t seed, double floor = 1e-3);

}  // namespace mnarrl::ope
