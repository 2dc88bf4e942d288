#pragma once

// Implicit Q-learning heads and losses: double critics on [s; onehot(a)],
// an expectile value function, advantage-weighted policy extraction, and
// action selection marginalizing over the latent belief.

#include "mnarrl/ad.hpp"
#include "mnarrl/belief.hpp"
#include "mnarrl/nn.hpp"

#include <span>
#include <vector>

namespace mnarrl::iql {

using ad::Matrix;
using ad::Var;

struct RLConfig {
  double tau = 0.7;
  double beta = 3.0;
  double w_max = 20.0;
  double tau_target = 0.005;
  double gamma = 0.99;

  void validate() const;
};

struct HeadDims {
  int state = 128;
  int actions = 9;
  std::vector<int> widths = {256, 256};
};

struct RLHeads {
  RLHeads() = default;
  RLHeads(const HeadDims& dims, Rng& rng);

  HeadDims dims;
  nn::Mlp q1, q2;   // [s; onehot(a)] -> 1
  nn::Mlp v;        // s -> 1
  nn::Mlp v_target; // Polyak copy of v
  nn::Mlp policy;   // s -> logits

  // Online parameters (target excluded).
  void register_parameters(const std::string& prefix, nn::ParameterList& list) const;
  void register_target(const std::string& prefix, nn::ParameterList& list) const;
};

Matrix one_hot(std::span<const int> actions, int count);

// Q(s, a) for each row, [B x 1].
Var q_value(const nn::Mlp& q, const Var& state, std::span<const int> actions, int action_count);
// Q(s, a) for every action [B x A], no gradient.
Matrix q_table(const nn::Mlp& q, const Matrix& state, int action_count);

// y = r + gamma * (1 - d) * V_tgt(s').
Matrix bootstrap_target(const Matrix& rewards, const Matrix& dones, const Matrix& next_value,
                        double gamma);
// Discount per row, gamma^{duration}; used by the semi-MDP variant.
Matrix bootstrap_target(const Matrix& rewards, const Matrix& dones, const Matrix& next_value,
                        const Matrix& discounts);

double expectile_weight(double diff, double tau);

// mean(|tau - 1[A < 0]| * A^2) with A = min(Q1, Q2) - V; Q values are
// treated as constants.
Var value_loss(const Matrix& q_min, const Var& v, double tau);

struct QLoss {
  Var q1;
  Var q2;
};
QLoss q_loss(const Var& q1, const Var& q2, const Matrix& target);

// -mean(min(exp(A / beta), w_max) * log pi(a | s)); A enters as a constant.
Var policy_loss(const Var& logits, std::span<const int> actions, const Matrix& advantage,
                double beta, double w_max, Matrix* weights_out = nullptr);

// target <- tau * online + (1 - tau) * target, parameter by parameter.
void polyak_update(const nn::ParameterList& target, const nn::ParameterList& online, double tau);

Matrix policy_probs(const nn::Mlp& policy, const Matrix& state);
double policy_entropy(const Eigen::RowVectorXd& probs);

enum class SelectMode { kSample, kArgmax, kMeanLatent };

struct Selection {
  Eigen::RowVectorXd probs;  // marginal action distribution
  int action = 0;
};

// Averages pi(. | phi + proj(z_i)) over latent draws z_i ~ N(mu, sigma)
// (or uses z = mu in kMeanLatent) and then samples or takes the mode.
Selection select_action(const Matrix& phi, const Matrix& latent_mean, const Matrix& latent_std,
                        const belief::DynamicsParams& dynamics, const nn::Mlp& policy,
                        int n_samples, SelectMode mode, Rng& rng);

}  // namespace mnarrl::iql
