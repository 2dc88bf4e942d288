#include "mnarrl/ope.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mnarrl::ope {

namespace {

Matrix onehot_rows(std::span<const int> actions, int count) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(actions.size()), count);
  for (std::size_t i = 0; i < actions.size(); ++i) out(static_cast<Eigen::Index>(i), actions[i]) = 1.0;
  return out;
}

std::vector<int> shuffled(int n, Rng& rng) {
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace

// ---- TabularQ ----

TabularQ::TabularQ(int states, int actions) : table_(Matrix::Zero(states, actions)) {}

int TabularQ::index_of(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  Eigen::Index idx = 0;
  row.maxCoeff(&idx);
  return static_cast<int>(idx);
}

void TabularQ::fit(const Matrix& states, std::span<const int> actions, const Matrix& targets,
                   const Matrix& weights) {
  Matrix sum = Matrix::Zero(table_.rows(), table_.cols());
  Matrix mass = Matrix::Zero(table_.rows(), table_.cols());
  for (Eigen::Index i = 0; i < states.rows(); ++i) {
    const int s = index_of(states.row(i));
    const int a = actions[static_cast<std::size_t>(i)];
    const double w = weights.size() ? weights(i, 0) : 1.0;
    sum(s, a) += w * targets(i, 0);
    mass(s, a) += w;
  }
  for (Eigen::Index i = 0; i < table_.size(); ++i) {
    if (mass(i) > 0.0) table_(i) = sum(i) / mass(i);
  }
}

Matrix TabularQ::predict(const Matrix& states) const {
  Matrix out(states.rows(), table_.cols());
  for (Eigen::Index i = 0; i < states.rows(); ++i) out.row(i) = table_.row(index_of(states.row(i)));
  return out;
}

// ---- NeuralQ ----

NeuralQ::NeuralQ(int state_dim, int actions, const Options& options, std::uint64_t seed)
    : actions_(actions), options_(options), rng_(derive_seed(seed, 11)) {
  std::vector<int> widths{state_dim + actions};
  widths.insert(widths.end(), options.widths.begin(), options.widths.end());
  widths.push_back(1);
  Rng init(derive_seed(seed, 12));
  net_ = nn::Mlp(widths, init);
  net_.register_parameters("fqe", params_);
  nn::AdamW::Options o;
  o.lr = options.lr;
  optimizer_ = nn::AdamW(params_, o);
}

void NeuralQ::fit(const Matrix& states, std::span<const int> actions, const Matrix& targets,
                  const Matrix& weights) {
  const int n = static_cast<int>(states.rows());
  const Matrix inputs_all = [&] {
    Matrix m(n, states.cols() + actions_);
    m << states, onehot_rows(actions, actions_);
    return m;
  }();
  for (int epoch = 0; epoch < options_.epochs_per_fit; ++epoch) {
    const auto order = shuffled(n, rng_);
    for (int start = 0; start < n; start += options_.batch_size) {
      const int end = std::min(n, start + options_.batch_size);
      const int m = end - start;
      Matrix x(m, inputs_all.cols()), y(m, 1), w(m, 1);
      for (int i = 0; i < m; ++i) {
        const int r = order[static_cast<std::size_t>(start + i)];
        x.row(i) = inputs_all.row(r);
        y(i, 0) = targets(r, 0);
        w(i, 0) = weights.size() ? weights(r, 0) : 1.0;
      }
      const double total = w.sum();
      if (total <= 0.0) continue;
      params_.zero_grad();
      ad::Var pred = net_(ad::constant(x));
      ad::Var loss = ad::scale(ad::weighted_sum(ad::square(ad::sub(pred, ad::constant(y))), w),
                               1.0 / total);
      ad::backward(loss);
      nn::clip_grad_norm(params_, options_.grad_clip);
      optimizer_.step();
    }
  }
}

Matrix NeuralQ::predict(const Matrix& states) const {
  ad::NoGradGuard no_grad;
  const Eigen::Index n = states.rows();
  Matrix out(n, actions_);
  Matrix x(n, states.cols() + actions_);
  x.leftCols(states.cols()) = states;
  for (int a = 0; a < actions_; ++a) {
    x.rightCols(actions_).setZero();
    x.col(states.cols() + a).setOnes();
    out.col(a) = net_(ad::constant(x)).value().col(0);
  }
  return out;
}

// ---- FQE ----

Eigen::VectorXd state_values(const QRegressor& q, const Matrix& states, const Matrix& policy) {
  return q.predict(states).cwiseProduct(policy).rowwise().sum();
}

FqeResult fqe(const FqeDataset& data, QRegressor& q, const FqeConfig& config) {
  const Eigen::Index n = data.states.rows();
  if (n == 0) throw std::invalid_argument("fqe: empty dataset");
  if (data.next_policy.cols() != q.action_count()) throw std::invalid_argument("fqe: policy width");
  const double r_max = data.rewards.cwiseAbs().maxCoeff();
  const double g_max = data.discounts.maxCoeff();
  if (!(g_max < 1.0)) throw std::invalid_argument("fqe: discount must be < 1");
  const double bound = r_max / (1.0 - g_max) + config.divergence_margin;

  auto taken = [&](const Matrix& table) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = table(i, data.actions[static_cast<std::size_t>(i)]);
    return v;
  };

  FqeResult result;
  Eigen::VectorXd previous = taken(q.predict(data.states));
  for (int k = 0; k < config.iterations; ++k) {
    const Eigen::VectorXd v_next = state_values(q, data.next_states, data.next_policy);
    Matrix targets = data.rewards;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (data.dones(i, 0) == 0.0) targets(i, 0) += data.discounts(i, 0) * v_next(i);
    }
    q.fit(data.states, data.actions, targets, data.weights);
    const Matrix pred = q.predict(data.states);
    const double magnitude = pred.cwiseAbs().maxCoeff();
    if (!std::isfinite(magnitude) || magnitude > bound) {
      throw FqeDivergence("fqe diverged at iteration " + std::to_string(k + 1) + ": |Q| = " +
                          std::to_string(magnitude) + " > bound " + std::to_string(bound));
    }
    result.iterations = k + 1;
    const Eigen::VectorXd current = taken(pred);
    const double change = (current - previous).cwiseAbs().maxCoeff();
    previous = current;
    if (config.tolerance > 0.0 && change <= config.tolerance) {
      result.converged = true;
      break;
    }
  }
  result.initial_values = state_values(q, data.initial_states, data.initial_policy);
  result.value = result.initial_values.mean();
  return result;
}

// ---- tabular oracle ----

TabularMdp random_mdp(int states, int actions, double gamma, Rng& rng) {
  TabularMdp m;
  m.states = states;
  m.actions = actions;
  m.gamma = gamma;
  m.reward = Matrix(states, actions);
  for (Eigen::Index i = 0; i < m.reward.size(); ++i) m.reward(i) = 2.0 * uniform01(rng) - 1.0;
  for (int a = 0; a < actions; ++a) {
    Matrix p(states, states);
    for (int s = 0; s < states; ++s) {
      for (int t = 0; t < states; ++t) p(s, t) = -std::log(1.0 - uniform01(rng));
      const double stay = 1.0 - 0.3 * uniform01(rng);  // remaining mass terminates
      p.row(s) *= stay / p.row(s).sum();
    }
    m.transition.push_back(p);
  }
  return m;
}

Matrix random_policy(int states, int actions, Rng& rng) {
  Matrix p(states, actions);
  for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = -std::log(1.0 - uniform01(rng));
  for (int s = 0; s < states; ++s) p.row(s) /= p.row(s).sum();
  return p;
}

Eigen::VectorXd evaluate_policy_dp(const TabularMdp& mdp, const Matrix& policy) {
  Matrix p_pi = Matrix::Zero(mdp.states, mdp.states);
  Eigen::VectorXd r_pi = Eigen::VectorXd::Zero(mdp.states);
  for (int s = 0; s < mdp.states; ++s) {
    for (int a = 0; a < mdp.actions; ++a) {
      p_pi.row(s) += policy(s, a) * mdp.transition[static_cast<std::size_t>(a)].row(s);
      r_pi(s) += policy(s, a) * mdp.reward(s, a);
    }
  }
  const Matrix lhs = Matrix::Identity(mdp.states, mdp.states) - mdp.gamma * p_pi;
  return lhs.partialPivLu().solve(r_pi);
}

FqeDataset expected_dataset(const TabularMdp& mdp, const Matrix& policy) {
  const Matrix eye = Matrix::Identity(mdp.states, mdp.states);
  std::vector<Eigen::RowVectorXd> s_rows, n_rows;
  std::vector<double> rewards, dones, weights;
  FqeDataset d;
  for (int s = 0; s < mdp.states; ++s) {
    for (int a = 0; a < mdp.actions; ++a) {
      const auto& p = mdp.transition[static_cast<std::size_t>(a)];
      double mass = 0.0;
      for (int t = 0; t < mdp.states; ++t) {
        if (p(s, t) <= 0.0) continue;
        s_rows.push_back(eye.row(s));
        n_rows.push_back(eye.row(t));
        d.actions.push_back(a);
        rewards.push_back(mdp.reward(s, a));
        dones.push_back(0.0);
        weights.push_back(p(s, t));
        mass += p(s, t);
      }
      if (mass < 1.0) {
        s_rows.push_back(eye.row(s));
        n_rows.push_back(eye.row(s));
        d.actions.push_back(a);
        rewards.push_back(mdp.reward(s, a));
        dones.push_back(1.0);
        weights.push_back(1.0 - mass);
      }
    }
  }
  const auto n = static_cast<Eigen::Index>(s_rows.size());
  d.states = Matrix(n, mdp.states);
  d.next_states = Matrix(n, mdp.states);
  d.rewards = Matrix(n, 1);
  d.dones = Matrix(n, 1);
  d.weights = Matrix(n, 1);
  d.next_policy = Matrix(n, mdp.actions);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto u = static_cast<std::size_t>(i);
    d.states.row(i) = s_rows[u];
    d.next_states.row(i) = n_rows[u];
    d.rewards(i, 0) = rewards[u];
    d.dones(i, 0) = dones[u];
    d.weights(i, 0) = weights[u];
    Eigen::Index t = 0;
    n_rows[u].maxCoeff(&t);
    d.next_policy.row(i) = policy.row(t);
  }
  d.discounts = Matrix::Constant(n, 1, mdp.gamma);
  d.initial_states = eye;
  d.initial_policy = policy;
  return d;
}

// ---- WIS ----

WisResult wis(std::span<const LoggedEpisode> episodes) {
  if (episodes.empty()) throw std::invalid_argument("wis: no episodes");
  WisResult r;
  r.weights = Eigen::VectorXd(static_cast<Eigen::Index>(episodes.size()));
  double num = 0.0;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto& ep = episodes[i];
    if (ep.target.size() != ep.behavior.size()) throw std::invalid_argument("wis: length mismatch");
    double w = 1.0;
    for (std::size_t h = 0; h < ep.target.size(); ++h) {
      if (!(ep.behavior[h] > 0.0)) {
        throw std::domain_error("wis: behavior probability is zero on a logged action (episode " +
                                std::to_string(i) + ", step " + std::to_string(h) + ")");
      }
      w *= ep.target[h] / ep.behavior[h];
    }
    r.weights(static_cast<Eigen::Index>(i)) = w;
    num += w * ep.ret;
  }
  const double total = r.weights.sum();
  if (!(total > 0.0)) throw std::domain_error("wis: all importance weights are zero");
  r.value = num / total;
  r.ess = total * total / r.weights.squaredNorm();
  return r;
}

// ---- bootstrap ----

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("quantile: empty");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(sorted.size() - 1, lo + 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

Interval bootstrap_ci(int n, const Estimator& estimator, int n_boot, double alpha,
                      std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("bootstrap: empty sample");
  if (n_boot < 1) throw std::invalid_argument("bootstrap: n_boot >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("bootstrap: alpha in (0,1)");
  std::vector<int> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  Interval ci;
  ci.point = estimator(all);
  std::vector<double> stats(static_cast<std::size_t>(n_boot));
  std::vector<int> sample(static_cast<std::size_t>(n));
  for (int b = 0; b < n_boot; ++b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    std::uniform_int_distribution<int> pick(0, n - 1);
    for (auto& s : sample) s = pick(rng);
    stats[static_cast<std::size_t>(b)] = estimator(sample);
  }
  std::sort(stats.begin(), stats.end());
  ci.lower = quantile_sorted(stats, alpha / 2.0);
  ci.upper = quantile_sorted(stats, 1.0 - alpha / 2.0);
  return ci;
}

// ---- AUROC ----

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auroc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double pos = 0.0, neg = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == 1) {
      pos += 1.0;
      rank_sum += rank[i];
    } else if (labels[i] == 0) {
      neg += 1.0;
    } else {
      throw std::invalid_argument("auroc: labels must be 0/1");
    }
  }
  if (pos == 0.0 || neg == 0.0) throw std::invalid_argument("auroc: needs both classes");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

// ---- behavior cloning ----

Matrix fit_behavior_policy(const Matrix& states, std::span<const int> actions, int action_count,
                           int epochs, std::uint64_t seed, double floor) {
  Rng rng(derive_seed(seed, 21));
  nn::Mlp net({static_cast<int>(states.cols()), 64, action_count}, rng);
  nn::ParameterList params;
  net.register_parameters("bc", params);
  nn::AdamW opt(params, {});
  const int n = static_cast<int>(states.rows());
  for (int e = 0; e < epochs; ++e) {
    const auto order = shuffled(n, rng);
    for (int start = 0; start < n; start += 256) {
      const int end = std::min(n, start + 256);
      Matrix x(end - start, states.cols());
      std::vector<int> a(static_cast<std::size_t>(end - start));
      for (int i = start; i < end; ++i) {
        x.row(i - start) = states.row(order[static_cast<std::size_t>(i)]);
        a[static_cast<std::size_t>(i - start)] = actions[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
      }
      params.zero_grad();
      ad::Var loss = ad::neg(ad::mean(ad::pick(ad::log_softmax_rows(net(ad::constant(x))), a)));
      ad::backward(loss);
      opt.step();
    }
  }
  ad::NoGradGuard no_grad;
  Matrix p = ad::softmax_rows(net(ad::constant(states))).value();
  p = p.cwiseMax(floor);
  for (Eigen::Index i = 0; i < p.rows(); ++i) p.row(i) /= p.row(i).sum();
  return p;
}

}  // namespace mnarrl::ope
