#include "mnarrl/evaluate.hpp"

#include "mnarrl/ope.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace mnarrl::eval {

using nlohmann::json;

void EvalConfig::validate() const {
  if (n_bootstrap < 100) throw std::invalid_argument("eval: n_bootstrap must be >= 100");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("eval: alpha in (0, 1)");
  if (fqe.iterations < 1 || fqe.epochs_per_fit < 1 || fqe.batch_size < 1 || !(fqe.lr > 0.0)) {
    throw std::invalid_argument("eval: invalid FQE settings");
  }
  if (bc_epochs < 1) throw std::invalid_argument("eval: bc_epochs >= 1");
  if (mi_samples < 1) throw std::invalid_argument("eval: mi_samples >= 1");
}

json to_json(const MetricRecord& r) {
  json j = {{"name", r.name}, {"value", r.value}, {"config_hash", r.config_hash}, {"seed", r.seed}};
  j["lower"] = r.lower ? json(*r.lower) : json(nullptr);
  j["upper"] = r.upper ? json(*r.upper) : json(nullptr);
  if (!r.extra.empty()) j["extra"] = r.extra;
  return j;
}

MetricRecord metric_from_json(const json& j) {
  MetricRecord r;
  r.name = j.at("name").get<std::string>();
  r.value = j.at("value").get<double>();
  r.config_hash = j.value("config_hash", std::string());
  r.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("lower") && !j.at("lower").is_null()) r.lower = j.at("lower").get<double>();
  if (j.contains("upper") && !j.at("upper").is_null()) r.upper = j.at("upper").get<double>();
  if (j.contains("extra")) r.extra = j.at("extra");
  return r;
}

const MetricRecord* EvalReport::find(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

const MetricRecord& EvalReport::at(const std::string& name) const {
  const auto* r = find(name);
  if (r == nullptr) throw std::out_of_range("report has no metric '" + name + "'");
  return *r;
}

void write_report(const std::filesystem::path& path, const EvalReport& report) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  for (const auto& r : report.records) out << to_json(r).dump() << "\n";
}

EvalReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open report " + path.string());
  EvalReport report;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      report.records.push_back(metric_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return report;
}

// ---- logistic baseline ----

Eigen::RowVectorXd last_observed_features(const sim::Episode& episode,
                                          const sim::NormalizationStats& stats) {
  const Eigen::Index d = stats.mean.size();
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(d);
  for (const auto& step : episode.steps) {
    for (Eigen::Index u = 0; u < step.mask.rows(); ++u) {
      for (Eigen::Index k = 0; k < d; ++k) {
        if (step.mask(u, k) > 0.5) out(k) = (step.values(u, k) - stats.mean(k)) / stats.stddev(k);
      }
    }
  }
  return out;
}

Eigen::VectorXd fit_logistic(const Matrix& x, const Eigen::VectorXd& y, double l2, int iterations) {
  const Eigen::Index n = x.rows();
  const Eigen::Index p = x.cols() + 1;
  Matrix xa(n, p);
  xa << x, Matrix::Ones(n, 1);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(p);
  for (int it = 0; it < iterations; ++it) {
    const Eigen::VectorXd pr = (1.0 / (1.0 + (-(xa * w).array()).exp())).matrix();
    Eigen::VectorXd grad = xa.transpose() * (pr - y) + l2 * w;
    const Eigen::VectorXd s = (pr.array() * (1.0 - pr.array())).matrix();
    Matrix hess = xa.transpose() * s.asDiagonal() * xa;
    hess.diagonal().array() += l2;
    const Eigen::VectorXd step = hess.ldlt().solve(grad);
    if (!step.allFinite()) break;
    w -= step;
    if (step.lpNorm<Eigen::Infinity>() < 1e-10) break;
  }
  return w;
}

Eigen::VectorXd predict_logistic(const Matrix& x, const Eigen::VectorXd& coef) {
  const Eigen::Index p = coef.size();
  const Eigen::VectorXd logits = x * coef.head(p - 1) + Eigen::VectorXd::Constant(x.rows(), coef(p - 1));
  return (1.0 / (1.0 + (-logits.array()).exp())).matrix();
}

namespace {

bool eligible(const sim::Episode& e, int horizon) {
  return e.length() == horizon && e.outcome.has_value();
}

Matrix baseline_matrix(const sim::Cohort& cohort, const std::vector<int>& idx,
                       const sim::NormalizationStats& stats) {
  Matrix x(static_cast<Eigen::Index>(idx.size()), stats.mean.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)) = last_observed_features(cohort.episodes[static_cast<std::size_t>(idx[i])], stats);
  }
  return x;
}

double safe_auroc(std::span<const double> scores, std::span<const int> labels) {
  bool pos = false, neg = false;
  for (int l : labels) (l != 0 ? pos : neg) = true;
  return pos && neg ? ope::auroc(scores, labels) : 0.5;
}

}  // namespace

OutcomeScores outcome_scores(const model::ModelBundle& bundle, const sim::Cohort& cohort,
                             std::span<const int> train_indices, std::span<const int> eval_indices) {
  const int horizon = bundle.data.horizon;
  std::vector<int> fit_idx, eval_idx;
  for (int i : train_indices) {
    if (eligible(cohort.episodes[static_cast<std::size_t>(i)], horizon)) fit_idx.push_back(i);
  }
  for (int i : eval_indices) {
    if (eligible(cohort.episodes[static_cast<std::size_t>(i)], horizon)) eval_idx.push_back(i);
  }
  OutcomeScores out;
  if (eval_idx.empty()) return out;
  for (int i : eval_idx) out.labels.push_back(*cohort.episodes[static_cast<std::size_t>(i)].outcome);

  const auto prepared = model::prepare_episodes(cohort.episodes, eval_idx, bundle);
  const auto states = model::encode_states(bundle, prepared);
  Matrix terminal(static_cast<Eigen::Index>(states.size()), bundle.config.hidden);
  for (std::size_t i = 0; i < states.size(); ++i) {
    terminal.row(static_cast<Eigen::Index>(i)) = states[i].row(states[i].rows() - 1);
  }
  const Matrix probs = outcome::predict_outcome(terminal, bundle.outcome);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) out.model.push_back(probs(i, 0));

  const Matrix x_eval = baseline_matrix(cohort, eval_idx, bundle.stats);
  bool pos = false, neg = false;
  Eigen::VectorXd y(static_cast<Eigen::Index>(fit_idx.size()));
  for (std::size_t i = 0; i < fit_idx.size(); ++i) {
    y(static_cast<Eigen::Index>(i)) = *cohort.episodes[static_cast<std::size_t>(fit_idx[i])].outcome;
    (y(static_cast<Eigen::Index>(i)) > 0.5 ? pos : neg) = true;
  }
  if (pos && neg) {
    const auto coef = fit_logistic(baseline_matrix(cohort, fit_idx, bundle.stats), y);
    const Eigen::VectorXd p = predict_logistic(x_eval, coef);
    out.baseline.assign(p.data(), p.data() + p.size());
  } else {
    out.baseline.assign(eval_idx.size(), 0.5);
  }
  return out;
}

iql::Selection recommend(const model::ModelBundle& bundle, const sim::Episode& episode, int prefix,
                         int n_samples, iql::SelectMode mode, std::uint64_t seed) {
  if (prefix < 1 || prefix > episode.length()) {
    throw std::invalid_argument("prefix must be in [1, " + std::to_string(episode.length()) + "]");
  }
  sim::Episode cut = episode;
  const auto n = static_cast<std::size_t>(prefix);
  cut.steps.resize(n);
  cut.actions.resize(n);
  cut.rewards.resize(n);
  cut.dones.resize(n);
  if (cut.true_severity.size() > n) cut.true_severity.resize(n);
  if (cut.behavior_probs.size() > n) cut.behavior_probs.resize(n);
  if (prefix < episode.length()) cut.outcome.reset();
  ad::NoGradGuard no_grad;
  const auto prepared = model::prepare_episode(cut, bundle);
  const model::PreparedEpisode* batch[] = {&prepared};
  const auto fwd = model::forward(bundle, batch, {});
  const int h = prefix - 1;
  const Matrix phi = fwd.phi[static_cast<std::size_t>(h)].value();
  Matrix mean = Matrix::Zero(1, bundle.config.latent);
  Matrix std = Matrix::Ones(1, bundle.config.latent);
  if (h >= 1) {
    mean = fwd.posterior[static_cast<std::size_t>(h)].mean.value();
    std = fwd.posterior[static_cast<std::size_t>(h)].std.value();
  }
  Rng rng(seed);
  return iql::select_action(phi, mean, std, bundle.dynamics, bundle.heads.policy, n_samples, mode, rng);
}

// ---- full evaluation ----

EvalReport evaluate(const model::ModelBundle& bundle, const sim::Cohort& cohort,
                    const EvalConfig& config, const std::string& config_hash, sim::Split which) {
  config.validate();
  const auto idx = cohort.indices(which);
  if (idx.empty()) throw std::invalid_argument("evaluation split is empty");
  const auto prepared = model::prepare_episodes(cohort.episodes, idx, bundle);
  const auto states = model::encode_states(bundle, prepared);
  const auto t = model::build_transitions(prepared, states, bundle);
  const int n_eps = static_cast<int>(prepared.size());

  EvalReport report;
  auto add = [&](const std::string& name, double value, std::optional<ope::Interval> ci = {},
                 json extra = json::object()) {
    MetricRecord r;
    r.name = name;
    r.value = value;
    if (ci) {
      r.lower = ci->lower;
      r.upper = ci->upper;
    }
    r.config_hash = config_hash;
    r.seed = config.seed;
    r.extra = std::move(extra);
    report.records.push_back(std::move(r));
  };

  // FQE: one fit, bootstrap over episodes' initial-state values.
  const auto fqe = train::run_fqe(bundle, t, config.fqe, derive_seed(config.seed, 1));
  {
    const Eigen::VectorXd v0 = fqe.initial_values;
    auto est = [&](std::span<const int> sample) {
      double s = 0.0;
      for (int i : sample) s += v0(i);
      return s / static_cast<double>(sample.size());
    };
    const auto ci = ope::bootstrap_ci(static_cast<int>(v0.size()), est, config.n_bootstrap, config.alpha,
                                      derive_seed(config.seed, 2));
    add("fqe_value", fqe.value, ci, {{"iterations", fqe.iterations}, {"converged", fqe.converged}});
  }

  // WIS against simulator or fitted behavior probabilities.
  const Matrix target = train::policy_matrix(bundle, t.states);
  Matrix fitted;
  if (config.behavior == BehaviorSource::kFittedBc) {
    fitted = ope::fit_behavior_policy(t.states, t.actions, bundle.data.actions, config.bc_epochs,
                                      derive_seed(config.seed, 3));
  }
  std::vector<ope::LoggedEpisode> logged(static_cast<std::size_t>(n_eps));
  for (int r = 0; r < t.size(); ++r) {
    auto& le = logged[static_cast<std::size_t>(t.episode[static_cast<std::size_t>(r)])];
    const int a = t.actions[static_cast<std::size_t>(r)];
    le.target.push_back(target(r, a));
    le.behavior.push_back(config.behavior == BehaviorSource::kFittedBc
                              ? fitted(r, a)
                              : t.behavior[static_cast<std::size_t>(r)](a));
  }
  std::vector<double> returns(static_cast<std::size_t>(n_eps));
  for (int e = 0; e < n_eps; ++e) {
    returns[static_cast<std::size_t>(e)] =
        prepared[static_cast<std::size_t>(e)].source->total_return(bundle.data.discount);
    logged[static_cast<std::size_t>(e)].ret = returns[static_cast<std::size_t>(e)];
  }
  {
    const auto w = ope::wis(logged);
    auto est = [&](std::span<const int> sample) {
      double num = 0.0, den = 0.0;
      for (int i : sample) {
        num += w.weights(i) * logged[static_cast<std::size_t>(i)].ret;
        den += w.weights(i);
      }
      return den > 0.0 ? num / den : 0.0;
    };
    const auto ci = ope::bootstrap_ci(n_eps, est, config.n_bootstrap, config.alpha, derive_seed(config.seed, 4));
    add("wis_value", w.value, ci,
        {{"behavior", config.behavior == BehaviorSource::kFittedBc ? "fitted_bc" : "simulator"}});
    add("ess", w.ess, std::nullopt, {{"episodes", n_eps}});
  }
  {
    auto est = [&](std::span<const int> sample) {
      double s = 0.0;
      for (int i : sample) s += returns[static_cast<std::size_t>(i)];
      return s / static_cast<double>(sample.size());
    };
    std::vector<int> all(static_cast<std::size_t>(n_eps));
    for (int i = 0; i < n_eps; ++i) all[static_cast<std::size_t>(i)] = i;
    add("behavior_return", est(all),
        ope::bootstrap_ci(n_eps, est, config.n_bootstrap, config.alpha, derive_seed(config.seed, 5)));
  }

  // Outcome prediction against the last-observed-value baseline.
  {
    const auto scores = outcome_scores(bundle, cohort, cohort.indices(sim::Split::kTrain), idx);
    const int n = static_cast<int>(scores.labels.size());
    int positives = 0;
    for (int l : scores.labels) positives += l;
    const json extra = {{"eligible", n}, {"positives", positives}};
    if (n > 0) {
      auto make = [&](const std::vector<double>& s) {
        return [&scores, &s](std::span<const int> sample) {
          std::vector<double> sc;
          std::vector<int> lb;
          for (int i : sample) {
            sc.push_back(s[static_cast<std::size_t>(i)]);
            lb.push_back(scores.labels[static_cast<std::size_t>(i)]);
          }
          return safe_auroc(sc, lb);
        };
      };
      add("auroc_outcome", safe_auroc(scores.model, scores.labels),
          ope::bootstrap_ci(n, make(scores.model), config.n_bootstrap, config.alpha, derive_seed(config.seed, 6)),
          extra);
      add("auroc_logistic_baseline", safe_auroc(scores.baseline, scores.labels),
          ope::bootstrap_ci(n, make(scores.baseline), config.n_bootstrap, config.alpha,
                            derive_seed(config.seed, 7)),
          extra);
    }
  }

  add("policy_entropy", train::mean_entropy(target));
  const auto diag = train::collapse_diagnostics(bundle, prepared, config.mi_samples, derive_seed(config.seed, 8));
  add("kl_mean", diag.mean_kl, std::nullopt,
      {{"kl_per_dim", std::vector<double>(diag.kl_per_dim.data(), diag.kl_per_dim.data() + diag.kl_per_dim.size())}});
  add("active_dims", diag.active_dims, std::nullopt, {{"latent_dims", diag.latent_dims}});
  add("mutual_information", diag.mutual_information);
  return report;
}

}  // namespace mnarrl::eval
