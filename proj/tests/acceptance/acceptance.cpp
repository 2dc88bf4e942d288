// Acceptance suite. Prints one PASS/FAIL line per criterion on stdout and
// diagnostic detail on stderr. Exit status is nonzero if any criterion fails.
//
//   acceptance            run every criterion
//   acceptance 2 5 10     run a subset

#include "mnarrl/belief.hpp"
#include "mnarrl/checkpoint.hpp"
#include "mnarrl/cohort_io.hpp"
#include "mnarrl/evaluate.hpp"
#include "mnarrl/iql.hpp"
#include "mnarrl/ope.hpp"
#include "mnarrl/trainer.hpp"

#include "grad_scenarios.hpp"
#include "test_support.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

using namespace mnarrl;
using ad::Matrix;
using ad::Var;

namespace {

struct Outcome {
  bool pass = true;
  std::string summary;
};

// Records a named check; the criterion passes only if all its checks pass.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    std::cerr << "    [" << (ok ? "ok" : "FAIL") << "] " << what << "\n";
    pass_ = pass_ && ok;
  }
  bool pass() const { return pass_; }

 private:
  bool pass_ = true;
};

std::string fmt(double x) {
  std::ostringstream s;
  s.precision(4);
  s << x;
  return s.str();
}

// ---- 1 ----

Outcome action_independence() {
  belief::DynamicsDims dims;
  dims.latent = 3;
  dims.hidden = 4;
  dims.static_features = 2;
  dims.actions = 5;
  dims.action_embed = 3;
  dims.widths = {5};
  belief::ProbeConfig probe;
  probe.states = 16;
  Checks c;
  double worst_grad = 0.0, worst_spread = 0.0, min_linked = 1e300;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    dims.action_conditioning = false;
    Rng rng(seed);
    const belief::DynamicsParams severed(dims, rng);
    probe.seed = seed;
    const auto r = belief::theorem1_probe(severed, probe);
    worst_grad = std::max(worst_grad, r.max_abs_gradient);
    worst_spread = std::max(worst_spread, r.max_q_spread);
    dims.action_conditioning = true;
    Rng rng2(seed);
    const belief::DynamicsParams linked(dims, rng2);
    min_linked = std::min(min_linked, belief::theorem1_probe(linked, probe).max_abs_gradient);
  }
  c.expect(worst_grad < 1e-6, "severed max |dJ/dlogit| = " + fmt(worst_grad) + " < 1e-6");
  c.expect(worst_spread < 1e-8, "severed max Q spread = " + fmt(worst_spread) + " < 1e-8");
  c.expect(min_linked > 1e-3, "action-conditioned min max |dJ/dlogit| = " + fmt(min_linked) + " > 1e-3");
  return {c.pass(), "grad " + fmt(worst_grad) + ", spread " + fmt(worst_spread) + ", linked " + fmt(min_linked)};
}

// ---- 2 ----

Outcome fqe_oracle() {
  Checks c;
  double worst = 0.0;
  for (std::uint64_t seed = 100; seed < 112; ++seed) {
    Rng rng(seed);
    const auto mdp = ope::random_mdp(5, 3, 0.9, rng);
    const Matrix pi = ope::random_policy(5, 3, rng);
    const Eigen::VectorXd v = ope::evaluate_policy_dp(mdp, pi);
    ope::TabularQ q(5, 3);
    ope::FqeConfig cfg;
    cfg.iterations = 200;
    ope::fqe(ope::expected_dataset(mdp, pi), q, cfg);
    const double err = (ope::state_values(q, Matrix::Identity(5, 5), pi) - v).cwiseAbs().maxCoeff();
    worst = std::max(worst, err);
    c.expect(err < 1e-2, "mdp " + std::to_string(seed) + " max |V_fqe - V_dp| = " + fmt(err));
  }
  return {c.pass(), "12 MDPs, worst state error " + fmt(worst)};
}

// ---- 3 ----

double reference_wis(const std::vector<ope::LoggedEpisode>& eps) {
  double num = 0.0, den = 0.0;
  for (const auto& e : eps) {
    double w = 1.0;
    for (std::size_t h = 0; h < e.target.size(); ++h) w *= e.target[h] / e.behavior[h];
    num += w * e.ret;
    den += w;
  }
  return num / den;
}

Outcome wis_sanity() {
  Checks c;
  Rng rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    const int n = 40 + 20 * trial;
    std::vector<ope::LoggedEpisode> eps(static_cast<std::size_t>(n));
    double mean = 0.0;
    for (auto& e : eps) {
      const int len = 1 + static_cast<int>(uniform01(rng) * 8);
      for (int h = 0; h < len; ++h) {
        const double p = 0.05 + 0.9 * uniform01(rng);
        e.target.push_back(p);
        e.behavior.push_back(p);
      }
      e.ret = standard_normal(rng);
      mean += e.ret;
    }
    mean /= n;
    const auto r = ope::wis(eps);
    c.expect(r.ess == static_cast<double>(n), "on-policy ESS = " + fmt(r.ess) + " == N = " + std::to_string(n));
    c.expect(std::abs(r.value - mean) <= 1e-12, "on-policy value - mean = " + fmt(r.value - mean));
  }
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<ope::LoggedEpisode> eps(60);
    for (auto& e : eps) {
      for (int h = 0; h < 5; ++h) {
        // toy three-action policies; the logged action is drawn from behavior
        Eigen::Vector3d pt, pb;
        for (int k = 0; k < 3; ++k) {
          pt(k) = 0.05 + uniform01(rng);
          pb(k) = 0.05 + uniform01(rng);
        }
        pt /= pt.sum();
        pb /= pb.sum();
        const double u = uniform01(rng);
        const int a = u < pb(0) ? 0 : (u < pb(0) + pb(1) ? 1 : 2);
        e.target.push_back(pt(a));
        e.behavior.push_back(pb(a));
      }
      e.ret = uniform01(rng);
    }
    const double ref = reference_wis(eps);
    const double got = ope::wis(eps).value;
    worst = std::max(worst, std::abs(got - ref) / std::max(1.0, std::abs(ref)));
  }
  c.expect(worst <= 1e-12, "reference match on 10 toy policy pairs, max rel diff " + fmt(worst));
  return {c.pass(), "ESS = N exactly, reference diff " + fmt(worst)};
}

// ---- 4 ----

double expectile_objective(const Matrix& q, double v, double tau) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const double a = q(i, 0) - v;
    s += iql::expectile_weight(a, tau) * a * a;
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
    ad::backward(iql::value_loss(q, ad::matmul(ones, param), tau));
    adam.step();
  }
  return param.value()(0, 0);
}

Outcome expectile_recovery() {
  Checks c;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    Matrix q = testing::random_matrix(500, 1, rng);
    q = (q.array() * 0.8).exp().matrix();
    const double oracle = golden_section(q, 0.7);
    const double fitted = fit_constant_value(q, 0.7);
    worst = std::max(worst, std::abs(fitted - oracle));
    c.expect(std::abs(fitted - oracle) < 1e-2,
             "seed " + std::to_string(seed) + " fitted " + fmt(fitted) + " oracle " + fmt(oracle));
  }
  return {c.pass(), "5 seeds, worst gap " + fmt(worst)};
}

// ---- 5 ----

Outcome kl_monte_carlo() {
  Checks c;
  Rng rng(55);
  const int dims = 3, n = 1000000;
  double worst_z = 0.0;
  for (int pair = 0; pair < 20; ++pair) {
    const Matrix mq = testing::random_matrix(1, dims, rng), mp = testing::random_matrix(1, dims, rng);
    const Matrix sq = (testing::random_matrix(1, dims, rng).cwiseAbs().array() + 0.3).matrix();
    const Matrix sp = (testing::random_matrix(1, dims, rng).cwiseAbs().array() + 0.3).matrix();
    const double closed =
        belief::kl_diag_gaussian({ad::constant(mq), ad::constant(sq)}, {ad::constant(mp), ad::constant(sp)})
            .scalar();
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
      double log_ratio = 0.0;
      for (int k = 0; k < dims; ++k) {
        const double x = mq(0, k) + sq(0, k) * standard_normal(rng);
        const double zq = (x - mq(0, k)) / sq(0, k), zp = (x - mp(0, k)) / sp(0, k);
        log_ratio += std::log(sp(0, k) / sq(0, k)) - 0.5 * zq * zq + 0.5 * zp * zp;
      }
      sum += log_ratio;
      sum2 += log_ratio * log_ratio;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sum2 / n - mean * mean) / n);
    const double z = std::abs(mean - closed) / se;
    worst_z = std::max(worst_z, z);
    c.expect(z < 3.0, "pair " + std::to_string(pair) + " closed " + fmt(closed) + " mc " + fmt(mean) +
                          " |diff|/se " + fmt(z));
  }
  return {c.pass(), "20 pairs, worst |diff|/SE " + fmt(worst_z)};
}

// ---- 6 ----

Outcome gradient_checks() {
  Checks c;
  double enc = 0.0, fus = 0.0, bel = 0.0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    enc = std::max(enc, testing::encoder_step_check(seed).max_rel_error);
    fus = std::max(fus, testing::fusion_step_check(seed).max_rel_error);
    bel = std::max(bel, testing::belief_step_check(seed).max_rel_error);
    bel = std::max(bel, testing::belief_step_check(seed, belief::PosteriorConditioning::kPhiXAZ).max_rel_error);
  }
  c.expect(enc < 1e-4, "structured encoder step rel err " + fmt(enc));
  c.expect(fus < 1e-4, "cross-attention + gate fusion rel err " + fmt(fus));
  c.expect(bel < 1e-4, "prior/posterior + combine_state rel err " + fmt(bel));
  return {c.pass(), "encoder " + fmt(enc) + ", fusion " + fmt(fus) + ", belief " + fmt(bel)};
}

// ---- 7 and 8 ----

struct VariantRun {
  eval::MetricRecord fqe;
  double auroc = 0.0;
  double auroc_baseline = 0.0;
};

constexpr int kAblationSeeds = 5;

sim::Cohort ablation_cohort(int seed) {
  sim::SimConfig sc;
  sc.n_episodes = 2800;
  sc.mnar_steepness = 4.0;
  sc.seed = 1000 + static_cast<std::uint64_t>(seed);
  sim::Cohort cohort;
  cohort.config = sc;
  cohort.episodes = sim::generate_cohort(sc);
  const std::vector<double> fractions{2000.0 / 2800.0, 300.0 / 2800.0, 500.0 / 2800.0};
  sim::split_cohort(cohort, fractions, static_cast<std::uint64_t>(seed));
  return cohort;
}

model::ModelConfig ablation_model() {
  model::ModelConfig m;
  m.hidden = 32;
  m.latent = 16;
  m.attention_dim = 32;
  m.rl_widths = {64, 64};
  m.dynamics_widths = {64, 32};
  m.outcome_hidden = 32;
  return m;
}

VariantRun run_variant(const sim::Cohort& cohort, model::ModelConfig m, int seed) {
  train::TrainConfig tc;
  tc.stage1_epochs = 20;
  tc.stage2_epochs = 20;
  tc.stage3_epochs = 10;
  tc.batch_size = 64;
  tc.seed = static_cast<std::uint64_t>(seed);
  tc.validation_fqe.iterations = 10;
  tc.validation_fqe.widths = {64, 64};
  const auto trained = train::run_training(cohort, m, tc);
  eval::EvalConfig ec;
  ec.fqe.iterations = 50;
  ec.fqe.widths = {64, 64};
  ec.n_bootstrap = 1000;
  ec.seed = static_cast<std::uint64_t>(seed);
  const auto report = eval::evaluate(trained.bundle, cohort, ec, "acceptance");
  return {report.at("fqe_value"), report.at("auroc_outcome").value, report.at("auroc_logistic_baseline").value};
}

struct AblationResults {
  std::map<std::string, std::vector<VariantRun>> runs;
  bool complete = false;
};

AblationResults& ablation_results() {
  static AblationResults results;
  if (results.complete) return results;
  for (int seed = 0; seed < kAblationSeeds; ++seed) {
    const auto cohort = ablation_cohort(seed);
    std::cerr << "  ablation seed " << seed << ": " << cohort.indices(sim::Split::kTrain).size() << " train / "
              << cohort.indices(sim::Split::kTest).size() << " test episodes\n";
    for (const std::string variant : {"full", "mnar_off", "doc_off"}) {
      auto m = ablation_model();
      if (variant == "mnar_off") m.mnar_features = false;
      if (variant == "doc_off") m.doc_factor = false;
      const auto t0 = std::chrono::steady_clock::now();
      const auto r = run_variant(cohort, m, seed);
      std::cerr << "    " << variant << " fqe " << fmt(r.fqe.value) << " [" << fmt(*r.fqe.lower) << ", "
                << fmt(*r.fqe.upper) << "] auroc " << fmt(r.auroc) << " baseline " << fmt(r.auroc_baseline) << " ("
                << fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) << " s)\n";
      results.runs[variant].push_back(r);
    }
  }
  results.complete = true;
  return results;
}

Outcome directional_ablations() {
  const auto& r = ablation_results();
  Checks c;
  int separated = 0, doc_ok = 0;
  for (int s = 0; s < kAblationSeeds; ++s) {
    const auto& full = r.runs.at("full")[static_cast<std::size_t>(s)].fqe;
    const auto& mnar = r.runs.at("mnar_off")[static_cast<std::size_t>(s)].fqe;
    const auto& doc = r.runs.at("doc_off")[static_cast<std::size_t>(s)].fqe;
    const bool sep = full.value > mnar.value && *full.lower > *mnar.upper;
    separated += sep ? 1 : 0;
    doc_ok += doc.value <= full.value ? 1 : 0;
    c.expect(sep, "seed " + std::to_string(s) + " full " + fmt(full.value) + " [" + fmt(*full.lower) + ", " +
                      fmt(*full.upper) + "] vs mnar-off " + fmt(mnar.value) + " [" + fmt(*mnar.lower) + ", " +
                      fmt(*mnar.upper) + "]");
    std::cerr << "    seed " << s << " doc-off " << fmt(doc.value) << (doc.value <= full.value ? " <= " : " > ")
              << "full " << fmt(full.value) << "\n";
  }
  c.expect(doc_ok >= 4, "doc-off <= full in " + std::to_string(doc_ok) + "/5 seeds (need 4)");
  return {c.pass(), "mnar-off separated in " + std::to_string(separated) + "/5 seeds, doc-off <= full in " +
                        std::to_string(doc_ok) + "/5"};
}

Outcome outcome_signal() {
  const auto& r = ablation_results();
  Checks c;
  double worst_auroc = 1.0, worst_margin = 1.0;
  for (int s = 0; s < kAblationSeeds; ++s) {
    const auto& run = r.runs.at("full")[static_cast<std::size_t>(s)];
    worst_auroc = std::min(worst_auroc, run.auroc);
    worst_margin = std::min(worst_margin, run.auroc - run.auroc_baseline);
    c.expect(run.auroc > 0.75 && run.auroc >= run.auroc_baseline + 0.03,
             "seed " + std::to_string(s) + " auroc " + fmt(run.auroc) + " baseline " + fmt(run.auroc_baseline));
  }
  return {c.pass(), "min AUROC " + fmt(worst_auroc) + ", min margin over baseline " + fmt(worst_margin)};
}

// ---- 9 ----

train::TrainConfig contract_config(int s1, int s2, int s3) {
  train::TrainConfig c;
  c.stage1_epochs = s1;
  c.stage2_epochs = s2;
  c.stage3_epochs = s3;
  c.batch_size = 16;
  c.validation_every = 1;
  c.validation_fqe.iterations = 3;
  c.validation_fqe.widths = {16};
  c.entropy_states = 64;
  c.patience = 100;
  return c;
}

Outcome training_contracts() {
  Checks c;
  const auto cohort = testing::tiny_cohort(80, 91);

  const auto plain = train::run_training(cohort, testing::tiny_model(), contract_config(2, 3, 1));
  c.expect(plain.encoder_checksum_before_stage2 == plain.encoder_checksum_after_stage2,
           "stage-2 encoder checksum unchanged");

  train::TrainHooks hooks;
  hooks.entropy_override = [](int stage, int epoch, double) { return stage == 2 && epoch >= 1 ? 0.4 : 2.0; };
  auto cfg = contract_config(1, 3, 0);
  cfg.entropy.max_rollbacks = 1;
  const auto forced = train::run_training(cohort, testing::tiny_model(), cfg, {}, {}, hooks);
  const nlohmann::json* event = nullptr;
  for (const auto& m : forced.metrics) {
    if (m.contains("event") && event == nullptr) event = &m.at("event");
  }
  c.expect(event != nullptr, "entropy monitor fired on the 2.0 -> 0.4 schedule");
  if (event != nullptr) {
    const double lr_before = event->at("lr_before"), lr_after = event->at("lr_after");
    const double beta_before = event->at("beta_before"), beta_after = event->at("beta_after");
    c.expect(lr_after == lr_before / 2.0, "lr " + fmt(lr_before) + " -> " + fmt(lr_after) + " (exactly halved)");
    c.expect(beta_after == beta_before * 1.5,
             "beta " + fmt(beta_before) + " -> " + fmt(beta_after) + " (exactly x1.5)");
    c.expect(event->at("rollback_epoch").get<int>() == 0, "rolled back to the last healthy epoch");
  }

  const auto eps = model::prepare_episodes(cohort.episodes, cohort.indices(sim::Split::kValidation), plain.bundle);
  const auto d = train::collapse_diagnostics(plain.bundle, eps, 256, 1);
  c.expect(std::isfinite(d.mean_kl) && d.mean_kl >= 0.0, "mean KL column = " + fmt(d.mean_kl));
  c.expect(d.active_dims >= 0 && d.active_dims <= d.latent_dims,
           "active dims column = " + std::to_string(d.active_dims) + "/" + std::to_string(d.latent_dims));
  c.expect(std::isfinite(d.mutual_information) && d.mutual_information >= 0.0,
           "MI proxy column = " + fmt(d.mutual_information));
  return {c.pass(), "checksum, rollback lr/2 and beta x1.5, diagnostics (" + fmt(d.mean_kl) + ", " +
                        std::to_string(d.active_dims) + ", " + fmt(d.mutual_information) + ")"};
}

// ---- 10 ----

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome round_trips() {
  Checks c;
  sim::Cohort cohort;
  cohort.config.n_episodes = 60;
  cohort.config.seed = 17;
  cohort.episodes = sim::generate_cohort(cohort.config);
  const std::vector<double> fractions{0.7, 0.15, 0.15};
  sim::split_cohort(cohort, fractions, 3);

  bool episodes_ok = true;
  for (const auto& ep : cohort.episodes) {
    const auto bytes = sim::encode_episode(ep);
    episodes_ok = episodes_ok && sim::encode_episode(sim::decode_episode(bytes.data(), bytes.size())) == bytes;
  }
  c.expect(episodes_ok, "episode encode -> decode -> encode identical");

  testing::TempDir a("accept_a"), b("accept_b");
  sim::write_cohort(cohort, a.path());
  sim::write_cohort(sim::read_cohort(a.path()), b.path());
  bool files_ok = true;
  for (const auto& entry : std::filesystem::directory_iterator(a.path())) {
    files_ok = files_ok && read_bytes(entry.path()) == read_bytes(b.path() / entry.path().filename());
  }
  c.expect(files_ok, "cohort directory write -> read -> write identical");

  const auto bundle = testing::tiny_bundle(testing::tiny_cohort(30, 4), 11);
  const nlohmann::json manifest = {{"stage", 3}, {"config_hash", "0011223344556677"}};
  const auto bytes = checkpoint::encode(bundle, manifest);
  const auto loaded = checkpoint::decode(bytes);
  c.expect(checkpoint::encode(loaded.bundle, loaded.manifest) == bytes, "checkpoint encode -> decode -> encode identical");
  checkpoint::save(a.path() / "model.ckpt", bundle, manifest);
  const auto from_file = checkpoint::load(a.path() / "model.ckpt");
  c.expect(checkpoint::encode(from_file.bundle, from_file.manifest) == bytes, "checkpoint file save -> load identical");
  return {c.pass(), "cohort and checkpoint bytes identical"};
}

struct Criterion {
  int id;
  std::string name;
  std::function<Outcome()> run;
  double budget_s;  // wall-clock limit, <= 0 for none
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "action-independence probe", action_independence, 120.0},
      {2, "FQE matches DP on tabular MDPs", fqe_oracle, 60.0},
      {3, "WIS sanity", wis_sanity, 0.0},
      {4, "expectile recovery", expectile_recovery, 0.0},
      {5, "closed-form KL vs Monte Carlo", kl_monte_carlo, 0.0},
      {6, "gradient checks", gradient_checks, 0.0},
      {7, "directional ablations", directional_ablations, 8.0 * 3600.0},
      {8, "outcome-head AUROC", outcome_signal, 0.0},
      {9, "training-procedure contracts", training_contracts, 0.0},
      {10, "round-trip fidelity", round_trips, 0.0},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& crit : all) {
    if (!wanted.empty() && !wanted.count(crit.id)) continue;
    std::cerr << "criterion " << crit.id << ": " << crit.name << "\n";
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = crit.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (crit.budget_s > 0.0 && secs > crit.budget_s) {
      out.pass = false;
      out.summary += "; exceeded " + fmt(crit.budget_s) + " s budget";
    }
    failures += out.pass ? 0 : 1;
    std::cout << (out.pass ? "PASS" : "FAIL") << "  criterion " << crit.id << " (" << crit.name << "): "
              << out.summary << " [" << fmt(secs) << " s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
