// mnarrl command-line interface.
//
// Exit codes: 0 success, 1 internal error, 2 usage or configuration error,
// 3 data error (missing/malformed cohort, checkpoint or artifacts),
// 4 numeric failure (non-finite loss, diverging FQE).

#include "mnarrl/checkpoint.hpp"
#include "mnarrl/cohort_io.hpp"
#include "mnarrl/config.hpp"
#include "mnarrl/evaluate.hpp"
#include "mnarrl/ope.hpp"
#include "mnarrl/pipeline.hpp"
#include "mnarrl/report.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mnarrl;

namespace {

enum Exit { kOk = 0, kInternal = 1, kUsage = 2, kData = 3, kNumeric = 4 };

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename F>
auto data_step(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const DataError&) {
    throw;
  } catch (const config::ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw DataError(what + ": " + e.what());
  }
}

fs::path default_out(const std::string& command) {
  const char* root = std::getenv("MNARRL_OUTPUT_ROOT");
  return fs::path(root != nullptr && *root != '\0' ? root : "mnarrl_out") / command;
}

fs::path resolve_out(const std::string& out, const std::string& command) {
  return out.empty() ? default_out(command) : fs::path(out);
}

sim::Cohort load_cohort(const std::string& dir) {
  return data_step("cohort " + dir, [&] { return sim::read_cohort(dir); });
}

void check_discount(const config::RunConfig& cfg, const sim::Cohort& cohort) {
  if (cfg.train.rl.gamma != cohort.config.discount) {
    throw config::ConfigError("train.rl.gamma (" + std::to_string(cfg.train.rl.gamma) +
                              ") differs from the cohort discount (" + std::to_string(cohort.config.discount) + ")");
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

sim::Split parse_split(const std::string& s) {
  if (s == "train") return sim::Split::kTrain;
  if (s == "validation") return sim::Split::kValidation;
  if (s == "test") return sim::Split::kTest;
  throw config::ConfigError("--split must be train, validation or test");
}

struct Args {
  std::string config, cohort, out, checkpoint, split = "test", sidecar, mode = "sample";
  std::vector<std::string> inputs;
  std::optional<std::uint64_t> seed;
  std::optional<int> n_episodes;
  std::uint64_t episode = 0;
  int prefix = 0, samples = 32;
};

int cmd_generate(const Args& a) {
  const auto started = pipeline::utc_now();
  auto cfg = config::load_run_config(a.config);
  if (a.seed) cfg.sim.seed = *a.seed;
  if (a.n_episodes) cfg.sim.n_episodes = *a.n_episodes;
  try {
    cfg.sim.validate();
  } catch (const std::invalid_argument& e) {
    throw config::ConfigError(e.what());
  }
  sim::Cohort cohort;
  cohort.config = cfg.sim;
  cohort.episodes = sim::generate_cohort(cfg.sim);
  try {
    sim::split_cohort(cohort, cfg.split.fractions, cfg.split.seed);
  } catch (const std::invalid_argument& e) {
    throw config::ConfigError(e.what());
  }
  int applied = 0;
  if (!a.sidecar.empty()) {
    applied = data_step("text sidecar " + a.sidecar, [&] { return sim::apply_text_sidecar(cohort, a.sidecar); });
  }
  const fs::path out = resolve_out(a.out, "cohort");
  sim::write_cohort(cohort, out);
  pipeline::RunManifest m{"generate", config::config_hash(config::to_json(cfg)), cfg.sim.seed, started,
                          pipeline::utc_now(), {{"config", a.config}}, {{"cohort", out.string()}}};
  if (!a.sidecar.empty()) m.inputs["text_sidecar"] = a.sidecar;
  pipeline::write_manifest(out, m);
  std::cout << "wrote " << cohort.episodes.size() << " episodes to " << out.string();
  if (!a.sidecar.empty()) std::cout << " (" << applied << " sidecar entries applied)";
  std::cout << "\n";
  return kOk;
}

int cmd_train(const Args& a) {
  const auto started = pipeline::utc_now();
  const auto cfg = config::load_run_config(a.config);
  const auto cohort = load_cohort(a.cohort);
  check_discount(cfg, cohort);
  const fs::path out = resolve_out(a.out, "train");
  fs::create_directories(out);
  const std::string hash = config::config_hash(config::to_json(cfg));
  write_json(out / "config.json", config::to_json(cfg));
  const auto result = train::run_training(cohort, cfg.model, cfg.train, out, {{"config_hash", hash}});
  checkpoint::save(out / "model.ckpt", result.bundle, {{"config_hash", hash}, {"stage", "final"}});
  json ckpts = json::array();
  for (const auto& p : result.checkpoints) ckpts.push_back(fs::relative(p, out).generic_string());
  pipeline::write_manifest(out, {"train", hash, cfg.train.seed, started, pipeline::utc_now(),
                                 {{"config", a.config}, {"cohort", a.cohort}},
                                 {{"model", "model.ckpt"},
                                  {"checkpoints", ckpts},
                                  {"metrics", "metrics.jsonl"},
                                  {"config", "config.json"},
                                  {"rollbacks", result.rollbacks}}});
  std::cout << "trained model written to " << (out / "model.ckpt").string() << "\n";
  return kOk;
}

void print_report(const eval::EvalReport& report) {
  for (const auto& r : report.records) {
    std::cout << r.name << " = " << r.value;
    if (r.lower && r.upper) std::cout << " [" << *r.lower << ", " << *r.upper << "]";
    std::cout << "\n";
  }
}

int cmd_evaluate(const Args& a) {
  const auto started = pipeline::utc_now();
  const auto cfg = config::load_run_config(a.config);
  const auto which = parse_split(a.split);
  const auto cohort = load_cohort(a.cohort);
  const auto loaded = data_step("checkpoint " + a.checkpoint, [&] { return checkpoint::load(a.checkpoint); });
  if (loaded.bundle.data.n_structured != cohort.config.n_structured ||
      loaded.bundle.data.actions != cohort.config.action_count ||
      loaded.bundle.data.sub_steps != cohort.config.sub_steps_per_decision) {
    throw DataError("checkpoint dimensions do not match the cohort");
  }
  const std::string hash = config::config_hash(config::to_json(cfg));
  eval::EvalReport report;
  try {
    report = eval::evaluate(loaded.bundle, cohort, cfg.eval, hash, which);
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("evaluation: ") + e.what());
  }
  const fs::path out = resolve_out(a.out, "evaluate");
  eval::write_report(out / "eval_report.jsonl", report);
  pipeline::write_manifest(out, {"evaluate", hash, cfg.eval.seed, started, pipeline::utc_now(),
                                 {{"config", a.config}, {"cohort", a.cohort}, {"checkpoint", a.checkpoint},
                                  {"split", a.split}},
                                 {{"report", "eval_report.jsonl"}}});
  print_report(report);
  return kOk;
}

int cmd_ablate(const Args& a) {
  const auto started = pipeline::utc_now();
  const auto cfg = config::load_run_config(a.config);
  const auto cohort = load_cohort(a.cohort);
  check_discount(cfg, cohort);
  const fs::path out = resolve_out(a.out, "ablate");
  const auto runs = pipeline::run_ablation(cohort, cfg, out, [](const std::string& s) { std::cerr << s << "\n"; });
  const auto rows = pipeline::summarize_ablation(runs);
  pipeline::write_ablation_csv(out / "ablation.csv", rows);
  pipeline::write_manifest(out, {"ablate", config::config_hash(config::to_json(cfg)),
                                 cfg.ablate.seeds.front(), started, pipeline::utc_now(),
                                 {{"config", a.config}, {"cohort", a.cohort}},
                                 {{"table", "ablation.csv"}, {"runs", runs.size()}}});
  std::ifstream table(out / "ablation.csv");
  std::cout << table.rdbuf();
  return kOk;
}

int cmd_report(const Args& a) {
  const auto started = pipeline::utc_now();
  if (a.inputs.empty()) throw DataError("report needs at least one --input");
  std::vector<fs::path> inputs(a.inputs.begin(), a.inputs.end());
  const fs::path out = resolve_out(a.out, "report");
  const auto written = data_step("report", [&] { return report::build_report(inputs, out); });
  json files = json::array();
  for (const auto& p : written) files.push_back(p.filename().string());
  pipeline::write_manifest(out, {"report", "", 0, started, pipeline::utc_now(), {{"inputs", a.inputs}},
                                 {{"files", files}}});
  for (const auto& p : written) std::cout << p.string() << "\n";
  return kOk;
}

int cmd_act(const Args& a) {
  iql::SelectMode mode;
  if (a.mode == "sample") {
    mode = iql::SelectMode::kSample;
  } else if (a.mode == "argmax") {
    mode = iql::SelectMode::kArgmax;
  } else if (a.mode == "mean") {
    mode = iql::SelectMode::kMeanLatent;
  } else {
    throw config::ConfigError("--mode must be sample, argmax or mean");
  }
  if (a.samples < 1) throw config::ConfigError("--samples must be >= 1");
  const auto cohort = load_cohort(a.cohort);
  const auto loaded = data_step("checkpoint " + a.checkpoint, [&] { return checkpoint::load(a.checkpoint); });
  const sim::Episode* episode = nullptr;
  for (const auto& e : cohort.episodes) {
    if (e.id == a.episode) episode = &e;
  }
  if (episode == nullptr) throw DataError("episode " + std::to_string(a.episode) + " not in cohort");
  const int prefix = a.prefix > 0 ? a.prefix : episode->length();
  if (prefix > episode->length()) {
    throw config::ConfigError("--prefix exceeds the episode length " + std::to_string(episode->length()));
  }
  const auto sel = eval::recommend(loaded.bundle, *episode, prefix, a.samples, mode, a.seed.value_or(0));
  const json out = {{"episode", a.episode},
                    {"prefix", prefix},
                    {"mode", a.mode},
                    {"action", sel.action},
                    {"probs", std::vector<double>(sel.probs.data(), sel.probs.data() + sel.probs.size())}};
  std::cout << out.dump() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Belief-state offline RL on synthetic MNAR cohorts"};
  app.require_subcommand(1);
  Args a;

  auto* gen = app.add_subcommand("generate", "Simulate a cohort and write it to disk");
  gen->add_option("--config", a.config, "Run config (JSON)")->required();
  gen->add_option("--out", a.out, "Cohort directory (default $MNARRL_OUTPUT_ROOT/cohort)");
  gen->add_option("--seed", a.seed, "Override sim.seed");
  gen->add_option("--n-episodes", a.n_episodes, "Override sim.n_episodes");
  gen->add_option("--text-sidecar", a.sidecar, "JSON-lines file with external note embeddings");

  auto* tr = app.add_subcommand("train", "Run the three-stage training procedure");
  tr->add_option("--config", a.config, "Run config (JSON)")->required();
  tr->add_option("--cohort", a.cohort, "Cohort directory")->required();
  tr->add_option("--out", a.out, "Output directory (default $MNARRL_OUTPUT_ROOT/train)");

  auto* ev = app.add_subcommand("evaluate", "Off-policy evaluation and outcome AUROC of a checkpoint");
  ev->add_option("--config", a.config, "Run config (JSON)")->required();
  ev->add_option("--cohort", a.cohort, "Cohort directory")->required();
  ev->add_option("--checkpoint", a.checkpoint, "Model checkpoint")->required();
  ev->add_option("--split", a.split, "train | validation | test (default test)");
  ev->add_option("--out", a.out, "Output directory (default $MNARRL_OUTPUT_ROOT/evaluate)");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate every configured variant and seed");
  ab->add_option("--config", a.config, "Run config with an 'ablate' section")->required();
  ab->add_option("--cohort", a.cohort, "Cohort directory")->required();
  ab->add_option("--out", a.out, "Output directory (default $MNARRL_OUTPUT_ROOT/ablate)");

  auto* rp = app.add_subcommand("report", "Render SVG charts and a summary table from artifacts");
  rp->add_option("--input", a.inputs, "Artifact file or directory (repeatable)")->required();
  rp->add_option("--out", a.out, "Output directory (default $MNARRL_OUTPUT_ROOT/report)");

  auto* ac = app.add_subcommand("act", "Action distribution for an episode prefix");
  ac->add_option("--checkpoint", a.checkpoint, "Model checkpoint")->required();
  ac->add_option("--cohort", a.cohort, "Cohort directory holding the episode")->required();
  ac->add_option("--episode", a.episode, "Episode id")->required();
  ac->add_option("--prefix", a.prefix, "Number of observed steps (default: whole episode)");
  ac->add_option("--mode", a.mode, "sample | argmax | mean (default sample)");
  ac->add_option("--samples", a.samples, "Latent samples for the marginal (default 32)");
  ac->add_option("--seed", a.seed, "Sampling seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) return cmd_generate(a);
    if (*tr) return cmd_train(a);
    if (*ev) return cmd_evaluate(a);
    if (*ab) return cmd_ablate(a);
    if (*rp) return cmd_report(a);
    if (*ac) return cmd_act(a);
  } catch (const config::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const train::NumericFailure& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const ope::FqeDivergence& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kInternal;
}
