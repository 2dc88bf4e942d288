#include "mnarrl/pipeline.hpp"

#include "mnarrl/checkpoint.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>

#ifndef MNARRL_VERSION
#define MNARRL_VERSION "unknown"
#endif

namespace mnarrl::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

const char* code_version() { return MNARRL_VERSION; }

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json to_json(const RunManifest& m) {
  return {{"command", m.command},       {"config_hash", m.config_hash}, {"code_version", code_version()},
          {"seed", m.seed},             {"started_at", m.started_at},   {"finished_at", m.finished_at},
          {"inputs", m.inputs},         {"outputs", m.outputs}};
}

void write_manifest(const fs::path& dir, const RunManifest& m) {
  fs::create_directories(dir);
  std::ofstream out(dir / "run_manifest.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  out << to_json(m).dump(2) << "\n";
}

std::vector<AblationRun> run_ablation(const sim::Cohort& cohort, const config::RunConfig& config,
                                      const fs::path& out_dir, const Progress& progress) {
  std::vector<config::AblationVariant> variants = config.ablate.variants;
  if (variants.empty()) variants.push_back({"full", json::object()});
  std::vector<AblationRun> runs;
  for (const auto& v : variants) {
    const auto model = config::apply_overrides(config.model, v.model);
    for (const auto seed : config.ablate.seeds) {
      config::RunConfig rc = config;
      rc.model = model;
      rc.train.seed = seed;
      rc.eval.seed = seed;
      const std::string hash = config::config_hash(config::to_json(rc));
      const fs::path dir = out_dir.empty() ? fs::path() : out_dir / v.name / ("seed_" + std::to_string(seed));
      if (progress) progress("variant " + v.name + " seed " + std::to_string(seed));
      RunManifest manifest{"ablate", hash, seed, utc_now(), "", {}, {}};
      const auto trained = train::run_training(cohort, rc.model, rc.train, dir, {{"config_hash", hash}});
      AblationRun run{v.name, seed, eval::evaluate(trained.bundle, cohort, rc.eval, hash)};
      if (!dir.empty()) {
        checkpoint::save(dir / "model.ckpt", trained.bundle, {{"config_hash", hash}, {"stage", "final"}});
        eval::write_report(dir / "eval_report.jsonl", run.report);
        manifest.finished_at = utc_now();
        manifest.inputs = {{"variant", v.name}, {"model_overrides", v.model}};
        manifest.outputs = {{"checkpoint", "model.ckpt"}, {"report", "eval_report.jsonl"}, {"metrics", "metrics.jsonl"}};
        write_manifest(dir, manifest);
      }
      runs.push_back(std::move(run));
    }
  }
  return runs;
}

std::vector<AblationRow> summarize_ablation(const std::vector<AblationRun>& runs) {
  std::vector<AblationRow> rows;
  for (const auto& run : runs) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const AblationRow& r) { return r.variant == run.variant; });
    if (it == rows.end()) {
      AblationRow row;
      row.variant = run.variant;
      rows.push_back(row);
      it = rows.end() - 1;
    }
    const auto& f = run.report.at("fqe_value");
    it->fqe += f.value;
    it->fqe_lower += f.lower.value_or(f.value);
    it->fqe_upper += f.upper.value_or(f.value);
    if (const auto* a = run.report.find("auroc_outcome")) {
      it->auroc = it->auroc.value_or(0.0) + a->value;
      it->auroc_lower = it->auroc_lower.value_or(0.0) + a->lower.value_or(a->value);
      it->auroc_upper = it->auroc_upper.value_or(0.0) + a->upper.value_or(a->value);
    }
    ++it->seeds;
  }
  for (auto& r : rows) {
    const double n = r.seeds;
    r.fqe /= n;
    r.fqe_lower /= n;
    r.fqe_upper /= n;
    if (r.auroc) {
      *r.auroc /= n;
      *r.auroc_lower /= n;
      *r.auroc_upper /= n;
    }
  }
  return rows;
}

void write_ablation_csv(const fs::path& path, const std::vector<AblationRow>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto num = [](std::optional<double> v) {
    if (!v) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", *v);
    return std::string(buf);
  };
  out << "variant,seeds,fqe,fqe_lower,fqe_upper,auroc,auroc_lower,auroc_upper\n";
  for (const auto& r : rows) {
    out << r.variant << "," << r.seeds << "," << num(r.fqe) << "," << num(r.fqe_lower) << "," << num(r.fqe_upper)
        << "," << num(r.auroc) << "," << num(r.auroc_lower) << "," << num(r.auroc_upper) << "\n";
  }
}

}  // namespace mnarrl::pipeline
