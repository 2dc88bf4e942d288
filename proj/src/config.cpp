#include "mnarrl/config.hpp"

#include "mnarrl/cohort_io.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace mnarrl::config {

using nlohmann::json;

namespace {

// Strict reader: every key must be consumed before finish().
class Obj {
 public:
  Obj(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <typename Fn>
auto checked(Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

const char* psi_name(encoder::PsiEmbedding p) {
  return p == encoder::PsiEmbedding::kMlp ? "mlp" : "linear";
}

const char* posterior_name(belief::PosteriorConditioning p) {
  return p == belief::PosteriorConditioning::kPhiX ? "phi_x" : "phi_x_a_z";
}

const char* behavior_name(eval::BehaviorSource b) {
  return b == eval::BehaviorSource::kSimulator ? "simulator" : "fitted_bc";
}

json weights_json(const model::LossWeights& w) {
  return {{"obs", w.obs},
          {"mask", w.mask},
          {"text", w.text},
          {"dynamics", w.dynamics},
          {"kl", w.kl},
          {"outcome", w.outcome},
          {"unobserved_target_weight", w.unobserved_target_weight},
          {"free_bits", w.free_bits}};
}

model::LossWeights weights_from(const json& j, const std::string& where) {
  model::LossWeights w;
  Obj o(j, where);
  o.get("obs", w.obs);
  o.get("mask", w.mask);
  o.get("text", w.text);
  o.get("dynamics", w.dynamics);
  o.get("kl", w.kl);
  o.get("outcome", w.outcome);
  o.get("unobserved_target_weight", w.unobserved_target_weight);
  o.get("free_bits", w.free_bits);
  o.finish();
  return w;
}

json fqe_json(const train::FqeSettings& f) {
  return {{"iterations", f.iterations},
          {"widths", f.widths},
          {"epochs_per_fit", f.epochs_per_fit},
          {"batch_size", f.batch_size},
          {"lr", f.lr}};
}

train::FqeSettings fqe_from(const json& j, const std::string& where) {
  train::FqeSettings f;
  Obj o(j, where);
  o.get("iterations", f.iterations);
  o.get("widths", f.widths);
  o.get("epochs_per_fit", f.epochs_per_fit);
  o.get("batch_size", f.batch_size);
  o.get("lr", f.lr);
  o.finish();
  if (f.iterations < 1 || f.epochs_per_fit < 1 || f.batch_size < 1 || !(f.lr > 0.0)) {
    throw ConfigError(where + ": iterations, epochs_per_fit, batch_size and lr must be positive");
  }
  return f;
}

}  // namespace

// ---- model ----

json to_json(const model::ModelConfig& c) {
  return {{"hidden", c.hidden},
          {"latent", c.latent},
          {"psi_embed", c.psi_embed},
          {"attention_dim", c.attention_dim},
          {"heads", c.heads},
          {"action_embed", c.action_embed},
          {"dynamics_widths", c.dynamics_widths},
          {"rl_widths", c.rl_widths},
          {"outcome_hidden", c.outcome_hidden},
          {"dropout", c.dropout},
          {"sigma_floor", c.sigma_floor},
          {"mnar_features", c.mnar_features},
          {"doc_factor", c.doc_factor},
          {"text_channel", c.text_channel},
          {"action_conditioning", c.action_conditioning},
          {"semi_mdp", c.semi_mdp},
          {"psi_embedding", psi_name(c.psi_embedding)},
          {"posterior_conditioning", posterior_name(c.posterior_conditioning)}};
}

model::ModelConfig model_config_from_json(const json& j) {
  model::ModelConfig c;
  Obj o(j, "model");
  o.get("hidden", c.hidden);
  o.get("latent", c.latent);
  o.get("psi_embed", c.psi_embed);
  o.get("attention_dim", c.attention_dim);
  o.get("heads", c.heads);
  o.get("action_embed", c.action_embed);
  o.get("dynamics_widths", c.dynamics_widths);
  o.get("rl_widths", c.rl_widths);
  o.get("outcome_hidden", c.outcome_hidden);
  o.get("dropout", c.dropout);
  o.get("sigma_floor", c.sigma_floor);
  o.get("mnar_features", c.mnar_features);
  o.get("doc_factor", c.doc_factor);
  o.get("text_channel", c.text_channel);
  o.get("action_conditioning", c.action_conditioning);
  o.get("semi_mdp", c.semi_mdp);
  std::string psi = psi_name(c.psi_embedding);
  o.get("psi_embedding", psi);
  if (psi == "mlp") {
    c.psi_embedding = encoder::PsiEmbedding::kMlp;
  } else if (psi == "linear") {
    c.psi_embedding = encoder::PsiEmbedding::kLinear;
  } else {
    throw ConfigError("model.psi_embedding: expected 'mlp' or 'linear'");
  }
  std::string post = posterior_name(c.posterior_conditioning);
  o.get("posterior_conditioning", post);
  if (post == "phi_x") {
    c.posterior_conditioning = belief::PosteriorConditioning::kPhiX;
  } else if (post == "phi_x_a_z") {
    c.posterior_conditioning = belief::PosteriorConditioning::kPhiXAZ;
  } else {
    throw ConfigError("model.posterior_conditioning: expected 'phi_x' or 'phi_x_a_z'");
  }
  o.finish();
  checked([&] {
    c.validate();
    return 0;
  });
  return c;
}

json to_json(const model::DataDims& d) {
  return {{"n_structured", d.n_structured},       {"sub_steps", d.sub_steps},
          {"n_static", d.n_static},               {"text_modalities", d.text_modalities},
          {"embed_dim", d.embed_dim},             {"max_notes", d.max_notes},
          {"actions", d.actions},                 {"horizon", d.horizon},
          {"sub_step_hours", d.sub_step_hours},   {"window_hours", d.window_hours},
          {"discount", d.discount}};
}

model::DataDims data_dims_from_json(const json& j) {
  model::DataDims d;
  Obj o(j, "data");
  o.get("n_structured", d.n_structured);
  o.get("sub_steps", d.sub_steps);
  o.get("n_static", d.n_static);
  o.get("text_modalities", d.text_modalities);
  o.get("embed_dim", d.embed_dim);
  o.get("max_notes", d.max_notes);
  o.get("actions", d.actions);
  o.get("horizon", d.horizon);
  o.get("sub_step_hours", d.sub_step_hours);
  o.get("window_hours", d.window_hours);
  o.get("discount", d.discount);
  o.finish();
  return d;
}

// ---- train ----

json to_json(const train::TrainConfig& c) {
  const auto& e = c.entropy;
  return {{"stage1_epochs", c.stage1_epochs},
          {"stage2_epochs", c.stage2_epochs},
          {"stage3_epochs", c.stage3_epochs},
          {"stage1_lr", c.stage1_lr},
          {"stage2_lr", c.stage2_lr},
          {"stage3_encoder_lr", c.stage3_encoder_lr},
          {"stage3_rl_lr", c.stage3_rl_lr},
          {"weights", weights_json(c.weights)},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"grad_clip", c.grad_clip},
          {"patience", c.patience},
          {"validation_every", c.validation_every},
          {"beta_annealing", c.beta_annealing},
          {"anneal_fraction", c.anneal_fraction},
          {"free_bits", c.free_bits},
          {"entropy",
           {{"collapse_threshold", e.collapse_threshold},
            {"relative_drop", e.relative_drop},
            {"window", e.window},
            {"healthy_threshold", e.healthy_threshold},
            {"lr_factor", e.lr_factor},
            {"beta_factor", e.beta_factor},
            {"max_rollbacks", e.max_rollbacks}}},
          {"validation_fqe", fqe_json(c.validation_fqe)},
          {"rl",
           {{"tau", c.rl.tau},
            {"beta", c.rl.beta},
            {"w_max", c.rl.w_max},
            {"tau_target", c.rl.tau_target},
            {"gamma", c.rl.gamma}}},
          {"entropy_states", c.entropy_states},
          {"seed", c.seed}};
}

train::TrainConfig train_config_from_json(const json& j) {
  train::TrainConfig c;
  Obj o(j, "train");
  o.get("stage1_epochs", c.stage1_epochs);
  o.get("stage2_epochs", c.stage2_epochs);
  o.get("stage3_epochs", c.stage3_epochs);
  o.get("stage1_lr", c.stage1_lr);
  o.get("stage2_lr", c.stage2_lr);
  o.get("stage3_encoder_lr", c.stage3_encoder_lr);
  o.get("stage3_rl_lr", c.stage3_rl_lr);
  if (const json* w = o.sub("weights")) c.weights = weights_from(*w, o.path("weights"));
  o.get("weight_decay", c.weight_decay);
  o.get("batch_size", c.batch_size);
  o.get("grad_clip", c.grad_clip);
  o.get("patience", c.patience);
  o.get("validation_every", c.validation_every);
  o.get("beta_annealing", c.beta_annealing);
  o.get("anneal_fraction", c.anneal_fraction);
  o.get("free_bits", c.free_bits);
  if (const json* e = o.sub("entropy")) {
    Obj eo(*e, o.path("entropy"));
    eo.get("collapse_threshold", c.entropy.collapse_threshold);
    eo.get("relative_drop", c.entropy.relative_drop);
    eo.get("window", c.entropy.window);
    eo.get("healthy_threshold", c.entropy.healthy_threshold);
    eo.get("lr_factor", c.entropy.lr_factor);
    eo.get("beta_factor", c.entropy.beta_factor);
    eo.get("max_rollbacks", c.entropy.max_rollbacks);
    eo.finish();
  }
  if (const json* f = o.sub("validation_fqe")) c.validation_fqe = fqe_from(*f, o.path("validation_fqe"));
  if (const json* r = o.sub("rl")) {
    Obj ro(*r, o.path("rl"));
    ro.get("tau", c.rl.tau);
    ro.get("beta", c.rl.beta);
    ro.get("w_max", c.rl.w_max);
    ro.get("tau_target", c.rl.tau_target);
    ro.get("gamma", c.rl.gamma);
    ro.finish();
  }
  o.get("entropy_states", c.entropy_states);
  o.get("seed", c.seed);
  o.finish();
  checked([&] {
    c.validate();
    return 0;
  });
  return c;
}

// ---- eval ----

json to_json(const eval::EvalConfig& c) {
  return {{"fqe", fqe_json(c.fqe)},
          {"n_bootstrap", c.n_bootstrap},
          {"alpha", c.alpha},
          {"behavior", behavior_name(c.behavior)},
          {"bc_epochs", c.bc_epochs},
          {"mi_samples", c.mi_samples},
          {"seed", c.seed}};
}

eval::EvalConfig eval_config_from_json(const json& j) {
  eval::EvalConfig c;
  Obj o(j, "eval");
  if (const json* f = o.sub("fqe")) c.fqe = fqe_from(*f, o.path("fqe"));
  o.get("n_bootstrap", c.n_bootstrap);
  o.get("alpha", c.alpha);
  std::string behavior = behavior_name(c.behavior);
  o.get("behavior", behavior);
  if (behavior == "simulator") {
    c.behavior = eval::BehaviorSource::kSimulator;
  } else if (behavior == "fitted_bc") {
    c.behavior = eval::BehaviorSource::kFittedBc;
  } else {
    throw ConfigError("eval.behavior: expected 'simulator' or 'fitted_bc'");
  }
  o.get("bc_epochs", c.bc_epochs);
  o.get("mi_samples", c.mi_samples);
  o.get("seed", c.seed);
  o.finish();
  checked([&] {
    c.validate();
    return 0;
  });
  return c;
}

// ---- run ----

json to_json(const RunConfig& c) {
  json variants = json::array();
  for (const auto& v : c.ablate.variants) variants.push_back({{"name", v.name}, {"model", v.model}});
  return {{"sim", sim::to_json(c.sim)},
          {"split", {{"fractions", c.split.fractions}, {"seed", c.split.seed}}},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"eval", to_json(c.eval)},
          {"ablate", {{"seeds", c.ablate.seeds}, {"variants", variants}}}};
}

model::ModelConfig apply_overrides(const model::ModelConfig& base, const json& overrides) {
  json merged = to_json(base);
  if (!overrides.is_object()) throw ConfigError("ablation variant 'model' must be an object");
  for (const auto& [key, value] : overrides.items()) {
    if (!merged.contains(key)) throw ConfigError("ablation override: unknown model key '" + key + "'");
    merged[key] = value;
  }
  return model_config_from_json(merged);
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Obj o(j, "config");
  if (const json* s = o.sub("sim")) c.sim = checked([&] { return sim::sim_config_from_json(*s); });
  if (const json* s = o.sub("split")) {
    Obj so(*s, "split");
    so.get("fractions", c.split.fractions);
    so.get("seed", c.split.seed);
    so.finish();
    double total = 0.0;
    for (double f : c.split.fractions) {
      if (!(f > 0.0)) throw ConfigError("split.fractions must be positive");
      total += f;
    }
    if (c.split.fractions.empty() || c.split.fractions.size() > 3 || std::abs(total - 1.0) > 1e-9) {
      throw ConfigError("split.fractions: 1 to 3 positive entries summing to 1");
    }
  }
  if (const json* m = o.sub("model")) c.model = model_config_from_json(*m);
  if (const json* t = o.sub("train")) c.train = train_config_from_json(*t);
  if (const json* e = o.sub("eval")) c.eval = eval_config_from_json(*e);
  if (const json* a = o.sub("ablate")) {
    Obj ao(*a, "ablate");
    ao.get("seeds", c.ablate.seeds);
    if (const json* vs = ao.sub("variants")) {
      if (!vs->is_array()) throw ConfigError("ablate.variants must be an array");
      std::set<std::string> names;
      for (const auto& v : *vs) {
        Obj vo(v, "ablate.variants[]");
        AblationVariant var;
        vo.get("name", var.name);
        if (const json* m = vo.sub("model")) var.model = *m;
        vo.finish();
        if (var.name.empty()) throw ConfigError("ablate.variants[].name is required");
        if (!names.insert(var.name).second) throw ConfigError("duplicate ablation variant '" + var.name + "'");
        apply_overrides(c.model, var.model);  // validates the overrides now
        c.ablate.variants.push_back(std::move(var));
      }
    }
    ao.finish();
    if (c.ablate.seeds.empty()) throw ConfigError("ablate.seeds must not be empty");
  }
  o.finish();
  if (c.train.rl.gamma != c.sim.discount) {
    throw ConfigError("train.rl.gamma must equal sim.discount");
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

std::string config_hash(const json& j) {
  const std::string text = j.dump();  // nlohmann objects iterate in sorted key order
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mnarrl::config
