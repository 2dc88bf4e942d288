#include "mnarrl/cohort_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

namespace mnarrl::sim {

static_assert(std::endian::native == std::endian::little,
              "cohort encoding assumes a little-endian host");

namespace {

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > size_) throw std::runtime_error("cohort record truncated");
    T v;
    std::memcpy(&v, data_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  bool done() const { return pos_ == size_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

nlohmann::json to_json(const SimConfig& c) {
  return {
      {"n_episodes", c.n_episodes},
      {"horizon", c.horizon},
      {"sub_steps_per_decision", c.sub_steps_per_decision},
      {"sub_step_hours", c.sub_step_hours},
      {"n_structured", c.n_structured},
      {"n_static", c.n_static},
      {"n_text_modalities", c.n_text_modalities},
      {"text_embed_dim", c.text_embed_dim},
      {"max_notes_per_modality", c.max_notes_per_modality},
      {"latent_severity_dim", c.latent_severity_dim},
      {"action_count", c.action_count},
      {"mnar_steepness", c.mnar_steepness},
      {"doc_mnar_steepness", c.doc_mnar_steepness},
      {"behavior_temperature", c.behavior_temperature},
      {"discount", c.discount},
      {"seed", c.seed},
      {"density_window_steps", c.density_window_steps},
      {"frequency_window_hours", c.frequency_window_hours},
  };
}

SimConfig sim_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("simulator config must be an object");
  const SimConfig defaults;
  const auto known = to_json(defaults);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) {
      throw std::invalid_argument("unknown simulator config key '" + key + "'");
    }
  }
  SimConfig c;
  read_field(j, "n_episodes", c.n_episodes);
  read_field(j, "horizon", c.horizon);
  read_field(j, "sub_steps_per_decision", c.sub_steps_per_decision);
  read_field(j, "sub_step_hours", c.sub_step_hours);
  read_field(j, "n_structured", c.n_structured);
  read_field(j, "n_static", c.n_static);
  read_field(j, "n_text_modalities", c.n_text_modalities);
  read_field(j, "text_embed_dim", c.text_embed_dim);
  read_field(j, "max_notes_per_modality", c.max_notes_per_modality);
  read_field(j, "latent_severity_dim", c.latent_severity_dim);
  read_field(j, "action_count", c.action_count);
  read_field(j, "mnar_steepness", c.mnar_steepness);
  read_field(j, "doc_mnar_steepness", c.doc_mnar_steepness);
  read_field(j, "behavior_temperature", c.behavior_temperature);
  read_field(j, "discount", c.discount);
  read_field(j, "seed", c.seed);
  read_field(j, "density_window_steps", c.density_window_steps);
  read_field(j, "frequency_window_hours", c.frequency_window_hours);
  c.validate();
  return c;
}

std::vector<std::uint8_t> encode_episode(const Episode& ep) {
  Writer w;
  const auto len = static_cast<std::uint32_t>(ep.steps.size());
  const std::uint32_t u_count = len ? static_cast<std::uint32_t>(ep.steps[0].values.rows()) : 0;
  const std::uint32_t d_count = len ? static_cast<std::uint32_t>(ep.steps[0].values.cols()) : 0;
  const std::uint32_t m_count = len ? static_cast<std::uint32_t>(ep.steps[0].text_notes.size()) : 0;
  std::uint32_t e_dim = 0;
  if (len && m_count) e_dim = static_cast<std::uint32_t>(ep.steps[0].text_notes[0].cols());

  w.put<std::uint64_t>(ep.id);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ep.static_features.size()));
  for (Eigen::Index i = 0; i < ep.static_features.size(); ++i) w.put<double>(ep.static_features(i));
  w.put<std::uint32_t>(len);
  w.put<std::uint32_t>(u_count);
  w.put<std::uint32_t>(d_count);
  w.put<std::uint32_t>(m_count);
  w.put<std::uint32_t>(e_dim);
  for (const auto& step : ep.steps) {
    for (std::uint32_t u = 0; u < u_count; ++u)
      for (std::uint32_t d = 0; d < d_count; ++d)
        w.put<double>(step.mask(u, d) > 0.5 ? step.values(u, d) : 0.0);
    for (std::uint32_t u = 0; u < u_count; ++u)
      for (std::uint32_t d = 0; d < d_count; ++d)
        w.put<std::uint8_t>(step.mask(u, d) > 0.5 ? 1 : 0);
    for (std::uint32_t u = 0; u < u_count; ++u)
      for (std::uint32_t d = 0; d < d_count; ++d) w.put<double>(step.time_gaps(u, d));
    for (std::uint32_t j = 0; j < m_count; ++j) {
      const auto& notes = step.text_notes[j];
      w.put<std::uint32_t>(static_cast<std::uint32_t>(notes.rows()));
      for (Eigen::Index n = 0; n < notes.rows(); ++n)
        for (std::uint32_t k = 0; k < e_dim; ++k) w.put<double>(notes(n, k));
    }
    w.put<double>(step.text_recency);
    w.put<double>(step.doc_density);
  }
  const std::uint32_t a_count =
      ep.behavior_probs.empty() ? 0 : static_cast<std::uint32_t>(ep.behavior_probs[0].size());
  w.put<std::uint32_t>(a_count);
  for (std::uint32_t h = 0; h < len; ++h) {
    w.put<std::int32_t>(ep.actions.at(h));
    w.put<double>(ep.rewards.at(h));
    w.put<std::uint8_t>(ep.dones.at(h));
    w.put<double>(ep.true_severity.at(h));
    for (std::uint32_t a = 0; a < a_count; ++a) w.put<double>(ep.behavior_probs.at(h)(a));
  }
  w.put<std::uint8_t>(ep.outcome.has_value() ? 1 : 0);
  w.put<std::int32_t>(ep.outcome.value_or(0));
  return std::move(w.bytes());
}

Episode decode_episode(const std::uint8_t* data, std::size_t size) {
  Reader r(data, size);
  Episode ep;
  ep.id = r.get<std::uint64_t>();
  const auto n_static = r.get<std::uint32_t>();
  ep.static_features.resize(n_static);
  for (std::uint32_t i = 0; i < n_static; ++i) ep.static_features(i) = r.get<double>();
  const auto len = r.get<std::uint32_t>();
  const auto u_count = r.get<std::uint32_t>();
  const auto d_count = r.get<std::uint32_t>();
  const auto m_count = r.get<std::uint32_t>();
  const auto e_dim = r.get<std::uint32_t>();
  for (std::uint32_t h = 0; h < len; ++h) {
    StepObservation step;
    step.values.resize(u_count, d_count);
    step.mask.resize(u_count, d_count);
    step.time_gaps.resize(u_count, d_count);
    for (std::uint32_t u = 0; u < u_count; ++u)
      for (std::uint32_t d = 0; d < d_count; ++d) step.values(u, d) = r.get<double>();
    for (std::uint32_t u = 0; u < u_count; ++u)
      for (std::uint32_t d = 0; d < d_count; ++d) {
        const auto m = r.get<std::uint8_t>();
        if (m > 1) throw std::runtime_error("cohort record: mask not binary");
        step.mask(u, d) = m;
        if (!m) step.values(u, d) = kUnobserved;
      }
    for (std::uint32_t u = 0; u < u_count; ++u)
      for (std::uint32_t d = 0; d < d_count; ++d) step.time_gaps(u, d) = r.get<double>();
    step.text_notes.resize(m_count);
    step.text_counts.assign(m_count, 0);
    step.text_mask = VectorXd::Zero(m_count);
    for (std::uint32_t j = 0; j < m_count; ++j) {
      const auto count = r.get<std::uint32_t>();
      MatrixXd notes(count, e_dim);
      for (std::uint32_t n = 0; n < count; ++n)
        for (std::uint32_t k = 0; k < e_dim; ++k) notes(n, k) = r.get<double>();
      step.text_notes[j] = std::move(notes);
      step.text_counts[j] = static_cast<int>(count);
      step.text_mask(j) = count > 0 ? 1.0 : 0.0;
    }
    step.text_recency = r.get<double>();
    step.doc_density = r.get<double>();
    ep.steps.push_back(std::move(step));
  }
  const auto a_count = r.get<std::uint32_t>();
  for (std::uint32_t h = 0; h < len; ++h) {
    ep.actions.push_back(r.get<std::int32_t>());
    ep.rewards.push_back(r.get<double>());
    ep.dones.push_back(r.get<std::uint8_t>());
    ep.true_severity.push_back(r.get<double>());
    VectorXd probs(a_count);
    for (std::uint32_t a = 0; a < a_count; ++a) probs(a) = r.get<double>();
    ep.behavior_probs.push_back(std::move(probs));
  }
  const auto has_outcome = r.get<std::uint8_t>();
  const auto outcome = r.get<std::int32_t>();
  if (has_outcome) ep.outcome = outcome;
  if (!r.done()) throw std::runtime_error("cohort record: trailing bytes");
  return ep;
}

std::vector<std::uint8_t> encode_records(const std::vector<Episode>& episodes) {
  std::vector<std::uint8_t> out;
  for (const auto& ep : episodes) {
    const auto payload = encode_episode(ep);
    const std::uint64_t n = payload.size();
    const auto* p = reinterpret_cast<const std::uint8_t*>(&n);
    out.insert(out.end(), p, p + sizeof(n));
    out.insert(out.end(), payload.begin(), payload.end());
  }
  return out;
}

std::vector<Episode> decode_records(const std::vector<std::uint8_t>& bytes) {
  std::vector<Episode> out;
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    if (pos + sizeof(std::uint64_t) > bytes.size()) throw std::runtime_error("record length truncated");
    std::uint64_t n;
    std::memcpy(&n, bytes.data() + pos, sizeof(n));
    pos += sizeof(n);
    if (pos + n > bytes.size()) throw std::runtime_error("record payload truncated");
    out.push_back(decode_episode(bytes.data() + pos, n));
    pos += n;
  }
  return out;
}

nlohmann::json cohort_manifest(const Cohort& cohort) {
  nlohmann::json split = nlohmann::json::array();
  for (auto s : cohort.split) {
    split.push_back(s == Split::kTrain ? "train" : s == Split::kValidation ? "val" : "test");
  }
  return {
      {"schema_version", kCohortSchemaVersion},
      {"kind", "mnarrl-cohort"},
      {"config", to_json(cohort.config)},
      {"n_episodes", cohort.episodes.size()},
      {"records", "episodes.bin"},
      {"encoding", "u64le length-prefixed binary records, little-endian f64"},
      {"split", split},
  };
}

void write_cohort(const Cohort& cohort, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
    out << cohort_manifest(cohort).dump(2) << "\n";
  }
  const auto bytes = encode_records(cohort.episodes);
  std::ofstream out(dir / "episodes.bin", std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + (dir / "episodes.bin").string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Cohort read_cohort(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing cohort manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("malformed cohort manifest: ") + e.what());
  }
  if (manifest.value("schema_version", -1) != kCohortSchemaVersion) {
    throw std::runtime_error("unsupported cohort schema version");
  }
  Cohort cohort;
  cohort.config = sim_config_from_json(manifest.at("config"));
  const auto records = manifest.value("records", std::string("episodes.bin"));
  std::ifstream bin(dir / records, std::ios::binary);
  if (!bin) throw std::runtime_error("missing cohort records in " + dir.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(bin)),
                                  std::istreambuf_iterator<char>());
  cohort.episodes = decode_records(bytes);
  if (cohort.episodes.size() != manifest.at("n_episodes").get<std::size_t>()) {
    throw std::runtime_error("cohort manifest episode count mismatch");
  }
  for (const auto& s : manifest.at("split")) {
    const auto label = s.get<std::string>();
    if (label == "train") cohort.split.push_back(Split::kTrain);
    else if (label == "val") cohort.split.push_back(Split::kValidation);
    else if (label == "test") cohort.split.push_back(Split::kTest);
    else throw std::runtime_error("unknown split label '" + label + "'");
  }
  if (!cohort.split.empty() && cohort.split.size() != cohort.episodes.size()) {
    throw std::runtime_error("cohort manifest split length mismatch");
  }
  return cohort;
}

int apply_text_sidecar(Cohort& cohort, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open text sidecar " + path.string());
  std::unordered_map<std::uint64_t, std::size_t> by_id;
  for (std::size_t i = 0; i < cohort.episodes.size(); ++i) by_id[cohort.episodes[i].id] = i;

  std::vector<std::size_t> touched;
  std::string line;
  int applied = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto rec = nlohmann::json::parse(line);
    const auto id = rec.at("episode").get<std::uint64_t>();
    const auto step = rec.at("step").get<int>();
    const auto modality = rec.at("modality").get<int>();
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw std::runtime_error("sidecar: unknown episode");
    auto& ep = cohort.episodes[it->second];
    if (step < 0 || step >= ep.length()) throw std::runtime_error("sidecar: step out of range");
    auto& obs = ep.steps[static_cast<std::size_t>(step)];
    if (modality < 0 || modality >= static_cast<int>(obs.text_notes.size())) {
      throw std::runtime_error("sidecar: modality out of range");
    }
    const auto& rows = rec.at("embeddings");
    const int dim = cohort.config.text_embed_dim;
    const int count = std::min<int>(static_cast<int>(rows.size()), cohort.config.max_notes_per_modality);
    MatrixXd notes(count, dim);
    for (int n = 0; n < count; ++n) {
      if (static_cast<int>(rows[static_cast<std::size_t>(n)].size()) != dim) {
        throw std::runtime_error("sidecar: embedding dimension mismatch");
      }
      for (int k = 0; k < dim; ++k) notes(n, k) = rows[static_cast<std::size_t>(n)][static_cast<std::size_t>(k)].get<double>();
    }
    obs.text_notes[static_cast<std::size_t>(modality)] = std::move(notes);
    obs.text_counts[static_cast<std::size_t>(modality)] = count;
    obs.text_mask(modality) = count > 0 ? 1.0 : 0.0;
    touched.push_back(it->second);
    ++applied;
  }

  const auto& cfg = cohort.config;
  SummaryGrid grid{cfg.sub_step_hours, cfg.sub_steps_per_decision, cfg.horizon_hours()};
  for (std::size_t idx : touched) {
    auto& ep = cohort.episodes[idx];
    const int len = ep.length();
    const int u = cfg.sub_steps_per_decision;
    MatrixXd masks(len * u, cfg.n_structured);
    Eigen::MatrixXi counts(len, cfg.n_text_modalities);
    for (int h = 0; h < len; ++h) {
      masks.middleRows(h * u, u) = ep.steps[static_cast<std::size_t>(h)].mask;
      for (int j = 0; j < cfg.n_text_modalities; ++j)
        counts(h, j) = ep.steps[static_cast<std::size_t>(h)].text_counts[static_cast<std::size_t>(j)];
    }
    const auto s = compute_summaries(masks, counts, cfg.density_window_steps,
                                     cfg.frequency_window_hours, grid);
    for (int h = 0; h < len; ++h) {
      ep.steps[static_cast<std::size_t>(h)].text_recency = s.text_recency(h);
      ep.steps[static_cast<std::size_t>(h)].doc_density = s.doc_density(h);
    }
  }
  return applied;
}

}  // namespace mnarrl::sim
