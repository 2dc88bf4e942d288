#include "mnarrl/checkpoint.hpp"

#include "mnarrl/config.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>

namespace mnarrl::checkpoint {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'N', 'A', 'R', 'C', 'K', 'P', 'T'};

class Out {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class In {
 public:
  explicit In(const std::vector<std::uint8_t>& b) : b_(b) {}
  template <typename T>
  T get() {
    T v;
    raw(&v, sizeof(T));
    return v;
  }
  void raw(void* out, std::size_t n) {
    if (n > remaining()) throw std::runtime_error("checkpoint truncated");
    std::memcpy(out, b_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == b_.size(); }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

std::vector<std::pair<std::string, Matrix>> stats_tensors(const sim::NormalizationStats& s) {
  Matrix text(1, 4);
  text << s.text_recency_mean, s.text_recency_std, s.doc_density_mean, s.doc_density_std;
  return {{"stats.mean", s.mean.transpose()}, {"stats.stddev", s.stddev.transpose()}, {"stats.text", text}};
}

void put_tensor(Out& out, const std::string& name, const Matrix& m) {
  out.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
  out.raw(name.data(), name.size());
  out.put<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
  out.put<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out.put<double>(m(r, c));
  }
}

nlohmann::json full_manifest(const model::ModelBundle& bundle, const nlohmann::json& manifest) {
  nlohmann::json m = manifest.is_object() ? manifest : nlohmann::json::object();
  m["model"] = config::to_json(bundle.config);
  m["data"] = config::to_json(bundle.data);
  return m;
}

}  // namespace

std::vector<std::uint8_t> encode(const model::ModelBundle& bundle, const nlohmann::json& manifest) {
  Out out;
  out.raw(kMagic, sizeof(kMagic));
  out.put<std::uint32_t>(kFormatVersion);
  const std::string text = full_manifest(bundle, manifest).dump();
  out.put<std::uint64_t>(text.size());
  out.raw(text.data(), text.size());
  const auto stats = stats_tensors(bundle.stats);
  const auto params = bundle.all_parameters();
  out.put<std::uint64_t>(stats.size() + params.size());
  for (const auto& [name, m] : stats) put_tensor(out, name, m);
  for (const auto& p : params.items()) put_tensor(out, p.name, p.var.value());
  return out.bytes;
}

Loaded decode(const std::vector<std::uint8_t>& bytes) {
  In in(bytes);
  char magic[8];
  in.raw(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw std::runtime_error("not a checkpoint file");
  const auto version = in.get<std::uint32_t>();
  if (version != kFormatVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  const auto text_len = in.get<std::uint64_t>();
  if (text_len > in.remaining()) throw std::runtime_error("checkpoint truncated");
  std::string text(text_len, '\0');
  in.raw(text.data(), text_len);
  Loaded loaded;
  try {
    loaded.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint manifest: ") + e.what());
  }
  std::map<std::string, Matrix> tensors;
  const auto count = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = in.get<std::uint32_t>();
    if (name_len > in.remaining()) throw std::runtime_error("checkpoint truncated");
    std::string name(name_len, '\0');
    in.raw(name.data(), name_len);
    const auto rows = in.get<std::uint64_t>();
    const auto cols = in.get<std::uint64_t>();
    if (cols != 0 && rows > in.remaining() / sizeof(double) / cols) {
      throw std::runtime_error("checkpoint truncated");
    }
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = in.get<double>();
    }
    if (!tensors.emplace(name, std::move(m)).second) {
      throw std::runtime_error("duplicate checkpoint tensor '" + name + "'");
    }
  }
  if (!in.done()) throw std::runtime_error("trailing bytes after checkpoint tensors");

  auto take = [&](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("checkpoint lacks tensor '" + name + "'");
    Matrix m = std::move(it->second);
    tensors.erase(it);
    return m;
  };
  sim::NormalizationStats stats;
  stats.mean = take("stats.mean").transpose();
  stats.stddev = take("stats.stddev").transpose();
  const Matrix text_stats = take("stats.text");
  stats.text_recency_mean = text_stats(0, 0);
  stats.text_recency_std = text_stats(0, 1);
  stats.doc_density_mean = text_stats(0, 2);
  stats.doc_density_std = text_stats(0, 3);

  const auto model_config = config::model_config_from_json(loaded.manifest.at("model"));
  const auto data = config::data_dims_from_json(loaded.manifest.at("data"));
  loaded.bundle = model::ModelBundle(model_config, data, stats, 0);
  const auto params = loaded.bundle.all_parameters();
  for (const auto& p : params.items()) {
    Matrix m = take(p.name);
    if (m.rows() != p.var.rows() || m.cols() != p.var.cols()) {
      throw std::runtime_error("checkpoint tensor '" + p.name + "' has the wrong shape");
    }
    ad::Var v = p.var;
    v.mutable_value() = std::move(m);
  }
  if (!tensors.empty()) {
    throw std::runtime_error("checkpoint has unexpected tensor '" + tensors.begin()->first + "'");
  }
  return loaded;
}

void save(const std::filesystem::path& path, const model::ModelBundle& bundle,
          const nlohmann::json& manifest) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = encode(bundle, manifest);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Loaded load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

}  // namespace mnarrl::checkpoint
