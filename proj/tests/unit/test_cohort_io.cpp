#include "mnarrl/cohort_io.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

namespace mnarrl::sim {
namespace {

using testing::TempDir;

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Cohort make_cohort(int n) {
  Cohort c;
  c.config.n_episodes = n;
  c.config.seed = 5;
  c.episodes = generate_cohort(c.config);
  const std::vector<double> f{0.7, 0.15, 0.15};
  split_cohort(c, f, 2);
  return c;
}

TEST(CohortIo, EpisodeEncodeDecodeEncodeIsBitExact) {
  const auto c = make_cohort(25);
  for (const auto& ep : c.episodes) {
    const auto bytes = encode_episode(ep);
    const Episode back = decode_episode(bytes.data(), bytes.size());
    EXPECT_EQ(encode_episode(back), bytes);
    EXPECT_EQ(back.actions, ep.actions);
    EXPECT_EQ(back.outcome, ep.outcome);
  }
}

TEST(CohortIo, DirectoryRoundTripIsBitExact) {
  TempDir a("cohort_a"), b("cohort_b");
  const auto c = make_cohort(30);
  write_cohort(c, a.path());
  const Cohort loaded = read_cohort(a.path());
  EXPECT_EQ(loaded.split, c.split);
  EXPECT_EQ(encode_records(loaded.episodes), encode_records(c.episodes));
  write_cohort(loaded, b.path());
  for (const auto& entry : std::filesystem::directory_iterator(a.path())) {
    const auto other = b.path() / entry.path().filename();
    ASSERT_TRUE(std::filesystem::exists(other)) << other;
    EXPECT_EQ(read_bytes(entry.path()), read_bytes(other)) << entry.path().filename();
  }
}

TEST(CohortIo, ManifestEchoesConfig) {
  const auto c = make_cohort(5);
  const auto m = cohort_manifest(c);
  EXPECT_EQ(m.at("schema_version").get<int>(), kCohortSchemaVersion);
  const auto cfg = sim_config_from_json(to_json(c.config));
  EXPECT_EQ(to_json(cfg), to_json(c.config));
}

TEST(CohortIo, TruncatedRecordsAreRejected) {
  const auto c = make_cohort(3);
  auto bytes = encode_records(c.episodes);
  bytes.resize(bytes.size() - 5);
  EXPECT_THROW(decode_records(bytes), std::exception);
}

TEST(CohortIo, ReadMissingDirectoryThrows) {
  EXPECT_THROW(read_cohort("/nonexistent/mnarrl/cohort"), std::exception);
}

TEST(CohortIo, TextSidecarReplacesEmbeddings) {
  TempDir dir("sidecar");
  auto c = make_cohort(4);
  const auto path = dir.path() / "text.jsonl";
  {
    std::ofstream out(path);
    out << R"({"episode": 1, "step": 0, "modality": 1, "embeddings": [[1,2,3,4,5,6,7,8],[0,0,0,0,0,0,0,1]]})"
        << "\n";
    out << R"({"episode": 2, "step": 0, "modality": 0, "embeddings": []})" << "\n";
  }
  EXPECT_EQ(apply_text_sidecar(c, path), 2);
  const auto& s = c.episodes[1].steps[0];
  EXPECT_EQ(s.text_counts[1], 2);
  EXPECT_EQ(s.text_mask(1), 1.0);
  EXPECT_EQ(s.text_notes[1](0, 7), 8.0);
  EXPECT_EQ(c.episodes[2].steps[0].text_counts[0], 0);
  EXPECT_EQ(c.episodes[2].steps[0].text_mask(0), 0.0);

  std::ofstream(dir.path() / "bad.jsonl") << R"({"episode": 99, "step": 0, "modality": 0, "embeddings": []})";
  EXPECT_THROW(apply_text_sidecar(c, dir.path() / "bad.jsonl"), std::runtime_error);
}

}  // namespace
}  // namespace mnarrl::sim
