#pragma once

// On-disk cohort format.
//
//   <dir>/manifest.json   schema version, SimConfig echo, split labels
//   <dir>/episodes.bin    concatenated records: u64 byte length + payload
//
// All integers and IEEE-754 doubles are little-endian. Unobserved values are
// written as 0.0 and read back as the in-memory sentinel; the mask is
// authoritative. Encoding a decoded cohort reproduces identical bytes.

#include "mnarrl/cohort.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mnarrl::sim {

inline constexpr int kCohortSchemaVersion = 1;

nlohmann::json to_json(const SimConfig& config);
// Unknown keys and type mismatches throw std::invalid_argument.
SimConfig sim_config_from_json(const nlohmann::json& j);

std::vector<std::uint8_t> encode_episode(const Episode& episode);
Episode decode_episode(const std::uint8_t* data, std::size_t size);

std::vector<std::uint8_t> encode_records(const std::vector<Episode>& episodes);
std::vector<Episode> decode_records(const std::vector<std::uint8_t>& bytes);

nlohmann::json cohort_manifest(const Cohort& cohort);

void write_cohort(const Cohort& cohort, const std::filesystem::path& dir);
Cohort read_cohort(const std::filesystem::path& dir);

// Replaces note embeddings from a JSON-lines sidecar. Each line:
//   {"episode": id, "step": h, "modality": j, "embeddings": [[...], ...]}
// Counts, presence, recency and density are recomputed afterwards.
// Returns the number of (episode, step, modality) entries applied.
int apply_text_sidecar(Cohort& cohort, const std::filesystem::path& path);

}  // namespace mnarrl::sim
