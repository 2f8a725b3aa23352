#pragma once

// CSV persistence for episodes and dataset manifests.
//
// Every file starts with "# key: value" comment lines carrying provenance
// (label, seed, policy, config hash), then a header row and one row per tick.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pbal/collect.hpp"

namespace pbal {

using Metadata = std::vector<std::pair<std::string, std::string>>;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);
double parse_double(const std::string& text);

void write_episode_csv(const Episode& ep, const std::filesystem::path& path,
                       const Metadata& meta = {});
Episode read_episode_csv(const std::filesystem::path& path);

struct ManifestEntry {
  std::string file;  // relative to the manifest's directory
  std::string label;
  PolicyKind policy = PolicyKind::Proposed;
  std::uint64_t seed = 0;
  std::size_t ticks = 0;
  bool fell = false;
  std::string error;  // non-empty if collection failed for this entry
};

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path,
                    const Metadata& meta = {});
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

/// Loads every successfully collected episode listed in a manifest.
std::vector<Episode> load_dataset(const std::filesystem::path& manifest);

/// Reads the "# key: value" lines at the top of a file.
Metadata read_metadata(const std::filesystem::path& path);

}  // namespace pbal
