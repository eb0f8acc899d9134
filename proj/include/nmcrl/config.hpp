#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmcrl/data_model.hpp"
#include "nmcrl/train_config.hpp"

namespace nmcrl {

inline constexpr const char* kToolVersion = "0.1.0";

// Reads a JSON object from disk. A file holding only whitespace reads as {}.
nlohmann::json read_json_file(const std::filesystem::path& path);

// Applies "a.b=value" overrides in order. Values parse as JSON where possible
// (numbers, booleans, arrays), otherwise as plain strings.
void apply_overrides(nlohmann::json& j, const std::vector<std::string>& overrides);

TrainConfig parse_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides = {});

nlohmann::json to_json(const SynthSpec& spec);
SynthSpec synth_spec_from_json(const nlohmann::json& j);  // strict, like TrainConfig
SynthSpec parse_synth_spec(const std::optional<std::filesystem::path>& path,
                           const std::vector<std::string>& overrides = {});

// Hex SHA-256 of a file, or of a directory's regular files (relative path and
// contents, sorted by path; run manifests excluded).
std::string digest_path(const std::filesystem::path& path);

struct RunInput {
  std::string path;
  std::string sha256;
};

// Record of one CLI run: enough to repeat it.
struct RunManifest {
  std::string subcommand;
  nlohmann::json config;  // resolved, defaults materialised
  std::uint64_t seed = 0;
  std::map<std::string, RunInput> inputs;
  std::string tool_version = kToolVersion;

  void add_input(const std::string& role, const std::filesystem::path& path);
  // Throws DataError when an input is missing or its digest changed.
  void verify_inputs() const;
  const std::string& input_path(const std::string& role) const;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  void write(const std::filesystem::path& path) const;
  static RunManifest load(const std::filesystem::path& path);
};

// Where a run writes its manifest: inside an output directory, or beside an
// output file as <file>.manifest.json.
std::filesystem::path manifest_path_for_dir(const std::filesystem::path& dir);
std::filesystem::path manifest_path_for_file(const std::filesystem::path& file);

}  // namespace nmcrl
