#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "trajguide/geometry.hpp"
#include "trajguide/guidance.hpp"
#include "trajguide/image_io.hpp"
#include "trajguide/model.hpp"
#include "trajguide/scene.hpp"

namespace trajguide {

using Json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

enum class ConfigErrorCode {
  missing_file,
  malformed_json,
  unknown_schema,
  token_out_of_range,
  malformed_trajectory,
  invalid_value,
};

std::string_view to_string(ConfigErrorCode code);

/// Config rejection. `field` is a JSON path such as "trajectories[1].polylines".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(ConfigErrorCode code, std::string field, const std::string& message)
      : std::runtime_error(message), code_(code), field_(std::move(field)) {}

  [[nodiscard]] ConfigErrorCode code() const { return code_; }
  [[nodiscard]] const std::string& field() const { return field_; }

 private:
  ConfigErrorCode code_;
  std::string field_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Seeded scene suite used by `ablate` and `sweep-lambda`.
struct SuiteSpec {
  int count = 20;
  std::uint64_t seed = 2024;
  bool operator==(const SuiteSpec&) const = default;
};

struct RunConfig {
  int schema_version = kSchemaVersion;
  ModelConfig model;
  GuidanceConfig guidance;
  std::vector<int> prompt;
  std::vector<Trajectory> trajectories;
  std::string output_dir = "runs/default";
  std::optional<SuiteSpec> suite;

  bool operator==(const RunConfig&) const = default;
};

Trajectory trajectory_from_json(const Json& j, const std::string& field = "trajectory");
Json trajectory_to_json(const Trajectory& traj);

/// Parses and validates; fills defaults for absent fields.
RunConfig run_config_from_json(const Json& j);
Json run_config_to_json(const RunConfig& cfg);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);

/// Stable text form (sorted keys, two-space indent, trailing newline).
std::string dump_json(const Json& j);

/// Recorded attention: payload ordered (step, layer, location, token).
struct AttentionTrace {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t tokens = 0;
  std::uint32_t layers = 0;
  std::uint32_t steps = 0;
  std::vector<float> payload;

  [[nodiscard]] std::uint64_t expected_floats() const {
    return std::uint64_t{steps} * layers * height * width * tokens;
  }
  bool operator==(const AttentionTrace&) const = default;
};

class TraceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kTraceHeaderBytes = 28;

Bytes encode_trace(const AttentionTrace& trace);
AttentionTrace decode_trace(std::span<const unsigned char> bytes);
void write_trace(const AttentionTrace& trace, const std::filesystem::path& path);
AttentionTrace read_trace(const std::filesystem::path& path);
AttentionTrace trace_roundtrip(const AttentionTrace& trace, const std::filesystem::path& path);

/// Trace of the steps that carry recorded attention.
AttentionTrace trace_from_result(const SampleResult& result, GridDims latent, std::size_t layers);

struct ManifestEntry {
  std::string path;
  std::string sha256;
  std::uint64_t bytes = 0;
};

struct Manifest {
  std::vector<ManifestEntry> files;
  [[nodiscard]] const ManifestEntry* find(const std::string& path) const;
};

/// "metrics" block plus run summary, as served by the result endpoint.
Json result_to_json(const SampleResult& result);
std::string energies_csv(const SampleResult& result);

/// Writes config.json, image.png, mask_<i>.png per prompt token, metrics.json,
/// energies.csv, attention.atrc (when recorded) and manifest.json.
Manifest write_run_artifacts(const SampleResult& result, const RunConfig& cfg, const std::filesystem::path& dir);

Manifest read_manifest(const std::filesystem::path& path);

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const unsigned char> data);
void write_file(const std::filesystem::path& path, std::string_view text);

}  // namespace trajguide
