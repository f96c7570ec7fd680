#include "trajguide/formats.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <set>

namespace trajguide {

std::string_view to_string(ConfigErrorCode code) {
  switch (code) {
    case ConfigErrorCode::missing_file: return "missing_file";
    case ConfigErrorCode::malformed_json: return "malformed_json";
    case ConfigErrorCode::unknown_schema: return "unknown_schema";
    case ConfigErrorCode::token_out_of_range: return "token_out_of_range";
    case ConfigErrorCode::malformed_trajectory: return "malformed_trajectory";
    case ConfigErrorCode::invalid_value: return "invalid_value";
  }
  return "unknown";
}

namespace {

[[noreturn]] void fail(ConfigErrorCode code, const std::string& field, const std::string& message) {
  throw ConfigError(code, field, field + ": " + message);
}

void require_object(const Json& j, const std::string& field, std::initializer_list<std::string_view> known) {
  if (!j.is_object()) fail(ConfigErrorCode::invalid_value, field, "expected an object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      fail(ConfigErrorCode::invalid_value, field.empty() ? key : field + "." + key, "unknown field");
    }
  }
}

// Reads j[key] as T when present, leaving `out` untouched otherwise.
template <typename T>
void read_opt(const Json& j, const std::string& field, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  const std::string path = field.empty() ? key : field + "." + key;
  if constexpr (std::is_same_v<T, bool>) {
    if (!it->is_boolean()) fail(ConfigErrorCode::invalid_value, path, "expected a boolean");
  } else if constexpr (std::is_integral_v<T>) {
    if (!it->is_number_integer()) fail(ConfigErrorCode::invalid_value, path, "expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (it->is_number_unsigned() == false && it->template get<std::int64_t>() < 0) {
        fail(ConfigErrorCode::invalid_value, path, "expected a non-negative integer");
      }
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!it->is_number()) fail(ConfigErrorCode::invalid_value, path, "expected a number");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!it->is_string()) fail(ConfigErrorCode::invalid_value, path, "expected a string");
  }
  out = it->template get<T>();
}

double number_at(const Json& j, const std::string& field) {
  if (!j.is_number()) fail(ConfigErrorCode::malformed_trajectory, field, "expected a number");
  return j.get<double>();
}

ModelConfig model_from_json(const Json& j) {
  require_object(j, "model", {"seed", "height", "width", "channels", "d_k", "layers", "query_gain", "feedback",
                              "render_factor", "mask_sigma"});
  ModelConfig m;
  read_opt(j, "model", "seed", m.seed);
  read_opt(j, "model", "height", m.height);
  read_opt(j, "model", "width", m.width);
  read_opt(j, "model", "channels", m.channels);
  read_opt(j, "model", "d_k", m.d_k);
  read_opt(j, "model", "layers", m.layers);
  read_opt(j, "model", "query_gain", m.query_gain);
  read_opt(j, "model", "feedback", m.feedback);
  read_opt(j, "model", "render_factor", m.render_factor);
  read_opt(j, "model", "mask_sigma", m.mask_sigma);
  try {
    validate(m);
  } catch (const std::exception& e) {
    fail(ConfigErrorCode::invalid_value, "model", e.what());
  }
  return m;
}

Json model_to_json(const ModelConfig& m) {
  return Json{{"seed", m.seed},          {"height", m.height},         {"width", m.width},
              {"channels", m.channels},  {"d_k", m.d_k},               {"layers", m.layers},
              {"query_gain", m.query_gain}, {"feedback", m.feedback},  {"render_factor", m.render_factor},
              {"mask_sigma", m.mask_sigma}};
}

GuidanceConfig guidance_from_json(const Json& j) {
  require_object(j, "guidance", {"mode", "lambda", "eta", "epsilon", "guided_steps", "repeats_per_step", "layers",
                                 "total_steps", "seed", "beta_start", "beta_end", "expand_radius",
                                 "prior_threshold", "prior_warmup_steps", "record_attention"});
  GuidanceConfig g;
  if (auto it = j.find("mode"); it != j.end()) {
    if (!it->is_string()) fail(ConfigErrorCode::invalid_value, "guidance.mode", "expected a string");
    try {
      g.mode = parse_mode(it->get<std::string>());
    } catch (const std::exception& e) {
      fail(ConfigErrorCode::invalid_value, "guidance.mode", e.what());
    }
  }
  read_opt(j, "guidance", "lambda", g.lambda);
  read_opt(j, "guidance", "eta", g.eta);
  read_opt(j, "guidance", "epsilon", g.epsilon);
  read_opt(j, "guidance", "guided_steps", g.guided_steps);
  read_opt(j, "guidance", "repeats_per_step", g.repeats_per_step);
  read_opt(j, "guidance", "total_steps", g.total_steps);
  read_opt(j, "guidance", "seed", g.seed);
  read_opt(j, "guidance", "beta_start", g.beta_start);
  read_opt(j, "guidance", "beta_end", g.beta_end);
  read_opt(j, "guidance", "expand_radius", g.expand_radius);
  read_opt(j, "guidance", "prior_threshold", g.prior_threshold);
  read_opt(j, "guidance", "prior_warmup_steps", g.prior_warmup_steps);
  read_opt(j, "guidance", "record_attention", g.record_attention);
  if (auto it = j.find("layers"); it != j.end()) {
    if (!it->is_array()) fail(ConfigErrorCode::invalid_value, "guidance.layers", "expected an array");
    for (const Json& v : *it) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0) fail(ConfigErrorCode::invalid_value, "guidance.layers", "expected layer indices");
      g.layers.push_back(v.get<std::size_t>());
    }
  }
  try {
    validate(g);
    build_schedule(g.total_steps, g.beta_start, g.beta_end);
  } catch (const std::exception& e) {
    fail(ConfigErrorCode::invalid_value, "guidance", e.what());
  }
  return g;
}

Json guidance_to_json(const GuidanceConfig& g) {
  return Json{{"mode", std::string(to_string(g.mode))},
              {"lambda", g.lambda},
              {"eta", g.eta},
              {"epsilon", g.epsilon},
              {"guided_steps", g.guided_steps},
              {"repeats_per_step", g.repeats_per_step},
              {"layers", g.layers},
              {"total_steps", g.total_steps},
              {"seed", g.seed},
              {"beta_start", g.beta_start},
              {"beta_end", g.beta_end},
              {"expand_radius", g.expand_radius},
              {"prior_threshold", g.prior_threshold},
              {"prior_warmup_steps", g.prior_warmup_steps},
              {"record_attention", g.record_attention}};
}

}  // namespace

Trajectory trajectory_from_json(const Json& j, const std::string& field) {
  if (!j.is_object()) fail(ConfigErrorCode::malformed_trajectory, field, "expected an object");
  for (const auto& [key, value] : j.items()) {
    if (key != "token_index" && key != "polylines" && key != "weights") {
      fail(ConfigErrorCode::malformed_trajectory, field + "." + key, "unknown field");
    }
  }
  Trajectory t;
  auto idx = j.find("token_index");
  if (idx == j.end() || !idx->is_number_integer()) {
    fail(ConfigErrorCode::malformed_trajectory, field + ".token_index", "expected an integer");
  }
  if (idx->get<std::int64_t>() < 0) fail(ConfigErrorCode::token_out_of_range, field + ".token_index", "token index out of range");
  t.token_index = idx->get<std::size_t>();

  auto lines = j.find("polylines");
  if (lines == j.end() || !lines->is_array()) {
    fail(ConfigErrorCode::malformed_trajectory, field + ".polylines", "expected an array of polylines");
  }
  for (std::size_t p = 0; p < lines->size(); ++p) {
    const std::string pfield = fmt::format("{}.polylines[{}]", field, p);
    const Json& line = (*lines)[p];
    if (!line.is_array()) fail(ConfigErrorCode::malformed_trajectory, pfield, "expected an array of [row, col] pairs");
    Polyline poly;
    for (std::size_t v = 0; v < line.size(); ++v) {
      const Json& vertex = line[v];
      const std::string vfield = fmt::format("{}[{}]", pfield, v);
      if (!vertex.is_array() || vertex.size() != 2) fail(ConfigErrorCode::malformed_trajectory, vfield, "expected [row, col]");
      poly.push_back({number_at(vertex[0], vfield), number_at(vertex[1], vfield)});
    }
    t.polylines.push_back(std::move(poly));
  }
  if (auto w = j.find("weights"); w != j.end()) {
    if (!w->is_array()) fail(ConfigErrorCode::malformed_trajectory, field + ".weights", "expected an array");
    for (const Json& v : *w) t.enhancement_weights.push_back(number_at(v, field + ".weights"));
  }
  try {
    validate(t);
  } catch (const GeometryError& e) {
    fail(ConfigErrorCode::malformed_trajectory, field, e.what());
  }
  return t;
}

Json trajectory_to_json(const Trajectory& traj) {
  Json lines = Json::array();
  for (const Polyline& p : traj.polylines) {
    Json line = Json::array();
    for (const Vertex& v : p) line.push_back(Json::array({v.row, v.col}));
    lines.push_back(std::move(line));
  }
  Json out{{"token_index", traj.token_index}, {"polylines", std::move(lines)}};
  if (!traj.enhancement_weights.empty()) out["weights"] = traj.enhancement_weights;
  return out;
}

RunConfig run_config_from_json(const Json& j) {
  if (!j.is_object()) fail(ConfigErrorCode::invalid_value, "config", "expected an object");
  RunConfig cfg;
  // A missing version means the current one; any other explicit value is rejected.
  if (auto it = j.find("schema_version"); it != j.end()) {
    if (!it->is_number_integer() || it->get<std::int64_t>() != kSchemaVersion) {
      fail(ConfigErrorCode::unknown_schema, "schema_version", fmt::format("unknown schema_version {}", it->dump()));
    }
  }
  require_object(j, "", {"schema_version", "model", "guidance", "prompt", "trajectories", "output_dir", "suite"});
  if (auto it = j.find("model"); it != j.end()) cfg.model = model_from_json(*it);
  if (auto it = j.find("guidance"); it != j.end()) cfg.guidance = guidance_from_json(*it);

  auto prompt = j.find("prompt");
  if (prompt == j.end() || !prompt->is_array() || prompt->empty()) {
    fail(ConfigErrorCode::invalid_value, "prompt", "expected a non-empty array of token ids");
  }
  for (const Json& id : *prompt) {
    if (!id.is_number_integer()) fail(ConfigErrorCode::invalid_value, "prompt", "token ids must be integers");
    cfg.prompt.push_back(id.get<int>());
  }

  if (auto it = j.find("trajectories"); it != j.end()) {
    if (!it->is_array()) fail(ConfigErrorCode::malformed_trajectory, "trajectories", "expected an array");
    std::set<std::size_t> seen;
    for (std::size_t i = 0; i < it->size(); ++i) {
      const std::string field = fmt::format("trajectories[{}]", i);
      Trajectory t = trajectory_from_json((*it)[i], field);
      if (t.token_index >= cfg.prompt.size()) {
        fail(ConfigErrorCode::token_out_of_range, field + ".token_index", "token index out of range");
      }
      if (!seen.insert(t.token_index).second) {
        fail(ConfigErrorCode::malformed_trajectory, field + ".token_index", "token already has a trajectory");
      }
      cfg.trajectories.push_back(std::move(t));
    }
  }
  for (std::size_t layer : cfg.guidance.layers) {
    if (layer >= static_cast<std::size_t>(cfg.model.layers)) {
      fail(ConfigErrorCode::invalid_value, "guidance.layers", "layer not available");
    }
  }
  read_opt(j, "", "output_dir", cfg.output_dir);
  if (cfg.output_dir.empty()) fail(ConfigErrorCode::invalid_value, "output_dir", "must not be empty");
  if (auto it = j.find("suite"); it != j.end()) {
    require_object(*it, "suite", {"count", "seed"});
    SuiteSpec s;
    read_opt(*it, "suite", "count", s.count);
    read_opt(*it, "suite", "seed", s.seed);
    if (s.count < 1) fail(ConfigErrorCode::invalid_value, "suite.count", "must be at least 1");
    cfg.suite = s;
  }
  return cfg;
}

Json run_config_to_json(const RunConfig& cfg) {
  Json trajs = Json::array();
  for (const Trajectory& t : cfg.trajectories) trajs.push_back(trajectory_to_json(t));
  Json out{{"schema_version", cfg.schema_version},
           {"model", model_to_json(cfg.model)},
           {"guidance", guidance_to_json(cfg.guidance)},
           {"prompt", cfg.prompt},
           {"trajectories", std::move(trajs)},
           {"output_dir", cfg.output_dir}};
  if (cfg.suite) out["suite"] = Json{{"count", cfg.suite->count}, {"seed", cfg.suite->seed}};
  return out;
}

std::string dump_json(const Json& j) { return j.dump(2) + "\n"; }

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ConfigErrorCode::missing_file, path.string(), "cannot open config file");
  Json j = Json::parse(in, nullptr, false);
  if (j.is_discarded()) fail(ConfigErrorCode::malformed_json, path.string(), "not valid JSON");
  return run_config_from_json(j);
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
  write_file(path, dump_json(run_config_to_json(cfg)));
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read {}: {}", path.string(), std::strerror(errno)));
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const unsigned char> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot write {}: {}", path.string(), std::strerror(errno)));
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError(fmt::format("short write to {}", path.string()));
}

void write_file(const std::filesystem::path& path, std::string_view text) {
  write_file(path, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------
// Attention traces
//
// Header (28 bytes): "ATRC1", endianness tag 'L', two zero bytes, then H, W, m,
// layers, steps as little-endian uint32. The payload follows as little-endian
// float32.

namespace {

void put_le32(Bytes& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint32_t get_le32(std::span<const unsigned char> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{in[at + static_cast<std::size_t>(i)]} << (8 * i);
  return v;
}

}  // namespace

Bytes encode_trace(const AttentionTrace& trace) {
  if (trace.payload.size() != trace.expected_floats()) throw TraceError("trace payload does not match its header");
  Bytes out{'A', 'T', 'R', 'C', '1', 'L', 0, 0};
  for (std::uint32_t v : {trace.height, trace.width, trace.tokens, trace.layers, trace.steps}) put_le32(out, v);
  out.reserve(kTraceHeaderBytes + trace.payload.size() * 4);
  for (float f : trace.payload) put_le32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

AttentionTrace decode_trace(std::span<const unsigned char> bytes) {
  if (bytes.size() < kTraceHeaderBytes) {
    throw TraceError(fmt::format("corrupt trace: expected at least {} header bytes, got {}", kTraceHeaderBytes, bytes.size()));
  }
  if (std::memcmp(bytes.data(), "ATRC1", 5) != 0) throw TraceError("corrupt trace: bad magic");
  if (bytes[5] != 'L') throw TraceError("corrupt trace: unsupported endianness tag");
  AttentionTrace t;
  t.height = get_le32(bytes, 8);
  t.width = get_le32(bytes, 12);
  t.tokens = get_le32(bytes, 16);
  t.layers = get_le32(bytes, 20);
  t.steps = get_le32(bytes, 24);
  const std::uint64_t floats = t.expected_floats();
  const std::uint64_t expected = kTraceHeaderBytes + floats * 4;
  if (bytes.size() != expected) {
    throw TraceError(fmt::format("corrupt trace: expected {} bytes, got {}", expected, bytes.size()));
  }
  t.payload.resize(floats);
  for (std::size_t i = 0; i < floats; ++i) t.payload[i] = std::bit_cast<float>(get_le32(bytes, kTraceHeaderBytes + 4 * i));
  return t;
}

void write_trace(const AttentionTrace& trace, const std::filesystem::path& path) { write_file(path, encode_trace(trace)); }

AttentionTrace read_trace(const std::filesystem::path& path) { return decode_trace(read_file(path)); }

AttentionTrace trace_roundtrip(const AttentionTrace& trace, const std::filesystem::path& path) {
  write_trace(trace, path);
  return read_trace(path);
}

AttentionTrace trace_from_result(const SampleResult& result, GridDims latent, std::size_t layers) {
  AttentionTrace t;
  t.height = static_cast<std::uint32_t>(latent.height);
  t.width = static_cast<std::uint32_t>(latent.width);
  t.tokens = static_cast<std::uint32_t>(result.scene.final_attention.tokens);
  t.layers = static_cast<std::uint32_t>(layers);
  const std::size_t per_step = latent.size() * layers * t.tokens;
  for (const StepRecord& r : result.steps) {
    if (r.attention.empty()) continue;
    if (r.attention.size() != per_step) throw TraceError("recorded attention has an unexpected size");
    t.payload.insert(t.payload.end(), r.attention.begin(), r.attention.end());
    ++t.steps;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Run directories

const ManifestEntry* Manifest::find(const std::string& path) const {
  auto it = std::find_if(files.begin(), files.end(), [&](const ManifestEntry& e) { return e.path == path; });
  return it == files.end() ? nullptr : &*it;
}

Json result_to_json(const SampleResult& result) {
  Json per_instance = Json::array();
  for (std::size_t i = 0; i < result.dtl.tokens.size(); ++i) {
    per_instance.push_back({{"token", result.dtl.tokens[i]}, {"dtl", result.dtl.per_instance[i]}});
  }
  Json blobs = Json::array();
  for (const Blob& b : result.scene.blobs) {
    blobs.push_back({{"token", b.token},
                     {"center", {b.center_row, b.center_col}},
                     {"covariance", {b.cov_rr, b.cov_rc, b.cov_cc}},
                     {"mask_pixels", result.scene.masks[b.token].pixels.size()}});
  }
  Json events = Json::array();
  int overshoots = 0;
  for (const StepRecord& r : result.steps) {
    overshoots += r.overshoots;
    for (const std::string& e : r.events) events.push_back({{"step", r.step}, {"event", e}});
  }
  Json final_energy = Json::object();
  if (!result.steps.empty()) {
    const EnergyBreakdown& e = result.steps.back().energy;
    final_energy = {{"e_control", e.e_control}, {"e_movement", e.e_movement}, {"e_total", e.e_total}};
  }
  return Json{{"metrics", {{"dtl", result.dtl.value}, {"dtl_per_instance", std::move(per_instance)}}},
              {"mode", std::string(to_string(result.config.mode))},
              {"seed", result.config.seed},
              {"steps", result.steps.size()},
              {"constrained_tokens", result.constrained_tokens},
              {"final_energy", std::move(final_energy)},
              {"overshoots", overshoots},
              {"events", std::move(events)},
              {"blobs", std::move(blobs)}};
}

std::string energies_csv(const SampleResult& result) {
  std::string out = "step,t,e_control,e_movement,e_total,latent_norm,guidance_updates,overshoots\n";
  for (const StepRecord& r : result.steps) {
    out += fmt::format("{},{},{:.17g},{:.17g},{:.17g},{:.17g},{},{}\n", r.step, r.t, r.energy.e_control,
                       r.energy.e_movement, r.energy.e_total, r.latent_norm, r.guidance_updates, r.overshoots);
  }
  return out;
}

Manifest write_run_artifacts(const SampleResult& result, const RunConfig& cfg, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create {}: {}", dir.string(), ec.message()));

  Manifest manifest;
  auto emit = [&](const std::string& name, std::span<const unsigned char> data) {
    write_file(dir / name, data);
    manifest.files.push_back({name, sha256_hex(data), data.size()});
  };
  auto emit_text = [&](const std::string& name, const std::string& text) {
    emit(name, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
  };

  // The echo leaves out the output directory so that a run is hash-identical
  // wherever it is written.
  Json echo = run_config_to_json(cfg);
  echo.erase("output_dir");
  emit_text("config.json", dump_json(echo));
  emit("image.png", image_png(result.scene.image));
  for (const GroundTruthMask& m : result.scene.masks) emit(fmt::format("mask_{}.png", m.token), mask_png(m.pixels));
  emit_text("metrics.json", dump_json(result_to_json(result)));
  emit_text("energies.csv", energies_csv(result));
  const bool recorded = std::any_of(result.steps.begin(), result.steps.end(),
                                    [](const StepRecord& r) { return !r.attention.empty(); });
  if (recorded) {
    emit("attention.atrc",
         encode_trace(trace_from_result(result, {cfg.model.height, cfg.model.width},
                                        static_cast<std::size_t>(cfg.model.layers))));
  }

  std::sort(manifest.files.begin(), manifest.files.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.path < b.path; });
  Json files = Json::array();
  for (const ManifestEntry& e : manifest.files) files.push_back({{"path", e.path}, {"sha256", e.sha256}, {"bytes", e.bytes}});
  write_file(dir / "manifest.json", dump_json(Json{{"schema_version", kSchemaVersion}, {"files", std::move(files)}}));
  return manifest;
}

Manifest read_manifest(const std::filesystem::path& path) {
  const Bytes raw = read_file(path);
  Json j = Json::parse(raw.begin(), raw.end(), nullptr, false);
  if (j.is_discarded() || !j.contains("files")) throw IoError(fmt::format("{} is not a manifest", path.string()));
  Manifest m;
  for (const Json& e : j["files"]) {
    m.files.push_back({e.at("path").get<std::string>(), e.at("sha256").get<std::string>(), e.at("bytes").get<std::uint64_t>()});
  }
  return m;
}

}  // namespace trajguide
