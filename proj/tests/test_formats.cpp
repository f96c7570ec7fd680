#include <cstring>
#include <fstream>
#include <random>

#include "doctest.h"
#include "support.hpp"
#include "trajguide/commands.hpp"
#include "trajguide/formats.hpp"

using namespace trajguide;

namespace {

Json minimal_config() {
  return Json::parse(R"({"prompt": [5, 6], "trajectories": [{"token_index": 1, "polylines": [[[1, 1], [4, 9]]]}]})");
}

ConfigErrorCode code_of(const Json& j) {
  try {
    (void)run_config_from_json(j);
  } catch (const ConfigError& e) {
    return e.code();
  }
  FAIL("config was accepted");
  return ConfigErrorCode::invalid_value;
}

std::uint32_t be32(const Bytes& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) | b[at + 3];
}

}  // namespace

TEST_CASE("config: absent fields take the documented defaults") {
  const RunConfig cfg = run_config_from_json(minimal_config());
  CHECK(cfg.schema_version == 1);
  CHECK(cfg.model == ModelConfig{});
  CHECK(cfg.guidance.lambda == 10.0);
  CHECK(cfg.guidance.eta == 30.0);
  CHECK(cfg.guidance.guided_steps == 10);
  CHECK(cfg.guidance.repeats_per_step == 5);
  CHECK(cfg.guidance.seed == 450);
  CHECK(cfg.guidance.total_steps == 50);
  CHECK(cfg.guidance.mode == GuidanceMode::full);
  CHECK(cfg.output_dir == "runs/default");
  CHECK_FALSE(cfg.suite.has_value());
  REQUIRE(cfg.trajectories.size() == 1);
  CHECK(cfg.trajectories[0].polylines[0][1] == Vertex{4, 9});
}

TEST_CASE("config: JSON round trip") {
  Json j = minimal_config();
  j["guidance"] = {{"lambda", 5.5}, {"mode", "control_only"}, {"layers", {1}}};
  j["model"] = {{"seed", 11}};
  j["suite"] = {{"count", 3}, {"seed", 9}};
  j["trajectories"][0]["weights"] = {2.0};
  const RunConfig cfg = run_config_from_json(j);
  const RunConfig again = run_config_from_json(run_config_to_json(cfg));
  CHECK(again == cfg);
  CHECK(again.guidance.layers == std::vector<std::size_t>{1});
  CHECK(again.trajectories[0].enhancement_weights == std::vector<double>{2.0});

  testing::TempDir dir("cfg");
  save_run_config(cfg, dir / "c.json");
  CHECK(load_run_config(dir / "c.json") == cfg);
}

TEST_CASE("config: every rejection carries its error code") {
  Json j = minimal_config();
  j["schema_version"] = 2;
  CHECK(code_of(j) == ConfigErrorCode::unknown_schema);

  j = minimal_config();
  j["trajectories"][0]["token_index"] = 2;
  CHECK(code_of(j) == ConfigErrorCode::token_out_of_range);
  j["trajectories"][0]["token_index"] = -1;
  CHECK(code_of(j) == ConfigErrorCode::token_out_of_range);

  j = minimal_config();
  j["trajectories"][0]["polylines"] = {{{1}}};
  CHECK(code_of(j) == ConfigErrorCode::malformed_trajectory);
  j["trajectories"][0]["polylines"] = Json::array();
  CHECK(code_of(j) == ConfigErrorCode::malformed_trajectory);
  j = minimal_config();
  j["trajectories"].push_back(j["trajectories"][0]);
  CHECK(code_of(j) == ConfigErrorCode::malformed_trajectory);

  j = minimal_config();
  j["guidance"] = {{"lambda", -1}};
  CHECK(code_of(j) == ConfigErrorCode::invalid_value);
  j["guidance"] = {{"mode", "sideways"}};
  CHECK(code_of(j) == ConfigErrorCode::invalid_value);
  j["guidance"] = {{"layers", {2}}};
  CHECK(code_of(j) == ConfigErrorCode::invalid_value);
  j = minimal_config();
  j["colour"] = "blue";
  CHECK(code_of(j) == ConfigErrorCode::invalid_value);
  j = minimal_config();
  j["prompt"] = Json::array();
  CHECK(code_of(j) == ConfigErrorCode::invalid_value);
  j = minimal_config();
  j["model"] = {{"height", 15}};
  CHECK(code_of(j) == ConfigErrorCode::invalid_value);

  try {
    Json bad = minimal_config();
    bad["trajectories"][0]["token_index"] = 7;
    (void)run_config_from_json(bad);
    FAIL("accepted");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "trajectories[0].token_index");
    CHECK(std::string(e.what()) == "trajectories[0].token_index: token index out of range");
  }
}

TEST_CASE("config: file errors") {
  testing::TempDir dir("cfgfile");
  try {
    (void)load_run_config(dir / "absent.json");
    FAIL("accepted");
  } catch (const ConfigError& e) {
    CHECK(e.code() == ConfigErrorCode::missing_file);
  }
  write_file(dir / "broken.json", std::string_view("{ \"prompt\": [1, "));
  try {
    (void)load_run_config(dir / "broken.json");
    FAIL("accepted");
  } catch (const ConfigError& e) {
    CHECK(e.code() == ConfigErrorCode::malformed_json);
  }
  CHECK(to_string(ConfigErrorCode::token_out_of_range) == "token_out_of_range");
}

TEST_CASE("trace: header layout and round trip") {
  AttentionTrace t{3, 2, 2, 1, 2, {}};
  std::mt19937_64 gen(8);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (std::uint64_t i = 0; i < t.expected_floats(); ++i) t.payload.push_back(u(gen));
  const Bytes bytes = encode_trace(t);
  REQUIRE(bytes.size() == kTraceHeaderBytes + 4 * t.payload.size());
  CHECK(std::memcmp(bytes.data(), "ATRC1L\0\0", 8) == 0);
  CHECK(bytes[8] == 3);
  CHECK(bytes[12] == 2);
  CHECK(bytes[24] == 2);
  float first = 0.0f;
  std::memcpy(&first, bytes.data() + kTraceHeaderBytes, 4);
  CHECK(first == t.payload[0]);
  CHECK(decode_trace(bytes) == t);

  testing::TempDir dir("trace");
  CHECK(trace_roundtrip(t, dir / "a.atrc") == t);

  const AttentionTrace empty{4, 4, 2, 2, 0, {}};
  CHECK(decode_trace(encode_trace(empty)) == empty);
}

TEST_CASE("trace: truncation and corruption are reported") {
  AttentionTrace t{2, 2, 1, 1, 1, {0.1f, 0.2f, 0.3f, 0.4f}};
  Bytes bytes = encode_trace(t);
  bytes.pop_back();
  CHECK_THROWS_WITH_AS(decode_trace(bytes), "corrupt trace: expected 44 bytes, got 43", TraceError);
  CHECK_THROWS_AS(decode_trace(std::span<const unsigned char>(bytes.data(), 10)), TraceError);
  Bytes wrong_magic = encode_trace(t);
  wrong_magic[0] = 'X';
  CHECK_THROWS_AS(decode_trace(wrong_magic), TraceError);
  AttentionTrace mismatched = t;
  mismatched.payload.pop_back();
  CHECK_THROWS_AS(encode_trace(mismatched), TraceError);
}

TEST_CASE("PNG encoder emits a valid signature, IHDR and IEND") {
  const std::vector<std::uint8_t> px(5 * 3 * 3, 128);
  const Bytes png = encode_png(5, 3, 3, px);
  const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  REQUIRE(png.size() > 33);
  CHECK(std::memcmp(png.data(), sig, 8) == 0);
  CHECK(std::memcmp(png.data() + 12, "IHDR", 4) == 0);
  CHECK(be32(png, 16) == 5);
  CHECK(be32(png, 20) == 3);
  CHECK(png[24] == 8);
  CHECK(png[25] == 2);
  CHECK(std::memcmp(png.data() + png.size() - 8, "IEND", 4) == 0);
  CHECK_THROWS_AS(encode_png(5, 3, 2, px), std::invalid_argument);
}

TEST_CASE("hashing and base64 known answers") {
  CHECK(sha256_hex(std::string_view("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const std::string text = "hello";
  const Bytes raw(text.begin(), text.end());
  CHECK(base64_encode(raw) == "aGVsbG8=");
}

TEST_CASE("run artifacts: manifest lists every file with matching hashes") {
  RunConfig cfg = demo_config();
  cfg.guidance.total_steps = 12;
  cfg.guidance.guided_steps = 4;
  cfg.guidance.record_attention = true;
  const SandboxModel model(cfg.model);
  const SampleResult r = run_scene(model, scenes_for(cfg).front(), cfg.guidance);

  testing::TempDir dir("artifacts");
  const Manifest m = write_run_artifacts(r, cfg, dir.path());
  std::vector<std::string> names;
  for (const ManifestEntry& e : m.files) names.push_back(e.path);
  CHECK(names == std::vector<std::string>{"attention.atrc", "config.json", "energies.csv", "image.png", "mask_0.png",
                                          "mask_1.png", "mask_2.png", "metrics.json"});
  for (const ManifestEntry& e : m.files) {
    const Bytes content = read_file(dir / e.path);
    CHECK(content.size() == e.bytes);
    CHECK(sha256_hex(content) == e.sha256);
  }
  const Manifest reread = read_manifest(dir / "manifest.json");
  REQUIRE(reread.files.size() == m.files.size());
  CHECK(reread.find("metrics.json")->sha256 == m.find("metrics.json")->sha256);
  CHECK(reread.find("manifest.json") == nullptr);

  const AttentionTrace trace = read_trace(dir / "attention.atrc");
  CHECK(trace.steps == 12);
  CHECK(trace.layers == 2);
  CHECK(trace.tokens == 3);
  CHECK(trace.height == 16);

  const Json metrics = Json::parse(read_file(dir / "metrics.json"));
  CHECK(metrics["metrics"]["dtl"].get<double>() == r.dtl.value);
  CHECK(metrics["metrics"]["dtl_per_instance"].size() == 2);
  CHECK(metrics["steps"].get<int>() == 12);

  const Json echoed = Json::parse(read_file(dir / "config.json"));
  CHECK_FALSE(echoed.contains("output_dir"));
  CHECK(run_config_from_json(echoed).guidance == cfg.guidance);

  const Bytes csv = read_file(dir / "energies.csv");
  const std::string text(csv.begin(), csv.end());
  CHECK(std::count(text.begin(), text.end(), '\n') == 13);
}

TEST_CASE("file errors surface as IoError with the path") {
  CHECK_THROWS_AS(read_file("no/such/file.bin"), IoError);
  CHECK_THROWS_AS(read_manifest("no/such/manifest.json"), IoError);
}
