#include "trajguide/service.hpp"

#include <fmt/format.h>

#include <random>
#include <set>

#include "httplib.h"
#include "trajguide/commands.hpp"
#include "trajguide/image_io.hpp"

namespace trajguide {

std::string format_sse(const SseEvent& event) {
  return "event: " + event.name + "\ndata: " + event.data.dump() + "\n\n";
}

void EventQueue::push(SseEvent event) {
  std::unique_lock lock(mutex_);
  if (disconnected_) return;
  if (events_.size() >= capacity_ && event.data.is_object() && event.data.contains("preview")) {
    event.data.erase("preview");
    ++dropped_;
  }
  cv_.wait(lock, [&] { return events_.size() < capacity_ || disconnected_; });
  if (disconnected_) return;
  events_.push_back(std::move(event));
  cv_.notify_all();
}

std::optional<SseEvent> EventQueue::pop() {
  std::unique_lock lock(mutex_);
  cv_.wait(lock, [&] { return !events_.empty() || finished_ || disconnected_; });
  if (events_.empty()) return std::nullopt;
  SseEvent out = std::move(events_.front());
  events_.pop_front();
  cv_.notify_all();
  return out;
}

void EventQueue::finish() {
  std::lock_guard lock(mutex_);
  finished_ = true;
  cv_.notify_all();
}

void EventQueue::disconnect() {
  std::lock_guard lock(mutex_);
  disconnected_ = true;
  events_.clear();
  cv_.notify_all();
}

std::size_t EventQueue::dropped_previews() const {
  std::lock_guard lock(mutex_);
  return dropped_;
}

std::string_view to_string(SessionState state) {
  switch (state) {
    case SessionState::idle: return "idle";
    case SessionState::running: return "running";
    case SessionState::done: return "done";
    case SessionState::failed: return "failed";
  }
  return "unknown";
}

namespace {

HttpReply error_reply(int status, const std::string& message, const std::string& field = {},
                      std::string_view code = {}) {
  Json body{{"error", message}};
  if (!field.empty()) body["errors"] = Json::array({{{"field", field}, {"message", message}}});
  if (!code.empty()) body["code"] = std::string(code);
  return {status, std::move(body)};
}

HttpReply config_error_reply(const ConfigError& e) { return error_reply(400, e.what(), e.field(), to_string(e.code())); }

std::optional<Json> parse_body(std::string_view body, HttpReply& failure) {
  Json j = Json::parse(body.begin(), body.end(), nullptr, false);
  if (j.is_discarded()) {
    failure = error_reply(400, "request body is not valid JSON", "body", to_string(ConfigErrorCode::malformed_json));
    return std::nullopt;
  }
  return j;
}

Json echo_cells(const RunConfig& cfg) {
  const GridDims grid{cfg.model.height, cfg.model.width};
  Json out = Json::array();
  for (const Trajectory& t : cfg.trajectories) {
    Json cells = Json::array();
    const CellSet raster = rasterize_polyline(clamped(t, grid), grid);
    for (const Cell& c : raster.cells()) cells.push_back({c.row, c.col});
    out.push_back({{"token_index", t.token_index}, {"cells", std::move(cells)}});
  }
  return out;
}

}  // namespace

SessionService::Session::~Session() {
  if (!worker.joinable()) return;
  if (worker.get_id() == std::this_thread::get_id()) {
    worker.detach();
  } else {
    worker.join();
  }
}

SessionService::SessionService(ServiceOptions options)
    : options_(std::move(options)),
      run_slots_(options_.max_concurrent_runs > 0 ? options_.max_concurrent_runs : worker_count()) {
  std::random_device rd;
  id_salt_ = fmt::format("{:08x}", rd());
}

SessionService::~SessionService() {
  stopping_ = true;
  std::vector<SessionPtr> all;
  {
    std::lock_guard lock(store_mutex_);
    for (auto& [id, entry] : sessions_) all.push_back(entry.first);
  }
  for (const SessionPtr& s : all) {
    std::thread worker;
    {
      std::lock_guard lock(s->mutex);
      if (s->events) s->events->disconnect();
      worker = std::move(s->worker);
    }
    if (worker.joinable()) worker.join();
  }
}

std::size_t SessionService::session_count() const {
  std::lock_guard lock(store_mutex_);
  return sessions_.size();
}

SessionService::SessionPtr SessionService::find(const std::string& id) {
  std::lock_guard lock(store_mutex_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) return nullptr;
  recency_.splice(recency_.begin(), recency_, it->second.second);
  return it->second.first;
}

HttpReply SessionService::create_session(std::string_view body) {
  HttpReply failure;
  const std::optional<Json> j = parse_body(body, failure);
  if (!j) return failure;
  RunConfig cfg;
  try {
    cfg = run_config_from_json(*j);
  } catch (const ConfigError& e) {
    return config_error_reply(e);
  }

  auto session = std::make_shared<Session>();
  session->config = std::move(cfg);
  SessionPtr evicted;
  {
    std::lock_guard lock(store_mutex_);
    if (sessions_.size() >= options_.max_sessions) {
      // Least recently used idle session goes first; running sessions are never evicted.
      for (auto it = recency_.rbegin(); it != recency_.rend(); ++it) {
        const SessionPtr& candidate = sessions_.at(*it).first;
        std::lock_guard session_lock(candidate->mutex);
        if (candidate->state != SessionState::running) {
          evicted = candidate;
          break;
        }
      }
      if (!evicted) return error_reply(503, "session limit reached and every session is running");
      recency_.erase(sessions_.at(evicted->id).second);
      sessions_.erase(evicted->id);
    }
    session->id = fmt::format("s{}-{}", ++next_id_, id_salt_);
    recency_.push_front(session->id);
    sessions_.emplace(session->id, std::make_pair(session, recency_.begin()));
  }
  evicted.reset();

  const ModelConfig& m = session->config.model;
  return {201, Json{{"session_id", session->id},
                    {"revision", 0},
                    {"grid", {{"height", m.height}, {"width", m.width}}},
                    {"image", {{"height", m.height * m.render_factor}, {"width", m.width * m.render_factor}}},
                    {"render_factor", m.render_factor},
                    {"prompt", session->config.prompt},
                    {"cells", echo_cells(session->config)}}};
}

HttpReply SessionService::set_trajectories(const std::string& id, std::string_view body) {
  const SessionPtr s = find(id);
  if (!s) return error_reply(404, "unknown session");
  HttpReply failure;
  const std::optional<Json> j = parse_body(body, failure);
  if (!j) return failure;
  if (!j->is_array()) {
    return error_reply(400, "expected a list of trajectories", "body", to_string(ConfigErrorCode::malformed_trajectory));
  }

  std::lock_guard lock(s->mutex);
  if (s->state == SessionState::running) return error_reply(409, "a run is in progress");
  RunConfig next = s->config;
  next.trajectories.clear();
  try {
    Json whole = run_config_to_json(s->config);
    whole["trajectories"] = *j;
    next = run_config_from_json(whole);
  } catch (const ConfigError& e) {
    return config_error_reply(e);
  }
  s->config = std::move(next);
  ++s->revision;
  if (s->state != SessionState::idle) s->state = SessionState::idle;
  const bool guided = !s->config.trajectories.empty() && s->config.guidance.mode != GuidanceMode::none;
  return {200, Json{{"revision", s->revision},
                    {"cells", echo_cells(s->config)},
                    {"mode", guided ? std::string(to_string(s->config.guidance.mode)) : "none"}}};
}

HttpReply SessionService::get_session(const std::string& id) {
  const SessionPtr s = find(id);
  if (!s) return error_reply(404, "unknown session");
  std::lock_guard lock(s->mutex);
  Json body{{"session_id", s->id},
            {"state", std::string(to_string(s->state))},
            {"revision", s->revision},
            {"runs", s->runs},
            {"config", run_config_to_json(s->config)}};
  if (!s->last_error.empty()) body["last_error"] = s->last_error;
  return {200, std::move(body)};
}

HttpReply SessionService::get_result(const std::string& id) {
  const SessionPtr s = find(id);
  if (!s) return error_reply(404, "unknown session");
  std::lock_guard lock(s->mutex);
  if (!s->result) {
    HttpReply r = error_reply(409, "no completed run");
    r.body["state"] = std::string(to_string(s->state));
    return r;
  }
  Json body = s->result->summary;
  body["session_id"] = s->id;
  body["revision"] = s->result->revision;
  body["state"] = std::string(to_string(s->state));
  Json files = Json::array();
  for (const ManifestEntry& e : s->result->manifest.files) {
    files.push_back({{"path", e.path},
                     {"sha256", e.sha256},
                     {"bytes", e.bytes},
                     {"url", fmt::format("/sessions/{}/artifacts/{}", s->id, e.path)}});
  }
  body["artifacts"] = {{"run_dir", s->result->run_dir.string()}, {"files", std::move(files)}};
  return {200, std::move(body)};
}

std::optional<std::filesystem::path> SessionService::artifact(const std::string& id, const std::string& name) {
  const SessionPtr s = find(id);
  if (!s) return std::nullopt;
  std::lock_guard lock(s->mutex);
  if (!s->result || !s->result->manifest.find(name)) return std::nullopt;
  return s->result->run_dir / name;
}

SessionService::RunStart SessionService::start_run(const std::string& id, std::string_view body) {
  const SessionPtr s = find(id);
  if (!s) return {error_reply(404, "unknown session"), nullptr};

  RunOverrides overrides;
  if (!body.empty()) {
    HttpReply failure;
    const std::optional<Json> j = parse_body(body, failure);
    if (!j) return {failure, nullptr};
    if (!j->is_object()) return {error_reply(400, "expected an object of overrides", "body"), nullptr};
    for (const auto& [key, value] : j->items()) {
      try {
        if (key == "lambda") {
          overrides.lambda = value.get<double>();
        } else if (key == "eta") {
          overrides.eta = value.get<double>();
        } else if (key == "mode") {
          overrides.mode = value.get<std::string>();
        } else if (key == "seed") {
          overrides.seed = value.get<std::uint64_t>();
        } else {
          return {error_reply(400, key + ": unknown override", key), nullptr};
        }
      } catch (const Json::exception&) {
        return {error_reply(400, key + ": wrong type", key), nullptr};
      }
    }
  }

  std::thread previous;
  std::shared_ptr<EventQueue> events;
  {
    std::lock_guard lock(s->mutex);
    if (s->state == SessionState::running) return {error_reply(409, "a run is already in progress"), nullptr};
    RunConfig cfg;
    try {
      cfg = apply_overrides(s->config, overrides);
    } catch (const ConfigError& e) {
      return {config_error_reply(e), nullptr};
    }
    if (cfg.trajectories.empty()) cfg.guidance.mode = GuidanceMode::none;
    s->state = SessionState::running;
    s->result.reset();
    s->last_error.clear();
    const int run_number = ++s->runs;
    events = std::make_shared<EventQueue>(options_.queue_capacity);
    s->events = events;
    previous = std::move(s->worker);
    s->worker = std::thread([this, s, cfg = std::move(cfg), run_number, revision = s->revision, events]() mutable {
      run_worker(s, std::move(cfg), run_number, revision, events);
    });
  }
  if (previous.joinable()) previous.join();
  return {{202, Json{{"session_id", id}}}, events};
}

namespace {

struct Cancelled {};

}  // namespace

void SessionService::run_worker(const SessionPtr& session, RunConfig cfg, int run_number, int revision,
                                const std::shared_ptr<EventQueue>& events) {
  run_slots_.acquire();
  SseEvent terminal;
  try {
    const SandboxModel model(cfg.model);
    const TokenSet tokens = model.embed(cfg.prompt);
    Scene scene;
    scene.name = session->id;
    scene.prompt = cfg.prompt;
    scene.trajectories = cfg.trajectories;
    const GridDims grid = model.latent_dims();
    const int total = cfg.guidance.total_steps;

    const StepObserver observer = [&](const StepRecord& rec, const LatentState& state) {
      if (stopping_) throw Cancelled{};
      Json heatmaps = Json::array();
      for (std::size_t i = 0; i < rec.heatmaps.size(); ++i) {
        heatmaps.push_back({{"token", cfg.trajectories[i].token_index},
                            {"png", base64_encode(heatmap_png(rec.heatmaps[i], grid))}});
      }
      Json data{{"step", rec.step},
                {"t", rec.t},
                {"total_steps", total},
                {"energy", {{"e_control", rec.energy.e_control},
                            {"e_movement", rec.energy.e_movement},
                            {"e_total", rec.energy.e_total}}},
                {"latent_norm", rec.latent_norm},
                {"guidance_updates", rec.guidance_updates},
                {"overshoots", rec.overshoots},
                {"events", rec.events},
                {"heatmaps", std::move(heatmaps)}};
      if (options_.preview_every > 0 && (rec.step + 1) % options_.preview_every == 0) {
        data["preview"] = base64_encode(image_png(model.render_scene(state.z, tokens).image));
      }
      events->push({"step", std::move(data)});
    };

    const SampleResult result = run_scene(model, scene, cfg.guidance, observer);
    const std::filesystem::path dir = options_.runs_dir / session->id / fmt::format("run_{}", run_number);
    RunConfig echo = cfg;
    echo.output_dir = dir.string();
    const Manifest manifest = write_run_artifacts(result, echo, dir);

    Json summary = result_to_json(result);
    Json masks = Json::array();
    for (const GroundTruthMask& m : result.scene.masks) {
      masks.push_back({{"token", m.token}, {"png", base64_encode(mask_png(m.pixels))}});
    }
    terminal = {"done", Json{{"dtl", result.dtl.value},
                             {"metrics", summary.at("metrics")},
                             {"image", base64_encode(image_png(result.scene.image))},
                             {"masks", std::move(masks)},
                             {"revision", revision},
                             {"run_dir", dir.string()},
                             {"steps", result.steps.size()},
                             {"dropped_previews", events->dropped_previews()}}};
    std::lock_guard lock(session->mutex);
    session->result = StoredResult{std::move(summary), dir, manifest, revision};
    session->state = SessionState::done;
  } catch (const Cancelled&) {
    terminal = {"failed", Json{{"error_class", "cancelled"}, {"message", "service shutting down"}}};
  } catch (const DivergenceError& e) {
    terminal = {"failed", Json{{"error_class", "divergence"}, {"message", e.what()}}};
  } catch (const IoError& e) {
    terminal = {"failed", Json{{"error_class", "io"}, {"message", e.what()}}};
  } catch (const std::exception& e) {
    terminal = {"failed", Json{{"error_class", "internal"}, {"message", e.what()}}};
  }
  if (terminal.name == "failed") {
    std::lock_guard lock(session->mutex);
    session->state = SessionState::failed;
    session->last_error = terminal.data.at("message").get<std::string>();
  }
  run_slots_.release();
  events->push(std::move(terminal));
  events->finish();
}

void SessionService::mount(httplib::Server& server) {
  auto send = [](httplib::Response& res, const HttpReply& reply) {
    res.status = reply.status;
    res.set_content(reply.body.dump(), "application/json");
  };

  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS"}});
  server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  server.Get("/healthz", [this, send](const httplib::Request&, httplib::Response& res) {
    send(res, {200, Json{{"status", "ok"}, {"sessions", session_count()}}});
  });
  server.Post("/sessions", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, create_session(req.body));
  });
  server.Put(R"(/sessions/([^/]+)/trajectories)", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, set_trajectories(req.matches[1], req.body));
  });
  server.Get(R"(/sessions/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, get_session(req.matches[1]));
  });
  server.Get(R"(/sessions/([^/]+)/result)", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, get_result(req.matches[1]));
  });
  server.Get(R"(/sessions/([^/]+)/artifacts/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
    const std::optional<std::filesystem::path> path = artifact(req.matches[1], req.matches[2]);
    if (!path) return send(res, error_reply(404, "unknown artifact"));
    try {
      const Bytes data = read_file(*path);
      const std::string ext = path->extension().string();
      const char* type = ext == ".png"    ? "image/png"
                         : ext == ".json" ? "application/json"
                         : ext == ".csv"  ? "text/csv"
                                          : "application/octet-stream";
      res.set_content(std::string(data.begin(), data.end()), type);
    } catch (const IoError& e) {
      send(res, error_reply(500, e.what()));
    }
  });
  server.Post(R"(/sessions/([^/]+)/run)", [this, send](const httplib::Request& req, httplib::Response& res) {
    RunStart start = start_run(req.matches[1], req.body);
    if (!start.events) return send(res, start.reply);
    res.status = 202;
    res.set_header("Cache-Control", "no-cache");
    std::shared_ptr<EventQueue> events = start.events;
    res.set_chunked_content_provider(
        "text/event-stream",
        [events](std::size_t, httplib::DataSink& sink) {
          std::optional<SseEvent> ev = events->pop();
          if (!ev) {
            sink.done();
            return true;
          }
          const std::string text = format_sse(*ev);
          return sink.write(text.data(), text.size());
        },
        [events](bool) { events->disconnect(); });
  });
}

}  // namespace trajguide
