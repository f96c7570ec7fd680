#pragma once

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <deque>
#include <filesystem>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>

#include "trajguide/formats.hpp"

namespace httplib {
class Server;
}

namespace trajguide {

struct ServiceOptions {
  std::filesystem::path runs_dir = "runs/service";
  std::size_t max_sessions = 64;
  /// Events buffered per run before backpressure applies.
  std::size_t queue_capacity = 8;
  int preview_every = 5;
  /// Sampling runs allowed to execute at once (TRAJGUIDE_THREADS by default).
  int max_concurrent_runs = 0;
};

struct HttpReply {
  int status = 200;
  Json body;
};

struct SseEvent {
  std::string name;
  Json data;
};

/// `event: <name>\ndata: <json>\n\n`
std::string format_sse(const SseEvent& event);

/// Bounded single-producer queue between a sampling worker and its SSE stream.
///
/// When the queue is full a step event loses its preview frame and the
/// producer waits for room; step and terminal events are never dropped. Once
/// the consumer disconnects, pushes are discarded so the run can still finish.
class EventQueue {
 public:
  explicit EventQueue(std::size_t capacity) : capacity_(capacity == 0 ? 1 : capacity) {}

  void push(SseEvent event);
  /// Blocks until an event is available; nullopt once the producer finished and the queue drained.
  std::optional<SseEvent> pop();
  void finish();
  void disconnect();

  [[nodiscard]] std::size_t dropped_previews() const;

 private:
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<SseEvent> events_;
  std::size_t capacity_;
  std::size_t dropped_ = 0;
  bool finished_ = false;
  bool disconnected_ = false;
};

enum class SessionState { idle, running, done, failed };
std::string_view to_string(SessionState state);

/// In-memory session store plus the per-session run state machine.
class SessionService {
 public:
  explicit SessionService(ServiceOptions options = {});
  ~SessionService();
  SessionService(const SessionService&) = delete;
  SessionService& operator=(const SessionService&) = delete;

  HttpReply create_session(std::string_view body);
  HttpReply set_trajectories(const std::string& id, std::string_view body);
  HttpReply get_session(const std::string& id);
  HttpReply get_result(const std::string& id);

  struct RunStart {
    HttpReply reply;
    /// Set only when the run was accepted (202).
    std::shared_ptr<EventQueue> events;
  };
  RunStart start_run(const std::string& id, std::string_view body);

  /// File inside the session's latest run directory, if it is listed in the manifest.
  std::optional<std::filesystem::path> artifact(const std::string& id, const std::string& name);

  [[nodiscard]] std::size_t session_count() const;

  /// Registers every endpoint on the server.
  void mount(httplib::Server& server);

 private:
  struct StoredResult {
    Json summary;
    std::filesystem::path run_dir;
    Manifest manifest;
    int revision = 0;
  };
  struct Session {
    std::string id;
    std::mutex mutex;
    RunConfig config;
    SessionState state = SessionState::idle;
    int revision = 0;
    int runs = 0;
    std::optional<StoredResult> result;
    std::string last_error;
    std::shared_ptr<EventQueue> events;
    std::thread worker;
    ~Session();
  };
  using SessionPtr = std::shared_ptr<Session>;

  SessionPtr find(const std::string& id);
  void run_worker(const SessionPtr& session, RunConfig cfg, int run_number, int revision,
                  const std::shared_ptr<EventQueue>& events);

  ServiceOptions options_;
  mutable std::mutex store_mutex_;
  std::list<std::string> recency_;
  std::unordered_map<std::string, std::pair<SessionPtr, std::list<std::string>::iterator>> sessions_;
  std::uint64_t next_id_ = 0;
  std::string id_salt_;
  std::counting_semaphore<> run_slots_;
  std::atomic<bool> stopping_{false};
};

}  // namespace trajguide
