#include <fmt/format.h>

#include <csignal>
#include <iostream>

#include "CLI11.hpp"
#include "httplib.h"
#include "trajguide/service.hpp"

namespace {

httplib::Server* g_server = nullptr;

void handle_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HTTP/SSE session service for trajectory-guided sampling", "trajguide_server"};
  std::string host = "127.0.0.1";
  int port = 8080;
  trajguide::ServiceOptions options;
  std::string runs_dir = options.runs_dir.string();
  app.add_option("--host", host, "Bind address");
  app.add_option("--port", port, "Listen port")->check(CLI::Range(0, 65535));
  app.add_option("--runs-dir", runs_dir, "Where run directories are written");
  CLI11_PARSE(app, argc, argv);
  options.runs_dir = runs_dir;

  trajguide::SessionService service(options);
  httplib::Server server;
  // SSE streams hold a handler thread for the length of a run.
  server.new_task_queue = [] { return new httplib::ThreadPool(32); };
  service.mount(server);

  g_server = &server;
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);

  if (port == 0) {
    port = server.bind_to_any_port(host);
  } else if (!server.bind_to_port(host, port)) {
    std::cerr << fmt::format("cannot bind {}:{}\n", host, port);
    return 1;
  }
  std::cout << fmt::format("listening on http://{}:{}\n", host, port) << std::flush;
  server.listen_after_bind();
  return 0;
}
