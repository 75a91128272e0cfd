#ifndef SEMISR_STUDY_SERVER_HPP
#define SEMISR_STUDY_SERVER_HPP

// HTTP front of StudyService:
//   GET  /health
//   GET  /session/{rater_id}          create or resume; returns session_id and progress
//   GET  /session/{session_id}/next   next item, or {"complete": true}
//   POST /session/{session_id}/rating {"item_id": ..., "score": 1..5}
// Anything else is served from the optional static UI directory.

#include <filesystem>
#include <string>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "semisr/errors.hpp"
#include "semisr/study.hpp"

namespace semisr {

class StudyServer {
 public:
  explicit StudyServer(StudyService& service, const std::filesystem::path& ui_dir = {}) : service_(service) {
    auto reply = [](httplib::Response& res, const StudyResponse& r) {
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
    server_.Get("/health", [this, reply](const httplib::Request&, httplib::Response& res) {
      reply(res, service_.health());
    });
    server_.Get(R"(/session/([^/]+)/next)", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(res, service_.next_item(req.matches[1]));
    });
    server_.Get(R"(/session/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(res, service_.open_session(req.matches[1]));
    });
    server_.Post(R"(/session/([^/]+)/rating)", [this, reply](const httplib::Request& req, httplib::Response& res) {
      auto body = nlohmann::json::parse(req.body, nullptr, /*allow_exceptions=*/false);
      if (body.is_discarded()) {
        reply(res, {400, {{"error", "format"}, {"message", "request body is not JSON"}}});
        return;
      }
      reply(res, service_.submit(req.matches[1], body));
    });
    server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string kind = "internal", message = "unexpected error";
      try {
        std::rethrow_exception(ep);
      } catch (const Error& e) {
        kind = e.kind();
        message = e.what();
      } catch (const std::exception& e) {
        message = e.what();
      }
      res.status = 500;
      res.set_content(nlohmann::json{{"error", kind}, {"message", message}}.dump(), "application/json");
    });
    if (!ui_dir.empty()) {
      if (!std::filesystem::is_directory(ui_dir)) throw IoError("UI directory '" + ui_dir.string() + "' does not exist");
      server_.set_mount_point("/", ui_dir.string());
    }
  }

  ~StudyServer() { stop(); }

  /// Binds to `port` (0 picks a free port) and returns the bound port.
  int bind(const std::string& host = "127.0.0.1", int port = 0) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
    return bound;
  }

  /// Serves on the calling thread until `stop`.
  void run() { server_.listen_after_bind(); }

  /// Serves on a background thread.
  void start() {
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  StudyService& service_;
  httplib::Server server_;
  std::thread thread_;
};

}  // namespace semisr

#endif  // SEMISR_STUDY_SERVER_HPP
