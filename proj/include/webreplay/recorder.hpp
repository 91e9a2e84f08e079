#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <optional>

#include "webreplay/archive.hpp"
#include "webreplay/net/server.hpp"
#include "webreplay/net/tls.hpp"
#include "webreplay/net/upstream.hpp"

namespace webreplay {

struct RecordOptions {
  net::Endpoint listen;
  std::filesystem::path out;
  net::UpstreamOptions upstream;
  /// PEM with the local CA certificate and key. Without it HTTPS is tunneled
  /// and not recorded.
  std::optional<std::filesystem::path> ca_path;
  json meta = json::object();
};

/// Forward HTTP proxy that appends every exchange to an archive.
class Recorder {
 public:
  /// Opens the archive writer. Throws WriteError or TlsError.
  explicit Recorder(RecordOptions options);
  ~Recorder();

  /// Throws BindError.
  void start();
  /// Stops serving and closes the archive durably. Idempotent.
  void stop();
  int port() const { return server_.port(); }
  std::size_t exchange_count() const { return writer_.exchange_count(); }
  const std::filesystem::path& out() const { return options_.out; }

  net::HttpResponse handle(const net::HttpRequest& req, const net::ConnectionInfo& info);

 private:
  void handle_connect(const net::HttpRequest& req, net::Stream& client, net::BufferedReader& reader);

  RecordOptions options_;
  ArchiveWriter writer_;
  net::UpstreamClient upstream_;
  std::optional<net::CertificateAuthority> ca_;
  net::HttpServer server_;
  bool stopped_ = false;
};

/// Runs a Recorder until SIGINT or SIGTERM (or until `stop` becomes true),
/// then flushes and returns the reopened archive.
Archive record_session(const RecordOptions& options, const std::atomic<bool>* stop = nullptr);

}  // namespace webreplay
