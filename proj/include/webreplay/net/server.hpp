#pragma once

#include <atomic>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>

#include "webreplay/net/http.hpp"

namespace webreplay::net {

struct ConnectionInfo {
  std::string peer;
  /// "https" inside an intercepted TLS tunnel, otherwise "http".
  std::string scheme = "http";
  /// host:port named by the CONNECT request that opened the tunnel, if any.
  std::optional<std::string> tunnel_authority;
};

using RequestHandler = std::function<HttpResponse(const HttpRequest&, const ConnectionInfo&)>;

/// Takes over the client connection after a CONNECT request. `reader` may
/// already hold bytes the client sent after the CONNECT head.
using ConnectHandler =
    std::function<void(const HttpRequest&, Stream& client, BufferedReader& reader)>;

/// Runs the HTTP/1.1 keep-alive loop on an established stream until the
/// peer closes, asks to close, or `stop` becomes true.
void serve_stream(Stream& stream, BufferedReader& reader, const RequestHandler& handler,
                  const ConnectionInfo& info, const std::atomic<bool>& stop);

/// Thread-per-connection HTTP/1.1 server.
class HttpServer {
 public:
  explicit HttpServer(RequestHandler handler);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  void set_connect_handler(ConnectHandler handler) { connect_handler_ = std::move(handler); }

  /// Binds and listens; port 0 picks an ephemeral port. Throws BindError.
  void listen(const Endpoint& endpoint);
  int port() const { return port_; }
  const std::string& host() const { return host_; }

  /// Starts the accept loop on a background thread.
  void start();
  /// Closes the listener and every open connection, then joins all threads.
  void stop();
  bool running() const { return running_; }

 private:
  struct Connection {
    std::thread thread;
    int fd = -1;
    std::atomic<bool> done{false};
  };

  void accept_loop();
  void handle_connection(Connection& conn, std::string peer);
  void reap_finished();

  RequestHandler handler_;
  ConnectHandler connect_handler_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::string host_;
  std::atomic<bool> stopping_{false};
  std::atomic<bool> running_{false};
  std::thread accept_thread_;
  std::mutex conns_mutex_;
  std::list<Connection> conns_;
};

/// Blocks until SIGINT or SIGTERM arrives (or `stop` becomes true). The
/// previous handlers are restored afterwards.
void wait_for_termination(const std::atomic<bool>* stop = nullptr);

}  // namespace webreplay::net
