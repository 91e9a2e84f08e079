#include "webreplay/net/server.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <csignal>
#include <cstring>

#include <spdlog/spdlog.h>

namespace webreplay::net {

namespace {

HttpResponse error_response(int status, std::string_view message) {
  HttpResponse resp;
  resp.status = status;
  resp.headers.emplace_back("Content-Type", "text/plain; charset=utf-8");
  resp.body = std::string(message) + "\n";
  return resp;
}

std::string describe_peer(const sockaddr_storage& addr) {
  char host[NI_MAXHOST] = {0};
  char port[NI_MAXSERV] = {0};
  if (::getnameinfo(reinterpret_cast<const sockaddr*>(&addr), sizeof addr, host, sizeof host,
                    port, sizeof port, NI_NUMERICHOST | NI_NUMERICSERV) != 0)
    return "?";
  return std::string(host) + ":" + port;
}

}  // namespace

void serve_stream(Stream& stream, BufferedReader& reader, const RequestHandler& handler,
                  const ConnectionInfo& info, const std::atomic<bool>& stop) {
  while (!stop) {
    std::optional<HttpRequest> req;
    try {
      req = read_request(reader);
    } catch (const ProtocolError& e) {
      spdlog::debug("{}: bad request: {}", info.peer, e.what());
      try {
        auto resp = error_response(400, e.what());
        resp.set_header("Connection", "close");
        prepare_for_client(resp, false);
        stream.write_all(serialize_response(resp));
      } catch (const std::exception&) {
      }
      return;
    }
    if (!req) return;

    const bool head = req->method == "HEAD";
    HttpResponse resp;
    try {
      resp = handler(*req, info);
    } catch (const std::exception& e) {
      spdlog::error("{} {} failed: {}", req->method, req->target, e.what());
      resp = error_response(500, e.what());
    }
    const bool close_after = !keep_alive(*req) || stop;
    prepare_for_client(resp, head);
    if (close_after) resp.set_header("Connection", "close");
    stream.write_all(serialize_response(resp));
    if (close_after) return;
  }
}

HttpServer::HttpServer(RequestHandler handler) : handler_(std::move(handler)) {}

HttpServer::~HttpServer() { stop(); }

void HttpServer::listen(const Endpoint& endpoint) {
  std::signal(SIGPIPE, SIG_IGN);
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE | AI_NUMERICSERV;
  addrinfo* res = nullptr;
  const auto port_text = std::to_string(endpoint.port);
  const char* node = endpoint.host.empty() ? nullptr : endpoint.host.c_str();
  if (const int rc = ::getaddrinfo(node, port_text.c_str(), &hints, &res); rc != 0)
    throw BindError("resolve " + endpoint.to_string() + ": " + gai_strerror(rc));
  std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, ::freeaddrinfo);

  std::string last_error = "no addresses";
  for (auto* ai = res; ai; ai = ai->ai_next) {
    const int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
    if (fd < 0) continue;
    const int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(fd, ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(fd, 256) == 0) {
      sockaddr_storage bound{};
      socklen_t len = sizeof bound;
      ::getsockname(fd, reinterpret_cast<sockaddr*>(&bound), &len);
      port_ = bound.ss_family == AF_INET6
                  ? ntohs(reinterpret_cast<sockaddr_in6*>(&bound)->sin6_port)
                  : ntohs(reinterpret_cast<sockaddr_in*>(&bound)->sin_port);
      host_ = endpoint.host;
      listen_fd_ = fd;
      return;
    }
    last_error = std::strerror(errno);
    ::close(fd);
  }
  throw BindError("bind " + endpoint.to_string() + ": " + last_error);
}

void HttpServer::start() {
  if (listen_fd_ < 0) throw BindError("start() before listen()");
  running_ = true;
  accept_thread_ = std::thread([this] { accept_loop(); });
}

void HttpServer::accept_loop() {
  while (!stopping_) {
    pollfd pfd{listen_fd_, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, 200);
    reap_finished();
    if (ready <= 0) continue;
    sockaddr_storage addr{};
    socklen_t len = sizeof addr;
    const int fd = ::accept4(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len, SOCK_CLOEXEC);
    if (fd < 0) continue;
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    timeval tv{120, 0};
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);

    std::lock_guard lock(conns_mutex_);
    if (stopping_) {
      ::close(fd);
      break;
    }
    auto& conn = conns_.emplace_back();
    conn.fd = fd;
    conn.thread = std::thread([this, &conn, peer = describe_peer(addr)] { handle_connection(conn, peer); });
  }
}

void HttpServer::handle_connection(Connection& conn, std::string peer) {
  SocketStream stream(conn.fd);
  try {
    BufferedReader reader(stream);
    ConnectionInfo info;
    info.peer = peer;
    if (!connect_handler_) {
      serve_stream(stream, reader, handler_, info, stopping_);
    } else if (auto first = read_request(reader)) {
      // CONNECT takes the socket over; anything else is ordinary HTTP.
      if (first->method == "CONNECT") {
        connect_handler_(*first, stream, reader);
      } else {
        const bool head = first->method == "HEAD";
        HttpResponse resp;
        try {
          resp = handler_(*first, info);
        } catch (const std::exception& e) {
          resp = error_response(500, e.what());
        }
        const bool close_after = !keep_alive(*first);
        prepare_for_client(resp, head);
        if (close_after) resp.set_header("Connection", "close");
        stream.write_all(serialize_response(resp));
        if (!close_after) serve_stream(stream, reader, handler_, info, stopping_);
      }
    }
  } catch (const std::exception& e) {
    spdlog::debug("connection {}: {}", peer, e.what());
  }
  {
    // The stream closes the descriptor on return; stop() must not touch it afterwards.
    std::lock_guard lock(conns_mutex_);
    conn.fd = -1;
  }
  conn.done = true;
}

void HttpServer::reap_finished() {
  std::list<Connection> finished;
  {
    std::lock_guard lock(conns_mutex_);
    for (auto it = conns_.begin(); it != conns_.end();) {
      auto next = std::next(it);
      if (it->done) finished.splice(finished.end(), conns_, it);
      it = next;
    }
  }
  for (auto& c : finished)
    if (c.thread.joinable()) c.thread.join();
}

void HttpServer::stop() {
  if (stopping_.exchange(true)) {
    if (accept_thread_.joinable()) accept_thread_.join();
    return;
  }
  if (accept_thread_.joinable()) accept_thread_.join();
  if (listen_fd_ >= 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
  }
  {
    std::lock_guard lock(conns_mutex_);
    for (auto& c : conns_)
      if (c.fd >= 0) ::shutdown(c.fd, SHUT_RDWR);
  }
  for (auto& c : conns_)
    if (c.thread.joinable()) c.thread.join();
  conns_.clear();
  running_ = false;
}

namespace {
std::atomic<bool> g_terminate{false};
extern "C" void on_terminate(int) { g_terminate = true; }
}  // namespace

void wait_for_termination(const std::atomic<bool>* stop) {
  g_terminate = false;
  auto old_int = std::signal(SIGINT, on_terminate);
  auto old_term = std::signal(SIGTERM, on_terminate);
  while (!g_terminate && !(stop && *stop)) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  std::signal(SIGINT, old_int);
  std::signal(SIGTERM, old_term);
}

}  // namespace webreplay::net
