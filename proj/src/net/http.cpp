#include "webreplay/net/http.hpp"

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>
#include <fcntl.h>

#include "webreplay/encoding.hpp"

namespace webreplay::net {

namespace {

std::optional<std::string> find_header(const FieldList& headers, std::string_view name) {
  for (const auto& [k, v] : headers)
    if (iequals(k, name)) return v;
  return std::nullopt;
}

FieldList read_headers(BufferedReader& in) {
  FieldList headers;
  std::size_t total = 0;
  while (true) {
    auto line = in.read_line();
    if (!line) throw ProtocolError("connection closed inside header block");
    if (line->empty()) return headers;
    total += line->size();
    if (total > 256 * 1024) throw ProtocolError("header block too large");
    const auto colon = line->find(':');
    if (colon == std::string::npos || colon == 0)
      throw ProtocolError("malformed header line: " + *line);
    headers.emplace_back(line->substr(0, colon), std::string(trim(std::string_view(*line).substr(colon + 1))));
  }
}

std::size_t parse_size(std::string_view text, int base, const char* what) {
  text = trim(text);
  std::size_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value, base);
  if (ec != std::errc{} || ptr == text.data()) throw ProtocolError(std::string("bad ") + what);
  return value;
}

std::string read_chunked(BufferedReader& in) {
  std::string body;
  while (true) {
    auto line = in.read_line();
    if (!line) throw ProtocolError("connection closed inside chunked body");
    const auto size = parse_size(std::string_view(*line).substr(0, line->find(';')), 16, "chunk size");
    if (size == 0) break;
    if (body.size() + size > kMaxBodyBytes) throw ProtocolError("body too large");
    body += in.read_exact(size);
    in.read_line();
  }
  // Trailer section.
  while (auto line = in.read_line()) {
    if (line->empty()) break;
  }
  return body;
}

std::string read_body(BufferedReader& in, const FieldList& headers) {
  if (auto te = find_header(headers, "transfer-encoding");
      te && to_lower(*te).find("chunked") != std::string::npos)
    return read_chunked(in);
  if (auto cl = find_header(headers, "content-length")) {
    const auto n = parse_size(*cl, 10, "content-length");
    if (n > kMaxBodyBytes) throw ProtocolError("body too large");
    return in.read_exact(n);
  }
  return {};
}

}  // namespace

std::optional<std::string> HttpRequest::header(std::string_view name) const {
  return find_header(headers, name);
}

std::optional<std::string> HttpResponse::header(std::string_view name) const {
  return find_header(headers, name);
}

void HttpResponse::set_header(std::string_view name, std::string value) {
  remove_header(name);
  headers.emplace_back(std::string(name), std::move(value));
}

void HttpResponse::remove_header(std::string_view name) {
  std::erase_if(headers, [&](const auto& h) { return iequals(h.first, name); });
}

SocketStream::SocketStream(int fd) : fd_(fd) {}

SocketStream::~SocketStream() {
  if (fd_ >= 0) ::close(fd_);
}

std::size_t SocketStream::read_some(char* buf, std::size_t n) {
  while (true) {
    const auto got = ::recv(fd_, buf, n, 0);
    if (got >= 0) return static_cast<std::size_t>(got);
    if (errno == EINTR) continue;
    if (errno == ECONNRESET || errno == ENOTCONN || errno == EBADF) return 0;
    throw ProtocolError(std::string("recv: ") + std::strerror(errno));
  }
}

void SocketStream::write_all(std::string_view data) {
  while (!data.empty()) {
    const auto sent = ::send(fd_, data.data(), data.size(), MSG_NOSIGNAL);
    if (sent < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(std::string("send: ") + std::strerror(errno));
    }
    data.remove_prefix(static_cast<std::size_t>(sent));
  }
}

void SocketStream::shutdown() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

int SocketStream::release() {
  const int fd = fd_;
  fd_ = -1;
  return fd;
}

bool BufferedReader::fill() {
  if (pos_ > 0 && pos_ == buf_.size()) {
    buf_.clear();
    pos_ = 0;
  }
  char chunk[16 * 1024];
  const auto n = stream_->read_some(chunk, sizeof chunk);
  if (n == 0) return false;
  buf_.append(chunk, n);
  return true;
}

std::optional<std::string> BufferedReader::read_line(std::size_t max_len) {
  while (true) {
    const auto nl = buf_.find('\n', pos_);
    if (nl != std::string::npos) {
      std::string line = buf_.substr(pos_, nl - pos_);
      pos_ = nl + 1;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return line;
    }
    if (buf_.size() - pos_ > max_len) throw ProtocolError("line too long");
    if (!fill()) {
      if (pos_ == buf_.size()) return std::nullopt;
      std::string rest = buf_.substr(pos_);
      pos_ = buf_.size();
      return rest;
    }
  }
}

std::string BufferedReader::read_exact(std::size_t n) {
  while (buf_.size() - pos_ < n) {
    if (!fill()) throw ProtocolError("connection closed before body complete");
  }
  std::string out = buf_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::string BufferedReader::read_to_eof(std::size_t max_len) {
  while (fill()) {
    if (buf_.size() - pos_ > max_len) throw ProtocolError("body too large");
  }
  return take_buffered();
}

std::string BufferedReader::take_buffered() {
  std::string out = buf_.substr(pos_);
  buf_.clear();
  pos_ = 0;
  return out;
}

std::optional<HttpRequest> read_request(BufferedReader& in) {
  std::optional<std::string> line;
  // Tolerate stray CRLFs between pipelined requests.
  do {
    line = in.read_line();
    if (!line) return std::nullopt;
  } while (line->empty());

  HttpRequest req;
  const auto sp1 = line->find(' ');
  const auto sp2 = line->rfind(' ');
  if (sp1 == std::string::npos || sp2 == sp1) throw ProtocolError("malformed request line: " + *line);
  req.method = line->substr(0, sp1);
  req.target = line->substr(sp1 + 1, sp2 - sp1 - 1);
  req.version = line->substr(sp2 + 1);
  if (req.version.rfind("HTTP/", 0) != 0) throw ProtocolError("unsupported protocol: " + req.version);
  req.headers = read_headers(in);
  if (req.method != "CONNECT") req.body = read_body(in, req.headers);
  return req;
}

HttpResponse read_response(BufferedReader& in, bool head_request) {
  while (true) {
    auto line = in.read_line();
    if (!line) throw ProtocolError("connection closed before response");
    HttpResponse resp;
    const auto sp1 = line->find(' ');
    if (sp1 == std::string::npos || line->rfind("HTTP/", 0) != 0)
      throw ProtocolError("malformed status line: " + *line);
    const auto sp2 = line->find(' ', sp1 + 1);
    resp.status = static_cast<int>(parse_size(
        std::string_view(*line).substr(sp1 + 1, sp2 == std::string::npos ? std::string::npos : sp2 - sp1 - 1),
        10, "status code"));
    resp.reason = sp2 == std::string::npos ? "" : line->substr(sp2 + 1);
    resp.headers = read_headers(in);
    if (resp.status >= 100 && resp.status < 200) continue;
    if (head_request || resp.status == 204 || resp.status == 304) return resp;
    const bool framed = find_header(resp.headers, "content-length") ||
                        find_header(resp.headers, "transfer-encoding");
    resp.body = framed ? read_body(in, resp.headers) : in.read_to_eof(kMaxBodyBytes);
    return resp;
  }
}

std::string serialize_request(const HttpRequest& req) {
  std::string out = req.method + " " + req.target + " " + req.version + "\r\n";
  for (const auto& [k, v] : req.headers) out += k + ": " + v + "\r\n";
  out += "\r\n";
  out += req.body;
  return out;
}

std::string serialize_response(const HttpResponse& resp) {
  std::string out = "HTTP/1.1 " + std::to_string(resp.status) + " " +
                    (resp.reason.empty() ? reason_phrase(resp.status) : resp.reason) + "\r\n";
  for (const auto& [k, v] : resp.headers) out += k + ": " + v + "\r\n";
  out += "\r\n";
  out += resp.body;
  return out;
}

bool is_hop_by_hop(std::string_view name) {
  static constexpr std::string_view kHop[] = {"connection", "keep-alive", "proxy-connection",
                                              "proxy-authenticate", "proxy-authorization", "te",
                                              "trailer", "transfer-encoding", "upgrade"};
  for (auto h : kHop)
    if (iequals(h, name)) return true;
  return false;
}

void prepare_for_client(HttpResponse& resp, bool head_request) {
  std::erase_if(resp.headers, [](const auto& h) { return is_hop_by_hop(h.first); });
  if (resp.status == 204 || resp.status == 304 || (resp.status >= 100 && resp.status < 200)) {
    resp.remove_header("content-length");
    resp.body.clear();
    return;
  }
  if (!head_request || !resp.header("content-length"))
    resp.set_header("Content-Length", std::to_string(resp.body.size()));
  if (head_request) resp.body.clear();
}

std::string reason_phrase(int status) {
  switch (status) {
    case 100: return "Continue";
    case 200: return "OK";
    case 201: return "Created";
    case 202: return "Accepted";
    case 204: return "No Content";
    case 206: return "Partial Content";
    case 301: return "Moved Permanently";
    case 302: return "Found";
    case 303: return "See Other";
    case 304: return "Not Modified";
    case 307: return "Temporary Redirect";
    case 308: return "Permanent Redirect";
    case 400: return "Bad Request";
    case 401: return "Unauthorized";
    case 403: return "Forbidden";
    case 404: return "Not Found";
    case 405: return "Method Not Allowed";
    case 409: return "Conflict";
    case 413: return "Payload Too Large";
    case 429: return "Too Many Requests";
    case 500: return "Internal Server Error";
    case 501: return "Not Implemented";
    case 502: return "Bad Gateway";
    case 503: return "Service Unavailable";
    case 504: return "Gateway Timeout";
    default: return "Status";
  }
}

bool keep_alive(const HttpRequest& req) {
  const auto conn = req.header("connection");
  if (conn && to_lower(*conn).find("close") != std::string::npos) return false;
  if (req.version == "HTTP/1.0")
    return conn && to_lower(*conn).find("keep-alive") != std::string::npos;
  return true;
}

Endpoint Endpoint::parse(std::string_view text) {
  Endpoint ep;
  std::string_view port_text = text;
  if (const auto colon = text.rfind(':'); colon != std::string_view::npos) {
    if (colon > 0) ep.host = std::string(text.substr(0, colon));
    port_text = text.substr(colon + 1);
  }
  int port = -1;
  auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
  if (ec != std::errc{} || ptr != port_text.data() + port_text.size() || port < 0 || port > 65535)
    throw UsageError("invalid endpoint '" + std::string(text) + "' (expected host:port)");
  ep.port = port;
  return ep;
}

int connect_tcp(const std::string& host, int port, int timeout_ms) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const auto port_text = std::to_string(port);
  if (const int rc = ::getaddrinfo(host.c_str(), port_text.c_str(), &hints, &res); rc != 0)
    throw UpstreamError("resolve " + host + ": " + gai_strerror(rc));
  std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, ::freeaddrinfo);

  std::string last_error = "no addresses";
  for (auto* ai = res; ai; ai = ai->ai_next) {
    const int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
    if (fd < 0) continue;
    const int flags = ::fcntl(fd, F_GETFL, 0);
    ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
    int rc = ::connect(fd, ai->ai_addr, ai->ai_addrlen);
    if (rc < 0 && errno == EINPROGRESS) {
      pollfd pfd{fd, POLLOUT, 0};
      const int ready = ::poll(&pfd, 1, timeout_ms);
      if (ready == 1) {
        int err = 0;
        socklen_t len = sizeof err;
        ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
        rc = err == 0 ? 0 : -1;
        errno = err;
      } else {
        if (ready == 0) errno = ETIMEDOUT;
        rc = -1;
      }
    }
    if (rc == 0) {
      ::fcntl(fd, F_SETFL, flags);
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      timeval tv{timeout_ms / 1000 * 3, 0};
      ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
      ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
      return fd;
    }
    last_error = std::strerror(errno);
    ::close(fd);
  }
  throw UpstreamError("connect " + host + ":" + port_text + ": " + last_error);
}

RawRequest to_raw_request(const HttpRequest& req, std::string_view scheme,
                          std::optional<std::string_view> authority) {
  RawRequest raw;
  raw.method = req.method;
  std::string_view path_and_query = req.target;
  if (auto url = parse_url(req.target)) {
    raw.scheme = url->scheme;
    raw.host = url->host;
    raw.port = url->port;
    raw.path = url->path;
    raw.query = parse_query(url->query);
  } else {
    raw.scheme = std::string(scheme);
    std::string host_header;
    if (authority) {
      host_header = std::string(*authority);
    } else if (auto h = req.header("host")) {
      host_header = *h;
    } else {
      throw MalformedRequest("request without Host header");
    }
    auto parsed = parse_url(raw.scheme + "://" + host_header + "/");
    if (!parsed) throw MalformedRequest("bad Host header: " + host_header);
    raw.host = parsed->host;
    raw.port = parsed->port;
    const auto q = path_and_query.find('?');
    raw.path = std::string(path_and_query.substr(0, q));
    if (q != std::string_view::npos) raw.query = parse_query(path_and_query.substr(q + 1));
  }
  if (raw.path.empty()) raw.path = "/";
  for (const auto& [k, v] : req.headers) raw.headers.emplace_back(to_lower(k), v);
  raw.body = req.body;
  if (auto ct = req.header("content-type")) raw.body_content_type = media_type(*ct);
  return raw;
}

HttpRequest from_raw_request(const RawRequest& raw) {
  HttpRequest req;
  req.method = raw.method;
  req.target = raw.target();
  bool has_host = false;
  for (const auto& [k, v] : raw.headers) {
    if (is_hop_by_hop(k) || k == "content-length") continue;
    if (k == "host") has_host = true;
    req.headers.emplace_back(k, v);
  }
  if (!has_host) {
    std::string host = raw.host;
    if (raw.port != default_port(raw.scheme)) host += ":" + std::to_string(raw.port);
    req.headers.insert(req.headers.begin(), {"host", host});
  }
  if (!raw.body.empty() || raw.method == "POST" || raw.method == "PUT" || raw.method == "PATCH")
    req.headers.emplace_back("content-length", std::to_string(raw.body.size()));
  req.body = raw.body;
  return req;
}

}  // namespace webreplay::net
