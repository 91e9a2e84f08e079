#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "webreplay/error.hpp"
#include "webreplay/request.hpp"

namespace webreplay::net {

class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Request as it crossed the wire. Header names keep their original case.
struct HttpRequest {
  std::string method;
  std::string target;
  std::string version = "HTTP/1.1";
  FieldList headers;
  std::string body;

  std::optional<std::string> header(std::string_view name) const;
};

struct HttpResponse {
  int status = 200;
  std::string reason;
  FieldList headers;
  std::string body;

  std::optional<std::string> header(std::string_view name) const;
  /// Replaces every header called `name` (case-insensitive) with one entry.
  void set_header(std::string_view name, std::string value);
  void remove_header(std::string_view name);
};

/// Bidirectional byte stream (plain socket or TLS session).
class Stream {
 public:
  virtual ~Stream() = default;
  /// Returns 0 on orderly EOF. Throws ProtocolError on I/O failure.
  virtual std::size_t read_some(char* buf, std::size_t n) = 0;
  virtual void write_all(std::string_view data) = 0;
  /// Shuts the transport down; further reads return EOF.
  virtual void shutdown() = 0;
  virtual int native_handle() const = 0;
};

/// Owns a connected socket; closes it on destruction.
class SocketStream : public Stream {
 public:
  explicit SocketStream(int fd);
  ~SocketStream() override;
  SocketStream(const SocketStream&) = delete;
  SocketStream& operator=(const SocketStream&) = delete;

  std::size_t read_some(char* buf, std::size_t n) override;
  void write_all(std::string_view data) override;
  void shutdown() override;
  int native_handle() const override { return fd_; }
  /// Gives up ownership of the descriptor without closing it.
  int release();

 private:
  int fd_;
};

class BufferedReader {
 public:
  explicit BufferedReader(Stream& stream) : stream_(&stream) {}

  /// Line without its CRLF/LF terminator; nullopt on EOF before any byte.
  std::optional<std::string> read_line(std::size_t max_len = 64 * 1024);
  std::string read_exact(std::size_t n);
  std::string read_to_eof(std::size_t max_len);
  /// Bytes already buffered but not yet consumed.
  std::string take_buffered();

 private:
  bool fill();

  Stream* stream_;
  std::string buf_;
  std::size_t pos_ = 0;
};

inline constexpr std::size_t kMaxBodyBytes = 256u * 1024 * 1024;

/// nullopt on clean EOF before a request starts.
std::optional<HttpRequest> read_request(BufferedReader& in);
/// Skips interim 1xx responses. `head_request` suppresses body reading.
HttpResponse read_response(BufferedReader& in, bool head_request);

std::string serialize_request(const HttpRequest& req);
/// Writes the status line, headers and body verbatim; callers decide framing.
std::string serialize_response(const HttpResponse& resp);

/// Removes hop-by-hop headers and frames the body with Content-Length.
void prepare_for_client(HttpResponse& resp, bool head_request);

std::string reason_phrase(int status);
bool keep_alive(const HttpRequest& req);
bool is_hop_by_hop(std::string_view header_name);

struct Endpoint {
  std::string host = "127.0.0.1";
  int port = 0;

  /// "host:port", ":port" or "port". Throws UsageError.
  static Endpoint parse(std::string_view text);
  std::string to_string() const { return host + ":" + std::to_string(port); }
};

/// Opens a TCP connection with a connect timeout. Throws UpstreamError.
int connect_tcp(const std::string& host, int port, int timeout_ms);

/// Converts a wire request into a RawRequest. Absolute-form targets carry
/// their own origin; origin-form targets use the Host header and `scheme`.
RawRequest to_raw_request(const HttpRequest& req, std::string_view scheme,
                          std::optional<std::string_view> authority = std::nullopt);

/// Inverse of to_raw_request() with an origin-form target.
HttpRequest from_raw_request(const RawRequest& req);

}  // namespace webreplay::net
