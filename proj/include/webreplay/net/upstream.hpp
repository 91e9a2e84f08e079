#pragma once

#include <map>
#include <optional>
#include <string>

#include "webreplay/net/http.hpp"
#include "webreplay/net/tls.hpp"

namespace webreplay::net {

struct UpstreamOptions {
  /// Forward HTTP proxy to chain through; direct connections when empty.
  std::optional<Endpoint> proxy;
  /// Host overrides: requests for a key host connect to the mapped endpoint
  /// (like curl --resolve). TLS still verifies the original host name.
  std::map<std::string, Endpoint> host_map;
  int timeout_ms = 15000;
  bool verify_tls = true;
  std::string ca_file;
};

/// "direct" or "http://host:port". Throws UsageError.
std::optional<Endpoint> parse_upstream_mode(std::string_view mode);

/// One connection per request; the response is fully buffered.
class UpstreamClient {
 public:
  explicit UpstreamClient(UpstreamOptions options);

  /// `req.target` must be origin-form. Throws UpstreamError.
  HttpResponse fetch(const std::string& scheme, const std::string& host, int port,
                     const HttpRequest& req);

 private:
  UpstreamOptions options_;
  SslCtxPtr tls_;
};

}  // namespace webreplay::net
