#include "webreplay/net/upstream.hpp"

#include "webreplay/encoding.hpp"

namespace webreplay::net {

std::optional<Endpoint> parse_upstream_mode(std::string_view mode) {
  if (mode.empty() || mode == "direct") return std::nullopt;
  auto url = parse_url(mode);
  if (!url || url->scheme != "http")
    throw UsageError("--upstream must be 'direct' or an http:// proxy URL, got '" +
                     std::string(mode) + "'");
  return Endpoint{url->host, url->port};
}

UpstreamClient::UpstreamClient(UpstreamOptions options)
    : options_(std::move(options)), tls_(make_client_context(options_.verify_tls, options_.ca_file)) {}

HttpResponse UpstreamClient::fetch(const std::string& scheme, const std::string& host, int port,
                                   const HttpRequest& req) {
  const bool tls = scheme == "https";
  const std::string authority =
      port == default_port(scheme) ? host : host + ":" + std::to_string(port);

  HttpRequest out;
  out.method = req.method;
  out.target = req.target;
  for (const auto& [k, v] : req.headers) {
    if (is_hop_by_hop(k) || iequals(k, "host") || iequals(k, "content-length")) continue;
    out.headers.emplace_back(k, v);
  }
  out.headers.insert(out.headers.begin(), {"Host", authority});
  if (!req.body.empty() || req.method == "POST" || req.method == "PUT" || req.method == "PATCH")
    out.headers.emplace_back("Content-Length", std::to_string(req.body.size()));
  out.headers.emplace_back("Connection", "close");
  out.body = req.body;

  try {
    Endpoint target{host, port};
    if (auto it = options_.host_map.find(host); it != options_.host_map.end()) target = it->second;

    std::unique_ptr<Stream> stream;
    if (options_.proxy) {
      stream = std::make_unique<SocketStream>(
          connect_tcp(options_.proxy->host, options_.proxy->port, options_.timeout_ms));
      if (tls) {
        const std::string tunnel = target.host + ":" + std::to_string(target.port);
        stream->write_all("CONNECT " + tunnel + " HTTP/1.1\r\nHost: " + tunnel + "\r\n\r\n");
        BufferedReader reader(*stream);
        const auto resp = read_response(reader, true);
        if (resp.status != 200)
          throw UpstreamError("proxy refused CONNECT " + tunnel + ": " + std::to_string(resp.status));
      } else {
        out.target = "http://" + authority + req.target;
      }
    } else {
      stream = std::make_unique<SocketStream>(connect_tcp(target.host, target.port, options_.timeout_ms));
    }
    if (tls) stream = TlsStream::connect(std::move(stream), tls_.get(), host);

    stream->write_all(serialize_request(out));
    BufferedReader reader(*stream);
    return read_response(reader, req.method == "HEAD");
  } catch (const UpstreamError&) {
    throw;
  } catch (const std::exception& e) {
    throw UpstreamError(req.method + " " + scheme + "://" + authority + req.target + ": " + e.what());
  }
}

}  // namespace webreplay::net
