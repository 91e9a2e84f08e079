#include "webreplay/net/proxy.hpp"

#include <poll.h>

#include <cstring>

namespace webreplay::net {

namespace {

/// Replays bytes the client sent right after the CONNECT head before reading
/// from the socket again.
class PrefixedStream : public Stream {
 public:
  PrefixedStream(Stream& inner, std::string prefix) : inner_(inner), prefix_(std::move(prefix)) {}

  std::size_t read_some(char* buf, std::size_t n) override {
    if (pos_ < prefix_.size()) {
      const auto k = std::min(n, prefix_.size() - pos_);
      std::memcpy(buf, prefix_.data() + pos_, k);
      pos_ += k;
      return k;
    }
    return inner_.read_some(buf, n);
  }
  void write_all(std::string_view data) override { inner_.write_all(data); }
  void shutdown() override { inner_.shutdown(); }
  int native_handle() const override { return inner_.native_handle(); }

 private:
  Stream& inner_;
  std::string prefix_;
  std::size_t pos_ = 0;
};

constexpr std::string_view kEstablished = "HTTP/1.1 200 Connection Established\r\n\r\n";

}  // namespace

Endpoint parse_authority(std::string_view authority) {
  Endpoint ep;
  ep.port = 443;
  const auto colon = authority.rfind(':');
  const auto bracket = authority.rfind(']');
  if (colon != std::string_view::npos && (bracket == std::string_view::npos || colon > bracket)) {
    ep.host = std::string(authority.substr(0, colon));
    try {
      ep.port = std::stoi(std::string(authority.substr(colon + 1)));
    } catch (const std::exception&) {
      throw MalformedRequest("bad CONNECT authority: " + std::string(authority));
    }
  } else {
    ep.host = std::string(authority);
  }
  if (ep.host.size() > 1 && ep.host.front() == '[' && ep.host.back() == ']')
    ep.host = ep.host.substr(1, ep.host.size() - 2);
  if (ep.host.empty() || ep.port < 1 || ep.port > 65535)
    throw MalformedRequest("bad CONNECT authority: " + std::string(authority));
  return ep;
}

void intercept_connect(const HttpRequest& connect, Stream& client, BufferedReader& reader,
                       CertificateAuthority& ca, const RequestHandler& handler) {
  const auto target = parse_authority(connect.target);
  client.write_all(kEstablished);
  PrefixedStream raw(client, reader.take_buffered());
  auto tls = TlsStream::accept(raw, ca.server_context(target.host));
  ConnectionInfo info;
  info.scheme = "https";
  info.tunnel_authority = connect.target;
  BufferedReader inner(*tls);
  std::atomic<bool> stop{false};
  serve_stream(*tls, inner, handler, info, stop);
  tls->shutdown();
}

void relay_tunnel(Stream& client, BufferedReader& reader, Stream& upstream) {
  client.write_all(kEstablished);
  if (auto pending = reader.take_buffered(); !pending.empty()) upstream.write_all(pending);
  pollfd fds[2] = {{client.native_handle(), POLLIN, 0}, {upstream.native_handle(), POLLIN, 0}};
  char buf[16 * 1024];
  for (;;) {
    if (::poll(fds, 2, 60'000) <= 0) return;
    for (int i = 0; i < 2; ++i) {
      if (!(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      Stream& from = i == 0 ? client : upstream;
      Stream& to = i == 0 ? upstream : client;
      std::size_t n = 0;
      try {
        n = from.read_some(buf, sizeof buf);
      } catch (const std::exception&) {
        return;
      }
      if (n == 0) return;
      to.write_all(std::string_view(buf, n));
    }
  }
}

}  // namespace webreplay::net
