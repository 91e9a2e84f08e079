#include "webreplay/recorder.hpp"

#include <spdlog/spdlog.h>

#include <chrono>

#include "webreplay/encoding.hpp"
#include "webreplay/error.hpp"
#include "webreplay/net/proxy.hpp"

namespace webreplay {

Recorder::Recorder(RecordOptions options)
    : options_(std::move(options)),
      writer_(options_.out, options_.meta),
      upstream_(options_.upstream),
      server_([this](const net::HttpRequest& req, const net::ConnectionInfo& info) {
        return handle(req, info);
      }) {
  if (options_.ca_path) ca_.emplace(net::CertificateAuthority::load(options_.ca_path->string()));
  server_.set_connect_handler(
      [this](const net::HttpRequest& req, net::Stream& client, net::BufferedReader& reader) {
        handle_connect(req, client, reader);
      });
}

Recorder::~Recorder() {
  try {
    stop();
  } catch (const std::exception& e) {
    spdlog::error("closing archive: {}", e.what());
  }
}

void Recorder::start() {
  server_.listen(options_.listen);
  server_.start();
  spdlog::info("recording on {}:{} into {}", server_.host(), server_.port(), options_.out.string());
}

void Recorder::stop() {
  if (stopped_) return;
  stopped_ = true;
  server_.stop();
  writer_.close();
}

net::HttpResponse Recorder::handle(const net::HttpRequest& req, const net::ConnectionInfo& info) {
  RawRequest raw;
  try {
    raw = net::to_raw_request(req, info.scheme, info.tunnel_authority);
    validate_request(raw);
  } catch (const Error& e) {
    net::HttpResponse resp;
    resp.status = 400;
    resp.body = std::string(e.what()) + "\n";
    return resp;
  }

  net::HttpRequest out;
  out.method = req.method;
  out.target = raw.target();
  for (const auto& [k, v] : req.headers)
    if (!iequals(k, "proxy-authorization")) out.headers.emplace_back(k, v);
  out.body = req.body;

  ArchiveWriter::Entry entry;
  entry.timestamp_ms = now_ms();
  entry.request = raw;
  const auto started = std::chrono::steady_clock::now();
  net::HttpResponse resp;
  try {
    resp = upstream_.fetch(raw.scheme, raw.host, raw.port, out);
    entry.response_status = resp.status;
    entry.response_headers = resp.headers;
    entry.response_body = resp.body;
  } catch (const UpstreamError& e) {
    spdlog::warn("upstream error: {}", e.what());
    entry.response_status = 0;
    entry.note = e.what();
    resp = net::HttpResponse{};
    resp.status = 502;
    resp.headers.emplace_back("Content-Type", "text/plain");
    resp.body = std::string(e.what()) + "\n";
  }
  entry.duration_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                          std::chrono::steady_clock::now() - started)
                          .count();
  // A failed append must not be silently dropped: the archive is the product.
  writer_.append(std::move(entry));
  return resp;
}

void Recorder::handle_connect(const net::HttpRequest& req, net::Stream& client,
                              net::BufferedReader& reader) {
  if (ca_) {
    net::intercept_connect(req, client, reader, *ca_,
                           [this](const net::HttpRequest& r, const net::ConnectionInfo& i) {
                             return handle(r, i);
                           });
    return;
  }
  spdlog::warn("no CA configured: tunneling {} without recording", req.target);
  try {
    auto target = net::parse_authority(req.target);
    if (auto it = options_.upstream.host_map.find(target.host); it != options_.upstream.host_map.end())
      target = it->second;
    net::SocketStream upstream(net::connect_tcp(target.host, target.port, options_.upstream.timeout_ms));
    net::relay_tunnel(client, reader, upstream);
  } catch (const std::exception& e) {
    spdlog::warn("tunnel {} failed: {}", req.target, e.what());
    client.write_all("HTTP/1.1 502 Bad Gateway\r\nContent-Length: 0\r\nConnection: close\r\n\r\n");
  }
}

Archive record_session(const RecordOptions& options, const std::atomic<bool>* stop) {
  {
    Recorder recorder(options);
    recorder.start();
    net::wait_for_termination(stop);
    recorder.stop();
    spdlog::info("recorded {} exchanges", recorder.exchange_count());
  }
  return open_archive(options.out);
}

}  // namespace webreplay
