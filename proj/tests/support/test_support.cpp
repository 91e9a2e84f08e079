#include "test_support.hpp"

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include <httplib.h>

#include "webreplay/encoding.hpp"
#include "webreplay/recorder.hpp"

namespace testsupport {

fs::path fixtures_dir() { return WEBREPLAY_TEST_FIXTURES; }
fs::path site_dir() { return fixtures_dir() / "site"; }
fs::path golden_dir() { return WEBREPLAY_TEST_GOLDEN; }

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

TempDir::TempDir() {
  std::string tmpl = (fs::temp_directory_path() / "webreplay-test-XXXXXX").string();
  if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
  path_ = tmpl;
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

FixtureSite::FixtureSite() : server_(std::make_unique<httplib::Server>()) {
  auto& s = *server_;
  s.set_pre_routing_handler([this](const httplib::Request&, httplib::Response&) {
    ++hits_;
    return httplib::Server::HandlerResponse::Unhandled;
  });
  s.Get("/api/items", [](const httplib::Request& req, httplib::Response& res) {
    const int page = req.has_param("page") ? std::atoi(req.get_param_value("page").c_str()) : 1;
    std::string body = "{\"page\":" + std::to_string(page) + ",\"items\":[";
    for (int i = 0; i < 3; ++i) {
      if (i) body += ",";
      const int id = page * 10 + i;
      body += "{\"id\":" + std::to_string(id) + ",\"name\":\"item " + std::to_string(id) + "\"}";
    }
    body += "]}";
    res.set_content(body, "application/json");
  });
  s.Post("/api/cart", [](const httplib::Request& req, httplib::Response& res) {
    std::string item = "?";
    try {
      item = webreplay::json::parse(req.body).value("item", "?");
    } catch (...) {
      res.status = 400;
      return;
    }
    res.set_content("{\"ok\":true,\"item\":\"" + item + "\"}", "application/json");
  });
  s.Get("/collect", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  s.set_mount_point("/", site_dir().string());
  port_ = s.bind_to_any_port("127.0.0.1");
  if (port_ <= 0) throw std::runtime_error("fixture site could not bind");
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

FixtureSite::~FixtureSite() {
  server_->stop();
  if (thread_.joinable()) thread_.join();
}

std::string Response::header(const std::string& name) const {
  for (const auto& [k, v] : headers)
    if (webreplay::iequals(k, name)) return v;
  return {};
}

namespace {

Response convert(const httplib::Result& r) {
  if (!r) throw std::runtime_error("request failed: " + httplib::to_string(r.error()));
  Response out;
  out.status = r->status;
  for (const auto& [k, v] : r->headers) out.headers.emplace(webreplay::to_lower(k), v);
  out.body = r->body;
  return out;
}

}  // namespace

Response via_proxy(int proxy_port, const RawRequest& req, const FieldList& extra) {
  httplib::Client cli(req.host, req.port);
  cli.set_proxy("127.0.0.1", proxy_port);
  cli.set_url_encode(false);
  cli.set_connection_timeout(5);
  cli.set_read_timeout(10);
  httplib::Request hr;
  hr.method = req.method;
  hr.path = req.target();
  for (const auto& [k, v] : req.headers) hr.headers.emplace(k, v);
  for (const auto& [k, v] : extra) hr.headers.emplace(k, v);
  hr.body = req.body;
  return convert(cli.send(hr));
}

Response direct(int port, const std::string& method, const std::string& target, const std::string& body,
                const std::string& content_type, const FieldList& extra) {
  httplib::Client cli("127.0.0.1", port);
  cli.set_url_encode(false);
  cli.set_connection_timeout(5);
  cli.set_read_timeout(10);
  httplib::Request hr;
  hr.method = method;
  hr.path = target;
  if (!content_type.empty()) hr.headers.emplace("Content-Type", content_type);
  for (const auto& [k, v] : extra) hr.headers.emplace(k, v);
  hr.body = body;
  return convert(cli.send(hr));
}

std::multimap<std::string, std::string> comparable_headers(const Response& r) {
  std::multimap<std::string, std::string> out;
  for (const auto& [k, v] : r.headers) {
    if (k == "content-length" || k == "connection" || k == "keep-alive" || k == "x-webreplay-match" ||
        k == "transfer-encoding")
      continue;
    out.emplace(k, v);
  }
  return out;
}

namespace {

/// The Accept header the HTTP client adds on the wire, so that a trace
/// replayed in-process looks like the same trace sent over a socket.
const FieldList kClientHeaders = {{"accept", "*/*"}};

RawRequest client_request(const std::string& method, const std::string& url, FieldList headers = {},
                          std::string body = {}) {
  headers.insert(headers.begin(), kClientHeaders.begin(), kClientHeaders.end());
  return webreplay::make_request(method, url, std::move(headers), std::move(body));
}

}  // namespace

std::vector<RawRequest> shop_trace(long long ts, const std::string& token) {
  auto cart = [&](const std::string& item) {
    return client_request("POST", "http://shop.test/api/cart", {{"content-type", "application/json"}},
                          "{\"item\":\"" + item + "\",\"sessionToken\":\"" + token + "\"}");
  };
  return {
      client_request("GET", "http://shop.test/"),
      client_request("GET", "http://shop.test/style.css"),
      client_request("GET", "http://shop.test/app.js"),
      client_request("GET", "http://shop.test/img/logo.png"),
      client_request("GET", "http://shop.test/api/items?page=1&ts=" + std::to_string(ts)),
      client_request("GET", "http://shop.test/api/items?page=2&ts=" + std::to_string(ts + 1375)),
      cart("42"),
      cart("7"),
      client_request("GET", "http://shop.test/about.html"),
  };
}

std::vector<RawRequest> beacon_trace(long long ts) {
  return {
      client_request("GET", "http://px.analytics.test/collect?ev=pageview&ts=" + std::to_string(ts)),
      client_request("GET", "http://px.analytics.test/collect?ev=click&ts=" + std::to_string(ts + 2210)),
  };
}

Recording record_trace(const fs::path& out, const FixtureSite& site, const std::vector<RawRequest>& trace) {
  webreplay::RecordOptions o;
  o.listen = webreplay::net::Endpoint{"127.0.0.1", 0};
  o.out = out;
  o.upstream.host_map["shop.test"] = webreplay::net::Endpoint{"127.0.0.1", site.port()};
  o.upstream.timeout_ms = 5000;
  Recording rec;
  {
    webreplay::Recorder recorder(o);
    recorder.start();
    for (const auto& r : trace) rec.responses.push_back(via_proxy(recorder.port(), r));
    recorder.stop();
  }
  rec.archive = webreplay::open_archive(out);
  return rec;
}

}  // namespace testsupport
