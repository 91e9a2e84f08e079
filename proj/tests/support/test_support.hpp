#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "webreplay/archive.hpp"
#include "webreplay/request.hpp"

namespace httplib {
class Server;
}

namespace testsupport {

namespace fs = std::filesystem;
using webreplay::FieldList;
using webreplay::RawRequest;

fs::path fixtures_dir();
fs::path site_dir();
fs::path golden_dir();

std::string read_file(const fs::path& path);
void write_file(const fs::path& path, const std::string& text);

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

/// The bundled shop site on a loopback port: static files plus
///   GET  /api/items?page=N&ts=...   items for page N (ts ignored)
///   POST /api/cart                  echoes the item of a JSON body
///   GET  /collect                   204 beacon sink
class FixtureSite {
 public:
  FixtureSite();
  ~FixtureSite();
  int port() const { return port_; }
  int hits() const { return hits_; }

 private:
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> hits_{0};
};

struct Response {
  int status = 0;
  std::multimap<std::string, std::string> headers;
  std::string body;

  std::string header(const std::string& name) const;
};

/// Sends `req` through the HTTP proxy at 127.0.0.1:proxy_port using
/// absolute-form request targets. `extra` headers are added on top.
Response via_proxy(int proxy_port, const RawRequest& req, const FieldList& extra = {});

/// Direct request to 127.0.0.1:port with an origin-form target.
Response direct(int port, const std::string& method, const std::string& target,
                const std::string& body = {}, const std::string& content_type = {}, const FieldList& extra = {});

/// Headers that legitimately differ between transports; everything else
/// must match byte for byte.
std::multimap<std::string, std::string> comparable_headers(const Response& r);

/// Requests a browser session on the fixture shop produces. `ts` seeds the
/// epoch-millisecond query parameter, `token` the body session token.
std::vector<RawRequest> shop_trace(long long ts, const std::string& token);
/// Beacons app.js fires at playback time; never part of the recording.
std::vector<RawRequest> beacon_trace(long long ts);

struct Recording {
  webreplay::Archive archive;
  /// Responses the client saw while recording, in trace order.
  std::vector<Response> responses;
};

/// Records `trace` through a Recorder that maps shop.test onto `site`.
Recording record_trace(const fs::path& out, const FixtureSite& site, const std::vector<RawRequest>& trace);

}  // namespace testsupport
