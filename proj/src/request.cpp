#include "webreplay/request.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>

#include "webreplay/encoding.hpp"
#include "webreplay/error.hpp"

namespace webreplay {

namespace {

constexpr std::array<std::string_view, 7> kMethods = {"GET",   "POST", "PUT",    "DELETE",
                                                      "PATCH", "HEAD", "OPTIONS"};

std::string require_string(const json& j, const char* key, std::string_view path) {
  if (!j.contains(key) || !j.at(key).is_string())
    throw SchemaError(std::string(path) + "." + key + ": expected string");
  return j.at(key).get<std::string>();
}

}  // namespace

std::string RawRequest::target() const {
  if (query.empty()) return path;
  return path + "?" + format_query(query);
}

std::string RawRequest::url() const {
  std::string out = scheme + "://" + host;
  if (port != default_port(scheme)) out += ":" + std::to_string(port);
  return out + target();
}

std::optional<std::string> RawRequest::header(std::string_view name) const {
  for (const auto& [k, v] : headers)
    if (k == name) return v;
  return std::nullopt;
}

bool is_supported_method(std::string_view method) {
  return std::find(kMethods.begin(), kMethods.end(), method) != kMethods.end();
}

int default_port(std::string_view scheme) { return scheme == "https" ? 443 : 80; }

void validate_request(const RawRequest& req) {
  if (!is_supported_method(req.method))
    throw MalformedRequest("unsupported method '" + req.method + "'");
  if (req.scheme != "http" && req.scheme != "https")
    throw MalformedRequest("unsupported scheme '" + req.scheme + "'");
  if (req.host.empty()) throw MalformedRequest("empty host");
  if (std::any_of(req.host.begin(), req.host.end(),
                  [](unsigned char c) { return std::isupper(c) || std::isspace(c) || c == '/'; }))
    throw MalformedRequest("host must be a lowercase hostname: '" + req.host + "'");
  if (req.port < 1 || req.port > 65535)
    throw MalformedRequest("port out of range: " + std::to_string(req.port));
  if (req.path.empty() || req.path.front() != '/')
    throw MalformedRequest("path must begin with '/': '" + req.path + "'");
  for (const auto& [name, value] : req.headers) {
    if (name.empty() || name != to_lower(name))
      throw MalformedRequest("header name must be lowercase: '" + name + "'");
  }
}

FieldList parse_query(std::string_view query) {
  FieldList out;
  if (query.empty()) return out;
  for (const auto& part : split(query, '&')) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos)
      out.emplace_back(part, "");
    else
      out.emplace_back(part.substr(0, eq), part.substr(eq + 1));
  }
  return out;
}

std::string format_query(const FieldList& query) {
  std::string out;
  for (const auto& [k, v] : query) {
    if (!out.empty()) out.push_back('&');
    out += k;
    out.push_back('=');
    out += v;
  }
  return out;
}

std::string media_type(std::string_view content_type) {
  const auto semi = content_type.find(';');
  return to_lower(trim(content_type.substr(0, semi)));
}

std::optional<ParsedUrl> parse_url(std::string_view url) {
  ParsedUrl out;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string_view::npos) return std::nullopt;
  out.scheme = to_lower(url.substr(0, scheme_end));
  if (out.scheme != "http" && out.scheme != "https") return std::nullopt;
  auto rest = url.substr(scheme_end + 3);
  const auto path_start = rest.find_first_of("/?#");
  auto authority = rest.substr(0, path_start);
  rest = path_start == std::string_view::npos ? std::string_view{} : rest.substr(path_start);
  if (const auto at = authority.rfind('@'); at != std::string_view::npos)
    authority = authority.substr(at + 1);
  out.port = default_port(out.scheme);
  if (const auto colon = authority.rfind(':');
      colon != std::string_view::npos && authority.find(']') == std::string_view::npos) {
    const auto port_text = authority.substr(colon + 1);
    int port = 0;
    auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
    if (ec != std::errc{} || ptr != port_text.data() + port_text.size()) return std::nullopt;
    out.port = port;
    authority = authority.substr(0, colon);
  }
  if (authority.empty()) return std::nullopt;
  out.host = to_lower(authority);
  if (const auto hash = rest.find('#'); hash != std::string_view::npos) rest = rest.substr(0, hash);
  const auto q = rest.find('?');
  out.path = std::string(rest.substr(0, q));
  if (out.path.empty()) out.path = "/";
  if (q != std::string_view::npos) out.query = std::string(rest.substr(q + 1));
  return out;
}

RawRequest make_request(std::string_view method, std::string_view url, FieldList headers,
                        std::string body) {
  const auto parsed = parse_url(url);
  if (!parsed) throw MalformedRequest("not an absolute http(s) URL: " + std::string(url));
  RawRequest req;
  req.method = std::string(method);
  req.scheme = parsed->scheme;
  req.host = parsed->host;
  req.port = parsed->port;
  req.path = parsed->path;
  req.query = parse_query(parsed->query);
  for (auto& [name, value] : headers) name = to_lower(name);
  req.headers = std::move(headers);
  req.body = std::move(body);
  if (auto ct = req.header("content-type")) req.body_content_type = media_type(*ct);
  return req;
}

json fields_to_json(const FieldList& fields) {
  json arr = json::array();
  for (const auto& [k, v] : fields) arr.push_back(json::array({k, v}));
  return arr;
}

FieldList fields_from_json(const json& j, std::string_view path) {
  if (!j.is_array()) throw SchemaError(std::string(path) + ": expected array of pairs");
  FieldList out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& pair = j[i];
    if (!pair.is_array() || pair.size() != 2 || !pair[0].is_string() || !pair[1].is_string())
      throw SchemaError(std::string(path) + "[" + std::to_string(i) +
                        "]: expected [string, string]");
    out.emplace_back(pair[0].get<std::string>(), pair[1].get<std::string>());
  }
  return out;
}

json request_to_json(const RawRequest& req) {
  json j;
  j["method"] = req.method;
  j["scheme"] = req.scheme;
  j["host"] = req.host;
  j["port"] = req.port;
  j["path"] = req.path;
  j["query"] = fields_to_json(req.query);
  j["headers"] = fields_to_json(req.headers);
  j["body_b64"] = base64_encode(req.body);
  j["body_content_type"] =
      req.body_content_type ? json(*req.body_content_type) : json(nullptr);
  return j;
}

RawRequest request_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("request: expected object");
  RawRequest req;
  req.method = require_string(j, "method", "request");
  req.scheme = j.contains("scheme") ? require_string(j, "scheme", "request") : "http";
  req.host = require_string(j, "host", "request");
  if (j.contains("port")) {
    if (!j.at("port").is_number_integer()) throw SchemaError("request.port: expected integer");
    req.port = j.at("port").get<int>();
  } else {
    req.port = default_port(req.scheme);
  }
  req.path = require_string(j, "path", "request");
  if (j.contains("query")) req.query = fields_from_json(j.at("query"), "request.query");
  if (j.contains("headers")) req.headers = fields_from_json(j.at("headers"), "request.headers");
  if (j.contains("body_b64")) {
    if (!j.at("body_b64").is_string()) throw SchemaError("request.body_b64: expected string");
    try {
      req.body = base64_decode(j.at("body_b64").get<std::string>());
    } catch (const ParseError& e) {
      throw SchemaError(std::string("request.body_b64: ") + e.what());
    }
  }
  if (j.contains("body_content_type") && !j.at("body_content_type").is_null()) {
    if (!j.at("body_content_type").is_string())
      throw SchemaError("request.body_content_type: expected string or null");
    req.body_content_type = j.at("body_content_type").get<std::string>();
  }
  return req;
}

}  // namespace webreplay
