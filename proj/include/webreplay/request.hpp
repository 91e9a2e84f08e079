#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace webreplay {

using json = nlohmann::json;

using FieldList = std::vector<std::pair<std::string, std::string>>;

/// One captured HTTP request, exactly as seen on the wire apart from header
/// names, which are lowercased. Query keys and values keep their wire
/// encoding.
struct RawRequest {
  std::string method = "GET";
  std::string scheme = "http";
  std::string host;
  int port = 80;
  std::string path = "/";
  FieldList query;
  FieldList headers;
  std::string body;
  std::optional<std::string> body_content_type;

  /// Origin-form request target: path plus "?query" when non-empty.
  std::string target() const;
  /// Absolute URL; the port is omitted when it is the scheme default.
  std::string url() const;
  /// First header with `name` (lowercase), if any.
  std::optional<std::string> header(std::string_view name) const;

  bool operator==(const RawRequest&) const = default;
};

bool is_supported_method(std::string_view method);
int default_port(std::string_view scheme);

/// Throws MalformedRequest when the request violates the type invariants.
void validate_request(const RawRequest& req);

/// Splits "a=1&b=2" into pairs. A key without "=" gets an empty value.
FieldList parse_query(std::string_view query);
std::string format_query(const FieldList& query);

/// "text/HTML; charset=utf-8" -> "text/html".
std::string media_type(std::string_view content_type);

struct ParsedUrl {
  std::string scheme;
  std::string host;
  int port = 0;
  std::string path;
  std::string query;
};
/// Parses an absolute http(s) URL. Returns nullopt when it is not one.
std::optional<ParsedUrl> parse_url(std::string_view url);

/// Builds a RawRequest from absolute URL parts; convenience for fixtures,
/// traces and tests.
RawRequest make_request(std::string_view method, std::string_view url,
                        FieldList headers = {}, std::string body = {});

json request_to_json(const RawRequest& req);
/// Throws SchemaError on missing or mistyped fields.
RawRequest request_from_json(const json& j);

json fields_to_json(const FieldList& fields);
FieldList fields_from_json(const json& j, std::string_view path);

}  // namespace webreplay
