#include "webreplay/signature.hpp"

#include <algorithm>
#include <cstdint>

#include "webreplay/encoding.hpp"
#include "webreplay/error.hpp"

namespace webreplay {

namespace {

bool is_json_media_type(std::string_view mt) {
  return mt == "application/json" || mt == "text/json" ||
         (mt.size() > 5 && mt.substr(mt.size() - 5) == "+json");
}

std::string dump_compact(const json& j) {
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

void strip_json(json& node, const std::string& prefix, const RuleSet& rules) {
  if (node.is_object()) {
    for (auto it = node.begin(); it != node.end();) {
      const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
      if (rules.strips_body_field(path)) {
        it = node.erase(it);
      } else {
        strip_json(it.value(), path, rules);
        ++it;
      }
    }
  } else if (node.is_array()) {
    for (std::size_t i = 0; i < node.size(); ++i)
      strip_json(node[i], prefix.empty() ? std::to_string(i) : prefix + "." + std::to_string(i),
                 rules);
  }
}

void collect_leaves(const json& node, const std::string& prefix, FieldList& out) {
  if (node.is_object() && !node.empty()) {
    for (const auto& [key, value] : node.items())
      collect_leaves(value, prefix.empty() ? key : prefix + "." + key, out);
  } else if (node.is_array() && !node.empty()) {
    for (std::size_t i = 0; i < node.size(); ++i)
      collect_leaves(node[i], prefix.empty() ? std::to_string(i) : prefix + "." + std::to_string(i),
                     out);
  } else {
    out.emplace_back(prefix, dump_compact(node));
  }
}

void put_field(std::string& out, std::string_view bytes) {
  const auto n = static_cast<std::uint32_t>(bytes.size());
  out.push_back(static_cast<char>((n >> 24) & 0xff));
  out.push_back(static_cast<char>((n >> 16) & 0xff));
  out.push_back(static_cast<char>((n >> 8) & 0xff));
  out.push_back(static_cast<char>(n & 0xff));
  out.append(bytes);
}

std::string pairs_payload(const FieldList& pairs) {
  std::string payload;
  for (const auto& [k, v] : pairs) {
    put_field(payload, k);
    put_field(payload, v);
  }
  return payload;
}

std::string referer_path(std::string_view value) {
  if (auto url = parse_url(trim(value))) return normalize_path(url->path);
  auto v = trim(value);
  return normalize_path(v.substr(0, v.find_first_of("?#")));
}

}  // namespace

std::string normalize_path(std::string_view path) {
  const auto decoded = normalize_percent_encoding(path);
  std::string out;
  out.reserve(decoded.size());
  for (char c : decoded) {
    if (c == '/' && !out.empty() && out.back() == '/') continue;
    out.push_back(c);
  }
  if (out.empty() || out.front() != '/') out.insert(out.begin(), '/');
  return out;
}

std::string canonical_path(const RawRequest& req, const RuleSet& effective) {
  std::string path = req.path;
  for (const auto& rw : effective.path_rewrites) path = rw.apply(path);
  return normalize_path(path);
}

FieldList kept_query(const RawRequest& req, const RuleSet& effective) {
  FieldList out;
  for (const auto& [k, v] : req.query) {
    auto key = normalize_percent_encoding(k);
    if (effective.strips_query(key)) continue;
    out.emplace_back(std::move(key), normalize_percent_encoding(v));
  }
  std::sort(out.begin(), out.end());
  return out;
}

FieldList kept_headers(const RawRequest& req, const RuleSet& effective) {
  FieldList out;
  for (const auto& [name, value] : req.headers) {
    if (std::find(kDefaultKeptHeaders.begin(), kDefaultKeptHeaders.end(), name) ==
        kDefaultKeptHeaders.end())
      continue;
    if (effective.strips_header(name)) continue;
    out.emplace_back(name, name == "referer" ? referer_path(value) : std::string(trim(value)));
  }
  std::sort(out.begin(), out.end());
  return out;
}

CanonicalBody canonicalize_body(const RawRequest& req, const RuleSet& effective) {
  CanonicalBody out;
  if (req.body.empty()) return out;
  const std::string mt = req.body_content_type ? media_type(*req.body_content_type) : "";

  if (mt == "application/x-www-form-urlencoded") {
    out.kind = BodyKind::kForm;
    for (const auto& [k, v] : parse_query(req.body)) {
      auto key = normalize_percent_encoding(k);
      if (effective.strips_body_field(key)) continue;
      out.top_level.emplace_back(std::move(key), normalize_percent_encoding(v));
    }
    std::sort(out.top_level.begin(), out.top_level.end());
    out.leaves = out.top_level;
    out.bytes = format_query(out.top_level);
    return out;
  }

  if (is_json_media_type(mt)) {
    json doc = json::parse(req.body, nullptr, false);
    if (!doc.is_discarded()) {
      out.kind = BodyKind::kJson;
      strip_json(doc, "", effective);
      if (doc.is_object()) {
        for (const auto& [key, value] : doc.items()) out.top_level.emplace_back(key, dump_compact(value));
      } else {
        out.top_level.emplace_back("", dump_compact(doc));
      }
      collect_leaves(doc, "", out.leaves);
      out.bytes = dump_compact(doc);
      return out;
    }
  }

  out.kind = BodyKind::kRaw;
  out.bytes = req.body;
  return out;
}

NormalizedSignature normalize(const RawRequest& req, const RuleSet& effective) {
  validate_request(req);
  validate_scope(effective.scope_host);

  NormalizedSignature sig;
  sig.method = req.method;
  sig.host = req.host;
  sig.port = req.port;
  sig.path = canonical_path(req, effective);
  sig.query_kept = kept_query(req, effective);
  sig.headers_kept = kept_headers(req, effective);
  const auto body = canonicalize_body(req, effective);
  sig.body_digest = body.bytes.empty() ? std::string(kEmptyBodyDigest) : sha256_hex(body.bytes);
  return sig;
}

NormalizedSignature normalize(const RawRequest& req, const std::vector<RuleSet>& rules) {
  for (const auto& r : rules) validate_scope(r.scope_host);
  return normalize(req, match_scope(rules, req.host));
}

std::string serialize_signature(const NormalizedSignature& sig) {
  std::string out;
  put_field(out, sig.method);
  put_field(out, sig.host);
  put_field(out, std::to_string(sig.port));
  put_field(out, sig.path);
  put_field(out, pairs_payload(sig.query_kept));
  put_field(out, pairs_payload(sig.headers_kept));
  put_field(out, sig.body_digest);
  return out;
}

CacheKey cache_key(const NormalizedSignature& sig) {
  return CacheKey{sha256_hex(serialize_signature(sig))};
}

json signature_to_json(const NormalizedSignature& sig) {
  return json{{"method", sig.method},
              {"host", sig.host},
              {"port", sig.port},
              {"path", sig.path},
              {"query_kept", fields_to_json(sig.query_kept)},
              {"headers_kept", fields_to_json(sig.headers_kept)},
              {"body_digest", sig.body_digest}};
}

}  // namespace webreplay
