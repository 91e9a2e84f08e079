#pragma once

#include <array>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "webreplay/request.hpp"
#include "webreplay/rules.hpp"

namespace webreplay {

/// Headers that participate in a signature unless a rule strips them.
/// Everything else (cookies, user-agent, authorization, caching headers...)
/// is dropped.
inline constexpr std::array<std::string_view, 4> kDefaultKeptHeaders = {
    "accept", "content-type", "referer", "x-requested-with"};

inline constexpr std::string_view kEmptyBodyDigest = "empty";

/// Canonical request identity after rule-based stripping and sorting.
struct NormalizedSignature {
  std::string method;
  std::string host;
  int port = 80;
  std::string path;
  FieldList query_kept;
  FieldList headers_kept;
  std::string body_digest{kEmptyBodyDigest};

  bool operator==(const NormalizedSignature&) const = default;
};

struct CacheKey {
  std::string hex;

  bool operator==(const CacheKey&) const = default;
  auto operator<=>(const CacheKey&) const = default;
};

/// How a request body was understood while canonicalizing it.
enum class BodyKind { kEmpty, kForm, kJson, kRaw };

struct CanonicalBody {
  BodyKind kind = BodyKind::kEmpty;
  /// Bytes that are digested; for form/JSON bodies this is the re-serialized
  /// form with stripped fields removed and keys sorted.
  std::string bytes;
  /// Top-level fields (form pairs or JSON members, values as compact JSON).
  FieldList top_level;
  /// Every leaf as (dotted path, value); equals top_level for form bodies.
  FieldList leaves;
};

/// Path normalization: unreserved percent-escapes decoded, remaining escapes
/// uppercased, runs of '/' collapsed.
std::string normalize_path(std::string_view path);

/// Applies the effective rules' path rewrites and then normalize_path().
std::string canonical_path(const RawRequest& req, const RuleSet& effective);

/// Query pairs surviving strip_query, percent-normalized, sorted.
FieldList kept_query(const RawRequest& req, const RuleSet& effective);

/// Allowlisted headers surviving strip_headers, sorted. Referer is reduced
/// to its path component.
FieldList kept_headers(const RawRequest& req, const RuleSet& effective);

CanonicalBody canonicalize_body(const RawRequest& req, const RuleSet& effective);

/// `effective` is the already-scoped rule set for req.host (see match_scope).
/// Throws MalformedRequest or RuleScopeError.
NormalizedSignature normalize(const RawRequest& req, const RuleSet& effective);
/// Resolves the scope for req.host first.
NormalizedSignature normalize(const RawRequest& req, const std::vector<RuleSet>& rules);

/// Field order: method, host, port, path, query_kept, headers_kept,
/// body_digest; every field is a 4-byte big-endian length followed by its
/// UTF-8 bytes. List fields are the concatenation of length-prefixed keys
/// and values. See docs/signature-format.md.
std::string serialize_signature(const NormalizedSignature& sig);

CacheKey cache_key(const NormalizedSignature& sig);

json signature_to_json(const NormalizedSignature& sig);

}  // namespace webreplay

template <>
struct std::hash<webreplay::CacheKey> {
  std::size_t operator()(const webreplay::CacheKey& k) const noexcept {
    return std::hash<std::string>{}(k.hex);
  }
};
