#pragma once

#include <memory>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include "webreplay/request.hpp"

namespace webreplay {

/// Glob match: `*` matches any run (including empty), `?` exactly one
/// character. No character classes, no escaping.
bool glob_match(std::string_view pattern, std::string_view text);
bool glob_match_icase(std::string_view pattern, std::string_view text);

/// Higher is more specific: literal characters count, wildcards do not.
int glob_specificity(std::string_view pattern);

struct PathRewrite {
  std::string pattern;
  std::string replacement;

  /// Throws RegexError when `pattern` does not compile.
  static PathRewrite make(std::string pattern, std::string replacement);
  std::string apply(const std::string& path) const;

  bool operator==(const PathRewrite& o) const {
    return pattern == o.pattern && replacement == o.replacement;
  }

 private:
  std::shared_ptr<const std::regex> compiled_;
};

/// Canned response for an endpoint nobody needs to see for real, e.g. an
/// analytics beacon.
struct SyntheticRule {
  std::string match_host = "*";
  std::string match_path = "*";
  int status = 204;
  FieldList headers;
  std::string body;
  std::string reason;

  bool matches(std::string_view host, std::string_view path) const;
  bool operator==(const SyntheticRule&) const = default;
};

struct RuleSet {
  int version = 1;
  std::string scope_host = "*";
  std::vector<std::string> strip_query;
  std::vector<std::string> strip_headers;
  std::vector<std::string> strip_body_fields;
  std::vector<PathRewrite> path_rewrites;
  std::vector<SyntheticRule> synthetic;

  bool is_global() const { return scope_host == "*"; }
  bool strips_query(std::string_view key) const;
  bool strips_header(std::string_view name) const;
  bool strips_body_field(std::string_view dotted_path) const;
  /// First synthetic rule matching host/path, or nullptr.
  const SyntheticRule* find_synthetic(std::string_view host, std::string_view path) const;

  bool operator==(const RuleSet&) const = default;
};

constexpr int kRulesFormatVersion = 1;

/// Throws RuleScopeError when `scope_host` is not a usable hostname glob.
void validate_scope(std::string_view scope_host);

/// Throws SchemaError / RegexError describing the offending field.
void validate_ruleset(const RuleSet& rules);

/// Parses a rules document. File order is preserved; precedence between
/// scopes is resolved by match_scope().
/// Throws ParseError, SchemaError (message carries the JSON path) or RegexError.
std::vector<RuleSet> load_rules(std::string_view text);
std::vector<RuleSet> load_rules_file(const std::string& path);

/// Canonical form: sorted keys, 2-space indent, trailing newline.
std::string save_rules(const std::vector<RuleSet>& rules);

/// Effective rules for `host`: every global ("*") scope merged with the most
/// specific matching host scope (later file order wins ties). Entries from
/// the host scope come first so they take precedence wherever order matters.
RuleSet match_scope(const std::vector<RuleSet>& rules, std::string_view host);

json ruleset_to_json(const RuleSet& rules);
json synthetic_to_json(const SyntheticRule& rule);

}  // namespace webreplay
