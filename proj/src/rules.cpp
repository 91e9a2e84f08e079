#include "webreplay/rules.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "webreplay/encoding.hpp"
#include "webreplay/error.hpp"

namespace webreplay {

namespace {

template <typename Eq>
bool glob_impl(std::string_view pattern, std::string_view text, Eq eq) {
  std::size_t p = 0, t = 0;
  std::size_t star = std::string_view::npos, resume = 0;
  while (t < text.size()) {
    if (p < pattern.size() && (pattern[p] == '?' || (pattern[p] != '*' && eq(pattern[p], text[t])))) {
      ++p;
      ++t;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      resume = t;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      t = ++resume;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

const std::set<std::string, std::less<>> kRuleSetKeys = {
    "scope_host",        "strip_query",   "strip_headers",
    "strip_body_fields", "path_rewrites", "synthetic"};
const std::set<std::string, std::less<>> kSyntheticKeys = {
    "match_host", "match_path", "status", "headers", "body_b64", "reason"};

void reject_unknown_keys(const json& obj, const std::set<std::string, std::less<>>& allowed,
                         const std::string& path) {
  for (const auto& [key, _] : obj.items())
    if (!allowed.count(key)) throw SchemaError(path + "." + key + ": unknown field");
}

std::string string_field(const json& obj, const char* key, const std::string& path,
                         std::optional<std::string> fallback = std::nullopt) {
  if (!obj.contains(key)) {
    if (fallback) return *fallback;
    throw SchemaError(path + "." + key + ": missing required field");
  }
  if (!obj.at(key).is_string()) throw SchemaError(path + "." + key + ": expected string");
  return obj.at(key).get<std::string>();
}

std::vector<std::string> pattern_list(const json& obj, const char* key, const std::string& path) {
  std::vector<std::string> out;
  if (!obj.contains(key)) return out;
  const auto& arr = obj.at(key);
  const std::string here = path + "." + key;
  if (!arr.is_array()) throw SchemaError(here + ": expected array of strings");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_string())
      throw SchemaError(here + "[" + std::to_string(i) + "]: expected string");
    auto value = arr[i].get<std::string>();
    if (value.empty()) throw SchemaError(here + "[" + std::to_string(i) + "]: empty pattern");
    out.push_back(std::move(value));
  }
  return out;
}

SyntheticRule parse_synthetic(const json& obj, const std::string& path) {
  if (!obj.is_object()) throw SchemaError(path + ": expected object");
  reject_unknown_keys(obj, kSyntheticKeys, path);
  SyntheticRule rule;
  rule.match_host = string_field(obj, "match_host", path);
  rule.match_path = string_field(obj, "match_path", path, std::string("*"));
  if (!obj.contains("status") || !obj.at("status").is_number_integer())
    throw SchemaError(path + ".status: expected integer");
  rule.status = obj.at("status").get<int>();
  if (rule.status < 100 || rule.status > 599)
    throw SchemaError(path + ".status: must be within 100-599");
  if (obj.contains("headers")) rule.headers = fields_from_json(obj.at("headers"), path + ".headers");
  const auto body_b64 = string_field(obj, "body_b64", path, std::string());
  try {
    rule.body = base64_decode(body_b64);
  } catch (const ParseError& e) {
    throw SchemaError(path + ".body_b64: " + e.what());
  }
  rule.reason = string_field(obj, "reason", path, std::string());
  return rule;
}

RuleSet parse_ruleset(const json& obj, const std::string& path) {
  if (!obj.is_object()) throw SchemaError(path + ": expected object");
  reject_unknown_keys(obj, kRuleSetKeys, path);
  RuleSet rs;
  rs.scope_host = string_field(obj, "scope_host", path);
  try {
    validate_scope(rs.scope_host);
  } catch (const RuleScopeError& e) {
    throw SchemaError(path + ".scope_host: " + e.what());
  }
  rs.strip_query = pattern_list(obj, "strip_query", path);
  rs.strip_headers = pattern_list(obj, "strip_headers", path);
  rs.strip_body_fields = pattern_list(obj, "strip_body_fields", path);
  if (obj.contains("path_rewrites")) {
    const auto& arr = obj.at("path_rewrites");
    const std::string here = path + ".path_rewrites";
    if (!arr.is_array()) throw SchemaError(here + ": expected array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string item = here + "[" + std::to_string(i) + "]";
      const auto& rw = arr[i];
      if (!rw.is_object()) throw SchemaError(item + ": expected object");
      reject_unknown_keys(rw, {"pattern", "replacement"}, item);
      auto pattern = string_field(rw, "pattern", item);
      if (pattern.empty()) throw SchemaError(item + ".pattern: empty pattern");
      try {
        rs.path_rewrites.push_back(
            PathRewrite::make(std::move(pattern), string_field(rw, "replacement", item)));
      } catch (const RegexError& e) {
        throw RegexError(item + ".pattern: " + e.what());
      }
    }
  }
  if (obj.contains("synthetic")) {
    const auto& arr = obj.at("synthetic");
    if (!arr.is_array()) throw SchemaError(path + ".synthetic: expected array");
    for (std::size_t i = 0; i < arr.size(); ++i)
      rs.synthetic.push_back(
          parse_synthetic(arr[i], path + ".synthetic[" + std::to_string(i) + "]"));
  }
  return rs;
}

template <typename T>
void append_unique(std::vector<T>& dst, const std::vector<T>& src) {
  for (const auto& item : src)
    if (std::find(dst.begin(), dst.end(), item) == dst.end()) dst.push_back(item);
}

}  // namespace

bool glob_match(std::string_view pattern, std::string_view text) {
  return glob_impl(pattern, text, [](char a, char b) { return a == b; });
}

bool glob_match_icase(std::string_view pattern, std::string_view text) {
  return glob_impl(pattern, text, [](char a, char b) {
    return std::tolower(static_cast<unsigned char>(a)) ==
           std::tolower(static_cast<unsigned char>(b));
  });
}

int glob_specificity(std::string_view pattern) {
  return static_cast<int>(std::count_if(pattern.begin(), pattern.end(),
                                        [](char c) { return c != '*' && c != '?'; }));
}

PathRewrite PathRewrite::make(std::string pattern, std::string replacement) {
  PathRewrite rw;
  try {
    rw.compiled_ = std::make_shared<const std::regex>(pattern, std::regex::ECMAScript);
  } catch (const std::regex_error& e) {
    throw RegexError("invalid regex '" + pattern + "': " + e.what());
  }
  rw.pattern = std::move(pattern);
  rw.replacement = std::move(replacement);
  return rw;
}

std::string PathRewrite::apply(const std::string& path) const {
  if (!compiled_) return make(pattern, replacement).apply(path);
  return std::regex_replace(path, *compiled_, replacement);
}

bool SyntheticRule::matches(std::string_view host, std::string_view path) const {
  return glob_match(match_host, host) && glob_match(match_path, path);
}

bool RuleSet::strips_query(std::string_view key) const {
  return std::any_of(strip_query.begin(), strip_query.end(),
                     [&](const std::string& p) { return glob_match(p, key); });
}

bool RuleSet::strips_header(std::string_view name) const {
  return std::any_of(strip_headers.begin(), strip_headers.end(),
                     [&](const std::string& p) { return glob_match_icase(p, name); });
}

bool RuleSet::strips_body_field(std::string_view dotted_path) const {
  return std::any_of(strip_body_fields.begin(), strip_body_fields.end(),
                     [&](const std::string& p) { return glob_match(p, dotted_path); });
}

const SyntheticRule* RuleSet::find_synthetic(std::string_view host, std::string_view path) const {
  for (const auto& rule : synthetic)
    if (rule.matches(host, path)) return &rule;
  return nullptr;
}

void validate_scope(std::string_view scope_host) {
  if (scope_host.empty()) throw RuleScopeError("empty scope");
  for (unsigned char c : scope_host) {
    if (!(std::islower(c) || std::isdigit(c) || c == '.' || c == '-' || c == '*' || c == '?' ||
          c == ':' || c == '_'))
      throw RuleScopeError("unknown scope kind '" + std::string(scope_host) +
                           "' (expected a lowercase hostname glob or \"*\")");
  }
}

void validate_ruleset(const RuleSet& rules) {
  if (rules.version != kRulesFormatVersion)
    throw SchemaError("version: unsupported rules version " + std::to_string(rules.version));
  try {
    validate_scope(rules.scope_host);
  } catch (const RuleScopeError& e) {
    throw SchemaError(std::string("scope_host: ") + e.what());
  }
  auto check = [](const std::vector<std::string>& list, const char* name) {
    for (const auto& p : list)
      if (p.empty()) throw SchemaError(std::string(name) + ": empty pattern");
  };
  check(rules.strip_query, "strip_query");
  check(rules.strip_headers, "strip_headers");
  check(rules.strip_body_fields, "strip_body_fields");
  for (const auto& rw : rules.path_rewrites) PathRewrite::make(rw.pattern, rw.replacement);
  for (const auto& s : rules.synthetic)
    if (s.status < 100 || s.status > 599)
      throw SchemaError("synthetic.status: must be within 100-599");
}

std::vector<RuleSet> load_rules(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("rules: ") + e.what());
  }
  if (!doc.is_object()) throw SchemaError("$: expected object");
  reject_unknown_keys(doc, {"version", "rulesets"}, "$");
  if (!doc.contains("version")) throw SchemaError("$.version: missing required field");
  if (!doc.at("version").is_number_integer() || doc.at("version").get<int>() != kRulesFormatVersion)
    throw SchemaError("$.version: expected " + std::to_string(kRulesFormatVersion));
  std::vector<RuleSet> out;
  if (!doc.contains("rulesets")) return out;
  const auto& arr = doc.at("rulesets");
  if (!arr.is_array()) throw SchemaError("$.rulesets: expected array");
  for (std::size_t i = 0; i < arr.size(); ++i)
    out.push_back(parse_ruleset(arr[i], "$.rulesets[" + std::to_string(i) + "]"));
  return out;
}

std::vector<RuleSet> load_rules_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open rules file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return load_rules(ss.str());
}

json synthetic_to_json(const SyntheticRule& rule) {
  json j;
  j["match_host"] = rule.match_host;
  j["match_path"] = rule.match_path;
  j["status"] = rule.status;
  j["headers"] = fields_to_json(rule.headers);
  j["body_b64"] = base64_encode(rule.body);
  j["reason"] = rule.reason;
  return j;
}

json ruleset_to_json(const RuleSet& rules) {
  json j;
  j["scope_host"] = rules.scope_host;
  j["strip_query"] = rules.strip_query;
  j["strip_headers"] = rules.strip_headers;
  j["strip_body_fields"] = rules.strip_body_fields;
  j["path_rewrites"] = json::array();
  for (const auto& rw : rules.path_rewrites)
    j["path_rewrites"].push_back({{"pattern", rw.pattern}, {"replacement", rw.replacement}});
  j["synthetic"] = json::array();
  for (const auto& s : rules.synthetic) j["synthetic"].push_back(synthetic_to_json(s));
  return j;
}

std::string save_rules(const std::vector<RuleSet>& rules) {
  json doc;
  doc["version"] = kRulesFormatVersion;
  doc["rulesets"] = json::array();
  for (const auto& rs : rules) doc["rulesets"].push_back(ruleset_to_json(rs));
  return doc.dump(2) + "\n";
}

RuleSet match_scope(const std::vector<RuleSet>& rules, std::string_view host) {
  const RuleSet* best = nullptr;
  int best_specificity = -1;
  for (const auto& rs : rules) {
    if (rs.is_global() || !glob_match(rs.scope_host, host)) continue;
    const int s = glob_specificity(rs.scope_host);
    if (s >= best_specificity) {
      best = &rs;
      best_specificity = s;
    }
  }
  RuleSet effective;
  if (best) {
    effective.scope_host = best->scope_host;
    append_unique(effective.strip_query, best->strip_query);
    append_unique(effective.strip_headers, best->strip_headers);
    append_unique(effective.strip_body_fields, best->strip_body_fields);
    append_unique(effective.path_rewrites, best->path_rewrites);
    append_unique(effective.synthetic, best->synthetic);
  }
  for (const auto& rs : rules) {
    if (!rs.is_global()) continue;
    append_unique(effective.strip_query, rs.strip_query);
    append_unique(effective.strip_headers, rs.strip_headers);
    append_unique(effective.strip_body_fields, rs.strip_body_fields);
    append_unique(effective.path_rewrites, rs.path_rewrites);
    append_unique(effective.synthetic, rs.synthetic);
  }
  return effective;
}

}  // namespace webreplay
