#include "webreplay/diagnose.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "webreplay/encoding.hpp"
#include "webreplay/error.hpp"

namespace webreplay {

namespace {

constexpr std::array<std::string_view, 4> kKindNames = {"strip_query", "strip_headers",
                                                        "strip_body_fields", "synthetic"};

std::map<std::string, std::string> group(const FieldList& fields) {
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : fields) {
    auto [it, fresh] = out.emplace(k, v);
    if (!fresh) it->second += "," + v;
  }
  return out;
}

std::vector<FieldChange> diff_fields(const FieldList& recorded, const FieldList& observed) {
  const auto a = group(recorded);
  const auto b = group(observed);
  std::set<std::string> keys;
  for (const auto& [k, _] : a) keys.insert(k);
  for (const auto& [k, _] : b) keys.insert(k);
  std::vector<FieldChange> out;
  for (const auto& k : keys) {
    const auto ia = a.find(k);
    const auto ib = b.find(k);
    const std::string ra = ia == a.end() ? "" : ia->second;
    const std::string ob = ib == b.end() ? "" : ib->second;
    if (ia == a.end() || ib == b.end() || ra != ob) out.push_back({k, ra, ob});
  }
  return out;
}

json changes_to_json(const std::vector<FieldChange>& changes) {
  json out = json::array();
  for (const auto& c : changes) out.push_back({c.key, c.recorded, c.observed});
  return out;
}

std::vector<FieldChange> changes_from_json(const json& j, const char* what) {
  std::vector<FieldChange> out;
  if (!j.is_array()) throw SchemaError(std::string("report.") + what + ": expected array");
  for (const auto& e : j) {
    if (!e.is_array() || e.size() != 3 || !e[0].is_string() || !e[1].is_string() || !e[2].is_string())
      throw SchemaError(std::string("report.") + what + ": expected [key, recorded, observed]");
    out.push_back({e[0].get<std::string>(), e[1].get<std::string>(), e[2].get<std::string>()});
  }
  return out;
}

bool all_digits(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

bool is_uuid(std::string_view s) {
  if (s.size() != 36) return false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool dash = i == 8 || i == 13 || i == 18 || i == 23;
    if (dash ? s[i] != '-' : !std::isxdigit(static_cast<unsigned char>(s[i]))) return false;
  }
  return true;
}

bool is_epoch(std::string_view s) {
  if (s.size() < 10 || s.size() > 13 || !all_digits(s)) return false;
  double seconds = std::stod(std::string(s));
  for (std::size_t i = 10; i < s.size(); ++i) seconds /= 10.0;
  // 2000-01-01 .. 2100-01-01
  return seconds >= 946684800.0 && seconds < 4102444800.0;
}

bool is_token(std::string_view s) {
  if (s.size() < 16) return false;
  bool upper = false, lower = false, digit = false;
  for (unsigned char c : s) {
    if (std::isupper(c)) upper = true;
    else if (std::islower(c)) lower = true;
    else if (std::isdigit(c)) digit = true;
    else return false;
  }
  return upper + lower + digit >= 2;
}

bool usable_pattern(std::string_view key) {
  return !key.empty() && key.find_first_of("*?") == std::string_view::npos;
}

double confidence_for(std::size_t evidence, bool lexicon_hit) {
  return std::min(1.0, static_cast<double>(evidence) / 3.0 + (lexicon_hit ? 0.34 : 0.0));
}

}  // namespace

void validate_config(const DiagnoseConfig& c) {
  auto unit = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(name) + " must be within [0, 1]");
  };
  unit(c.match_threshold, "match_threshold");
  unit(c.accept_threshold, "accept_threshold");
  if (c.weights.path < 0 || c.weights.query < 0 || c.weights.body < 0 ||
      c.weights.path + c.weights.query + c.weights.body <= 0)
    throw ConfigError("similarity weights must be non-negative with a positive sum");
  if (c.min_evidence < 1) throw ConfigError("min_evidence must be at least 1");
}

std::optional<FuzzyMatch> fuzzy_match(const RawRequest& miss, const Archive& archive,
                                      const std::vector<RuleSet>& rules, const DiagnoseConfig& config) {
  const RuleSet effective = match_scope(rules, miss.host);
  std::optional<FuzzyMatch> best;
  for (const auto& ex : archive.exchanges) {
    if (ex.is_upstream_error() || ex.request.method != miss.method || ex.request.host != miss.host)
      continue;
    const double sim = request_similarity(miss, ex.request, effective, config.weights);
    if (!best || sim > best->similarity) best = FuzzyMatch{ex.seq, sim};
  }
  if (best && best->similarity + 1e-12 >= config.match_threshold) return best;
  return std::nullopt;
}

void diff_requests(const RawRequest& recorded, const RawRequest& observed,
                   const std::vector<RuleSet>& rules, MissReport& out) {
  const RuleSet effective = match_scope(rules, observed.host);
  out.changed_query_keys = diff_fields(kept_query(recorded, effective), kept_query(observed, effective));
  out.changed_headers = diff_fields(kept_headers(recorded, effective), kept_headers(observed, effective));
  out.changed_body_fields = diff_fields(canonicalize_body(recorded, effective).leaves,
                                        canonicalize_body(observed, effective).leaves);
}

MissReport diagnose_miss(const MissRecord& miss, const Archive& archive,
                         const std::vector<RuleSet>& rules, const DiagnoseConfig& config) {
  MissReport report;
  report.miss = miss;
  if (auto m = fuzzy_match(miss.request, archive, rules, config)) {
    report.matched_seq = m->seq;
    report.similarity = m->similarity;
    diff_requests(archive.find(m->seq)->request, miss.request, rules, report);
  }
  return report;
}

std::vector<MissReport> diagnose(const std::vector<MissRecord>& misses, const Archive& archive,
                                 const std::vector<RuleSet>& rules, const DiagnoseConfig& config) {
  std::vector<MissReport> out;
  out.reserve(misses.size());
  for (const auto& m : misses) out.push_back(diagnose_miss(m, archive, rules, config));
  return out;
}

json report_to_json(const MissReport& r) {
  return {{"miss", miss_to_json(r.miss)},
          {"matched_seq", r.matched_seq ? json(*r.matched_seq) : json(nullptr)},
          {"similarity", r.similarity},
          {"changed_query_keys", changes_to_json(r.changed_query_keys)},
          {"changed_headers", changes_to_json(r.changed_headers)},
          {"changed_body_fields", changes_to_json(r.changed_body_fields)}};
}

MissReport report_from_json(const json& j) {
  if (!j.is_object() || !j.contains("miss")) throw SchemaError("report: expected object with miss");
  MissReport r;
  r.miss = miss_from_json(j.at("miss"));
  if (j.contains("matched_seq") && !j.at("matched_seq").is_null())
    r.matched_seq = j.at("matched_seq").get<std::uint64_t>();
  r.similarity = j.value("similarity", 0.0);
  r.changed_query_keys = changes_from_json(j.value("changed_query_keys", json::array()), "changed_query_keys");
  r.changed_headers = changes_from_json(j.value("changed_headers", json::array()), "changed_headers");
  r.changed_body_fields =
      changes_from_json(j.value("changed_body_fields", json::array()), "changed_body_fields");
  return r;
}

std::string reports_document(const std::vector<MissReport>& reports, const std::string& archive) {
  json doc{{"version", 1}, {"archive", archive}, {"reports", json::array()}};
  for (const auto& r : reports) doc["reports"].push_back(report_to_json(r));
  return doc.dump(2) + "\n";
}

std::vector<MissReport> load_reports(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (!doc.is_object() || doc.value("version", 0) != 1 || !doc.contains("reports") ||
      !doc.at("reports").is_array())
    throw SchemaError(path.string() + ": expected {\"version\":1,\"reports\":[...]}");
  std::vector<MissReport> out;
  for (std::size_t i = 0; i < doc.at("reports").size(); ++i) {
    try {
      out.push_back(report_from_json(doc.at("reports")[i]));
    } catch (const SchemaError& e) {
      throw SchemaError(path.string() + ": $.reports[" + std::to_string(i) + "]: " + e.what());
    }
  }
  return out;
}

bool value_looks_volatile(std::string_view value) {
  return is_epoch(value) || is_uuid(value) || is_token(value);
}

bool key_in_lexicon(std::string_view key, const DiagnoseConfig& config) {
  return std::any_of(config.key_lexicon.begin(), config.key_lexicon.end(),
                     [&](const std::string& p) { return glob_match_icase(p, key); });
}

bool host_is_telemetry(std::string_view host, const DiagnoseConfig& config) {
  return std::any_of(config.telemetry_lexicon.begin(), config.telemetry_lexicon.end(),
                     [&](const std::string& p) { return glob_match_icase(p, host); });
}

std::string_view to_string(ProposalKind kind) { return kKindNames.at(static_cast<std::size_t>(kind)); }

ProposalKind proposal_kind_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i)
    if (kKindNames[i] == s) return static_cast<ProposalKind>(i);
  throw SchemaError("unknown proposal kind '" + std::string(s) + "'");
}

std::vector<RuleProposal> synthesize_rules(const std::vector<MissReport>& reports,
                                           const Archive& /*archive*/, const DiagnoseConfig& config) {
  struct Evidence {
    std::set<std::size_t> reports;
    bool lexicon = false;
  };
  std::map<std::tuple<std::string, ProposalKind, std::string>, Evidence> strips;
  std::map<std::string, std::set<std::size_t>> telemetry;
  std::set<std::string> telemetry_matched;

  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    if (r.miss.served == "synthetic") continue;
    const auto& host = r.miss.request.host;
    if (!r.matched_seq) {
      if (host_is_telemetry(host, config)) telemetry[host].insert(i);
      continue;
    }
    if (host_is_telemetry(host, config)) telemetry_matched.insert(host);
    auto collect = [&](const std::vector<FieldChange>& changes, ProposalKind kind) {
      for (const auto& c : changes) {
        if (!usable_pattern(c.key)) continue;
        auto& ev = strips[{host, kind, c.key}];
        ev.reports.insert(i);
        ev.lexicon = ev.lexicon || key_in_lexicon(c.key, config) ||
                     value_looks_volatile(c.recorded) || value_looks_volatile(c.observed);
      }
    };
    collect(r.changed_query_keys, ProposalKind::kStripQuery);
    collect(r.changed_headers, ProposalKind::kStripHeaders);
    collect(r.changed_body_fields, ProposalKind::kStripBodyFields);
  }

  std::vector<RuleProposal> out;
  for (const auto& [key, ev] : strips) {
    const auto& [host, kind, pattern] = key;
    if (ev.reports.size() < config.min_evidence && !ev.lexicon) continue;
    RuleProposal p;
    p.scope_host = host;
    p.kind = kind;
    p.pattern = pattern;
    p.evidence.assign(ev.reports.begin(), ev.reports.end());
    p.evidence_count = p.evidence.size();
    p.confidence = confidence_for(p.evidence_count, ev.lexicon);
    out.push_back(std::move(p));
  }
  for (const auto& [host, ids] : telemetry) {
    if (telemetry_matched.count(host)) continue;
    RuleProposal p;
    p.scope_host = host;
    p.kind = ProposalKind::kSynthetic;
    p.pattern = host;
    p.evidence.assign(ids.begin(), ids.end());
    p.evidence_count = p.evidence.size();
    p.confidence = confidence_for(p.evidence_count, true);
    out.push_back(std::move(p));
  }
  std::stable_sort(out.begin(), out.end(), [](const RuleProposal& a, const RuleProposal& b) {
    return std::tie(a.scope_host, a.kind, a.pattern) < std::tie(b.scope_host, b.kind, b.pattern);
  });
  return out;
}

json proposal_to_json(const RuleProposal& p) {
  return {{"scope_host", p.scope_host},   {"kind", to_string(p.kind)},
          {"pattern", p.pattern},         {"evidence_count", p.evidence_count},
          {"evidence", p.evidence},       {"confidence", p.confidence}};
}

RuleProposal proposal_from_json(const json& j) {
  RuleProposal p;
  try {
    p.scope_host = j.at("scope_host").get<std::string>();
    p.kind = proposal_kind_from_string(j.at("kind").get<std::string>());
    p.pattern = j.at("pattern").get<std::string>();
    p.evidence = j.at("evidence").get<std::vector<std::size_t>>();
    p.evidence_count = j.at("evidence_count").get<std::size_t>();
    p.confidence = j.at("confidence").get<double>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string("proposal: ") + e.what());
  }
  if (p.evidence_count != p.evidence.size() || p.evidence_count < 1)
    throw SchemaError("proposal: evidence_count must equal the number of evidence entries");
  return p;
}

std::vector<RuleSet> apply_proposals(std::vector<RuleSet> base,
                                     const std::vector<RuleProposal>& proposals,
                                     double accept_threshold) {
  auto scope = [&](const std::string& host) -> RuleSet& {
    for (auto& rs : base)
      if (rs.scope_host == host) return rs;
    RuleSet rs;
    rs.scope_host = host;
    base.push_back(std::move(rs));
    return base.back();
  };
  auto add = [](std::vector<std::string>& list, const std::string& pattern) {
    if (std::find(list.begin(), list.end(), pattern) == list.end()) list.push_back(pattern);
  };
  for (const auto& p : proposals) {
    if (p.confidence + 1e-12 < accept_threshold) continue;
    auto& rs = scope(p.scope_host);
    switch (p.kind) {
      case ProposalKind::kStripQuery: add(rs.strip_query, p.pattern); break;
      case ProposalKind::kStripHeaders: add(rs.strip_headers, to_lower(p.pattern)); break;
      case ProposalKind::kStripBodyFields: add(rs.strip_body_fields, p.pattern); break;
      case ProposalKind::kSynthetic: {
        SyntheticRule rule;
        rule.match_host = p.pattern;
        rule.status = 204;
        rule.reason = "telemetry";
        if (std::find(rs.synthetic.begin(), rs.synthetic.end(), rule) == rs.synthetic.end())
          rs.synthetic.push_back(std::move(rule));
        break;
      }
    }
  }
  for (const auto& rs : base) validate_ruleset(rs);
  return base;
}

ValidationReport validate_rules(const Archive& archive, const std::vector<RuleSet>& rules,
                                const std::vector<TraceEntry>& trace, int max_level) {
  ReplayOptions options;
  options.max_level = max_level;
  options.isolation = true;
  Replayer replayer({archive}, rules, options);

  ValidationReport report;
  for (const auto& entry : trace) {
    ++report.requests;
    LookupResult r;
    try {
      r = replayer.lookup(entry.request, entry.session);
    } catch (const MalformedRequest&) {
      r.level = max_level;
    }
    switch (r.outcome) {
      case Outcome::kExchange: ++report.hits; break;
      case Outcome::kSynthetic: ++report.synthetic_hits; break;
      case Outcome::kMiss:
        ++report.essential_misses;
        report.misses.push_back(replayer.describe_miss(entry.request, entry.session, r.level, "none"));
        break;
    }
  }
  report.pass = report.essential_misses == 0;
  return report;
}

json validation_to_json(const ValidationReport& r) {
  json misses = json::array();
  for (const auto& m : r.misses) misses.push_back(miss_to_json(m));
  return {{"requests", r.requests},
          {"hits", r.hits},
          {"essential_misses", r.essential_misses},
          {"synthetic_hits", r.synthetic_hits},
          {"pass", r.pass},
          {"misses", misses}};
}

}  // namespace webreplay
