#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "webreplay/archive.hpp"
#include "webreplay/replay.hpp"

namespace webreplay {

/// (key, recorded value, observed value). A key present on one side only
/// has "" for the other.
struct FieldChange {
  std::string key;
  std::string recorded;
  std::string observed;

  bool operator==(const FieldChange&) const = default;
};

struct MissReport {
  MissRecord miss;
  std::optional<std::uint64_t> matched_seq;
  std::vector<FieldChange> changed_query_keys;
  std::vector<FieldChange> changed_headers;
  std::vector<FieldChange> changed_body_fields;
  double similarity = 0.0;
};

struct DiagnoseConfig {
  SimilarityWeights weights;
  double match_threshold = 0.6;
  /// Independent reports needed before a key without lexicon evidence is
  /// proposed for stripping.
  std::size_t min_evidence = 2;
  /// Proposals below this confidence are not turned into rules.
  double accept_threshold = 0.5;
  /// Globs over parameter keys (case-insensitive).
  std::vector<std::string> key_lexicon = {"*token*", "*session*", "*ts*", "*time*", "*nonce*",
                                          "*cachebust*"};
  /// Globs over hostnames whose unmatched misses get a 204 synthetic rule.
  std::vector<std::string> telemetry_lexicon = {"*analytics*", "*telemetry*", "*pixel*",
                                                "*beacon*",    "*doubleclick*", "*stats*"};
};

/// Throws ConfigError when a threshold is outside its range.
void validate_config(const DiagnoseConfig& config);

struct FuzzyMatch {
  std::uint64_t seq = 0;
  double similarity = 0.0;
};

/// Best recorded exchange with the same method and host, if its similarity
/// reaches the threshold. Ties go to the lowest seq.
std::optional<FuzzyMatch> fuzzy_match(const RawRequest& miss, const Archive& archive,
                                      const std::vector<RuleSet>& rules,
                                      const DiagnoseConfig& config = {});

/// Fields that differ between two requests after `rules` are applied.
void diff_requests(const RawRequest& recorded, const RawRequest& observed,
                   const std::vector<RuleSet>& rules, MissReport& out);

MissReport diagnose_miss(const MissRecord& miss, const Archive& archive,
                         const std::vector<RuleSet>& rules, const DiagnoseConfig& config = {});
std::vector<MissReport> diagnose(const std::vector<MissRecord>& misses, const Archive& archive,
                                 const std::vector<RuleSet>& rules, const DiagnoseConfig& config = {});

json report_to_json(const MissReport& report);
MissReport report_from_json(const json& j);
/// {"version":1,"archive":..., "reports":[...]}
std::string reports_document(const std::vector<MissReport>& reports, const std::string& archive);
std::vector<MissReport> load_reports(const std::filesystem::path& path);

/// Epoch timestamps, UUIDs and long random-looking tokens.
bool value_looks_volatile(std::string_view value);
bool key_in_lexicon(std::string_view key, const DiagnoseConfig& config = {});
bool host_is_telemetry(std::string_view host, const DiagnoseConfig& config = {});

enum class ProposalKind { kStripQuery, kStripHeaders, kStripBodyFields, kSynthetic };

std::string_view to_string(ProposalKind kind);
ProposalKind proposal_kind_from_string(std::string_view s);

struct RuleProposal {
  std::string scope_host;
  ProposalKind kind = ProposalKind::kStripQuery;
  /// Key, header name or dotted body path; the host for synthetic proposals.
  std::string pattern;
  std::size_t evidence_count = 0;
  /// Indexes into the report list the proposal was built from.
  std::vector<std::size_t> evidence;
  double confidence = 0.0;
};

/// Deterministic heuristic synthesis; proposals come out ordered by
/// (scope_host, kind, pattern).
std::vector<RuleProposal> synthesize_rules(const std::vector<MissReport>& reports,
                                           const Archive& archive,
                                           const DiagnoseConfig& config = {});

/// Plugs in an alternative proposer (for example one backed by a language
/// model) producing the same proposal schema.
using ProposalHook = std::function<std::vector<RuleProposal>(const std::vector<MissReport>&,
                                                             const Archive&)>;

json proposal_to_json(const RuleProposal& proposal);
RuleProposal proposal_from_json(const json& j);

/// Merges proposals with confidence >= accept_threshold into `base`, one
/// ruleset per scope_host. Patterns already present are not repeated.
std::vector<RuleSet> apply_proposals(std::vector<RuleSet> base,
                                     const std::vector<RuleProposal>& proposals,
                                     double accept_threshold);

struct ValidationReport {
  std::size_t requests = 0;
  std::size_t hits = 0;
  std::size_t essential_misses = 0;
  std::size_t synthetic_hits = 0;
  bool pass = false;
  std::vector<MissRecord> misses;
};

/// Plays `trace` against an isolated replayer built from `archive` and
/// `rules`. A request is an essential miss when no level up to `max_level`
/// and no synthetic rule serves it.
ValidationReport validate_rules(const Archive& archive, const std::vector<RuleSet>& rules,
                                const std::vector<TraceEntry>& trace, int max_level = 0);

json validation_to_json(const ValidationReport& report);

}  // namespace webreplay
