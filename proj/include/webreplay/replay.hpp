#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "webreplay/archive.hpp"
#include "webreplay/net/server.hpp"
#include "webreplay/net/tls.hpp"
#include "webreplay/net/upstream.hpp"

namespace webreplay {

inline constexpr std::string_view kSessionHeader = "x-webreplay-session";
inline constexpr std::string_view kMatchHeader = "x-webreplay-match";
inline constexpr std::string_view kDefaultSession = "default";
inline constexpr std::string_view kMissBody = R"({"webreplay":"miss"})";

/// "full signature", "ignore headers", ... for levels 0-4.
std::string_view fallback_description(int level);

struct Candidate {
  std::uint64_t seq = 0;
  double similarity = 0.0;

  bool operator==(const Candidate&) const = default;
};

struct MissRecord {
  std::int64_t timestamp_ms = 0;
  std::string session{kDefaultSession};
  RawRequest request;
  /// Loosest fallback level that was tried before giving up.
  int best_level_tried = 0;
  /// Most similar recorded exchanges (same method and host), best first.
  std::vector<Candidate> nearest_candidates;
  /// "none" or "synthetic".
  std::string served = "none";
};

json miss_to_json(const MissRecord& miss);
MissRecord miss_from_json(const json& j);
/// Reads a JSONL miss log. Throws ParseError / SchemaError naming the line.
std::vector<MissRecord> load_miss_log(const std::filesystem::path& path);

/// A playback trace line: the request plus the session it belongs to.
struct TraceEntry {
  std::string session{kDefaultSession};
  RawRequest request;
};

/// JSONL, one request object per line (the request JSON of an exchange),
/// with an optional "session" member.
std::vector<TraceEntry> load_trace(const std::filesystem::path& path);
std::string trace_to_jsonl(const std::vector<TraceEntry>& trace);
/// The recording's own request sequence. Upstream failures are left out
/// because they were never replayable.
std::vector<TraceEntry> trace_from_archive(const Archive& archive);

/// Jaccard index; two empty sets count as identical.
double jaccard(std::vector<std::string> a, std::vector<std::string> b);

struct SimilarityWeights {
  double path = 0.5;
  double query = 0.3;
  double body = 0.2;
};

/// Weighted Jaccard similarity over path segments, kept query pairs and
/// top-level body fields, all taken after `effective` rules are applied.
double request_similarity(const RawRequest& a, const RawRequest& b, const RuleSet& effective,
                          const SimilarityWeights& weights = {});

struct ReplayOptions {
  /// Loosest fallback level consulted. 0 makes replay exact-match only.
  int max_level = kFallbackLevels - 1;
  /// When false, misses are fetched live through `upstream` (not recorded).
  bool isolation = true;
  net::UpstreamOptions upstream;
  std::size_t nearest = 3;
  SimilarityWeights weights;
  /// JSONL miss log, appended to.
  std::optional<std::filesystem::path> miss_log;
};

enum class Outcome { kExchange, kSynthetic, kMiss };

struct LookupResult {
  Outcome outcome = Outcome::kMiss;
  /// Level that served an exchange; the loosest level tried otherwise.
  int level = 0;
  std::size_t archive = 0;
  const RawExchange* exchange = nullptr;
  std::optional<SyntheticRule> synthetic;
};

/// Answers requests from recorded archives. Lookups are safe to run
/// concurrently; each session keeps its own cursor per (level, key).
class Replayer {
 public:
  Replayer(std::vector<Archive> archives, std::vector<RuleSet> rules, ReplayOptions options = {});
  ~Replayer();
  Replayer(const Replayer&) = delete;
  Replayer& operator=(const Replayer&) = delete;

  /// Tries L0..max_level, then synthetic rules. Advances the session's
  /// cursor for the winning key. Throws MalformedRequest.
  LookupResult lookup(const RawRequest& req, std::string_view session = kDefaultSession);

  /// lookup() plus response construction and miss logging. Misses answer
  /// 504 with kMissBody; malformed requests answer 400.
  net::HttpResponse serve(const RawRequest& req, std::string_view session = kDefaultSession);

  /// Builds the miss record for `req` (nearest candidates included).
  MissRecord describe_miss(const RawRequest& req, std::string_view session, int level_tried,
                           std::string served) const;

  void reset_session(std::string_view session);
  void drop_session(std::string_view session);
  std::vector<MissRecord> misses() const;
  void clear_misses();

  const std::vector<Archive>& archives() const { return archives_; }
  const std::vector<RuleSet>& rules() const { return rules_; }
  const ReplayIndex& index() const { return index_; }
  const ReplayOptions& options() const { return options_; }
  bool has_upstream() const { return upstream_ != nullptr; }

 private:
  using Cursors = std::map<std::pair<int, std::string>, std::size_t>;

  void record_miss(MissRecord miss);

  std::vector<Archive> archives_;
  std::vector<RuleSet> rules_;
  ReplayOptions options_;
  ReplayIndex index_;
  /// Only present without isolation: isolated replay has no way to reach
  /// the network at all.
  std::unique_ptr<net::UpstreamClient> upstream_;

  mutable std::mutex mutex_;
  std::unordered_map<std::string, Cursors> cursors_;
  std::vector<MissRecord> misses_;
  std::ofstream miss_log_;
};

net::HttpResponse response_from_exchange(const RawExchange& ex, const std::string& body);
net::HttpResponse response_from_synthetic(const SyntheticRule& rule);
net::HttpResponse miss_response();

/// Session named by the x-webreplay-session header, "default" when absent.
std::string session_of(const net::HttpRequest& req);

/// HTTP front end for a Replayer. Accepts proxy-style absolute-form
/// requests and origin-form requests carrying a Host header. CONNECT is
/// intercepted when a CA is configured and refused otherwise.
class ReplayServer {
 public:
  explicit ReplayServer(std::shared_ptr<Replayer> replayer,
                        std::optional<net::CertificateAuthority> ca = std::nullopt);
  ~ReplayServer();

  void start(const net::Endpoint& listen);
  void stop();
  int port() const { return server_.port(); }
  Replayer& replayer() { return *replayer_; }

  net::HttpResponse handle(const net::HttpRequest& req, const net::ConnectionInfo& info);

 private:
  std::shared_ptr<Replayer> replayer_;
  std::optional<net::CertificateAuthority> ca_;
  net::HttpServer server_;
};

}  // namespace webreplay
