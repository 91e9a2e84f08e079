#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "webreplay/request.hpp"
#include "webreplay/rules.hpp"
#include "webreplay/signature.hpp"

namespace webreplay {

/// One captured request/response pair.
struct RawExchange {
  std::uint64_t seq = 0;
  std::int64_t timestamp_ms = 0;
  RawRequest request;
  /// 0 when the upstream could not be reached; `note` says why.
  int response_status = 0;
  FieldList response_headers;
  std::string response_body_ref;
  std::int64_t duration_ms = 0;
  std::optional<std::string> note;

  bool is_upstream_error() const { return response_status == 0; }
};

/// A recorded session loaded into memory.
///
/// On disk an archive is a directory:
///   manifest.json        archive metadata
///   exchanges.jsonl      one RawExchange per line, in seq order
///   bodies/<hh>/<hash>   response bodies named by their SHA-256
struct Archive {
  std::filesystem::path dir;
  std::string archive_id;
  std::string created_at;
  std::set<std::string> origin_hosts;
  std::vector<RawExchange> exchanges;
  std::unordered_map<std::string, std::string> body_store;
  json meta = json::object();

  const std::string& body(const RawExchange& ex) const;
  const RawExchange* find(std::uint64_t seq) const;
};

inline constexpr std::string_view kArchiveFormat = "webreplay-archive";
inline constexpr int kArchiveVersion = 1;

/// Loads and verifies an archive: every line parses, seqs increase, every
/// body reference resolves and hashes to its name.
/// Throws CorruptArchive naming the first bad seq.
Archive open_archive(const std::filesystem::path& dir);

json exchange_to_json(const RawExchange& ex);
RawExchange exchange_from_json(const json& j);

std::filesystem::path body_path(const std::filesystem::path& dir, const std::string& hash);

/// Append-only archive writer. Safe to call from many threads; appends are
/// serialized and seqs are assigned in append order.
class ArchiveWriter {
 public:
  /// Creates the archive directory, or continues an existing archive after
  /// its last seq without touching prior exchanges. Throws WriteError.
  explicit ArchiveWriter(const std::filesystem::path& dir, json meta = json::object());
  ~ArchiveWriter();
  ArchiveWriter(const ArchiveWriter&) = delete;
  ArchiveWriter& operator=(const ArchiveWriter&) = delete;

  struct Entry {
    std::int64_t timestamp_ms = 0;
    RawRequest request;
    int response_status = 0;
    FieldList response_headers;
    std::string response_body;
    std::int64_t duration_ms = 0;
    std::optional<std::string> note;
  };

  /// Stores the body (deduplicated by hash) and appends the exchange line.
  RawExchange append(Entry entry);

  /// Rewrites the manifest and fsyncs. Idempotent; also run by the destructor.
  void close();

  std::size_t exchange_count() const;
  const std::filesystem::path& dir() const { return dir_; }
  const std::string& archive_id() const { return archive_id_; }

 private:
  void write_manifest();

  std::filesystem::path dir_;
  std::string archive_id_;
  std::string created_at_;
  json meta_;
  std::set<std::string> origin_hosts_;
  std::set<std::string> stored_bodies_;
  std::uint64_t next_seq_ = 1;
  std::size_t count_ = 0;
  int log_fd_ = -1;
  bool closed_ = false;
  mutable std::mutex mutex_;
};

/// Position of an exchange across the archives mounted for replay.
struct ExchangeRef {
  std::size_t archive = 0;
  std::uint64_t seq = 0;

  bool operator==(const ExchangeRef&) const = default;
};

inline constexpr int kFallbackLevels = 5;

/// Signature with every field that `level` ignores blanked out:
/// L0 everything; L1 no headers; L2 also no body; L3 also query values
/// (keys kept, sorted); L4 method + host + port + path only.
NormalizedSignature mask_signature(NormalizedSignature sig, int level);
CacheKey level_key(const NormalizedSignature& sig, int level);

/// CacheKey -> recorded exchanges for each fallback level. Recording order
/// is preserved inside every bucket.
class ReplayIndex {
 public:
  using Bucket = std::vector<ExchangeRef>;
  using LevelMap = std::unordered_map<CacheKey, Bucket>;

  /// Indexes every replayable exchange (upstream errors are skipped).
  void add(const Archive& archive, std::size_t archive_pos, const std::vector<RuleSet>& rules);

  const Bucket* find(int level, const CacheKey& key) const;
  const LevelMap& level(int level) const { return levels_.at(static_cast<std::size_t>(level)); }
  std::size_t key_count(int level = 0) const { return this->level(level).size(); }
  std::size_t entry_count() const { return entries_; }

 private:
  std::array<LevelMap, kFallbackLevels> levels_;
  std::size_t entries_ = 0;
};

ReplayIndex index_archive(const Archive& archive, const std::vector<RuleSet>& rules);

std::string iso8601_now();
std::int64_t now_ms();

}  // namespace webreplay
