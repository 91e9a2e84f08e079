#include "webreplay/archive.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <random>
#include <sstream>

#include "webreplay/encoding.hpp"
#include "webreplay/error.hpp"

namespace webreplay {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_all_fd(int fd, std::string_view data, const fs::path& path) {
  while (!data.empty()) {
    const auto n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      throw WriteError("write " + path.string() + ": " + std::strerror(errno));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

/// Writes via a temporary file and rename so readers never see a partial file.
void write_file_atomic(const fs::path& path, std::string_view data) {
  const fs::path tmp = path.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw WriteError("open " + tmp.string() + ": " + std::strerror(errno));
  try {
    write_all_fd(fd, data, tmp);
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::fsync(fd);
  ::close(fd);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw WriteError("rename " + tmp.string() + ": " + ec.message());
}

std::string random_id() {
  std::random_device rd;
  std::ostringstream ss;
  for (int i = 0; i < 4; ++i) {
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", rd());
    ss << buf;
  }
  return ss.str();
}

}  // namespace

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::string iso8601_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

const std::string& Archive::body(const RawExchange& ex) const {
  static const std::string kEmpty;
  auto it = body_store.find(ex.response_body_ref);
  return it == body_store.end() ? kEmpty : it->second;
}

const RawExchange* Archive::find(std::uint64_t seq) const {
  auto it = std::lower_bound(exchanges.begin(), exchanges.end(), seq,
                             [](const RawExchange& ex, std::uint64_t s) { return ex.seq < s; });
  return it != exchanges.end() && it->seq == seq ? &*it : nullptr;
}

fs::path body_path(const fs::path& dir, const std::string& hash) {
  return dir / "bodies" / hash.substr(0, 2) / hash;
}

json exchange_to_json(const RawExchange& ex) {
  json j;
  j["seq"] = ex.seq;
  j["timestamp_ms"] = ex.timestamp_ms;
  j["request"] = request_to_json(ex.request);
  j["response_status"] = ex.response_status;
  j["response_headers"] = fields_to_json(ex.response_headers);
  j["response_body_ref"] = ex.response_body_ref;
  j["duration_ms"] = ex.duration_ms;
  j["note"] = ex.note ? json(*ex.note) : json(nullptr);
  return j;
}

RawExchange exchange_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("exchange: expected object");
  auto integer = [&](const char* key) {
    if (!j.contains(key) || !j.at(key).is_number_integer())
      throw SchemaError(std::string("exchange.") + key + ": expected integer");
    return j.at(key).get<std::int64_t>();
  };
  RawExchange ex;
  ex.seq = static_cast<std::uint64_t>(integer("seq"));
  ex.timestamp_ms = integer("timestamp_ms");
  ex.request = request_from_json(j.at("request"));
  ex.response_status = static_cast<int>(integer("response_status"));
  ex.response_headers = fields_from_json(j.value("response_headers", json::array()),
                                         "exchange.response_headers");
  if (!j.contains("response_body_ref") || !j.at("response_body_ref").is_string())
    throw SchemaError("exchange.response_body_ref: expected string");
  ex.response_body_ref = j.at("response_body_ref").get<std::string>();
  ex.duration_ms = j.contains("duration_ms") ? integer("duration_ms") : 0;
  if (j.contains("note") && j.at("note").is_string()) ex.note = j.at("note").get<std::string>();
  return ex;
}

Archive open_archive(const fs::path& dir) {
  Archive archive;
  archive.dir = dir;

  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const std::exception& e) {
    throw CorruptArchive("archive " + dir.string() + ": unreadable manifest: " + e.what(), 0);
  }
  if (manifest.value("format", "") != kArchiveFormat || manifest.value("version", 0) != kArchiveVersion)
    throw CorruptArchive("archive " + dir.string() + ": unsupported manifest format", 0);
  archive.archive_id = manifest.value("archive_id", "");
  archive.created_at = manifest.value("created_at", "");
  archive.meta = manifest.value("meta", json::object());
  for (const auto& h : manifest.value("origin_hosts", json::array()))
    if (h.is_string()) archive.origin_hosts.insert(h.get<std::string>());
  const auto declared = manifest.value("exchange_count", std::uint64_t{0});

  std::string log;
  try {
    log = read_file(dir / "exchanges.jsonl");
  } catch (const std::exception& e) {
    throw CorruptArchive("archive " + dir.string() + ": missing exchanges.jsonl", 1);
  }

  std::uint64_t last_seq = 0;
  std::size_t pos = 0;
  while (pos < log.size()) {
    const auto nl = log.find('\n', pos);
    const bool terminated = nl != std::string::npos;
    const std::string_view line(log.data() + pos, (terminated ? nl : log.size()) - pos);
    pos = terminated ? nl + 1 : log.size();
    if (trim(line).empty()) continue;
    if (!terminated)
      throw CorruptArchive("archive " + dir.string() + ": truncated record after seq " +
                               std::to_string(last_seq),
                           last_seq + 1);
    RawExchange ex;
    try {
      ex = exchange_from_json(json::parse(line));
    } catch (const std::exception& e) {
      throw CorruptArchive("archive " + dir.string() + ": bad record after seq " +
                               std::to_string(last_seq) + ": " + e.what(),
                           last_seq + 1);
    }
    if (ex.seq <= last_seq)
      throw CorruptArchive("archive " + dir.string() + ": seq " + std::to_string(ex.seq) +
                               " not increasing",
                           ex.seq);
    last_seq = ex.seq;

    if (!archive.body_store.count(ex.response_body_ref)) {
      std::string bytes;
      try {
        bytes = read_file(body_path(dir, ex.response_body_ref));
      } catch (const std::exception&) {
        throw CorruptArchive("archive " + dir.string() + ": seq " + std::to_string(ex.seq) +
                                 " references missing body " + ex.response_body_ref,
                             ex.seq);
      }
      if (sha256_hex(bytes) != ex.response_body_ref)
        throw CorruptArchive("archive " + dir.string() + ": seq " + std::to_string(ex.seq) +
                                 " body hash mismatch",
                             ex.seq);
      archive.body_store.emplace(ex.response_body_ref, std::move(bytes));
    }
    archive.origin_hosts.insert(ex.request.host);
    archive.exchanges.push_back(std::move(ex));
  }
  if (archive.exchanges.size() < declared)
    throw CorruptArchive("archive " + dir.string() + ": manifest declares " +
                             std::to_string(declared) + " exchanges, found " +
                             std::to_string(archive.exchanges.size()),
                         last_seq + 1);
  return archive;
}

ArchiveWriter::ArchiveWriter(const fs::path& dir, json meta) : dir_(dir), meta_(std::move(meta)) {
  std::error_code ec;
  if (fs::exists(dir / "manifest.json")) {
    Archive existing;
    try {
      existing = open_archive(dir);
    } catch (const CorruptArchive& e) {
      throw WriteError(std::string("cannot append to archive: ") + e.what());
    }
    archive_id_ = existing.archive_id;
    created_at_ = existing.created_at;
    origin_hosts_ = existing.origin_hosts;
    count_ = existing.exchanges.size();
    if (!existing.exchanges.empty()) next_seq_ = existing.exchanges.back().seq + 1;
    for (const auto& [hash, _] : existing.body_store) stored_bodies_.insert(hash);
    json merged = existing.meta;
    if (merged.is_object() && meta_.is_object()) merged.update(meta_);
    meta_ = merged;
  } else {
    fs::create_directories(dir / "bodies", ec);
    if (ec) throw WriteError("create " + dir.string() + ": " + ec.message());
    archive_id_ = random_id();
    created_at_ = iso8601_now();
  }
  fs::create_directories(dir / "bodies", ec);
  log_fd_ = ::open((dir / "exchanges.jsonl").c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (log_fd_ < 0) throw WriteError("open exchanges.jsonl: " + std::string(std::strerror(errno)));
  write_manifest();
}

ArchiveWriter::~ArchiveWriter() {
  try {
    close();
  } catch (...) {
  }
}

RawExchange ArchiveWriter::append(Entry entry) {
  std::lock_guard lock(mutex_);
  if (closed_) throw WriteError("archive already closed");

  RawExchange ex;
  ex.timestamp_ms = entry.timestamp_ms;
  ex.request = std::move(entry.request);
  ex.response_status = entry.response_status;
  ex.response_headers = std::move(entry.response_headers);
  ex.duration_ms = entry.duration_ms;
  ex.note = std::move(entry.note);
  ex.response_body_ref = sha256_hex(entry.response_body);

  if (!stored_bodies_.count(ex.response_body_ref)) {
    const auto path = body_path(dir_, ex.response_body_ref);
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw WriteError("create " + path.parent_path().string() + ": " + ec.message());
    write_file_atomic(path, entry.response_body);
    stored_bodies_.insert(ex.response_body_ref);
  }

  ex.seq = next_seq_++;
  write_all_fd(log_fd_, exchange_to_json(ex).dump() + "\n", dir_ / "exchanges.jsonl");
  origin_hosts_.insert(ex.request.host);
  ++count_;
  return ex;
}

void ArchiveWriter::write_manifest() {
  json m;
  m["format"] = kArchiveFormat;
  m["version"] = kArchiveVersion;
  m["archive_id"] = archive_id_;
  m["created_at"] = created_at_;
  m["origin_hosts"] = origin_hosts_;
  m["meta"] = meta_;
  m["exchange_count"] = count_;
  write_file_atomic(dir_ / "manifest.json", m.dump(2) + "\n");
}

void ArchiveWriter::close() {
  std::lock_guard lock(mutex_);
  if (closed_) return;
  closed_ = true;
  if (log_fd_ >= 0) {
    ::fsync(log_fd_);
    ::close(log_fd_);
    log_fd_ = -1;
  }
  write_manifest();
}

std::size_t ArchiveWriter::exchange_count() const {
  std::lock_guard lock(mutex_);
  return count_;
}

NormalizedSignature mask_signature(NormalizedSignature sig, int level) {
  if (level >= 1) sig.headers_kept.clear();
  if (level >= 2) sig.body_digest = "*";
  if (level >= 3) {
    for (auto& kv : sig.query_kept) kv.second.clear();
    std::sort(sig.query_kept.begin(), sig.query_kept.end());
  }
  if (level >= 4) sig.query_kept.clear();
  return sig;
}

CacheKey level_key(const NormalizedSignature& sig, int level) {
  return cache_key(mask_signature(sig, level));
}

void ReplayIndex::add(const Archive& archive, std::size_t archive_pos,
                      const std::vector<RuleSet>& rules) {
  for (const auto& ex : archive.exchanges) {
    if (ex.is_upstream_error()) continue;
    const auto sig = normalize(ex.request, rules);
    for (int level = 0; level < kFallbackLevels; ++level)
      levels_[static_cast<std::size_t>(level)][level_key(sig, level)].push_back({archive_pos, ex.seq});
    ++entries_;
  }
}

const ReplayIndex::Bucket* ReplayIndex::find(int level, const CacheKey& key) const {
  const auto& map = levels_.at(static_cast<std::size_t>(level));
  auto it = map.find(key);
  return it == map.end() ? nullptr : &it->second;
}

ReplayIndex index_archive(const Archive& archive, const std::vector<RuleSet>& rules) {
  ReplayIndex index;
  index.add(archive, 0, rules);
  return index;
}

}  // namespace webreplay
