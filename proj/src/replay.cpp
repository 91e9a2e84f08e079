#include "webreplay/replay.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>

#include "webreplay/encoding.hpp"
#include "webreplay/error.hpp"
#include "webreplay/net/proxy.hpp"

namespace webreplay {

namespace {

constexpr std::array<std::string_view, kFallbackLevels> kLevelDescriptions = {
    "full signature", "ignore headers", "ignore body", "query keys only", "method, host and path"};

std::vector<std::string> path_segments(const std::string& path) {
  std::vector<std::string> out;
  for (auto& s : split(path, '/'))
    if (!s.empty()) out.push_back(std::move(s));
  return out;
}

std::vector<std::string> joined(const FieldList& fields) {
  std::vector<std::string> out;
  out.reserve(fields.size());
  for (const auto& [k, v] : fields) out.push_back(k + "=" + v);
  return out;
}

template <typename F>
void read_jsonl(const std::filesystem::path& path, F&& each) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
    try {
      each(j);
    } catch (const SchemaError& e) {
      throw SchemaError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

}  // namespace

std::string_view fallback_description(int level) {
  return kLevelDescriptions.at(static_cast<std::size_t>(level));
}

json miss_to_json(const MissRecord& miss) {
  json candidates = json::array();
  for (const auto& c : miss.nearest_candidates)
    candidates.push_back({{"seq", c.seq}, {"similarity", c.similarity}});
  return {{"timestamp_ms", miss.timestamp_ms},
          {"session", miss.session},
          {"request", request_to_json(miss.request)},
          {"best_level_tried", miss.best_level_tried},
          {"nearest_candidates", candidates},
          {"served", miss.served}};
}

MissRecord miss_from_json(const json& j) {
  if (!j.is_object() || !j.contains("request")) throw SchemaError("miss: expected object with request");
  MissRecord m;
  m.timestamp_ms = j.value("timestamp_ms", std::int64_t{0});
  m.session = j.value("session", std::string(kDefaultSession));
  m.request = request_from_json(j.at("request"));
  m.best_level_tried = j.value("best_level_tried", 0);
  if (m.best_level_tried < 0 || m.best_level_tried >= kFallbackLevels)
    throw SchemaError("miss.best_level_tried: out of range");
  for (const auto& c : j.value("nearest_candidates", json::array())) {
    Candidate cand{c.at("seq").get<std::uint64_t>(), c.at("similarity").get<double>()};
    if (cand.similarity < 0.0 || cand.similarity > 1.0)
      throw SchemaError("miss.nearest_candidates: similarity outside [0,1]");
    m.nearest_candidates.push_back(cand);
  }
  m.served = j.value("served", std::string("none"));
  if (m.served != "none" && m.served != "synthetic")
    throw SchemaError("miss.served: expected \"none\" or \"synthetic\"");
  return m;
}

std::vector<MissRecord> load_miss_log(const std::filesystem::path& path) {
  std::vector<MissRecord> out;
  read_jsonl(path, [&](const json& j) { out.push_back(miss_from_json(j)); });
  return out;
}

std::vector<TraceEntry> load_trace(const std::filesystem::path& path) {
  std::vector<TraceEntry> out;
  read_jsonl(path, [&](const json& j) {
    TraceEntry e;
    e.request = request_from_json(j);
    if (j.contains("session")) {
      if (!j.at("session").is_string()) throw SchemaError("trace.session: expected string");
      e.session = j.at("session").get<std::string>();
    }
    out.push_back(std::move(e));
  });
  return out;
}

std::string trace_to_jsonl(const std::vector<TraceEntry>& trace) {
  std::string out;
  for (const auto& e : trace) {
    auto j = request_to_json(e.request);
    if (e.session != kDefaultSession) j["session"] = e.session;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<TraceEntry> trace_from_archive(const Archive& archive) {
  std::vector<TraceEntry> out;
  for (const auto& ex : archive.exchanges)
    if (!ex.is_upstream_error()) out.push_back({std::string(kDefaultSession), ex.request});
  return out;
}

double jaccard(std::vector<std::string> a, std::vector<std::string> b) {
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  std::sort(b.begin(), b.end());
  b.erase(std::unique(b.begin(), b.end()), b.end());
  if (a.empty() && b.empty()) return 1.0;
  std::vector<std::string> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
  const auto uni = a.size() + b.size() - common.size();
  return static_cast<double>(common.size()) / static_cast<double>(uni);
}

double request_similarity(const RawRequest& a, const RawRequest& b, const RuleSet& effective,
                          const SimilarityWeights& w) {
  const double jp = jaccard(path_segments(canonical_path(a, effective)),
                            path_segments(canonical_path(b, effective)));
  const double jq = jaccard(joined(kept_query(a, effective)), joined(kept_query(b, effective)));
  const double jb = jaccard(joined(canonicalize_body(a, effective).top_level),
                            joined(canonicalize_body(b, effective).top_level));
  const double total = w.path * jp + w.query * jq + w.body * jb;
  const double norm = w.path + w.query + w.body;
  return norm > 0 ? std::clamp(total / norm, 0.0, 1.0) : 0.0;
}

net::HttpResponse response_from_exchange(const RawExchange& ex, const std::string& body) {
  net::HttpResponse resp;
  resp.status = ex.response_status;
  for (const auto& [k, v] : ex.response_headers) {
    if (net::is_hop_by_hop(k) || iequals(k, "content-length")) continue;
    resp.headers.emplace_back(k, v);
  }
  resp.body = body;
  return resp;
}

net::HttpResponse response_from_synthetic(const SyntheticRule& rule) {
  net::HttpResponse resp;
  resp.status = rule.status;
  resp.headers = rule.headers;
  resp.body = rule.body;
  resp.set_header(kMatchHeader, "synthetic");
  return resp;
}

net::HttpResponse miss_response() {
  net::HttpResponse resp;
  resp.status = 504;
  resp.headers.emplace_back("Content-Type", "application/json");
  resp.headers.emplace_back(std::string(kMatchHeader), "miss");
  resp.body = std::string(kMissBody);
  return resp;
}

std::string session_of(const net::HttpRequest& req) {
  auto s = req.header(kSessionHeader);
  return s && !trim(*s).empty() ? std::string(trim(*s)) : std::string(kDefaultSession);
}

Replayer::Replayer(std::vector<Archive> archives, std::vector<RuleSet> rules, ReplayOptions options)
    : archives_(std::move(archives)), rules_(std::move(rules)), options_(std::move(options)) {
  options_.max_level = std::clamp(options_.max_level, 0, kFallbackLevels - 1);
  for (std::size_t i = 0; i < archives_.size(); ++i) index_.add(archives_[i], i, rules_);
  if (!options_.isolation) upstream_ = std::make_unique<net::UpstreamClient>(options_.upstream);
  if (options_.miss_log) {
    miss_log_.open(*options_.miss_log, std::ios::app);
    if (!miss_log_) throw WriteError("cannot open miss log " + options_.miss_log->string());
  }
}

Replayer::~Replayer() = default;

LookupResult Replayer::lookup(const RawRequest& req, std::string_view session) {
  const RuleSet effective = match_scope(rules_, req.host);
  const auto sig = normalize(req, effective);

  LookupResult result;
  for (int level = 0; level <= options_.max_level; ++level) {
    const auto key = level_key(sig, level);
    const auto* bucket = index_.find(level, key);
    if (!bucket || bucket->empty()) continue;
    std::size_t pos;
    {
      std::lock_guard lock(mutex_);
      auto& cursor = cursors_[std::string(session)][{level, key.hex}];
      pos = std::min(cursor, bucket->size() - 1);
      ++cursor;
    }
    const auto& ref = (*bucket)[pos];
    result.outcome = Outcome::kExchange;
    result.level = level;
    result.archive = ref.archive;
    result.exchange = archives_[ref.archive].find(ref.seq);
    return result;
  }
  result.level = options_.max_level;
  if (const auto* rule = effective.find_synthetic(req.host, req.path)) {
    result.outcome = Outcome::kSynthetic;
    result.synthetic = *rule;
  }
  return result;
}

MissRecord Replayer::describe_miss(const RawRequest& req, std::string_view session, int level_tried,
                                   std::string served) const {
  MissRecord miss;
  miss.timestamp_ms = now_ms();
  miss.session = std::string(session);
  miss.request = req;
  miss.best_level_tried = level_tried;
  miss.served = std::move(served);

  const RuleSet effective = match_scope(rules_, req.host);
  std::vector<Candidate> all;
  for (const auto& archive : archives_) {
    for (const auto& ex : archive.exchanges) {
      if (ex.is_upstream_error() || ex.request.method != req.method || ex.request.host != req.host)
        continue;
      all.push_back({ex.seq, request_similarity(req, ex.request, effective, options_.weights)});
    }
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const Candidate& a, const Candidate& b) { return a.similarity > b.similarity; });
  if (all.size() > options_.nearest) all.resize(options_.nearest);
  miss.nearest_candidates = std::move(all);
  return miss;
}

void Replayer::record_miss(MissRecord miss) {
  std::lock_guard lock(mutex_);
  if (miss_log_.is_open()) {
    miss_log_ << miss_to_json(miss).dump() << '\n';
    miss_log_.flush();
  }
  misses_.push_back(std::move(miss));
}

net::HttpResponse Replayer::serve(const RawRequest& req, std::string_view session) {
  LookupResult r;
  try {
    r = lookup(req, session);
  } catch (const Error& e) {
    net::HttpResponse resp;
    resp.status = 400;
    resp.headers.emplace_back("Content-Type", "text/plain");
    resp.body = std::string(e.what()) + "\n";
    return resp;
  }

  switch (r.outcome) {
    case Outcome::kExchange: {
      auto resp = response_from_exchange(*r.exchange, archives_[r.archive].body(*r.exchange));
      resp.set_header(kMatchHeader, "L" + std::to_string(r.level));
      return resp;
    }
    case Outcome::kSynthetic:
      record_miss(describe_miss(req, session, r.level, "synthetic"));
      return response_from_synthetic(*r.synthetic);
    case Outcome::kMiss:
      break;
  }
  record_miss(describe_miss(req, session, r.level, "none"));
  if (upstream_) {
    try {
      auto resp = upstream_->fetch(req.scheme, req.host, req.port, net::from_raw_request(req));
      resp.set_header(kMatchHeader, "live");
      return resp;
    } catch (const UpstreamError& e) {
      spdlog::warn("live fallthrough failed: {}", e.what());
    }
  }
  return miss_response();
}

void Replayer::reset_session(std::string_view session) {
  std::lock_guard lock(mutex_);
  cursors_[std::string(session)].clear();
}

void Replayer::drop_session(std::string_view session) {
  std::lock_guard lock(mutex_);
  cursors_.erase(std::string(session));
}

std::vector<MissRecord> Replayer::misses() const {
  std::lock_guard lock(mutex_);
  return misses_;
}

void Replayer::clear_misses() {
  std::lock_guard lock(mutex_);
  misses_.clear();
}

ReplayServer::ReplayServer(std::shared_ptr<Replayer> replayer,
                           std::optional<net::CertificateAuthority> ca)
    : replayer_(std::move(replayer)),
      ca_(std::move(ca)),
      server_([this](const net::HttpRequest& req, const net::ConnectionInfo& info) {
        return handle(req, info);
      }) {
  server_.set_connect_handler(
      [this](const net::HttpRequest& req, net::Stream& client, net::BufferedReader& reader) {
        if (!ca_) {
          client.write_all(
              "HTTP/1.1 501 Not Implemented\r\nContent-Length: 0\r\nConnection: close\r\n\r\n");
          return;
        }
        net::intercept_connect(req, client, reader, *ca_,
                               [this](const net::HttpRequest& r, const net::ConnectionInfo& i) {
                                 return handle(r, i);
                               });
      });
}

ReplayServer::~ReplayServer() { stop(); }

void ReplayServer::start(const net::Endpoint& listen) {
  server_.listen(listen);
  server_.start();
}

void ReplayServer::stop() { server_.stop(); }

net::HttpResponse ReplayServer::handle(const net::HttpRequest& req, const net::ConnectionInfo& info) {
  RawRequest raw;
  try {
    raw = net::to_raw_request(req, info.scheme, info.tunnel_authority);
  } catch (const Error& e) {
    net::HttpResponse resp;
    resp.status = 400;
    resp.body = std::string(e.what()) + "\n";
    return resp;
  }
  return replayer_->serve(raw, session_of(req));
}

}  // namespace webreplay
