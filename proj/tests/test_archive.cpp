#include <doctest.h>

#include <fcntl.h>
#include <unistd.h>

#include <random>
#include <thread>

#include "test_support.hpp"
#include "webreplay/archive.hpp"
#include "webreplay/encoding.hpp"
#include "webreplay/error.hpp"

using namespace webreplay;
using testsupport::TempDir;

namespace {

ArchiveWriter::Entry entry(const std::string& url, const std::string& body, int status = 200) {
  ArchiveWriter::Entry e;
  e.timestamp_ms = 1712000000000;
  e.request = make_request("GET", url);
  e.response_status = status;
  e.response_headers = {{"content-type", "text/plain"}};
  e.response_body = body;
  e.duration_ms = 3;
  return e;
}

std::uint64_t corrupt_seq(const std::filesystem::path& dir) {
  try {
    open_archive(dir);
  } catch (const CorruptArchive& e) {
    return e.seq();
  }
  return 0;
}

}  // namespace

TEST_CASE("writer assigns seqs, stores bodies and reopens verbatim") {
  TempDir tmp;
  const auto dir = tmp / "a";
  {
    ArchiveWriter w(dir, {{"site", "shop"}});
    w.append(entry("http://shop.test/1", "one"));
    w.append(entry("http://shop.test/2", "two"));
    w.append(entry("http://shop.test/3", "three"));
    w.close();
    w.close();
  }
  const Archive a = open_archive(dir);
  REQUIRE(a.exchanges.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(a.exchanges[i].seq == i + 1);
  CHECK(a.body(a.exchanges[1]) == "two");
  CHECK(a.exchanges[0].response_body_ref == sha256_hex("one"));
  CHECK(a.meta.value("site", "") == "shop");
  CHECK(a.origin_hosts == std::set<std::string>{"shop.test"});
  CHECK(std::filesystem::exists(body_path(dir, sha256_hex("three"))));
  CHECK(a.find(2)->request.path == "/2");
  CHECK(a.find(9) == nullptr);
}

TEST_CASE("empty archive is valid and indexes to nothing") {
  TempDir tmp;
  { ArchiveWriter w(tmp / "empty"); }
  const Archive a = open_archive(tmp / "empty");
  CHECK(a.exchanges.empty());
  CHECK(index_archive(a, {}).entry_count() == 0);
}

TEST_CASE("identical bodies are stored once") {
  TempDir tmp;
  {
    ArchiveWriter w(tmp / "a");
    w.append(entry("http://shop.test/x", "same"));
    w.append(entry("http://shop.test/y", "same"));
  }
  const Archive a = open_archive(tmp / "a");
  CHECK(a.body_store.size() == 1);
  CHECK(a.exchanges[0].response_body_ref == a.exchanges[1].response_body_ref);
  std::size_t files = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(tmp / "a" / "bodies"))
    files += e.is_regular_file();
  CHECK(files == 1);
}

TEST_CASE("request bodies and upstream errors survive the round trip") {
  TempDir tmp;
  {
    ArchiveWriter w(tmp / "a");
    auto e = entry("http://shop.test/cart", "{}");
    e.request = make_request("POST", "http://shop.test/cart", {{"content-type", "application/json"}},
                             std::string("{\"bin\":\"\x01\x02\"}"));
    w.append(e);
    auto err = entry("http://down.test/", "", 0);
    err.note = "connect refused";
    w.append(err);
  }
  const Archive a = open_archive(tmp / "a");
  CHECK(a.exchanges[0].request.body == std::string("{\"bin\":\"\x01\x02\"}"));
  CHECK(a.exchanges[1].is_upstream_error());
  CHECK(a.exchanges[1].note == std::optional<std::string>("connect refused"));
  CHECK(index_archive(a, {}).entry_count() == 1);
}

TEST_CASE("appending continues after the last seq without touching earlier lines") {
  TempDir tmp;
  const auto dir = tmp / "a";
  { ArchiveWriter(dir).append(entry("http://shop.test/1", "one")); }
  const std::string before = testsupport::read_file(dir / "exchanges.jsonl");
  const std::string id = open_archive(dir).archive_id;
  { ArchiveWriter(dir).append(entry("http://shop.test/2", "two")); }
  const std::string after = testsupport::read_file(dir / "exchanges.jsonl");
  CHECK(after.substr(0, before.size()) == before);
  const Archive a = open_archive(dir);
  CHECK(a.archive_id == id);
  REQUIRE(a.exchanges.size() == 2);
  CHECK(a.exchanges[1].seq == 2);
}

TEST_CASE("concurrent appends get distinct increasing seqs") {
  TempDir tmp;
  {
    ArchiveWriter w(tmp / "a");
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t)
      threads.emplace_back([&w, t] {
        for (int i = 0; i < 25; ++i)
          w.append(entry("http://shop.test/" + std::to_string(t) + "/" + std::to_string(i), std::to_string(i)));
      });
    for (auto& th : threads) th.join();
  }
  const Archive a = open_archive(tmp / "a");
  REQUIRE(a.exchanges.size() == 100);
  for (std::size_t i = 0; i < a.exchanges.size(); ++i) CHECK(a.exchanges[i].seq == i + 1);
}

TEST_CASE("corruption is reported with the offending seq") {
  TempDir tmp;
  const auto dir = tmp / "a";
  {
    ArchiveWriter w(dir);
    w.append(entry("http://shop.test/1", "one"));
    w.append(entry("http://shop.test/2", "two"));
  }

  SUBCASE("body bytes changed") {
    testsupport::write_file(body_path(dir, sha256_hex("two")), "tampered");
    CHECK(corrupt_seq(dir) == 2);
  }
  SUBCASE("body missing") {
    std::filesystem::remove(body_path(dir, sha256_hex("one")));
    CHECK(corrupt_seq(dir) == 1);
  }
  SUBCASE("log truncated mid-line") {
    const auto log = dir / "exchanges.jsonl";
    const std::string text = testsupport::read_file(log);
    testsupport::write_file(log, text.substr(0, text.size() - 10));
    CHECK(corrupt_seq(dir) == 2);
  }
  SUBCASE("whole trailing line lost") {
    const auto log = dir / "exchanges.jsonl";
    const std::string text = testsupport::read_file(log);
    testsupport::write_file(log, text.substr(0, text.find('\n') + 1));
    CHECK(corrupt_seq(dir) == 2);
  }
}

TEST_CASE("two exchanges differing in a stripped ts share one bucket in order") {
  Archive a;
  for (int i = 0; i < 2; ++i) {
    RawExchange ex;
    ex.seq = static_cast<std::uint64_t>(i + 1);
    ex.request = make_request("GET", "http://shop.test/api?page=1&ts=171200000" + std::to_string(i));
    ex.response_status = 200;
    a.exchanges.push_back(ex);
  }
  RuleSet rules;
  rules.strip_query = {"ts"};
  const auto idx = index_archive(a, {rules});
  CHECK(idx.key_count(0) == 1);
  const auto* bucket = idx.find(0, level_key(normalize(a.exchanges[0].request, rules), 0));
  REQUIRE(bucket != nullptr);
  CHECK(*bucket == ReplayIndex::Bucket{{0, 1}, {0, 2}});
  CHECK(index_archive(a, {}).key_count(0) == 2);
}

TEST_CASE("key counts never grow when rules are enlarged, every exchange in one bucket per level") {
  std::mt19937 rng(99);
  const std::vector<std::string> keys = {"a", "b", "ts", "sid"};
  for (int round = 0; round < 200; ++round) {
    Archive a;
    const int n = 1 + static_cast<int>(rng() % 10);
    for (int i = 0; i < n; ++i) {
      RawExchange ex;
      ex.seq = static_cast<std::uint64_t>(i + 1);
      ex.request = make_request("GET", "http://shop.test/p" + std::to_string(rng() % 2));
      for (int q = 0; q < 3; ++q) ex.request.query.emplace_back(keys[rng() % 4], std::to_string(rng() % 3));
      ex.response_status = 200;
      a.exchanges.push_back(ex);
    }
    RuleSet r1;
    r1.strip_query = {"ts"};
    RuleSet r2 = r1;
    r2.strip_query.push_back(keys[rng() % 2]);
    const auto i1 = index_archive(a, {r1});
    const auto i2 = index_archive(a, {r2});
    CHECK(i2.key_count(0) <= i1.key_count(0));
    for (int level = 0; level < kFallbackLevels; ++level) {
      std::size_t total = 0;
      for (const auto& [_, bucket] : i1.level(level)) total += bucket.size();
      CHECK(total == a.exchanges.size());
      CHECK(i1.key_count(level) >= i1.key_count(std::min(level + 1, kFallbackLevels - 1)));
    }
  }
}

TEST_CASE("fallback masks") {
  auto req = make_request("POST", "http://shop.test/a?b=2&a=1", {{"accept", "text/html"}, {"content-type", "text/plain"}},
                          "x");
  const auto sig = normalize(req, RuleSet{});
  const auto l1 = mask_signature(sig, 1);
  CHECK(l1.headers_kept.empty());
  CHECK(l1.body_digest == sig.body_digest);
  CHECK(mask_signature(sig, 2).body_digest == "*");
  CHECK(mask_signature(sig, 3).query_kept == FieldList{{"a", ""}, {"b", ""}});
  const auto l4 = mask_signature(sig, 4);
  CHECK(l4.query_kept.empty());
  CHECK(l4.method == "POST");
  CHECK(l4.path == "/a");
  CHECK(level_key(sig, 0) == cache_key(sig));
}
