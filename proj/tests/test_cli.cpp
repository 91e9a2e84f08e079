#include <doctest.h>

#include <cstdlib>
#include <iostream>
#include <sstream>

#include "test_support.hpp"
#include "webreplay/cli.hpp"
#include "webreplay/config.hpp"
#include "webreplay/encoding.hpp"
#include "webreplay/error.hpp"
#include "webreplay/replay.hpp"

using namespace webreplay;
using testsupport::TempDir;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "webreplay");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  Run r;
  r.code = run(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string digest_tree(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += f.string() + ":" + sha256_hex(testsupport::read_file(f)) + "\n";
  return sha256_hex(all);
}

}  // namespace

TEST_CASE("usage errors exit 2, help exits 0") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  CHECK(cli({"eval", "passk"}).code == 2);
  CHECK(cli({"--help"}).code == 0);
  CHECK(cli({"validate", "--archive", "/nonexistent", "--trace", "/nonexistent"}).code == 2);
  CHECK(cli({"--log-level", "off", "eval", "passk", "--results",
             (testsupport::fixtures_dir() / "tasks.json").string(), "--k", "0"})
            .code == 2);
}

TEST_CASE("diagnose, rules synth and validate close the loop from the command line") {
  TempDir tmp;
  testsupport::FixtureSite site;
  const auto rec = testsupport::record_trace(tmp / "archive", site, testsupport::shop_trace(1712000000000, "tokA"));
  const auto archive_digest = digest_tree(tmp / "archive");

  std::vector<TraceEntry> trace;
  for (const auto& r : testsupport::shop_trace(1712000999000, "tokBBB")) trace.push_back({"default", r});
  for (const auto& r : testsupport::beacon_trace(1712000999000)) trace.push_back({"default", r});
  testsupport::write_file(tmp / "trace.jsonl", trace_to_jsonl(trace));

  {
    ReplayOptions o;
    o.max_level = 0;
    o.miss_log = tmp / "misses.jsonl";
    Replayer playback({rec.archive}, {}, o);
    for (const auto& t : trace) playback.serve(t.request, t.session);
  }
  const std::string a = (tmp / "archive").string();

  const auto before = cli({"validate", "--archive", a, "--trace", (tmp / "trace.jsonl").string(), "--json"});
  CHECK(before.code == 1);
  CHECK(json::parse(before.out)["pass"] == false);

  const auto diag = cli({"diagnose", "--archive", a, "--miss-log", (tmp / "misses.jsonl").string(), "--out",
                         (tmp / "reports.json").string()});
  REQUIRE(diag.code == 0);
  CHECK(std::filesystem::exists(tmp / "reports.json"));

  const auto synth = cli({"rules", "synth", "--reports", (tmp / "reports.json").string(), "--archive", a, "--out",
                          (tmp / "rules.json").string(), "--json"});
  REQUIRE(synth.code == 0);
  const auto doc = json::parse(synth.out);
  CHECK(doc["proposals"].size() >= 3);

  const auto after = cli({"validate", "--archive", a, "--rules", (tmp / "rules.json").string(), "--trace",
                          (tmp / "trace.jsonl").string(), "--json"});
  CHECK(after.code == 0);
  const auto report = json::parse(after.out);
  CHECK(report["pass"] == true);
  CHECK(report["essential_misses"] == 0);
  CHECK(report["synthetic_hits"].get<int>() >= 1);

  const auto text = cli({"validate", "--archive", a, "--rules", (tmp / "rules.json").string(), "--trace",
                         (tmp / "trace.jsonl").string()});
  CHECK(text.code == 0);
  CHECK(text.out.empty());
  CHECK(text.err.find("PASS") != std::string::npos);

  CHECK(digest_tree(tmp / "archive") == archive_digest);
}

TEST_CASE("eval judge writes verdicts and results that eval passk reads") {
  TempDir tmp;
  const std::string tasks = (testsupport::fixtures_dir() / "tasks.json").string();
  const std::string trajs = (testsupport::fixtures_dir() / "trajectories").string();
  const auto fixture_digest = digest_tree(trajs);

  const auto judged = cli({"eval", "judge", "--trajectories", trajs, "--tasks", tasks, "--backend", "mock",
                           "--out", (tmp / "out").string(), "--json"});
  REQUIRE(judged.code == 0);
  const auto verdicts = json::parse(judged.out);
  REQUIRE(verdicts.size() == 3);
  CHECK(verdicts[0]["trajectory"] == "shop-001.jsonl");
  CHECK(verdicts[0]["label"] == "correct");
  CHECK(std::filesystem::exists(tmp / "out" / "shop-002.jsonl"));
  CHECK(testsupport::read_file(tmp / "out" / "shop-002.jsonl").find("\"record\":\"verdict\"") != std::string::npos);
  CHECK(digest_tree(trajs) == fixture_digest);

  const auto passk = cli({"eval", "passk", "--results", (tmp / "out" / "results.jsonl").string(), "--k", "1",
                          "--json"});
  REQUIRE(passk.code == 0);
  CHECK(json::parse(passk.out)[0]["mean"] == 1.0);

  testsupport::write_file(tmp / "results.jsonl",
                          "{\"task_id\":\"t\",\"attempts\":[true,false,false,false,false,false,false,false]}\n");
  const auto table = cli({"eval", "passk", "--results", (tmp / "results.jsonl").string(), "--k", "1,4,8"});
  CHECK(table.code == 0);
  CHECK(table.out == "pass@1 = 0.125  (total steps 30)\npass@4 = 0.5  (total steps 120)\n"
                     "pass@8 = 1  (total steps 240)\n");

  const auto too_large = cli({"eval", "passk", "--results", (tmp / "results.jsonl").string(), "--k", "9"});
  CHECK(too_large.code == 1);
  CHECK(too_large.err.find("k=9 exceeds") != std::string::npos);

  const auto http_unset = cli({"eval", "judge", "--trajectories", trajs, "--tasks", tasks, "--backend", "http"});
  CHECK(http_unset.code == 2);
}

TEST_CASE("config file: unknown keys are rejected and flags win") {
  TempDir tmp;
  const std::string tasks = (testsupport::fixtures_dir() / "tasks.json").string();
  const std::string trajs = (testsupport::fixtures_dir() / "trajectories").string();

  testsupport::write_file(tmp / "bad.json", R"({"judge":{"backend":"mock","colour":"blue"}})");
  CHECK(cli({"--config", (tmp / "bad.json").string(), "eval", "judge", "--trajectories", trajs, "--tasks", tasks})
            .code == 2);
  testsupport::write_file(tmp / "range.json", R"({"diagnose":{"accept_threshold":2}})");
  CHECK(cli({"--config", (tmp / "range.json").string(), "eval", "judge", "--trajectories", trajs, "--tasks", tasks})
            .code == 2);

  testsupport::write_file(tmp / "cfg.json", R"({"judge":{"backend":"mock","mock_response":"incorrect"}})");
  const auto from_file = cli({"--config", (tmp / "cfg.json").string(), "eval", "judge", "--trajectories", trajs,
                              "--tasks", tasks, "--json"});
  REQUIRE(from_file.code == 0);
  CHECK(json::parse(from_file.out)[0]["label"] == "incorrect");
  const auto flagged = cli({"--config", (tmp / "cfg.json").string(), "eval", "judge", "--trajectories", trajs,
                            "--tasks", tasks, "--mock-response", "website failure", "--json"});
  REQUIRE(flagged.code == 0);
  CHECK(json::parse(flagged.out)[0]["label"] == "website_failure");
}

TEST_CASE("config layering: defaults, environment, file") {
  ::setenv("WEBREPLAY_HOME", "/srv/webreplay", 1);
  ::setenv("JUDGE_MODEL", "env-model", 1);
  ::setenv("JUDGE_API_KEY", "k", 1);
  auto c = default_config();
  CHECK(c.data_root == std::optional<std::filesystem::path>("/srv/webreplay"));
  CHECK(c.judge.model == "env-model");
  CHECK(c.judge.api_key == "k");
  CHECK(c.validate_max_level == 0);
  CHECK(c.replay_max_level == kFallbackLevels - 1);
  c = apply_config_json(c, json::parse(R"({"judge":{"model":"file-model"},"replay":{"max_level":2}})"));
  CHECK(c.judge.model == "file-model");
  CHECK(c.judge.api_key == "k");
  CHECK(c.replay_max_level == 2);
  CHECK_THROWS_AS(apply_config_json(c, json::parse(R"({"judge":{"api_key":"x"}})")), ConfigError);
  CHECK_THROWS_AS(apply_config_json(c, json::parse(R"({"listen":{"record":7}})")), ConfigError);
  ::unsetenv("WEBREPLAY_HOME");
  ::unsetenv("JUDGE_MODEL");
  ::unsetenv("JUDGE_API_KEY");
  CHECK_FALSE(default_config().data_root.has_value());
}

TEST_CASE("ca generate writes a loadable CA") {
  TempDir tmp;
  const auto r = cli({"ca", "generate", "--out", (tmp / "ca.pem").string(), "--cn", "test CA"});
  CHECK(r.code == 0);
  const auto pem = testsupport::read_file(tmp / "ca.pem");
  CHECK(pem.find("BEGIN CERTIFICATE") != std::string::npos);
  CHECK(pem.find("PRIVATE KEY") != std::string::npos);
}
