#include <doctest.h>

#include <algorithm>
#include <chrono>

#include "test_support.hpp"
#include "webreplay/archive.hpp"
#include "webreplay/envserve.hpp"
#include "webreplay/error.hpp"

using namespace webreplay;
using testsupport::TempDir;

namespace {

std::vector<TaskManifest> fixture_tasks() { return load_tasks(testsupport::fixtures_dir() / "tasks.json"); }

EnvManifest static_env() { return load_envs(testsupport::fixtures_dir() / "envs.json").at(0); }

ArchiveWriter::Entry entry(const std::string& url, const std::string& content_type, const std::string& body) {
  ArchiveWriter::Entry e;
  e.timestamp_ms = 1712000000000;
  e.request = make_request("GET", url);
  e.response_status = 200;
  e.response_headers = {{"content-type", content_type}};
  e.response_body = body;
  return e;
}

/// A cached shop: a start page linking to itself by absolute URL, and one
/// endpoint recorded twice with different answers.
EnvManifest cached_env(const TempDir& tmp) {
  {
    ArchiveWriter w(tmp / "shop-archive");
    w.append(entry("http://shop.test/", "text/html",
                   "<a href=\"http://shop.test/api/next\">next</a>"));
    w.append(entry("http://shop.test/api/next", "application/json", "{\"n\":1}"));
    w.append(entry("http://shop.test/api/next", "application/json", "{\"n\":2}"));
  }
  EnvManifest env;
  env.env_id = "shop-cached";
  env.kind = "cached";
  env.root = tmp / "shop-archive";
  env.start_url = "http://shop.test/";
  return env;
}

double percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  return v[static_cast<std::size_t>(p * static_cast<double>(v.size() - 1))];
}

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

TEST_CASE("manifests load from the fixture registry") {
  const auto env = static_env();
  CHECK(env.env_id == "shop-static");
  CHECK(env.root == testsupport::fixtures_dir() / "site");
  const auto tasks = fixture_tasks();
  REQUIRE(tasks.size() == 3);
  CHECK(tasks[2].difficulty == "medium");
  CHECK(tasks[2].max_steps == 30);
  CHECK(tasks[2].success_criteria.empty());
}

TEST_CASE("manifests reject unknown keys and bad values") {
  CHECK_THROWS_AS(parse_envs(R"([{"env_id":"a","kind":"synthetic","root":"r","start_url":"/","colour":"x"}])", "/"),
                  SchemaError);
  CHECK_THROWS_AS(parse_envs(R"([{"env_id":"a","kind":"live","root":"r","start_url":"/"}])", "/"), SchemaError);
  CHECK_THROWS_AS(parse_envs(R"([{"env_id":"a b","kind":"synthetic","root":"r","start_url":"/"}])", "/"),
                  SchemaError);
  CHECK_THROWS_AS(parse_tasks(R"([{"task_id":"t","env_id":"e","instruction":"i","bonus":1}])"), SchemaError);
  CHECK_THROWS_AS(parse_tasks(R"([{"task_id":"t","env_id":"e","instruction":"i"},
                                  {"task_id":"t","env_id":"e","instruction":"j"}])"),
                  SchemaError);
  CHECK_THROWS_AS(parse_tasks("{"), ParseError);
}

TEST_CASE("list_tasks filters and orders by id") {
  const auto tasks = fixture_tasks();
  const auto train = list_tasks(tasks, {std::string("train"), std::nullopt, std::nullopt});
  REQUIRE(train.size() == 2);
  CHECK(train[0].task_id == "shop-001");
  CHECK(train[1].task_id == "shop-002");
  const auto easy = list_tasks(tasks, {std::nullopt, std::string("shop-static"), std::string("easy")});
  REQUIRE(easy.size() == 2);
  CHECK(easy[0].task_id == "shop-001");
  CHECK(easy[1].task_id == "shop-003");
  CHECK(list_tasks(tasks, {std::nullopt, std::string("other"), std::nullopt}).empty());
  CHECK(list_tasks({}, {}).empty());
}

TEST_CASE("synthetic env serves the root's files with their media types") {
  EnvServer server(fixture_tasks());
  server.mount(static_env());
  server.start({"127.0.0.1", 0});
  CHECK(server.mapped_start_url("shop-static") == "/env/shop-static/index.html");

  const auto page = testsupport::direct(server.port(), "GET", "/env/shop-static/index.html");
  CHECK(page.status == 200);
  CHECK(page.body == testsupport::read_file(testsupport::site_dir() / "index.html"));
  CHECK(page.header("content-type").rfind("text/html", 0) == 0);
  CHECK(page.header("cache-control") == "no-store");

  const auto logo = testsupport::direct(server.port(), "GET", "/env/shop-static/img/logo.png");
  CHECK(logo.body == testsupport::read_file(testsupport::site_dir() / "img" / "logo.png"));
  CHECK(logo.header("content-type") == "image/png");
  CHECK(testsupport::direct(server.port(), "GET", "/env/shop-static/style.css").header("content-type").rfind(
            "text/css", 0) == 0);

  CHECK(testsupport::direct(server.port(), "GET", "/env/shop-static/nope.html").status == 404);
  CHECK(testsupport::direct(server.port(), "GET", "/env/shop-static/../../tasks.json").status == 403);
  CHECK(testsupport::direct(server.port(), "GET", "/env/shop-static/%2e%2e/tasks.json").status == 403);
  CHECK(testsupport::direct(server.port(), "POST", "/env/shop-static/index.html", "x", "text/plain").status == 405);
  CHECK(testsupport::direct(server.port(), "GET", "/env/missing/index.html").status == 404);
  server.stop();
}

TEST_CASE("mounting validates roots, ids and start urls") {
  TempDir tmp;
  EnvServer server(fixture_tasks());
  server.mount(static_env());
  CHECK_THROWS_AS(server.mount(static_env()), MountError);

  auto missing = static_env();
  missing.env_id = "gone";
  missing.root = tmp / "does-not-exist";
  CHECK_THROWS_AS(server.mount(missing), MountError);

  auto bad_start = static_env();
  bad_start.env_id = "bad-start";
  bad_start.start_url = "http://shop.test/absent.html";
  CHECK_THROWS_AS(server.mount(bad_start), MountError);

  auto cached = cached_env(tmp);
  cached.start_url = "http://elsewhere.test/";
  CHECK_THROWS_AS(server.mount(cached), MountError);
}

TEST_CASE("cached env replays the archive per session") {
  TempDir tmp;
  EnvServer server({});
  server.mount(cached_env(tmp));
  server.start({"127.0.0.1", 0});
  const int port = server.port();
  CHECK(server.mapped_start_url("shop-cached") == "/env/shop-cached/__origin__/shop.test/");

  const auto root = testsupport::direct(port, "GET", "/env/shop-cached/");
  CHECK(root.status == 302);
  CHECK(root.header("location") == "/env/shop-cached/__origin__/shop.test/");

  const auto first = testsupport::direct(port, "GET", "/env/shop-cached/__origin__/shop.test/");
  CHECK(first.status == 200);
  CHECK(first.body == "<a href=\"http://shop.test/api/next\">next</a>");

  const auto a = server.create_session("shop-cached", "");
  const auto b = server.create_session("shop-cached", "");
  CHECK(a.session_id != b.session_id);
  const auto get = [&](const Session& s) {
    return testsupport::direct(port, "GET", "/env/shop-cached/api/next", {}, {},
                               {{"x-webreplay-session", s.session_id}})
        .body;
  };
  CHECK(get(a) == "{\"n\":1}");
  CHECK(get(a) == "{\"n\":2}");
  CHECK(get(b) == "{\"n\":1}");
  const auto reset = server.reset_session(a.session_id);
  CHECK(reset.epoch == 1);
  CHECK(get(a) == "{\"n\":1}");
  CHECK(get(b) == "{\"n\":2}");

  CHECK(testsupport::direct(port, "GET", "/env/shop-cached/api/next", {}, {}, {{"x-webreplay-session", "nope"}})
            .status == 404);
  CHECK(testsupport::direct(port, "GET", "/env/shop-cached/api/absent").status == 504);

  // Proxy mode: absolute-form requests routed by session header.
  server.reset_session(b.session_id);
  const auto proxied = testsupport::via_proxy(port, make_request("GET", "http://shop.test/api/next"),
                                              {{"x-webreplay-session", b.session_id}});
  CHECK(proxied.body == "{\"n\":1}");

  server.close_session(a.session_id);
  CHECK(server.session(a.session_id)->state == "closed");
  CHECK_THROWS_AS(server.reset_session(a.session_id), UnknownSession);
  CHECK_THROWS_AS(server.close_session(a.session_id), UnknownSession);
  server.stop();
}

TEST_CASE("reset reproduces the first response byte for byte") {
  TempDir tmp;
  EnvServer server({});
  server.mount(cached_env(tmp));
  server.start({"127.0.0.1", 0});
  const auto s = server.create_session("shop-cached", "");
  const FieldList h = {{"x-webreplay-session", s.session_id}};
  const auto before = testsupport::direct(server.port(), "GET", "/env/shop-cached/api/next", {}, {}, h);
  testsupport::direct(server.port(), "GET", "/env/shop-cached/api/next", {}, {}, h);
  server.reset_session(s.session_id);
  const auto after = testsupport::direct(server.port(), "GET", "/env/shop-cached/api/next", {}, {}, h);
  CHECK(before.status == after.status);
  CHECK(before.body == after.body);
  CHECK(testsupport::comparable_headers(before) == testsupport::comparable_headers(after));
  server.stop();
}

TEST_CASE("link rewriting maps recorded origins onto env routes") {
  TempDir tmp;
  EnvServerOptions o;
  o.rewrite_links = true;
  EnvServer server({}, o);
  server.mount(cached_env(tmp));
  server.start({"127.0.0.1", 0});
  const auto page = testsupport::direct(server.port(), "GET", "/env/shop-cached/__origin__/shop.test/");
  CHECK(page.body == "<a href=\"/env/shop-cached/__origin__/shop.test/api/next\">next</a>");
  server.stop();
}

TEST_CASE("session lifecycle errors") {
  EnvServer server(fixture_tasks());
  server.mount(static_env());
  CHECK_THROWS_AS(server.create_session("nope", ""), UnknownEnv);
  CHECK_THROWS_AS(server.create_session("", "shop-999"), UnknownTask);
  CHECK_THROWS_AS(server.reset_session("not-a-session"), UnknownSession);
  const auto s = server.create_session("", "shop-001");
  CHECK(s.env_id == "shop-static");
  CHECK(s.task_id == "shop-001");
  CHECK(s.state == "active");
  CHECK(server.reset_session(s.session_id).epoch == 1);
}

TEST_CASE("task and session API over loopback") {
  EnvServer server(fixture_tasks());
  server.mount(static_env());
  server.start({"127.0.0.1", 0});
  const int port = server.port();

  const auto tasks = json::parse(testsupport::direct(port, "GET", "/api/tasks?split=train").body);
  REQUIRE(tasks.size() == 2);
  CHECK(tasks[0]["task_id"] == "shop-001");
  CHECK(json::parse(testsupport::direct(port, "GET", "/api/envs").body)[0]["env_id"] == "shop-static");

  const auto created = testsupport::direct(port, "POST", "/api/session",
                                           R"({"env_id":"shop-static","task_id":"shop-003"})", "application/json");
  CHECK(created.status == 201);
  const auto s = json::parse(created.body);
  const std::string id = s["session_id"];
  CHECK(s["mapped_url"] == "/env/shop-static/index.html");
  CHECK(s["start_url"] == "http://shop.test/index.html");

  CHECK(testsupport::direct(port, "POST", "/api/session/" + id + "/reset").status == 200);
  CHECK(json::parse(testsupport::direct(port, "GET", "/api/session/" + id).body)["epoch"] == 1);
  CHECK(testsupport::direct(port, "POST", "/api/session/zzz/reset").status == 404);
  CHECK(testsupport::direct(port, "POST", "/api/session", R"({"env_id":"nope"})", "application/json").status ==
        404);
  CHECK(testsupport::direct(port, "POST", "/api/session", "{not json", "application/json").status == 400);
  const auto closed = testsupport::direct(port, "DELETE", "/api/session/" + id);
  CHECK(json::parse(closed.body)["state"] == "closed");
  server.stop();
}

TEST_CASE("static pages and session calls stay within latency budgets") {
  EnvServer server(fixture_tasks());
  server.mount(static_env());
  server.start({"127.0.0.1", 0});
  const int port = server.port();
  const std::vector<std::string> paths = {"/env/shop-static/index.html", "/env/shop-static/style.css",
                                          "/env/shop-static/app.js", "/env/shop-static/img/logo.png"};
  std::vector<double> page_ms;
  for (int i = 0; i < 200; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = testsupport::direct(port, "GET", paths[static_cast<std::size_t>(i) % paths.size()]);
    page_ms.push_back(ms_since(t0));
    REQUIRE(r.status == 200);
  }
  std::vector<double> session_ms;
  for (int i = 0; i < 20; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    const auto created = testsupport::direct(port, "POST", "/api/session", R"({"env_id":"shop-static"})",
                                             "application/json");
    session_ms.push_back(ms_since(t0));
    const std::string id = json::parse(created.body)["session_id"];
    t0 = std::chrono::steady_clock::now();
    testsupport::direct(port, "POST", "/api/session/" + id + "/reset");
    session_ms.push_back(ms_since(t0));
  }
  server.stop();
  CHECK(percentile(page_ms, 0.95) < 50.0);
  CHECK(*std::max_element(session_ms.begin(), session_ms.end()) < 150.0);
}
