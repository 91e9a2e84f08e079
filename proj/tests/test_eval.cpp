#include <doctest.h>

#include <httplib.h>

#include <cmath>
#include <random>
#include <thread>

#include "properties.hpp"
#include "test_support.hpp"
#include "webreplay/encoding.hpp"
#include "webreplay/envserve.hpp"
#include "webreplay/error.hpp"
#include "webreplay/eval/judge.hpp"
#include "webreplay/eval/scoring.hpp"
#include "webreplay/eval/trajectory.hpp"

using namespace webreplay;
using namespace webreplay::eval;
using testsupport::TempDir;

namespace {

const std::filesystem::path kTrajDir = testsupport::fixtures_dir() / "trajectories";

TaskManifest task_named(const std::string& id) {
  for (const auto& t : load_tasks(testsupport::fixtures_dir() / "tasks.json"))
    if (t.task_id == id) return t;
  throw std::runtime_error("no fixture task " + id);
}

Trajectory fixture_trajectory(const std::string& id) { return load_trajectory(kTrajDir / (id + ".jsonl")); }

Trajectory tiny_trajectory() {
  Trajectory t;
  t.task_id = "shop-003";
  t.steps.push_back({{"screens/shop-003-1.png", 1280, 720, "http://shop.test/"}, "go", action::Click{96, 40}});
  t.steps.push_back({{"screens/shop-003-2.png", 1280, 720, "http://shop.test/about.html"}, "done", action::Stop{}});
  return t;
}

std::vector<Verdict> rewards(std::initializer_list<int> pattern) {
  // 1 correct, 0 incorrect, -1 website failure
  std::vector<Verdict> out;
  for (int p : pattern)
    out.push_back(make_verdict(p == 1 ? Label::kCorrect : p == 0 ? Label::kIncorrect : Label::kWebsiteFailure));
  return out;
}

}  // namespace

TEST_CASE("fixture trajectories validate, screenshots included") {
  for (const std::string id : {"shop-001", "shop-002", "shop-003"}) {
    const auto t = fixture_trajectory(id);
    CHECK(t.task_id == id);
    CHECK_NOTHROW(validate_trajectory(t, kTrajDir));
    CHECK(png_dimensions(kTrajDir / t.steps[0].observation.screenshot_ref) == std::pair{1280, 720});
  }
  CHECK_FALSE(png_dimensions(testsupport::site_dir() / "index.html").has_value());
  CHECK(png_dimensions(testsupport::site_dir() / "img" / "logo.png") == std::pair{16, 16});
}

TEST_CASE("trajectory JSONL round trip keeps every field") {
  auto t = fixture_trajectory("shop-002");
  t.verdict = make_verdict(Label::kIncorrect, "went back too early");
  const auto text = trajectory_to_jsonl(t);
  const auto back = parse_trajectory(text);
  CHECK(back.task_id == t.task_id);
  CHECK(back.terminal == t.terminal);
  CHECK(back.step_budget == t.step_budget);
  REQUIRE(back.steps.size() == t.steps.size());
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    CHECK(back.steps[i].observation == t.steps[i].observation);
    CHECK(back.steps[i].reasoning == t.steps[i].reasoning);
    CHECK(back.steps[i].action == t.steps[i].action);
  }
  REQUIRE(back.verdict.has_value());
  CHECK(back.verdict->label == Label::kIncorrect);
  CHECK(back.verdict->reward == std::optional<double>(0.0));
  CHECK(trajectory_to_jsonl(back) == text);
}

TEST_CASE("trajectory invariants are enforced") {
  auto t = tiny_trajectory();
  CHECK_NOTHROW(validate_trajectory(t));

  SUBCASE("stop must be last") {
    std::swap(t.steps[0], t.steps[1]);
    CHECK_THROWS_AS(validate_trajectory(t), InvalidTrajectory);
  }
  SUBCASE("budget") {
    t.step_budget = 1;
    CHECK_THROWS_AS(validate_trajectory(t), InvalidTrajectory);
  }
  SUBCASE("coordinates on screen") {
    t.steps[0].action = action::Click{1280, 10};
    CHECK_THROWS_AS(validate_trajectory(t), InvalidTrajectory);
    t.steps[0].action = action::Hover{0, -1};
    CHECK_THROWS_AS(validate_trajectory(t), InvalidTrajectory);
    t.steps[0].action = action::Click{1279, 719};
    CHECK_NOTHROW(validate_trajectory(t));
  }
  SUBCASE("scroll direction") {
    t.steps[0].action = action::Scroll{"sideways", std::nullopt};
    CHECK_THROWS_AS(validate_trajectory(t), InvalidTrajectory);
  }
  SUBCASE("terminal value") {
    t.terminal = "finished";
    CHECK_THROWS_AS(validate_trajectory(t), InvalidTrajectory);
  }
  SUBCASE("screenshot must exist and be 1280x720") {
    CHECK_NOTHROW(validate_trajectory(t, kTrajDir));
    t.steps[0].observation.screenshot_ref = "../../site/img/logo.png";
    CHECK_THROWS_AS(validate_trajectory(t, kTrajDir), InvalidTrajectory);
    t.steps[0].observation.screenshot_ref = "screens/missing.png";
    CHECK_THROWS_AS(validate_trajectory(t, kTrajDir), InvalidTrajectory);
  }
  SUBCASE("parser rejects malformed files") {
    CHECK_THROWS_AS(parse_trajectory("{\"record\":\"step\"}\n"), InvalidTrajectory);
    CHECK_THROWS_AS(parse_trajectory("not json\n"), InvalidTrajectory);
    CHECK_THROWS_AS(parse_trajectory(""), InvalidTrajectory);
    CHECK_THROWS_AS(action_from_json(json{{"type", "teleport"}}), InvalidTrajectory);
  }
}

TEST_CASE("actions format in call syntax") {
  CHECK(format_action(action::Click{640, 360}) == "click(640, 360)");
  CHECK(format_action(action::Hover{1, 2}) == "hover(1, 2)");
  CHECK(format_action(action::Type{"shoes", std::pair{120, 45}, true}) == "type(\"shoes\", 120, 45, enter=True)");
  CHECK(format_action(action::Type{"a\"b", std::nullopt, false}) == "type(\"a\\\"b\")");
  CHECK(format_action(action::Press{"Enter"}) == "press(\"Enter\")");
  CHECK(format_action(action::Scroll{"up", std::nullopt}) == "scroll(\"up\")");
  CHECK(format_action(action::Scroll{"down", 300}) == "scroll(\"down\", 300)");
  CHECK(format_action(action::GoBack{}) == "go_back()");
  CHECK(format_action(action::GoForward{}) == "go_forward()");
  CHECK(format_action(action::Wait{}) == "wait()");
  CHECK(format_action(action::Stop{}) == "stop()");
  CHECK(format_action(action::Stop{"42"}) == "stop(\"42\")");
  const std::vector<Action> all = {action::Click{1, 2},        action::Hover{3, 4},
                                   action::Type{"t", std::pair{5, 6}, true}, action::Press{"Tab"},
                                   action::Scroll{"left", 2},  action::GoBack{},
                                   action::GoForward{},        action::Wait{},
                                   action::Stop{"r"}};
  for (const auto& a : all) CHECK(action_from_json(action_to_json(a)) == a);
}

TEST_CASE("judge prompts match the golden files byte for byte") {
  for (const std::string id : {"shop-001", "shop-002", "shop-003"}) {
    CAPTURE(id);
    const auto prompt = assemble_judge_prompt(task_named(id), fixture_trajectory(id));
    const auto rendered = render_prompt(prompt);
    CHECK(rendered == testsupport::read_file(testsupport::golden_dir() / ("prompt_" + id + ".txt")));
    CHECK(render_prompt(assemble_judge_prompt(task_named(id), fixture_trajectory(id))) == rendered);
  }
}

TEST_CASE("prompt structure") {
  const auto t = fixture_trajectory("shop-002");
  const auto p = assemble_judge_prompt(task_named("shop-002"), t);
  CHECK(p.user_parts.size() == 3 * t.steps.size() + 1);
  std::size_t images = 0;
  for (const auto& part : p.user_parts) images += part.kind == UserPart::Kind::kImage;
  CHECK(images == t.steps.size());
  CHECK(p.system_text.find("Task-specific evaluation criteria: \n") != std::string::npos);
  CHECK(p.system_text.find('{') == std::string::npos);

  auto odd = task_named("shop-003");
  odd.instruction = "Find {criteria} literally";
  CHECK(assemble_judge_prompt(odd, t).system_text.find("Find {criteria} literally") != std::string::npos);

  Trajectory empty;
  empty.task_id = "shop-003";
  CHECK_THROWS_AS(assemble_judge_prompt(task_named("shop-003"), empty), EmptyTrajectory);
}

TEST_CASE("verdict labels parse from the documented examples") {
  const auto c = parse_verdict("correct \xe2\x80\x94 the agent filled the form");
  CHECK(c.label == Label::kCorrect);
  CHECK(c.reward == std::optional<double>(1.0));
  CHECK(c.rationale == "\xe2\x80\x94 the agent filled the form");
  const auto i = parse_verdict("incorrect. It clicked the wrong tab");
  CHECK(i.label == Label::kIncorrect);
  CHECK(i.reward == std::optional<double>(0.0));
  CHECK(i.rationale == "It clicked the wrong tab");
  const auto w = parse_verdict("website failure: page stuck loading");
  CHECK(w.label == Label::kWebsiteFailure);
  CHECK_FALSE(w.reward.has_value());
  CHECK(w.rationale == "page stuck loading");
}

TEST_CASE("verdict labels parse from paraphrased replies") {
  const std::vector<std::pair<std::string, Label>> cases = {
      {"Correct. The cart shows item 42.", Label::kCorrect},
      {"CORRECT - the about page is open", Label::kCorrect},
      {"**Correct**\n\nThe agent added the item as asked.", Label::kCorrect},
      {"Decision: correct. Reasoning: the final screenshot shows the confirmation.", Label::kCorrect},
      {"'correct' -- all criteria satisfied", Label::kCorrect},
      {"After reviewing the steps, the trajectory is correct: the item was added.", Label::kCorrect},
      {"Verdict: Correct\nThe agent stopped on the right page.", Label::kCorrect},
      {"Incorrect. The agent never opened page two.", Label::kIncorrect},
      {"INCORRECT: wrong item added", Label::kIncorrect},
      {"**Incorrect** - it stopped before submitting.", Label::kIncorrect},
      {"Decision: incorrect\nThe agent typed into the wrong box, which is not correct.", Label::kIncorrect},
      {"The agent's final answer is incorrect because it picked item 8.", Label::kIncorrect},
      {"incorrect -- correct page, wrong action", Label::kIncorrect},
      {"Answer: 'incorrect'. The cart is empty.", Label::kIncorrect},
      {"Website failure. The page never finished loading.", Label::kWebsiteFailure},
      {"WEBSITE FAILURE - 503 error on checkout", Label::kWebsiteFailure},
      {"**Website failure**: blank page after the click", Label::kWebsiteFailure},
      {"Decision: website_failure. A CAPTCHA blocked progress.", Label::kWebsiteFailure},
      {"This looks like a website failure; the agent was otherwise correct.", Label::kWebsiteFailure},
      {"'website failure' -- spinner on every screenshot", Label::kWebsiteFailure},
  };
  REQUIRE(cases.size() == 20);
  for (const auto& [text, label] : cases) {
    CAPTURE(text);
    CHECK(parse_verdict(text).label == label);
  }
  CHECK_THROWS_AS(parse_verdict("I cannot decide."), UnparseableVerdict);
  CHECK_THROWS_AS(parse_verdict(""), UnparseableVerdict);
  CHECK_THROWS_AS(parse_verdict("incorrectly formatted"), UnparseableVerdict);
}

TEST_CASE("judge drives the backend with retries") {
  const auto task = task_named("shop-003");
  const auto t = tiny_trajectory();

  ScriptedJudge ok({std::string("correct")});
  CHECK(judge(task, t, ok).reward == std::optional<double>(1.0));
  CHECK(ok.calls() == 1);

  ScriptedJudge flaky({std::string("hmm"), std::string("no idea"), std::string("incorrect, wrong page")});
  const auto v = judge(task, t, flaky);
  CHECK(v.label == Label::kIncorrect);
  CHECK(flaky.calls() == 3);

  ScriptedJudge down({std::nullopt});
  CHECK_THROWS_AS(judge(task, t, down), JudgeTransportError);
  CHECK(down.calls() == 3);

  ScriptedJudge babble({std::string("maybe")});
  CHECK_THROWS_AS(judge(task, t, babble), UnparseableVerdict);
  CHECK(babble.calls() == 3);

  ScriptedJudge recovers({std::nullopt, std::string("website failure")});
  CHECK(judge(task, t, recovers).label == Label::kWebsiteFailure);
}

namespace {

/// Replies by the task id found in the system text.
class EchoJudge : public JudgeBackend {
 public:
  std::string complete(const JudgePrompt& prompt, const std::filesystem::path&) override {
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    if (prompt.system_text.find("About") != std::string::npos) return "correct";
    if (prompt.system_text.find("item 42") != std::string::npos) throw JudgeTransportError("down");
    return "incorrect";
  }
};

}  // namespace

TEST_CASE("judge_all keeps job order and reports errors per job") {
  const auto t1 = task_named("shop-001");
  const auto t3 = task_named("shop-003");
  const auto tr1 = fixture_trajectory("shop-001");
  const auto tr3 = fixture_trajectory("shop-003");
  std::vector<JudgeJob> jobs;
  for (int i = 0; i < 6; ++i) jobs.push_back(i % 2 ? JudgeJob{&t1, &tr1, kTrajDir} : JudgeJob{&t3, &tr3, kTrajDir});
  EchoJudge backend;
  const auto out = judge_all(jobs, backend, 3);
  REQUIRE(out.size() == 6);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (i % 2) {
      CHECK_FALSE(out[i].verdict.has_value());
      CHECK(out[i].error.find("down") != std::string::npos);
    } else {
      REQUIRE(out[i].verdict.has_value());
      CHECK(out[i].verdict->label == Label::kCorrect);
    }
  }
  CHECK(judge_all({}, backend, 4).empty());
}

TEST_CASE("HTTP judge speaks chat completions") {
  httplib::Server mock;
  json seen;
  std::string auth;
  mock.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen = json::parse(req.body);
    auth = req.get_header_value("Authorization");
    res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"Incorrect. Wrong page."}}]})",
                    "application/json");
  });
  mock.Post("/broken", [](const httplib::Request&, httplib::Response& res) {
    res.status = 500;
    res.set_content("oops", "text/plain");
  });
  const int port = mock.bind_to_any_port("127.0.0.1");
  std::thread th([&] { mock.listen_after_bind(); });
  mock.wait_until_ready();

  HttpJudgeConfig cfg;
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  cfg.model = "judge-model";
  cfg.api_key = "secret";
  cfg.temperature = 0.0;
  cfg.timeout_ms = 5000;
  HttpJudge http(cfg);
  const auto v = judge(task_named("shop-003"), fixture_trajectory("shop-003"), http, kTrajDir);
  CHECK(v.label == Label::kIncorrect);
  CHECK(auth == "Bearer secret");
  CHECK(seen["model"] == "judge-model");
  CHECK(seen["temperature"] == 0.0);
  CHECK(seen["messages"][0]["role"] == "system");
  const auto& content = seen["messages"][1]["content"];
  REQUIRE(content.size() == 7);
  CHECK(content[0]["text"] == "Step 1 - Screenshot:");
  const std::string url = content[1]["image_url"]["url"];
  CHECK(url.rfind("data:image/png;base64,", 0) == 0);
  CHECK(base64_decode(url.substr(22)) == testsupport::read_file(kTrajDir / "screens" / "shop-003-1.png"));

  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/broken";
  HttpJudge broken(cfg);
  CHECK_THROWS_AS(judge(task_named("shop-003"), fixture_trajectory("shop-003"), broken, kTrajDir),
                  JudgeTransportError);
  mock.stop();
  th.join();

  cfg.endpoint = "not a url";
  CHECK_THROWS_AS(HttpJudge{cfg}, ConfigError);
}

TEST_CASE("agreement") {
  const std::vector<Label> a = {Label::kCorrect, Label::kIncorrect, Label::kCorrect, Label::kWebsiteFailure,
                                Label::kCorrect, Label::kCorrect,   Label::kIncorrect, Label::kCorrect};
  CHECK(agreement(a, a) == 1.0);
  std::vector<Label> flipped;
  for (auto l : a) flipped.push_back(l == Label::kCorrect ? Label::kIncorrect : Label::kCorrect);
  CHECK(agreement(a, flipped) == 0.0);
  auto one_off = a;
  one_off[3] = Label::kCorrect;
  CHECK(agreement(a, one_off) == 0.875);
  CHECK_THROWS_AS(agreement({}, {}), UsageError);
  CHECK_THROWS_AS(agreement(a, {Label::kCorrect}), UsageError);
}

TEST_CASE("filter_groups keeps only mixed groups") {
  const auto kept = filter_groups({rewards({1, 1, 1, 1}), rewards({1, 0, 1, 0}), rewards({1, -1}),
                                   rewards({0, -1, 1}), rewards({}), rewards({-1, -1})});
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].index == 1);
  CHECK(kept[0].members.size() == 4);
  CHECK(kept[1].index == 3);
  CHECK(kept[1].members.size() == 2);
}

TEST_CASE("filter_groups agrees with a brute-force oracle on every group up to size 4") {
  const auto sweep = testsupport::sweep_filter_groups(4);
  CHECK(sweep.groups == 1 + 3 + 9 + 27 + 81);
  CHECK(sweep.mismatches == 0);
  CHECK_MESSAGE(sweep.first_failure.empty(), sweep.first_failure);
  CHECK(sweep.retained > 0);
}

TEST_CASE("pass@k examples") {
  for (int k = 1; k <= 8; ++k) CHECK(pass_at_k(8, 8, k) == 1.0);
  CHECK(pass_at_k(8, 1, 4) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(pass_at_k(8, 3, 1) == doctest::Approx(3.0 / 8).epsilon(1e-15));
  CHECK(pass_at_k(8, 0, 8) == 0.0);
  CHECK(pass_at_k(5, 2, 5) == 1.0);
  CHECK_THROWS_AS(pass_at_k(8, 1, 9), KTooLarge);
  CHECK_THROWS_AS(pass_at_k(8, 1, 0), UsageError);
  CHECK_THROWS_AS(pass_at_k(8, 9, 1), UsageError);
}

TEST_CASE("pass@k equals subset enumeration for all n up to 10") {
  CHECK(testsupport::pass_at_k_by_enumeration(8, 1, 4) == 0.5);
  const auto sweep = testsupport::sweep_pass_at_k(10, 1e-12);
  CHECK(sweep.cases == 440);
  CHECK(sweep.max_error <= 1e-12);
  CHECK(sweep.monotonicity_failures == 0);
  CHECK(sweep.k1_failures == 0);
  CHECK_MESSAGE(sweep.first_failure.empty(), sweep.first_failure);
}

TEST_CASE("pass@k summary over tasks and seeds") {
  const auto results = parse_results(
      "{\"task_id\":\"a\",\"seed\":0,\"attempts\":[true,false,false,false],\"step_budget\":30}\n"
      "{\"task_id\":\"b\",\"seed\":0,\"attempts\":[false,false,false,false],\"step_budget\":30}\n"
      "{\"task_id\":\"a\",\"seed\":1,\"attempts\":[1,1,0,0],\"step_budget\":30}\n"
      "\n"
      "{\"task_id\":\"b\",\"seed\":1,\"attempts\":[true,true,true,true]}\n");
  const auto s = summarize_pass_at_k(results, 2);
  CHECK(s.k == 2);
  CHECK(s.per_task.at("a") == doctest::Approx((0.5 + 5.0 / 6) / 2));
  CHECK(s.per_task.at("b") == doctest::Approx(0.5));
  CHECK(s.seed_means.at(0) == doctest::Approx(0.25));
  CHECK(s.seed_means.at(1) == doctest::Approx(11.0 / 12));
  CHECK(s.mean == doctest::Approx(7.0 / 12));
  CHECK(s.stddev == doctest::Approx((11.0 / 12 - 0.25) / std::sqrt(2.0)));
  CHECK(s.total_steps == 60);

  const auto j = summary_to_json(s);
  CHECK(j["k"] == 2);
  CHECK(j["total_steps"] == 60);

  auto mixed = results;
  mixed[0].step_budget = 10;
  CHECK(summarize_pass_at_k(mixed, 1).total_steps == -1);
  CHECK_THROWS_AS(summarize_pass_at_k(results, 5), KTooLarge);

  const auto single = summarize_pass_at_k(parse_results("{\"task_id\":\"a\",\"attempts\":[true,false]}\n"), 1);
  CHECK(single.stddev == 0.0);
  CHECK(single.mean == 0.5);

  CHECK_THROWS_AS(parse_results("{\"task_id\":\"a\",\"attempts\":[]}\n"), SchemaError);
  CHECK_THROWS_AS(parse_results("{\"task_id\":\"a\",\"attempts\":[\"yes\"]}\n"), SchemaError);
  CHECK_THROWS_AS(parse_results("{\"task_id\":\"a\",\"attempts\":[true]}\n{\"task_id\":\"a\",\"attempts\":[true]}\n"),
                  SchemaError);
  CHECK_THROWS_AS(parse_results("{oops\n"), ParseError);
}

TEST_CASE("k = n reproduces the empirical any-success rate") {
  std::mt19937 rng(7);
  for (int round = 0; round < 200; ++round) {
    const int n = 1 + static_cast<int>(rng() % 10);
    const int c = static_cast<int>(rng() % static_cast<unsigned>(n + 1));
    CHECK(pass_at_k(n, c, n) == (c > 0 ? 1.0 : 0.0));
  }
}
