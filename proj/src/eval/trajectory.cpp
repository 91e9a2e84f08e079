#include "webreplay/eval/trajectory.hpp"

#include <fstream>
#include <sstream>

#include "webreplay/encoding.hpp"
#include "webreplay/error.hpp"

namespace webreplay::eval {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string quote(const std::string& s) { return json(s).dump(); }

void check_point(int x, int y) {
  if (x < 0 || x >= kScreenWidth || y < 0 || y >= kScreenHeight)
    throw InvalidTrajectory("coordinates (" + std::to_string(x) + ", " + std::to_string(y) +
                            ") outside the 1280x720 screen");
}

int get_int(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_number_integer())
    throw InvalidTrajectory(std::string("action.") + key + ": expected integer");
  return j.at(key).get<int>();
}

std::string get_str(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_string())
    throw InvalidTrajectory(std::string("action.") + key + ": expected string");
  return j.at(key).get<std::string>();
}

json verdict_to_json(const Verdict& v) {
  return {{"record", "verdict"},
          {"label", to_string(v.label)},
          {"rationale", v.rationale},
          {"reward", v.reward ? json(*v.reward) : json(nullptr)}};
}

}  // namespace

void validate_action(const Action& a) {
  std::visit(overloaded{
                 [](const action::Click& c) { check_point(c.x, c.y); },
                 [](const action::Hover& h) { check_point(h.x, h.y); },
                 [](const action::Type& t) {
                   if (t.at) check_point(t.at->first, t.at->second);
                 },
                 [](const action::Press& p) {
                   if (p.key.empty()) throw InvalidTrajectory("press: empty key");
                 },
                 [](const action::Scroll& s) {
                   if (s.direction != "up" && s.direction != "down" && s.direction != "left" &&
                       s.direction != "right")
                     throw InvalidTrajectory("scroll: direction must be up, down, left or right");
                   if (s.amount && *s.amount < 0) throw InvalidTrajectory("scroll: negative amount");
                 },
                 [](const auto&) {},
             },
             a);
}

bool is_stop(const Action& a) { return std::holds_alternative<action::Stop>(a); }

std::string format_action(const Action& a) {
  return std::visit(
      overloaded{
          [](const action::Click& c) { return "click(" + std::to_string(c.x) + ", " + std::to_string(c.y) + ")"; },
          [](const action::Hover& h) { return "hover(" + std::to_string(h.x) + ", " + std::to_string(h.y) + ")"; },
          [](const action::Type& t) {
            std::string s = "type(" + quote(t.text);
            if (t.at) s += ", " + std::to_string(t.at->first) + ", " + std::to_string(t.at->second);
            if (t.enter) s += ", enter=True";
            return s + ")";
          },
          [](const action::Press& p) { return "press(" + quote(p.key) + ")"; },
          [](const action::Scroll& s) {
            return "scroll(" + quote(s.direction) + (s.amount ? ", " + std::to_string(*s.amount) : "") + ")";
          },
          [](const action::GoBack&) { return std::string("go_back()"); },
          [](const action::GoForward&) { return std::string("go_forward()"); },
          [](const action::Wait&) { return std::string("wait()"); },
          [](const action::Stop& s) { return "stop(" + (s.response ? quote(*s.response) : "") + ")"; },
      },
      a);
}

json action_to_json(const Action& a) {
  return std::visit(
      overloaded{
          [](const action::Click& c) { return json{{"type", "click"}, {"x", c.x}, {"y", c.y}}; },
          [](const action::Hover& h) { return json{{"type", "hover"}, {"x", h.x}, {"y", h.y}}; },
          [](const action::Type& t) {
            json j{{"type", "type"}, {"text", t.text}, {"enter", t.enter}};
            if (t.at) {
              j["x"] = t.at->first;
              j["y"] = t.at->second;
            }
            return j;
          },
          [](const action::Press& p) { return json{{"type", "press"}, {"key", p.key}}; },
          [](const action::Scroll& s) {
            json j{{"type", "scroll"}, {"direction", s.direction}};
            if (s.amount) j["amount"] = *s.amount;
            return j;
          },
          [](const action::GoBack&) { return json{{"type", "go_back"}}; },
          [](const action::GoForward&) { return json{{"type", "go_forward"}}; },
          [](const action::Wait&) { return json{{"type", "wait"}}; },
          [](const action::Stop& s) {
            json j{{"type", "stop"}};
            if (s.response) j["response"] = *s.response;
            return j;
          },
      },
      a);
}

Action action_from_json(const json& j) {
  if (!j.is_object()) throw InvalidTrajectory("action: expected object");
  const auto type = get_str(j, "type");
  Action a;
  if (type == "click") {
    a = action::Click{get_int(j, "x"), get_int(j, "y")};
  } else if (type == "hover") {
    a = action::Hover{get_int(j, "x"), get_int(j, "y")};
  } else if (type == "type") {
    action::Type t;
    t.text = get_str(j, "text");
    if (j.contains("x") || j.contains("y")) t.at = std::make_pair(get_int(j, "x"), get_int(j, "y"));
    if (j.contains("enter")) {
      if (!j.at("enter").is_boolean()) throw InvalidTrajectory("action.enter: expected boolean");
      t.enter = j.at("enter").get<bool>();
    }
    a = t;
  } else if (type == "press") {
    a = action::Press{get_str(j, "key")};
  } else if (type == "scroll") {
    action::Scroll s;
    s.direction = get_str(j, "direction");
    if (j.contains("amount") && !j.at("amount").is_null()) s.amount = get_int(j, "amount");
    a = s;
  } else if (type == "go_back") {
    a = action::GoBack{};
  } else if (type == "go_forward") {
    a = action::GoForward{};
  } else if (type == "wait") {
    a = action::Wait{};
  } else if (type == "stop") {
    action::Stop s;
    if (j.contains("response") && !j.at("response").is_null()) s.response = get_str(j, "response");
    a = s;
  } else {
    throw InvalidTrajectory("action.type: unknown action '" + type + "'");
  }
  validate_action(a);
  return a;
}

std::string_view to_string(Label label) {
  switch (label) {
    case Label::kCorrect: return "correct";
    case Label::kIncorrect: return "incorrect";
    case Label::kWebsiteFailure: return "website_failure";
  }
  return "incorrect";
}

Label label_from_string(std::string_view s) {
  const auto l = to_lower(trim(s));
  if (l == "correct") return Label::kCorrect;
  if (l == "incorrect") return Label::kIncorrect;
  if (l == "website_failure" || l == "website failure") return Label::kWebsiteFailure;
  throw InvalidTrajectory("unknown verdict label '" + std::string(s) + "'");
}

Verdict make_verdict(Label label, std::string rationale) {
  Verdict v;
  v.label = label;
  v.rationale = std::move(rationale);
  if (label == Label::kCorrect) v.reward = 1.0;
  if (label == Label::kIncorrect) v.reward = 0.0;
  return v;
}

std::optional<std::pair<int, int>> png_dimensions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  unsigned char buf[24];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof buf)) return std::nullopt;
  static constexpr unsigned char kSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (!std::equal(kSig, kSig + 8, buf) || std::string_view(reinterpret_cast<char*>(buf + 12), 4) != "IHDR")
    return std::nullopt;
  auto be32 = [&](int off) {
    return static_cast<int>((std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) |
                            (std::uint32_t{buf[off + 2]} << 8) | std::uint32_t{buf[off + 3]});
  };
  return std::make_pair(be32(16), be32(20));
}

void validate_trajectory(const Trajectory& t, const std::optional<std::filesystem::path>& image_dir) {
  if (t.task_id.empty()) throw InvalidTrajectory("trajectory without task_id");
  if (t.step_budget < 1) throw InvalidTrajectory("step_budget must be positive");
  if (t.terminal != "stopped" && t.terminal != "budget_exhausted" && t.terminal != "error")
    throw InvalidTrajectory("terminal must be stopped, budget_exhausted or error");
  if (static_cast<int>(t.steps.size()) > t.step_budget)
    throw InvalidTrajectory(std::to_string(t.steps.size()) + " steps exceed the budget of " +
                            std::to_string(t.step_budget));
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    const auto& step = t.steps[i];
    validate_action(step.action);
    if (is_stop(step.action) && i + 1 != t.steps.size())
      throw InvalidTrajectory("stop at step " + std::to_string(i + 1) + " is not the last action");
    if (step.observation.width != kScreenWidth || step.observation.height != kScreenHeight)
      throw InvalidTrajectory("step " + std::to_string(i + 1) + ": observation is not 1280x720");
    if (image_dir) {
      const auto dims = png_dimensions(*image_dir / step.observation.screenshot_ref);
      if (!dims)
        throw InvalidTrajectory("step " + std::to_string(i + 1) + ": " + step.observation.screenshot_ref +
                                " is not a readable PNG");
      if (dims->first != kScreenWidth || dims->second != kScreenHeight)
        throw InvalidTrajectory("step " + std::to_string(i + 1) + ": screenshot is " +
                                std::to_string(dims->first) + "x" + std::to_string(dims->second));
    }
  }
  if (!t.steps.empty() && is_stop(t.steps.back().action) && t.terminal != "stopped")
    throw InvalidTrajectory("trajectory ends with stop but terminal is " + t.terminal);
}

std::string trajectory_to_jsonl(const Trajectory& t) {
  std::string out = json{{"record", "header"},
                         {"version", 1},
                         {"task_id", t.task_id},
                         {"terminal", t.terminal},
                         {"step_budget", t.step_budget}}
                        .dump() +
                    "\n";
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    const auto& s = t.steps[i];
    out += json{{"record", "step"},
                {"index", i + 1},
                {"observation",
                 {{"screenshot", s.observation.screenshot_ref},
                  {"url", s.observation.url},
                  {"width", s.observation.width},
                  {"height", s.observation.height}}},
                {"reasoning", s.reasoning},
                {"action", action_to_json(s.action)}}
               .dump() +
           "\n";
  }
  if (t.verdict) out += verdict_to_json(*t.verdict).dump() + "\n";
  return out;
}

Trajectory parse_trajectory(std::string_view jsonl) {
  Trajectory t;
  bool header = false;
  std::size_t line_no = 0;
  std::istringstream in{std::string(jsonl)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw InvalidTrajectory(where + e.what());
    }
    const auto record = j.value("record", "");
    try {
      if (record == "header") {
        if (header) throw InvalidTrajectory("duplicate header");
        header = true;
        t.task_id = j.at("task_id").get<std::string>();
        t.terminal = j.value("terminal", "stopped");
        t.step_budget = j.value("step_budget", 30);
      } else if (record == "step") {
        if (!header) throw InvalidTrajectory("step before header");
        if (t.verdict) throw InvalidTrajectory("step after verdict");
        Step s;
        const auto& o = j.at("observation");
        s.observation.screenshot_ref = o.value("screenshot", "");
        s.observation.url = o.value("url", "");
        s.observation.width = o.value("width", kScreenWidth);
        s.observation.height = o.value("height", kScreenHeight);
        s.reasoning = j.value("reasoning", "");
        s.action = action_from_json(j.at("action"));
        t.steps.push_back(std::move(s));
      } else if (record == "verdict") {
        if (!header) throw InvalidTrajectory("verdict before header");
        t.verdict = make_verdict(label_from_string(j.at("label").get<std::string>()),
                                 j.value("rationale", ""));
      } else {
        throw InvalidTrajectory("unknown record '" + record + "'");
      }
    } catch (const json::exception& e) {
      throw InvalidTrajectory(where + e.what());
    } catch (const InvalidTrajectory& e) {
      throw InvalidTrajectory(where + e.what());
    }
  }
  if (!header) throw InvalidTrajectory("missing header record");
  validate_trajectory(t);
  return t;
}

Trajectory load_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidTrajectory("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_trajectory(ss.str());
  } catch (const InvalidTrajectory& e) {
    throw InvalidTrajectory(path.string() + ": " + e.what());
  }
}

}  // namespace webreplay::eval
