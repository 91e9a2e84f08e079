#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "webreplay/request.hpp"

namespace webreplay::eval {

inline constexpr int kScreenWidth = 1280;
inline constexpr int kScreenHeight = 720;

struct Observation {
  std::string screenshot_ref;
  int width = kScreenWidth;
  int height = kScreenHeight;
  std::string url;

  bool operator==(const Observation&) const = default;
};

namespace action {
struct Click {
  int x = 0, y = 0;
  bool operator==(const Click&) const = default;
};
struct Hover {
  int x = 0, y = 0;
  bool operator==(const Hover&) const = default;
};
struct Type {
  std::string text;
  std::optional<std::pair<int, int>> at;
  bool enter = false;
  bool operator==(const Type&) const = default;
};
struct Press {
  std::string key;
  bool operator==(const Press&) const = default;
};
struct Scroll {
  std::string direction;
  std::optional<int> amount;
  bool operator==(const Scroll&) const = default;
};
struct GoBack {
  bool operator==(const GoBack&) const = default;
};
struct GoForward {
  bool operator==(const GoForward&) const = default;
};
struct Wait {
  bool operator==(const Wait&) const = default;
};
struct Stop {
  std::optional<std::string> response;
  bool operator==(const Stop&) const = default;
};
}  // namespace action

using Action = std::variant<action::Click, action::Hover, action::Type, action::Press, action::Scroll,
                            action::GoBack, action::GoForward, action::Wait, action::Stop>;

/// Throws InvalidTrajectory for out-of-screen coordinates or a bad scroll
/// direction.
void validate_action(const Action& a);
bool is_stop(const Action& a);

/// Call syntax used in judge prompts, e.g. `click(640, 360)`,
/// `type("shoes", 120, 45, enter=True)`, `stop("42")`.
std::string format_action(const Action& a);

json action_to_json(const Action& a);
/// Throws InvalidTrajectory.
Action action_from_json(const json& j);

struct Step {
  Observation observation;
  std::string reasoning;
  Action action;
};

enum class Label { kCorrect, kIncorrect, kWebsiteFailure };

struct Verdict {
  Label label = Label::kIncorrect;
  std::string rationale;
  /// 1.0 for correct, 0.0 for incorrect, absent for website failure.
  std::optional<double> reward;
};

std::string_view to_string(Label label);
/// "correct", "incorrect", "website_failure" (also "website failure").
Label label_from_string(std::string_view s);
Verdict make_verdict(Label label, std::string rationale = {});

struct Trajectory {
  std::string task_id;
  std::vector<Step> steps;
  /// "stopped", "budget_exhausted" or "error".
  std::string terminal = "stopped";
  int step_budget = 30;
  std::optional<Verdict> verdict;
};

/// Checks the step budget, stop placement, terminal value and action
/// arguments. With `image_dir` set, screenshots are resolved against it and
/// must be 1280x720 PNGs. Throws InvalidTrajectory.
void validate_trajectory(const Trajectory& t,
                         const std::optional<std::filesystem::path>& image_dir = std::nullopt);

/// Width and height from a PNG header, or nullopt when the file is not a PNG.
std::optional<std::pair<int, int>> png_dimensions(const std::filesystem::path& path);

/// JSONL: a {"record":"header"} line, one {"record":"step"} line per step
/// and, once judged, a {"record":"verdict"} footer.
std::string trajectory_to_jsonl(const Trajectory& t);
Trajectory parse_trajectory(std::string_view jsonl);
Trajectory load_trajectory(const std::filesystem::path& path);

}  // namespace webreplay::eval
