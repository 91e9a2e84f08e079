#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "webreplay/envserve.hpp"
#include "webreplay/eval/trajectory.hpp"

namespace webreplay::eval {

struct UserPart {
  enum class Kind { kText, kImage };
  Kind kind = Kind::kText;
  /// Text for kText, screenshot reference for kImage.
  std::string content;

  bool operator==(const UserPart&) const = default;
};

struct JudgePrompt {
  std::string system_text;
  std::vector<UserPart> user_parts;
};

/// System template with {task} and {criteria} slots.
std::string_view judge_system_template();
/// One "- name(args): description" line per action, in table order.
std::string action_space_description();

/// Throws EmptyTrajectory.
JudgePrompt assemble_judge_prompt(const TaskManifest& task, const Trajectory& trajectory);

/// Plain-text rendering used for golden files: "[system]" and "[user]"
/// sections, image parts written as "<image:ref>" on their own line.
std::string render_prompt(const JudgePrompt& prompt);

/// Label from the judge's reply: a label at the start of the reply wins
/// ("website failure", then "incorrect", then "correct"); otherwise the
/// earliest whole-word label anywhere. Throws UnparseableVerdict.
Verdict parse_verdict(std::string_view judge_text);

class JudgeBackend {
 public:
  virtual ~JudgeBackend() = default;
  /// Returns the judge's raw reply. Throws JudgeTransportError.
  /// `image_dir` resolves screenshot references.
  virtual std::string complete(const JudgePrompt& prompt, const std::filesystem::path& image_dir) = 0;
};

/// Plays back a fixed script of replies; std::nullopt entries fail with a
/// transport error. The last entry repeats once the script runs out.
class ScriptedJudge : public JudgeBackend {
 public:
  explicit ScriptedJudge(std::vector<std::optional<std::string>> script);
  std::string complete(const JudgePrompt& prompt, const std::filesystem::path& image_dir) override;
  std::size_t calls() const;

 private:
  std::vector<std::optional<std::string>> script_;
  mutable std::mutex mutex_;
  std::size_t next_ = 0;
};

struct HttpJudgeConfig {
  /// Chat-completions URL, e.g. https://api.example.com/v1/chat/completions.
  std::string endpoint;
  std::string model;
  std::string api_key;
  std::optional<double> temperature;
  int timeout_ms = 120000;

  /// JUDGE_ENDPOINT, JUDGE_MODEL, JUDGE_API_KEY. Throws ConfigError when
  /// the endpoint or model is missing.
  static HttpJudgeConfig from_env();
};

/// Generic chat-completions client. Screenshots are sent inline as base64
/// data URLs.
class HttpJudge : public JudgeBackend {
 public:
  explicit HttpJudge(HttpJudgeConfig config);
  std::string complete(const JudgePrompt& prompt, const std::filesystem::path& image_dir) override;

  /// Request body that complete() would send.
  json request_body(const JudgePrompt& prompt, const std::filesystem::path& image_dir) const;

 private:
  HttpJudgeConfig config_;
};

inline constexpr int kJudgeAttempts = 3;

/// assemble -> complete -> parse, retrying transport errors and
/// unparseable replies up to `attempts` times in total.
Verdict judge(const TaskManifest& task, const Trajectory& trajectory, JudgeBackend& backend,
              const std::filesystem::path& image_dir = {}, int attempts = kJudgeAttempts);

struct JudgeJob {
  const TaskManifest* task = nullptr;
  const Trajectory* trajectory = nullptr;
  std::filesystem::path image_dir;
};

struct JudgeOutcome {
  std::optional<Verdict> verdict;
  std::string error;
};

/// Judges every job with at most `max_in_flight` concurrent backend calls.
/// Results come back in job order.
std::vector<JudgeOutcome> judge_all(const std::vector<JudgeJob>& jobs, JudgeBackend& backend,
                                    std::size_t max_in_flight);

}  // namespace webreplay::eval
