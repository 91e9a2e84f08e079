#include "webreplay/eval/judge.hpp"

#include <spdlog/spdlog.h>

#include <atomic>
#include <cctype>
#include <fstream>
#include <sstream>
#include <thread>

#include "webreplay/encoding.hpp"
#include "webreplay/error.hpp"
#include "webreplay/net/upstream.hpp"

namespace webreplay::eval {

namespace {

constexpr std::string_view kSystemTemplate =
    R"(You are an expert evaluator for web navigation tasks.

Analyze the provided trajectory steps and determine if the agent successfully completed the following task: {task}

Respond with one of the following based on the task-specific criteria below:
- 'correct' -- The agent successfully completed the task
- 'incorrect' -- The agent failed to complete the task due to its own mistakes
- 'website failure' -- The agent was making reasonable progress but was blocked by technical issues beyond its control

Task-specific evaluation criteria: {criteria}

Technical issues that qualify for 'website failure':
- Page timeouts or loading failures
- Blank or empty pages that fail to render
- Connection errors or server errors (5xx responses)
- CAPTCHA or bot detection blocking the agent
- Pages stuck in infinite loading states
- Elements that fail to become interactive despite multiple attempts

To determine if a website issue occurred, look for these indicators in the trajectory:
- The agent repeatedly tries the same reasonable action without success
- Screenshots show loading spinners, error messages, or blank content
- The agent uses 'wait' actions multiple times without page progress
- The agent's actions are correct but the page state doesn't change as expected

Important: Only use 'website failure' when the agent was on a reasonable path toward completing the task. If the agent made fundamental mistakes before encountering technical issues, respond with 'incorrect'.

These are the actions the agent can take:
{actions})";

constexpr std::string_view kFinalQuestion =
    "Based on these trajectory steps, did the agent successfully complete the task? First respond "
    "with your decision followed by your reasoning.";

struct ActionRow {
  std::string_view signature;
  std::string_view description;
};

constexpr ActionRow kActionTable[] = {
    {"click(x, y)", "Click at pixel coordinates"},
    {"hover(x, y)", "Hover at pixel coordinates"},
    {"type(text, [x, y], [enter])", "Type text, optionally at coordinates and press enter"},
    {"press(key)", "Press a keyboard key"},
    {"scroll(direction, [amount])", "Scroll in a given direction"},
    {"go_back()", "Navigate back in history"},
    {"go_forward()", "Navigate forward in history"},
    {"wait()", "Wait for page to load"},
    {"stop(response)", "Submit response and end episode"},
};

/// Replaces `{name}` slots in one left-to-right pass so substituted text is
/// never scanned again.
std::string substitute(std::string_view tmpl, const std::vector<std::pair<std::string, std::string>>& slots) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    bool replaced = false;
    if (tmpl[i] == '{') {
      for (const auto& [name, value] : slots) {
        const std::string slot = "{" + name + "}";
        if (tmpl.substr(i, slot.size()) == slot) {
          out += value;
          i += slot.size();
          replaced = true;
          break;
        }
      }
    }
    if (!replaced) out += tmpl[i++];
  }
  return out;
}

bool word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

struct LabelForm {
  std::string_view text;
  Label label;
};

// Longest and most specific forms first: "incorrect" must be tried before
// its substring "correct".
constexpr LabelForm kLabelForms[] = {
    {"website failure", Label::kWebsiteFailure}, {"website_failure", Label::kWebsiteFailure},
    {"website-failure", Label::kWebsiteFailure}, {"incorrect", Label::kIncorrect},
    {"correct", Label::kCorrect},
};

bool word_at(std::string_view lower, std::size_t pos, std::string_view word) {
  if (lower.substr(pos, word.size()) != word) return false;
  if (pos > 0 && word_char(lower[pos - 1])) return false;
  const auto end = pos + word.size();
  return end >= lower.size() || !word_char(lower[end]);
}

bool decoration(char c) {
  return std::isspace(static_cast<unsigned char>(c)) || std::string_view("*_#>`'\"-:.[](){}|").find(c) != std::string_view::npos;
}

std::string_view strip_decoration(std::string_view s) {
  while (!s.empty() && decoration(s.front())) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string read_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw JudgeTransportError("cannot read screenshot " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string_view judge_system_template() { return kSystemTemplate; }

std::string action_space_description() {
  std::string out;
  for (const auto& row : kActionTable) {
    if (!out.empty()) out += "\n";
    out += "- " + std::string(row.signature) + ": " + std::string(row.description);
  }
  return out;
}

JudgePrompt assemble_judge_prompt(const TaskManifest& task, const Trajectory& trajectory) {
  if (trajectory.steps.empty()) throw EmptyTrajectory("trajectory for " + trajectory.task_id + " has no steps");
  JudgePrompt p;
  p.system_text = substitute(kSystemTemplate, {{"task", task.instruction},
                                               {"criteria", task.success_criteria},
                                               {"actions", action_space_description()}});
  for (std::size_t i = 0; i < trajectory.steps.size(); ++i) {
    const auto n = std::to_string(i + 1);
    const auto& step = trajectory.steps[i];
    p.user_parts.push_back({UserPart::Kind::kText, "Step " + n + " - Screenshot:"});
    p.user_parts.push_back({UserPart::Kind::kImage, step.observation.screenshot_ref});
    p.user_parts.push_back({UserPart::Kind::kText, "Step " + n + " - Agent Action: " + format_action(step.action)});
  }
  p.user_parts.push_back({UserPart::Kind::kText, std::string(kFinalQuestion)});
  return p;
}

std::string render_prompt(const JudgePrompt& prompt) {
  std::string out = "[system]\n" + prompt.system_text + "\n[user]\n";
  for (const auto& part : prompt.user_parts)
    out += part.kind == UserPart::Kind::kImage ? "<image:" + part.content + ">\n" : part.content + "\n";
  return out;
}

Verdict parse_verdict(std::string_view judge_text) {
  const std::string lower = to_lower(judge_text);
  std::string_view head = strip_decoration(lower);
  // Lead-ins such as "Decision:" or "**Verdict** -" before the label.
  for (std::string_view lead : {"final decision", "decision", "verdict", "answer", "label", "result"}) {
    if (head.substr(0, lead.size()) == lead &&
        (head.size() == lead.size() || !word_char(head[lead.size()]))) {
      head = strip_decoration(head.substr(lead.size()));
      break;
    }
  }

  std::optional<std::pair<std::size_t, const LabelForm*>> found;
  const std::size_t head_pos = static_cast<std::size_t>(head.data() - lower.data());
  for (const auto& form : kLabelForms) {
    if (word_at(lower, head_pos, form.text)) {
      found = {head_pos, &form};
      break;
    }
  }
  if (!found) {
    for (std::size_t pos = 0; pos < lower.size() && !found; ++pos)
      for (const auto& form : kLabelForms)
        if (word_at(lower, pos, form.text)) {
          found = {pos, &form};
          break;
        }
  }
  if (!found) throw UnparseableVerdict("no verdict label in judge reply: " + std::string(judge_text.substr(0, 200)));

  const auto end = found->first + found->second->text.size();
  std::string_view rest = judge_text.substr(end);
  return make_verdict(found->second->label, std::string(strip_decoration(rest)));
}

ScriptedJudge::ScriptedJudge(std::vector<std::optional<std::string>> script) : script_(std::move(script)) {}

std::string ScriptedJudge::complete(const JudgePrompt&, const std::filesystem::path&) {
  std::optional<std::string> reply;
  {
    std::lock_guard lock(mutex_);
    if (script_.empty()) throw JudgeTransportError("scripted judge has no replies");
    reply = script_[std::min(next_, script_.size() - 1)];
    ++next_;
  }
  if (!reply) throw JudgeTransportError("scripted transport failure");
  return *reply;
}

std::size_t ScriptedJudge::calls() const {
  std::lock_guard lock(mutex_);
  return next_;
}

HttpJudgeConfig HttpJudgeConfig::from_env() {
  HttpJudgeConfig c;
  auto env = [](const char* name) {
    const char* v = std::getenv(name);
    return v ? std::string(v) : std::string();
  };
  c.endpoint = env("JUDGE_ENDPOINT");
  c.model = env("JUDGE_MODEL");
  c.api_key = env("JUDGE_API_KEY");
  if (c.endpoint.empty()) throw ConfigError("JUDGE_ENDPOINT is not set");
  if (c.model.empty()) throw ConfigError("JUDGE_MODEL is not set");
  return c;
}

HttpJudge::HttpJudge(HttpJudgeConfig config) : config_(std::move(config)) {
  if (!parse_url(config_.endpoint)) throw ConfigError("judge endpoint is not a URL: " + config_.endpoint);
}

json HttpJudge::request_body(const JudgePrompt& prompt, const std::filesystem::path& image_dir) const {
  json content = json::array();
  for (const auto& part : prompt.user_parts) {
    if (part.kind == UserPart::Kind::kText) {
      content.push_back({{"type", "text"}, {"text", part.content}});
    } else {
      const auto bytes = read_binary(image_dir / part.content);
      content.push_back(
          {{"type", "image_url"}, {"image_url", {{"url", "data:image/png;base64," + base64_encode(bytes)}}}});
    }
  }
  json body{{"model", config_.model},
            {"messages",
             {{{"role", "system"}, {"content", prompt.system_text}}, {{"role", "user"}, {"content", content}}}}};
  if (config_.temperature) body["temperature"] = *config_.temperature;
  return body;
}

std::string HttpJudge::complete(const JudgePrompt& prompt, const std::filesystem::path& image_dir) {
  const auto url = parse_url(config_.endpoint);
  net::UpstreamOptions opts;
  opts.timeout_ms = config_.timeout_ms;
  net::UpstreamClient client(opts);

  net::HttpRequest req;
  req.method = "POST";
  req.target = url->path + (url->query.empty() ? "" : "?" + url->query);
  req.headers.emplace_back("Content-Type", "application/json");
  req.headers.emplace_back("Accept", "application/json");
  if (!config_.api_key.empty()) req.headers.emplace_back("Authorization", "Bearer " + config_.api_key);
  req.body = request_body(prompt, image_dir).dump();

  net::HttpResponse resp;
  try {
    resp = client.fetch(url->scheme, url->host, url->port, req);
  } catch (const UpstreamError& e) {
    throw JudgeTransportError(e.what());
  }
  if (resp.status != 200)
    throw JudgeTransportError("judge endpoint answered " + std::to_string(resp.status) + ": " +
                              resp.body.substr(0, 300));
  try {
    const auto doc = json::parse(resp.body);
    const auto& content = doc.at("choices").at(0).at("message").at("content");
    if (content.is_string()) return content.get<std::string>();
    std::string text;
    for (const auto& part : content)
      if (part.value("type", "") == "text") text += part.value("text", "");
    return text;
  } catch (const json::exception& e) {
    throw JudgeTransportError(std::string("malformed judge response: ") + e.what());
  }
}

Verdict judge(const TaskManifest& task, const Trajectory& trajectory, JudgeBackend& backend,
              const std::filesystem::path& image_dir, int attempts) {
  const auto prompt = assemble_judge_prompt(task, trajectory);
  std::string last_error;
  bool last_was_transport = true;
  for (int attempt = 1; attempt <= std::max(1, attempts); ++attempt) {
    try {
      return parse_verdict(backend.complete(prompt, image_dir));
    } catch (const JudgeTransportError& e) {
      last_error = e.what();
      last_was_transport = true;
    } catch (const UnparseableVerdict& e) {
      last_error = e.what();
      last_was_transport = false;
    }
    spdlog::debug("judge attempt {} for {} failed: {}", attempt, trajectory.task_id, last_error);
  }
  if (last_was_transport) throw JudgeTransportError(last_error);
  throw UnparseableVerdict(last_error);
}

std::vector<JudgeOutcome> judge_all(const std::vector<JudgeJob>& jobs, JudgeBackend& backend,
                                    std::size_t max_in_flight) {
  std::vector<JudgeOutcome> out(jobs.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min(max_in_flight, jobs.size()));
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        out[i].verdict = judge(*jobs[i].task, *jobs[i].trajectory, backend, jobs[i].image_dir);
      } catch (const std::exception& e) {
        out[i].error = e.what();
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(work);
  for (auto& t : threads) t.join();
  return out;
}

}  // namespace webreplay::eval
