#include "webreplay/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "webreplay/error.hpp"

namespace webreplay {

namespace fs = std::filesystem;

namespace {

std::optional<std::string> env_var(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

void reject_unknown(const json& obj, const std::set<std::string>& known, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : obj.items())
    if (!known.count(key)) throw ConfigError(where + ": unknown key \"" + key + "\"");
}

template <typename T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

}  // namespace

Config default_config() {
  Config c;
  if (auto home = env_var("WEBREPLAY_HOME")) c.data_root = *home;
  if (auto v = env_var("JUDGE_ENDPOINT")) c.judge.endpoint = *v;
  if (auto v = env_var("JUDGE_MODEL")) c.judge.model = *v;
  if (auto v = env_var("JUDGE_API_KEY")) c.judge.api_key = *v;
  return c;
}

Config apply_config_json(Config c, const json& doc) {
  reject_unknown(doc, {"data_root", "listen", "replay", "diagnose", "judge"}, "$");
  if (doc.contains("data_root")) {
    std::string root;
    read(doc, "data_root", root, "$");
    c.data_root = root;
  }
  if (doc.contains("listen")) {
    const auto& l = doc["listen"];
    reject_unknown(l, {"record", "replay", "env"}, "$.listen");
    read(l, "record", c.record_listen, "$.listen");
    read(l, "replay", c.replay_listen, "$.listen");
    read(l, "env", c.env_listen, "$.listen");
  }
  if (doc.contains("replay")) {
    const auto& r = doc["replay"];
    reject_unknown(r, {"max_level", "validate_max_level"}, "$.replay");
    read(r, "max_level", c.replay_max_level, "$.replay");
    read(r, "validate_max_level", c.validate_max_level, "$.replay");
  }
  if (doc.contains("diagnose")) {
    const auto& d = doc["diagnose"];
    const std::string where = "$.diagnose";
    reject_unknown(d,
                   {"match_threshold", "min_evidence", "accept_threshold", "weights", "key_lexicon",
                    "telemetry_lexicon"},
                   where);
    read(d, "match_threshold", c.diagnose.match_threshold, where);
    read(d, "min_evidence", c.diagnose.min_evidence, where);
    read(d, "accept_threshold", c.diagnose.accept_threshold, where);
    read(d, "key_lexicon", c.diagnose.key_lexicon, where);
    read(d, "telemetry_lexicon", c.diagnose.telemetry_lexicon, where);
    if (d.contains("weights")) {
      const auto& w = d["weights"];
      reject_unknown(w, {"path", "query", "body"}, where + ".weights");
      read(w, "path", c.diagnose.weights.path, where + ".weights");
      read(w, "query", c.diagnose.weights.query, where + ".weights");
      read(w, "body", c.diagnose.weights.body, where + ".weights");
    }
  }
  if (doc.contains("judge")) {
    const auto& j = doc["judge"];
    const std::string where = "$.judge";
    // The API key is deliberately not accepted here; it only comes from
    // JUDGE_API_KEY so committed configs stay free of secrets.
    reject_unknown(j,
                   {"backend", "endpoint", "model", "temperature", "timeout_ms", "max_in_flight",
                    "attempts", "mock_response"},
                   where);
    read(j, "backend", c.judge.backend, where);
    read(j, "endpoint", c.judge.endpoint, where);
    read(j, "model", c.judge.model, where);
    if (j.contains("temperature")) {
      if (j["temperature"].is_null()) c.judge.temperature.reset();
      else {
        double t = 0;
        read(j, "temperature", t, where);
        c.judge.temperature = t;
      }
    }
    read(j, "timeout_ms", c.judge.timeout_ms, where);
    read(j, "max_in_flight", c.judge.max_in_flight, where);
    read(j, "attempts", c.judge.attempts, where);
    read(j, "mock_response", c.judge.mock_response, where);
  }
  validate(c);
  return c;
}

Config load_config_file(const fs::path& path, Config base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  json doc;
  try {
    doc = json::parse(ss.str());
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  try {
    return apply_config_json(std::move(base), doc);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void validate(const Config& c) {
  validate_config(c.diagnose);
  auto level = [](int v, const char* name) {
    if (v < 0 || v >= kFallbackLevels)
      throw ConfigError(std::string(name) + " must be within [0, " + std::to_string(kFallbackLevels - 1) + "]");
  };
  level(c.replay_max_level, "replay.max_level");
  level(c.validate_max_level, "replay.validate_max_level");
  if (c.judge.backend != "mock" && c.judge.backend != "http")
    throw ConfigError("judge.backend must be \"mock\" or \"http\"");
  if (c.judge.max_in_flight < 1) throw ConfigError("judge.max_in_flight must be at least 1");
  if (c.judge.attempts < 1) throw ConfigError("judge.attempts must be at least 1");
  if (c.judge.timeout_ms < 1) throw ConfigError("judge.timeout_ms must be positive");
  if (c.judge.temperature && (*c.judge.temperature < 0.0 || *c.judge.temperature > 2.0))
    throw ConfigError("judge.temperature must be within [0, 2]");
}

json config_to_json(const Config& c) {
  const auto& d = c.diagnose;
  return {
      {"data_root", c.data_root ? json(c.data_root->string()) : json(nullptr)},
      {"listen", {{"record", c.record_listen}, {"replay", c.replay_listen}, {"env", c.env_listen}}},
      {"replay", {{"max_level", c.replay_max_level}, {"validate_max_level", c.validate_max_level}}},
      {"diagnose",
       {{"match_threshold", d.match_threshold},
        {"min_evidence", d.min_evidence},
        {"accept_threshold", d.accept_threshold},
        {"weights", {{"path", d.weights.path}, {"query", d.weights.query}, {"body", d.weights.body}}},
        {"key_lexicon", d.key_lexicon},
        {"telemetry_lexicon", d.telemetry_lexicon}}},
      {"judge",
       {{"backend", c.judge.backend},
        {"endpoint", c.judge.endpoint},
        {"model", c.judge.model},
        {"temperature", c.judge.temperature ? json(*c.judge.temperature) : json(nullptr)},
        {"timeout_ms", c.judge.timeout_ms},
        {"max_in_flight", c.judge.max_in_flight},
        {"attempts", c.judge.attempts},
        {"mock_response", c.judge.mock_response}}},
  };
}

}  // namespace webreplay
