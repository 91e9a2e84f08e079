#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "webreplay/diagnose.hpp"
#include "webreplay/encoding.hpp"

namespace webreplay {

struct JudgeSettings {
  /// "mock" or "http".
  std::string backend = "mock";
  std::string endpoint;
  std::string model;
  std::string api_key;
  std::optional<double> temperature;
  int timeout_ms = 120000;
  std::size_t max_in_flight = 4;
  int attempts = 3;
  /// Fixed reply used by the mock backend.
  std::string mock_response = "correct";
};

struct Config {
  std::optional<std::filesystem::path> data_root;
  std::string record_listen = "127.0.0.1:8080";
  std::string replay_listen = "127.0.0.1:8081";
  std::string env_listen = "127.0.0.1:8090";
  /// Loosest fallback level for `replay` and `env serve`.
  int replay_max_level = kFallbackLevels - 1;
  /// Loosest level that still counts as a hit for `validate` and `diagnose`.
  int validate_max_level = 0;
  DiagnoseConfig diagnose;
  JudgeSettings judge;
};

/// Built-in defaults overlaid with WEBREPLAY_HOME, JUDGE_ENDPOINT,
/// JUDGE_MODEL and JUDGE_API_KEY.
Config default_config();

/// Overlays a JSON config document onto `base`. Unknown keys, wrong types
/// and out-of-range values throw ConfigError.
Config apply_config_json(Config base, const json& doc);
Config load_config_file(const std::filesystem::path& path, Config base);

/// Range checks shared by every source. Throws ConfigError.
void validate(const Config& config);

json config_to_json(const Config& config);

}  // namespace webreplay
