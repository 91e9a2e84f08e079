#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "webreplay/net/server.hpp"
#include "webreplay/replay.hpp"

namespace webreplay {

struct EnvManifest {
  std::string env_id;
  /// "cached" (root is an archive) or "synthetic" (root is a static site).
  std::string kind;
  std::filesystem::path root;
  std::string start_url;
  std::string capability_group;
  std::string category;
  std::string visual_style;
  std::optional<std::filesystem::path> rules_path;
};

struct TaskManifest {
  std::string task_id;
  std::string env_id;
  std::string instruction;
  std::string success_criteria;
  std::string difficulty = "medium";
  std::string split = "train";
  int max_steps = 30;

  bool operator==(const TaskManifest&) const = default;
};

struct Session {
  std::string session_id;
  std::string env_id;
  std::string task_id;
  std::string created_at;
  std::string state = "active";
  /// Bumped by every reset.
  int epoch = 0;
};

struct TaskFilter {
  std::optional<std::string> split;
  std::optional<std::string> env;
  std::optional<std::string> difficulty;
};

/// Data root for relative manifest paths: `explicit_root` if given, else
/// $WEBREPLAY_HOME, else `fallback`.
std::filesystem::path data_root(const std::optional<std::filesystem::path>& explicit_root,
                                const std::filesystem::path& fallback);

/// Parses an envs.json array. Relative roots and rules paths are resolved
/// against `root_dir`. Throws ParseError / SchemaError.
std::vector<EnvManifest> parse_envs(std::string_view text, const std::filesystem::path& root_dir);
/// Parses a tasks.json array. Throws ParseError / SchemaError.
std::vector<TaskManifest> parse_tasks(std::string_view text);

/// Reads the registries; relative paths resolve against data_root(root,
/// directory of envs_path).
std::vector<EnvManifest> load_envs(const std::filesystem::path& envs_path,
                                   const std::optional<std::filesystem::path>& root = std::nullopt);
std::vector<TaskManifest> load_tasks(const std::filesystem::path& tasks_path);

json env_to_json(const EnvManifest& env);
json task_to_json(const TaskManifest& task);
json session_to_json(const Session& session);

/// Matching tasks ordered by task_id.
std::vector<TaskManifest> list_tasks(const std::vector<TaskManifest>& tasks, const TaskFilter& filter);

/// Media type for a file name, by extension.
std::string mime_type(const std::filesystem::path& path);

struct EnvServerOptions {
  /// Rewrite absolute origin URLs in cached HTML/CSS to mapped routes.
  bool rewrite_links = false;
  /// Fallback ladder depth for cached environments.
  int max_level = kFallbackLevels - 1;
};

/// Serves mounted environments under /env/<id>/ and the session/task API
/// under /api/. Cached environments are also reachable in proxy mode
/// (absolute-form requests), routed by session header or origin host.
class EnvServer {
 public:
  EnvServer(std::vector<TaskManifest> tasks, EnvServerOptions options = {});
  ~EnvServer();

  /// Throws MountError (missing root, duplicate id, unresolvable start_url)
  /// or CorruptArchive for a cached root.
  void mount(const EnvManifest& env);

  /// Empty env_id takes the task's environment. Throws UnknownEnv /
  /// UnknownTask.
  Session create_session(const std::string& env_id, const std::string& task_id);
  /// Fresh replay cursors for the session. Throws UnknownSession.
  Session reset_session(const std::string& session_id);
  /// Throws UnknownSession.
  void close_session(const std::string& session_id);
  std::optional<Session> session(const std::string& session_id) const;

  std::vector<TaskManifest> tasks(const TaskFilter& filter) const;
  std::vector<EnvManifest> envs() const;

  /// Route under this server where `env`'s start_url is served.
  std::string mapped_start_url(const std::string& env_id) const;

  net::HttpResponse handle(const net::HttpRequest& req, const net::ConnectionInfo& info);

  void start(const net::Endpoint& listen);
  void stop();
  int port() const { return server_.port(); }

 private:
  struct Mounted {
    EnvManifest manifest;
    std::shared_ptr<Replayer> replayer;
    /// host[:port] -> scheme seen in the recording.
    std::map<std::string, std::string> origins;
  };

  net::HttpResponse handle_api(const net::HttpRequest& req, std::string_view path,
                               std::string_view query);
  net::HttpResponse serve_env(const Mounted& env, std::string_view rest, std::string_view query,
                              const net::HttpRequest& req);
  net::HttpResponse serve_static(const Mounted& env, std::string_view rel_path);
  net::HttpResponse serve_cached(const Mounted& env, RawRequest raw, const std::string& session);
  net::HttpResponse serve_proxy(const net::HttpRequest& req, const net::ConnectionInfo& info);
  /// Checks an x-webreplay-session header against the session table.
  std::optional<std::string> session_for(const net::HttpRequest& req, const std::string& env_id,
                                         net::HttpResponse& error) const;
  void rewrite_links(const Mounted& env, net::HttpResponse& resp) const;

  std::vector<TaskManifest> tasks_;
  EnvServerOptions options_;
  std::map<std::string, Mounted> envs_;
  mutable std::mutex sessions_mutex_;
  std::map<std::string, Session> sessions_;
  net::HttpServer server_;
};

}  // namespace webreplay
