#include "webreplay/envserve.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "webreplay/encoding.hpp"
#include "webreplay/error.hpp"

namespace webreplay {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kEnvKeys = {"env_id",      "kind",          "root",
                                        "start_url",   "capability_group", "category",
                                        "visual_style", "rules_path"};
const std::set<std::string> kTaskKeys = {"task_id",    "env_id", "instruction", "success_criteria",
                                         "difficulty", "split",  "max_steps"};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_array(std::string_view text, const char* what) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string(what) + ": " + e.what());
  }
  if (!doc.is_array()) throw SchemaError(std::string(what) + ": $: expected an array");
  return doc;
}

std::string str_field(const json& obj, const std::string& where, const char* key, bool required,
                      std::string fallback = {}) {
  if (!obj.contains(key)) {
    if (required) throw SchemaError(where + "." + key + ": missing");
    return fallback;
  }
  if (!obj.at(key).is_string()) throw SchemaError(where + "." + key + ": expected string");
  return obj.at(key).get<std::string>();
}

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [k, _] : obj.items())
    if (!allowed.count(k)) throw SchemaError(where + "." + k + ": unknown key");
}

bool valid_id(std::string_view id) {
  return !id.empty() && std::all_of(id.begin(), id.end(), [](unsigned char c) {
    return std::isalnum(c) || c == '-' || c == '_' || c == '.';
  }) && id != "." && id != "..";
}

std::string random_session_id() {
  static std::mutex mu;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(mu);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(rng()));
  return buf;
}

std::string authority_of(const std::string& scheme, const std::string& host, int port) {
  return port == default_port(scheme) ? host : host + ":" + std::to_string(port);
}

net::HttpResponse json_response(int status, const json& body) {
  net::HttpResponse resp;
  resp.status = status;
  resp.headers.emplace_back("Content-Type", "application/json");
  resp.body = body.dump() + "\n";
  return resp;
}

net::HttpResponse error_response(int status, const std::string& message) {
  return json_response(status, {{"error", message}});
}

/// Path and query of a start_url that may be absolute or a bare path.
std::string path_and_query(const std::string& url) {
  if (auto parsed = parse_url(url)) return parsed->path + (parsed->query.empty() ? "" : "?" + parsed->query);
  if (url.empty()) return "/";
  return url.front() == '/' ? url : "/" + url;
}

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  if (from.empty()) return;
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
    s.replace(pos, from.size(), to);
}

}  // namespace

fs::path data_root(const std::optional<fs::path>& explicit_root, const fs::path& fallback) {
  if (explicit_root) return *explicit_root;
  if (const char* home = std::getenv("WEBREPLAY_HOME"); home && *home) return home;
  return fallback;
}

std::vector<EnvManifest> parse_envs(std::string_view text, const fs::path& root_dir) {
  const json doc = parse_array(text, "envs");
  std::vector<EnvManifest> out;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& e = doc[i];
    const std::string where = "$[" + std::to_string(i) + "]";
    if (!e.is_object()) throw SchemaError(where + ": expected object");
    reject_unknown(e, kEnvKeys, where);
    EnvManifest env;
    env.env_id = str_field(e, where, "env_id", true);
    if (!valid_id(env.env_id)) throw SchemaError(where + ".env_id: must match [A-Za-z0-9._-]+");
    if (!seen.insert(env.env_id).second) throw SchemaError(where + ".env_id: duplicate '" + env.env_id + "'");
    env.kind = str_field(e, where, "kind", true);
    if (env.kind != "cached" && env.kind != "synthetic")
      throw SchemaError(where + ".kind: expected \"cached\" or \"synthetic\"");
    env.root = str_field(e, where, "root", true);
    if (env.root.is_relative()) env.root = root_dir / env.root;
    env.start_url = str_field(e, where, "start_url", true);
    env.capability_group = str_field(e, where, "capability_group", false);
    env.category = str_field(e, where, "category", false);
    env.visual_style = str_field(e, where, "visual_style", false);
    if (e.contains("rules_path") && !e.at("rules_path").is_null()) {
      fs::path rp = str_field(e, where, "rules_path", true);
      env.rules_path = rp.is_relative() ? root_dir / rp : rp;
    }
    out.push_back(std::move(env));
  }
  return out;
}

std::vector<TaskManifest> parse_tasks(std::string_view text) {
  const json doc = parse_array(text, "tasks");
  std::vector<TaskManifest> out;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& t = doc[i];
    const std::string where = "$[" + std::to_string(i) + "]";
    if (!t.is_object()) throw SchemaError(where + ": expected object");
    reject_unknown(t, kTaskKeys, where);
    TaskManifest task;
    task.task_id = str_field(t, where, "task_id", true);
    if (task.task_id.empty()) throw SchemaError(where + ".task_id: empty");
    if (!seen.insert(task.task_id).second)
      throw SchemaError(where + ".task_id: duplicate '" + task.task_id + "'");
    task.env_id = str_field(t, where, "env_id", true);
    task.instruction = str_field(t, where, "instruction", true);
    if (trim(task.instruction).empty()) throw SchemaError(where + ".instruction: empty");
    task.success_criteria = str_field(t, where, "success_criteria", false);
    task.difficulty = str_field(t, where, "difficulty", false, "medium");
    if (task.difficulty != "easy" && task.difficulty != "medium" && task.difficulty != "hard")
      throw SchemaError(where + ".difficulty: expected easy, medium or hard");
    task.split = str_field(t, where, "split", false, "train");
    if (task.split != "train" && task.split != "val")
      throw SchemaError(where + ".split: expected train or val");
    if (t.contains("max_steps")) {
      if (!t.at("max_steps").is_number_integer() || t.at("max_steps").get<int>() < 1)
        throw SchemaError(where + ".max_steps: expected a positive integer");
      task.max_steps = t.at("max_steps").get<int>();
    }
    out.push_back(std::move(task));
  }
  return out;
}

std::vector<EnvManifest> load_envs(const fs::path& envs_path, const std::optional<fs::path>& root) {
  const auto base = data_root(root, fs::absolute(envs_path).parent_path());
  try {
    return parse_envs(read_text(envs_path), base);
  } catch (const SchemaError& e) {
    throw SchemaError(envs_path.string() + ": " + e.what());
  }
}

std::vector<TaskManifest> load_tasks(const fs::path& tasks_path) {
  try {
    return parse_tasks(read_text(tasks_path));
  } catch (const SchemaError& e) {
    throw SchemaError(tasks_path.string() + ": " + e.what());
  }
}

json env_to_json(const EnvManifest& env) {
  json j{{"env_id", env.env_id},
         {"kind", env.kind},
         {"root", env.root.string()},
         {"start_url", env.start_url},
         {"capability_group", env.capability_group},
         {"category", env.category},
         {"visual_style", env.visual_style}};
  if (env.rules_path) j["rules_path"] = env.rules_path->string();
  return j;
}

json task_to_json(const TaskManifest& t) {
  return {{"task_id", t.task_id},       {"env_id", t.env_id},   {"instruction", t.instruction},
          {"success_criteria", t.success_criteria}, {"difficulty", t.difficulty},
          {"split", t.split},           {"max_steps", t.max_steps}};
}

json session_to_json(const Session& s) {
  return {{"session_id", s.session_id}, {"env_id", s.env_id}, {"task_id", s.task_id},
          {"created_at", s.created_at}, {"state", s.state},   {"epoch", s.epoch}};
}

std::vector<TaskManifest> list_tasks(const std::vector<TaskManifest>& tasks, const TaskFilter& f) {
  std::vector<TaskManifest> out;
  for (const auto& t : tasks) {
    if (f.split && t.split != *f.split) continue;
    if (f.env && t.env_id != *f.env) continue;
    if (f.difficulty && t.difficulty != *f.difficulty) continue;
    out.push_back(t);
  }
  std::sort(out.begin(), out.end(),
            [](const TaskManifest& a, const TaskManifest& b) { return a.task_id < b.task_id; });
  return out;
}

std::string mime_type(const fs::path& path) {
  static const std::map<std::string, std::string> kTypes = {
      {".html", "text/html; charset=utf-8"}, {".htm", "text/html; charset=utf-8"},
      {".css", "text/css; charset=utf-8"},   {".js", "text/javascript; charset=utf-8"},
      {".mjs", "text/javascript; charset=utf-8"}, {".json", "application/json"},
      {".png", "image/png"},                 {".jpg", "image/jpeg"},
      {".jpeg", "image/jpeg"},               {".gif", "image/gif"},
      {".svg", "image/svg+xml"},             {".ico", "image/x-icon"},
      {".webp", "image/webp"},               {".woff", "font/woff"},
      {".woff2", "font/woff2"},              {".ttf", "font/ttf"},
      {".txt", "text/plain; charset=utf-8"}, {".xml", "application/xml"},
      {".wasm", "application/wasm"},         {".map", "application/json"}};
  auto it = kTypes.find(to_lower(path.extension().string()));
  return it == kTypes.end() ? "application/octet-stream" : it->second;
}

EnvServer::EnvServer(std::vector<TaskManifest> tasks, EnvServerOptions options)
    : tasks_(std::move(tasks)),
      options_(options),
      server_([this](const net::HttpRequest& req, const net::ConnectionInfo& info) {
        return handle(req, info);
      }) {}

EnvServer::~EnvServer() { stop(); }

void EnvServer::mount(const EnvManifest& env) {
  if (!valid_id(env.env_id)) throw MountError("invalid env_id '" + env.env_id + "'");
  if (envs_.count(env.env_id)) throw MountError("duplicate env_id '" + env.env_id + "'");
  if (!fs::is_directory(env.root))
    throw MountError("env " + env.env_id + ": root " + env.root.string() + " is not a directory");

  Mounted m;
  m.manifest = env;
  if (env.kind == "cached") {
    std::vector<RuleSet> rules;
    if (env.rules_path) rules = load_rules_file(env.rules_path->string());
    auto archive = open_archive(env.root);
    for (const auto& ex : archive.exchanges)
      m.origins.emplace(authority_of(ex.request.scheme, ex.request.host, ex.request.port),
                        ex.request.scheme);
    const auto start = parse_url(env.start_url);
    if (!start || !m.origins.count(authority_of(start->scheme, start->host, start->port)))
      throw MountError("env " + env.env_id + ": start_url " + env.start_url +
                       " is not an origin recorded in the archive");
    ReplayOptions ro;
    ro.max_level = options_.max_level;
    ro.isolation = true;
    std::vector<Archive> archives;
    archives.push_back(std::move(archive));
    m.replayer = std::make_shared<Replayer>(std::move(archives), std::move(rules), ro);
  } else if (env.kind == "synthetic") {
    auto rel = path_and_query(env.start_url);
    rel = percent_decode(rel.substr(1, rel.find('?') - 1));
    fs::path file = env.root / rel;
    if (fs::is_directory(file)) file /= "index.html";
    if (!fs::is_regular_file(file))
      throw MountError("env " + env.env_id + ": start_url " + env.start_url + " not found under root");
  } else {
    throw MountError("env " + env.env_id + ": unknown kind '" + env.kind + "'");
  }
  envs_.emplace(env.env_id, std::move(m));
}

std::string EnvServer::mapped_start_url(const std::string& env_id) const {
  auto it = envs_.find(env_id);
  if (it == envs_.end()) throw UnknownEnv("unknown env '" + env_id + "'");
  const auto& env = it->second.manifest;
  if (env.kind == "cached") {
    const auto u = parse_url(env.start_url);
    return "/env/" + env.env_id + "/__origin__/" + authority_of(u->scheme, u->host, u->port) +
           path_and_query(env.start_url);
  }
  return "/env/" + env.env_id + path_and_query(env.start_url);
}

Session EnvServer::create_session(const std::string& env_id_in, const std::string& task_id) {
  std::string env_id = env_id_in;
  if (!task_id.empty()) {
    auto t = std::find_if(tasks_.begin(), tasks_.end(),
                          [&](const TaskManifest& m) { return m.task_id == task_id; });
    if (t == tasks_.end()) throw UnknownTask("unknown task '" + task_id + "'");
    if (env_id.empty()) env_id = t->env_id;
    if (t->env_id != env_id)
      throw UnknownTask("task '" + task_id + "' belongs to env '" + t->env_id + "', not '" + env_id + "'");
  }
  if (!envs_.count(env_id)) throw UnknownEnv("unknown env '" + env_id + "'");

  Session s;
  s.env_id = env_id;
  s.task_id = task_id;
  s.created_at = iso8601_now();
  std::lock_guard lock(sessions_mutex_);
  do {
    s.session_id = random_session_id();
  } while (sessions_.count(s.session_id));
  sessions_.emplace(s.session_id, s);
  return s;
}

Session EnvServer::reset_session(const std::string& session_id) {
  std::lock_guard lock(sessions_mutex_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end() || it->second.state != "active")
    throw UnknownSession("unknown session '" + session_id + "'");
  const auto& env = envs_.at(it->second.env_id);
  if (env.replayer) env.replayer->reset_session(session_id);
  ++it->second.epoch;
  return it->second;
}

void EnvServer::close_session(const std::string& session_id) {
  std::lock_guard lock(sessions_mutex_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end() || it->second.state != "active")
    throw UnknownSession("unknown session '" + session_id + "'");
  const auto& env = envs_.at(it->second.env_id);
  if (env.replayer) env.replayer->drop_session(session_id);
  it->second.state = "closed";
}

std::optional<Session> EnvServer::session(const std::string& session_id) const {
  std::lock_guard lock(sessions_mutex_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) return std::nullopt;
  return it->second;
}

std::vector<TaskManifest> EnvServer::tasks(const TaskFilter& filter) const {
  return list_tasks(tasks_, filter);
}

std::vector<EnvManifest> EnvServer::envs() const {
  std::vector<EnvManifest> out;
  for (const auto& [_, m] : envs_) out.push_back(m.manifest);
  return out;
}

void EnvServer::start(const net::Endpoint& listen) {
  server_.listen(listen);
  server_.start();
  spdlog::info("serving {} environments on {}:{}", envs_.size(), server_.host(), server_.port());
}

void EnvServer::stop() { server_.stop(); }

net::HttpResponse EnvServer::handle(const net::HttpRequest& req, const net::ConnectionInfo& info) {
  if (starts_with_icase(req.target, "http://") || starts_with_icase(req.target, "https://"))
    return serve_proxy(req, info);

  const std::string_view target = req.target;
  const auto q = target.find('?');
  const std::string_view path = target.substr(0, q);
  const std::string_view query = q == std::string_view::npos ? "" : target.substr(q + 1);

  try {
    if (path.rfind("/api/", 0) == 0) return handle_api(req, path, query);
    if (path.rfind("/env/", 0) == 0) {
      const auto rest = path.substr(5);
      const auto slash = rest.find('/');
      const std::string id(rest.substr(0, slash));
      auto it = envs_.find(id);
      if (it == envs_.end()) return error_response(404, "unknown env '" + id + "'");
      if (slash == std::string_view::npos) {
        net::HttpResponse resp;
        resp.status = 302;
        resp.headers.emplace_back("Location", "/env/" + id + "/");
        return resp;
      }
      return serve_env(it->second, rest.substr(slash + 1), query, req);
    }
  } catch (const MalformedRequest& e) {
    return error_response(400, e.what());
  }
  return error_response(404, "not found");
}

net::HttpResponse EnvServer::handle_api(const net::HttpRequest& req, std::string_view path,
                                        std::string_view query) {
  try {
    if (path == "/api/tasks") {
      if (req.method != "GET") return error_response(405, "use GET");
      TaskFilter filter;
      for (const auto& [k, v] : parse_query(query)) {
        if (k == "split") filter.split = v;
        else if (k == "env" || k == "env_id") filter.env = v;
        else if (k == "difficulty") filter.difficulty = v;
      }
      json out = json::array();
      for (const auto& t : tasks(filter)) out.push_back(task_to_json(t));
      return json_response(200, out);
    }
    if (path == "/api/envs") {
      json out = json::array();
      for (const auto& e : envs()) out.push_back(env_to_json(e));
      return json_response(200, out);
    }
    if (path == "/api/session") {
      if (req.method != "POST") return error_response(405, "use POST");
      json body = req.body.empty() ? json::object() : json::parse(req.body);
      if (!body.is_object()) return error_response(400, "expected a JSON object");
      const auto s = create_session(body.value("env_id", ""), body.value("task_id", ""));
      auto out = session_to_json(s);
      out["start_url"] = envs_.at(s.env_id).manifest.start_url;
      out["mapped_url"] = mapped_start_url(s.env_id);
      return json_response(201, out);
    }
    const std::string_view prefix = "/api/session/";
    if (path.rfind(prefix, 0) == 0) {
      auto rest = path.substr(prefix.size());
      const auto slash = rest.find('/');
      const std::string id(rest.substr(0, slash));
      const auto action = slash == std::string_view::npos ? std::string_view{} : rest.substr(slash + 1);
      if (action == "reset" && req.method == "POST") {
        const auto s = reset_session(id);
        auto out = session_to_json(s);
        out["start_url"] = envs_.at(s.env_id).manifest.start_url;
        out["mapped_url"] = mapped_start_url(s.env_id);
        return json_response(200, out);
      }
      if (action.empty() && req.method == "DELETE") {
        close_session(id);
        return json_response(200, {{"session_id", id}, {"state", "closed"}});
      }
      if (action.empty() && req.method == "GET") {
        auto s = session(id);
        if (!s) throw UnknownSession("unknown session '" + id + "'");
        return json_response(200, session_to_json(*s));
      }
      return error_response(405, "unsupported method for " + std::string(path));
    }
  } catch (const UnknownEnv& e) {
    return error_response(404, e.what());
  } catch (const UnknownTask& e) {
    return error_response(404, e.what());
  } catch (const UnknownSession& e) {
    return error_response(404, e.what());
  } catch (const json::exception& e) {
    return error_response(400, std::string("bad JSON: ") + e.what());
  }
  return error_response(404, "not found");
}

std::optional<std::string> EnvServer::session_for(const net::HttpRequest& req,
                                                  const std::string& env_id,
                                                  net::HttpResponse& error) const {
  const auto header = req.header(kSessionHeader);
  if (!header) return std::string(kDefaultSession);
  const std::string id(trim(*header));
  auto s = session(id);
  if (!s || s->state != "active" || s->env_id != env_id) {
    error = error_response(404, "unknown session '" + id + "' for env '" + env_id + "'");
    return std::nullopt;
  }
  return id;
}

net::HttpResponse EnvServer::serve_env(const Mounted& env, std::string_view rest,
                                       std::string_view query, const net::HttpRequest& req) {
  net::HttpResponse error;
  auto session = session_for(req, env.manifest.env_id, error);
  if (!session) return error;

  if (!env.replayer) {
    if (req.method != "GET" && req.method != "HEAD") return error_response(405, "static site");
    return serve_static(env, rest);
  }

  RawRequest raw;
  std::string authority;
  std::string path;
  const std::string_view origin_prefix = "__origin__/";
  if (rest.rfind(origin_prefix, 0) == 0) {
    rest.remove_prefix(origin_prefix.size());
    const auto slash = rest.find('/');
    authority = std::string(rest.substr(0, slash));
    path = slash == std::string_view::npos ? "/" : std::string(rest.substr(slash));
  } else if (rest.empty()) {
    net::HttpResponse resp;
    resp.status = 302;
    resp.headers.emplace_back("Location", mapped_start_url(env.manifest.env_id));
    return resp;
  } else {
    const auto u = parse_url(env.manifest.start_url);
    authority = authority_of(u->scheme, u->host, u->port);
    path = "/" + std::string(rest);
  }
  auto scheme_it = env.origins.find(authority);
  const std::string scheme = scheme_it == env.origins.end() ? "http" : scheme_it->second;
  const auto origin = parse_url(scheme + "://" + authority + "/");
  if (!origin) return error_response(400, "bad origin '" + authority + "'");

  raw.method = req.method;
  raw.scheme = scheme;
  raw.host = origin->host;
  raw.port = origin->port;
  raw.path = path;
  raw.query = parse_query(query);
  for (const auto& [k, v] : req.headers)
    if (!iequals(k, "host")) raw.headers.emplace_back(to_lower(k), v);
  raw.body = req.body;
  if (auto ct = req.header("content-type")) raw.body_content_type = media_type(*ct);
  return serve_cached(env, std::move(raw), *session);
}

net::HttpResponse EnvServer::serve_static(const Mounted& env, std::string_view rel_path) {
  const std::string decoded = percent_decode(rel_path);
  fs::path file = env.manifest.root;
  for (const auto& seg : split(decoded, '/')) {
    if (seg.empty() || seg == ".") continue;
    if (seg == ".." || seg.find('\\') != std::string::npos || seg.find('\0') != std::string::npos)
      return error_response(403, "path escapes the environment root");
    file /= seg;
  }
  std::error_code ec;
  if (fs::is_directory(file, ec)) file /= "index.html";
  const auto root = fs::weakly_canonical(env.manifest.root, ec);
  const auto real = fs::weakly_canonical(file, ec);
  const auto rel = real.lexically_relative(root);
  if (rel.empty() || *rel.begin() == "..") return error_response(403, "path escapes the environment root");
  if (!fs::is_regular_file(real, ec)) return error_response(404, "no such file");

  std::ifstream in(real, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  net::HttpResponse resp;
  resp.headers.emplace_back("Content-Type", mime_type(real));
  resp.headers.emplace_back("Cache-Control", "no-store");
  resp.body = ss.str();
  return resp;
}

net::HttpResponse EnvServer::serve_cached(const Mounted& env, RawRequest raw, const std::string& session) {
  auto resp = env.replayer->serve(raw, session);
  if (options_.rewrite_links) rewrite_links(env, resp);
  return resp;
}

void EnvServer::rewrite_links(const Mounted& env, net::HttpResponse& resp) const {
  const auto ct = resp.header("content-type");
  if (!ct) return;
  const auto type = media_type(*ct);
  if (type != "text/html" && type != "text/css") return;
  for (const auto& [authority, scheme] : env.origins)
    replace_all(resp.body, scheme + "://" + authority,
                "/env/" + env.manifest.env_id + "/__origin__/" + authority);
}

net::HttpResponse EnvServer::serve_proxy(const net::HttpRequest& req, const net::ConnectionInfo& info) {
  RawRequest raw;
  try {
    raw = net::to_raw_request(req, info.scheme, info.tunnel_authority);
  } catch (const Error& e) {
    return error_response(400, e.what());
  }
  const auto authority = authority_of(raw.scheme, raw.host, raw.port);

  if (auto header = req.header(kSessionHeader)) {
    const auto s = session(std::string(trim(*header)));
    if (!s || s->state != "active") return error_response(404, "unknown session '" + *header + "'");
    const auto& env = envs_.at(s->env_id);
    if (!env.replayer) return serve_static(env, raw.path);
    return serve_cached(env, std::move(raw), s->session_id);
  }
  for (const auto& [_, env] : envs_)
    if (env.replayer && env.origins.count(authority))
      return serve_cached(env, std::move(raw), std::string(kDefaultSession));
  return miss_response();
}

}  // namespace webreplay
