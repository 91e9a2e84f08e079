#include "webreplay/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "webreplay/config.hpp"
#include "webreplay/diagnose.hpp"
#include "webreplay/envserve.hpp"
#include "webreplay/error.hpp"
#include "webreplay/eval/judge.hpp"
#include "webreplay/eval/scoring.hpp"
#include "webreplay/net/proxy.hpp"
#include "webreplay/net/upstream.hpp"
#include "webreplay/recorder.hpp"
#include "webreplay/replay.hpp"

namespace webreplay {

namespace fs = std::filesystem;

namespace {

struct Flags {
  std::string config_path;
  std::string log_level = "info";
  bool json = false;

  // Network.
  std::optional<std::string> listen;
  std::string upstream = "direct";
  std::vector<std::string> map_host;
  bool insecure = false;
  std::string ca_file;
  std::string ca;

  // Inputs and outputs.
  std::string out;
  std::vector<std::string> archives;
  std::string rules;
  std::string base_rules;
  std::string miss_log;
  std::string reports;
  std::string proposals_out;
  std::string trace;
  std::string envs;
  std::string tasks;
  std::string trajectories;
  std::string results;
  std::string common_name = "webreplay local CA";
  std::vector<int> ks;

  // Overrides of config values.
  std::optional<std::string> data_root;
  std::optional<int> max_level;
  bool isolation = false;
  bool rewrite_links = false;
  std::optional<double> match_threshold;
  std::optional<double> accept_threshold;
  std::optional<std::size_t> min_evidence;
  std::optional<std::string> backend;
  std::optional<std::string> mock_response;
  std::optional<std::size_t> max_in_flight;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WriteError("cannot write " + path.string());
  out << text;
  out.flush();
  if (!out) throw WriteError("cannot write " + path.string());
}

net::UpstreamOptions upstream_options(const Flags& f) {
  net::UpstreamOptions u;
  u.proxy = net::parse_upstream_mode(f.upstream);
  u.verify_tls = !f.insecure;
  u.ca_file = f.ca_file;
  for (const auto& m : f.map_host) {
    const auto eq = m.find('=');
    if (eq == std::string::npos || eq == 0)
      throw UsageError("--map-host expects host=ip:port, got \"" + m + "\"");
    u.host_map[to_lower(m.substr(0, eq))] = net::Endpoint::parse(m.substr(eq + 1));
  }
  return u;
}

std::vector<RuleSet> rules_or_empty(const std::string& path) {
  if (path.empty()) return {};
  return load_rules_file(path);
}

std::vector<Archive> open_archives(const std::vector<std::string>& dirs) {
  std::vector<Archive> out;
  for (const auto& d : dirs) out.push_back(open_archive(d));
  return out;
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

int cmd_record(const Flags& f, const Config& c) {
  RecordOptions o;
  o.listen = net::Endpoint::parse(f.listen.value_or(c.record_listen));
  o.out = f.out;
  o.upstream = upstream_options(f);
  if (!f.ca.empty()) o.ca_path = f.ca;
  Recorder recorder(std::move(o));
  recorder.start();
  net::wait_for_termination();
  recorder.stop();
  spdlog::info("recorded {} exchanges", recorder.exchange_count());
  return 0;
}

int cmd_replay(const Flags& f, const Config& c) {
  ReplayOptions o;
  o.max_level = f.max_level.value_or(c.replay_max_level);
  o.isolation = f.isolation;
  o.weights = c.diagnose.weights;
  if (!f.isolation) o.upstream = upstream_options(f);
  if (!f.miss_log.empty()) o.miss_log = f.miss_log;
  auto replayer = std::make_shared<Replayer>(open_archives(f.archives), rules_or_empty(f.rules), o);
  std::optional<net::CertificateAuthority> ca;
  if (!f.ca.empty()) ca.emplace(net::CertificateAuthority::load(f.ca));
  ReplayServer server(replayer, std::move(ca));
  const auto listen = net::Endpoint::parse(f.listen.value_or(c.replay_listen));
  server.start(listen);
  spdlog::info("replaying {} archive(s) on {}:{} (isolation {}, max level L{})", f.archives.size(),
               listen.host, server.port(), f.isolation ? "on" : "off", o.max_level);
  net::wait_for_termination();
  server.stop();
  spdlog::info("{} misses", replayer->misses().size());
  return 0;
}

int cmd_diagnose(const Flags& f, const Config& c) {
  const Archive archive = open_archive(f.archives.at(0));
  const auto misses = load_miss_log(f.miss_log);
  const auto rules = rules_or_empty(f.rules);
  const auto reports = diagnose(misses, archive, rules, c.diagnose);
  const std::string doc = reports_document(reports, archive.dir.string());
  write_text(f.out, doc);
  if (f.json) {
    std::cout << doc << "\n";
  } else {
    const auto matched = std::count_if(reports.begin(), reports.end(),
                                       [](const MissReport& r) { return r.matched_seq.has_value(); });
    std::cerr << reports.size() << " miss report(s), " << matched << " matched a recorded exchange -> "
              << f.out << "\n";
  }
  return 0;
}

int cmd_rules_synth(const Flags& f, const Config& c) {
  const auto reports = load_reports(f.reports);
  const Archive archive = f.archives.empty() ? Archive{} : open_archive(f.archives.at(0));
  const auto proposals = synthesize_rules(reports, archive, c.diagnose);
  const auto rules = apply_proposals(rules_or_empty(f.base_rules), proposals, c.diagnose.accept_threshold);
  write_text(f.out, save_rules(rules));
  json pj = json::array();
  for (const auto& p : proposals) pj.push_back(proposal_to_json(p));
  if (!f.proposals_out.empty()) write_text(f.proposals_out, pj.dump(2) + "\n");
  if (f.json) {
    json rj = json::array();
    for (const auto& r : rules) rj.push_back(ruleset_to_json(r));
    print_json({{"proposals", pj}, {"rules", rj}});
  } else {
    for (const auto& p : proposals)
      std::cerr << (p.confidence >= c.diagnose.accept_threshold ? "accept " : "reject ") << p.scope_host << " "
                << to_string(p.kind) << " " << p.pattern << " evidence=" << p.evidence_count
                << " confidence=" << p.confidence << "\n";
    std::cerr << proposals.size() << " proposal(s) -> " << f.out << "\n";
  }
  return 0;
}

int cmd_validate(const Flags& f, const Config& c) {
  const Archive archive = open_archive(f.archives.at(0));
  const auto report = validate_rules(archive, rules_or_empty(f.rules), load_trace(f.trace),
                                     f.max_level.value_or(c.validate_max_level));
  if (f.json) {
    print_json(validation_to_json(report));
  } else {
    std::cerr << report.requests << " requests, " << report.hits << " hits, " << report.synthetic_hits
              << " synthetic, " << report.essential_misses << " essential misses: "
              << (report.pass ? "PASS" : "FAIL") << "\n";
    for (const auto& m : report.misses)
      std::cerr << "  miss " << m.request.method << " " << m.request.scheme << "://" << m.request.host
                << m.request.path << "\n";
  }
  return report.pass ? 0 : 1;
}

int cmd_env_serve(const Flags& f, const Config& c) {
  std::optional<fs::path> root;
  if (f.data_root) root = *f.data_root;
  else if (c.data_root) root = *c.data_root;
  const auto envs = load_envs(f.envs, root);
  EnvServerOptions o;
  o.rewrite_links = f.rewrite_links;
  o.max_level = f.max_level.value_or(c.replay_max_level);
  EnvServer server(load_tasks(f.tasks), o);
  for (const auto& env : envs) server.mount(env);
  const auto listen = net::Endpoint::parse(f.listen.value_or(c.env_listen));
  server.start(listen);
  spdlog::info("serving {} environment(s) on {}:{}", envs.size(), listen.host, server.port());
  net::wait_for_termination();
  server.stop();
  return 0;
}

std::unique_ptr<eval::JudgeBackend> make_backend(const JudgeSettings& s) {
  if (s.backend == "mock") return std::make_unique<eval::ScriptedJudge>(std::vector<std::optional<std::string>>{s.mock_response});
  eval::HttpJudgeConfig hc;
  hc.endpoint = s.endpoint;
  hc.model = s.model;
  hc.api_key = s.api_key;
  hc.temperature = s.temperature;
  hc.timeout_ms = s.timeout_ms;
  if (hc.endpoint.empty() || hc.model.empty())
    throw ConfigError("the http judge needs JUDGE_ENDPOINT and JUDGE_MODEL (or judge.endpoint / judge.model)");
  return std::make_unique<eval::HttpJudge>(hc);
}

int cmd_eval_judge(const Flags& f, const Config& c) {
  std::map<std::string, TaskManifest> tasks;
  for (auto& t : load_tasks(f.tasks)) tasks.emplace(t.task_id, t);

  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(f.trajectories))
    if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw UsageError("no .jsonl trajectories in " + f.trajectories);

  std::vector<eval::Trajectory> trajs;
  trajs.reserve(files.size());
  for (const auto& p : files) {
    trajs.push_back(eval::load_trajectory(p));
    if (!tasks.count(trajs.back().task_id))
      throw UnknownTask(p.filename().string() + ": task " + trajs.back().task_id + " not in " + f.tasks);
  }
  std::vector<eval::JudgeJob> jobs;
  for (std::size_t i = 0; i < trajs.size(); ++i)
    jobs.push_back({&tasks.at(trajs[i].task_id), &trajs[i], files[i].parent_path()});

  auto backend = make_backend(c.judge);
  const auto outcomes = eval::judge_all(jobs, *backend, c.judge.max_in_flight);

  json verdicts = json::array();
  // Attempts per task in file order; website failures and judge errors are
  // discarded rather than counted as failures.
  std::map<std::string, eval::TaskAttempts> attempts;
  std::vector<std::string> task_order;
  bool any_error = false;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& o = outcomes[i];
    json v = {{"trajectory", files[i].filename().string()}, {"task_id", trajs[i].task_id}};
    if (o.verdict) {
      v["label"] = eval::to_string(o.verdict->label);
      v["reward"] = o.verdict->reward ? json(*o.verdict->reward) : json(nullptr);
      v["rationale"] = o.verdict->rationale;
      if (o.verdict->reward) {
        auto [it, fresh] = attempts.try_emplace(trajs[i].task_id);
        if (fresh) {
          task_order.push_back(trajs[i].task_id);
          it->second.task_id = trajs[i].task_id;
          it->second.step_budget = trajs[i].step_budget;
        }
        it->second.attempts.push_back(*o.verdict->reward == 1.0);
      }
    } else {
      any_error = true;
      v["error"] = o.error;
    }
    verdicts.push_back(v);
  }

  if (!f.out.empty()) {
    const fs::path out = f.out;
    fs::create_directories(out);
    std::string lines;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
      if (!outcomes[i].verdict) continue;
      eval::Trajectory annotated = trajs[i];
      annotated.verdict = outcomes[i].verdict;
      write_text(out / files[i].filename(), eval::trajectory_to_jsonl(annotated));
    }
    for (const auto& v : verdicts) lines += v.dump() + "\n";
    write_text(out / "verdicts.jsonl", lines);
    std::string results;
    for (const auto& id : task_order) {
      const auto& a = attempts.at(id);
      results += json{{"task_id", id}, {"attempts", a.attempts}, {"seed", a.seed}, {"step_budget", a.step_budget}}
                     .dump() +
                 "\n";
    }
    write_text(out / "results.jsonl", results);
  }

  if (f.json) {
    print_json(verdicts);
  } else {
    for (const auto& v : verdicts)
      std::cerr << v["trajectory"].get<std::string>() << ": "
                << (v.contains("label") ? v["label"].get<std::string>() : "error: " + v["error"].get<std::string>())
                << "\n";
  }
  return any_error ? 1 : 0;
}

int cmd_eval_passk(const Flags& f, const Config&) {
  const auto results = eval::load_results(f.results);
  std::vector<eval::PassAtKSummary> summaries;
  for (int k : f.ks) summaries.push_back(eval::summarize_pass_at_k(results, k));
  if (f.json) {
    json arr = json::array();
    for (const auto& s : summaries) arr.push_back(eval::summary_to_json(s));
    print_json(arr);
  } else {
    for (const auto& s : summaries) {
      std::cout << "pass@" << s.k << " = " << s.mean;
      if (s.seed_means.size() > 1) std::cout << " +/- " << s.stddev;
      if (s.total_steps >= 0) std::cout << "  (total steps " << s.total_steps << ")";
      std::cout << "\n";
    }
  }
  return 0;
}

int cmd_ca_generate(const Flags& f, const Config&) {
  write_text(f.out, net::CertificateAuthority::generate(f.common_name).combined());
  std::cerr << "wrote CA certificate and key to " << f.out << "\n";
  return 0;
}

}  // namespace

int run(int argc, char** argv) {
  Flags f;
  CLI::App app{"Record, diagnose and replay web traffic; serve environments; score agent runs."};
  app.name("webreplay");
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", f.config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--log-level", f.log_level, "trace, debug, info, warn, error or off");

  using Handler = int (*)(const Flags&, const Config&);
  Handler handler = nullptr;
  auto on = [&](CLI::App* sub, Handler h) { sub->callback([&handler, h] { handler = h; }); };
  auto add_json = [&](CLI::App* sub) { sub->add_flag("--json", f.json, "Machine-readable output on stdout"); };
  auto add_upstream = [&](CLI::App* sub) {
    sub->add_option("--upstream", f.upstream, "direct or http://host:port");
    sub->add_option("--map-host", f.map_host, "Connect to host at ip:port instead (host=ip:port)");
    sub->add_flag("--insecure", f.insecure, "Skip upstream certificate verification");
    sub->add_option("--ca-file", f.ca_file, "Extra trust anchors for upstream TLS");
  };

  auto* record = app.add_subcommand("record", "Record traffic through a forward proxy");
  record->add_option("--listen", f.listen, "host:port");
  record->add_option("--out", f.out, "Archive directory")->required();
  record->add_option("--ca", f.ca, "Local CA PEM enabling HTTPS interception")->check(CLI::ExistingFile);
  add_upstream(record);
  on(record, cmd_record);

  auto* replay = app.add_subcommand("replay", "Serve recorded archives as a proxy");
  replay->add_option("--archive", f.archives, "Archive directory (repeatable)")->required();
  replay->add_option("--rules", f.rules, "rules.json")->check(CLI::ExistingFile);
  replay->add_option("--listen", f.listen, "host:port");
  replay->add_flag("--isolation", f.isolation, "Never contact the network; misses answer 504");
  replay->add_option("--miss-log", f.miss_log, "JSONL miss log (appended)");
  replay->add_option("--max-level", f.max_level, "Loosest fallback level (0-4)");
  replay->add_option("--ca", f.ca, "Local CA PEM for HTTPS clients")->check(CLI::ExistingFile);
  add_upstream(replay);
  on(replay, cmd_replay);

  auto* diag = app.add_subcommand("diagnose", "Fuzzy-match logged misses against the recording");
  diag->add_option("--archive", f.archives, "Archive directory")->required()->expected(1);
  diag->add_option("--miss-log", f.miss_log, "Miss log JSONL")->required()->check(CLI::ExistingFile);
  diag->add_option("--rules", f.rules, "Rules in effect during playback")->check(CLI::ExistingFile);
  diag->add_option("--out", f.out, "reports.json")->required();
  diag->add_option("--match-threshold", f.match_threshold, "Minimum similarity for a match");
  add_json(diag);
  on(diag, cmd_diagnose);

  auto* rules = app.add_subcommand("rules", "Rule operations");
  rules->require_subcommand(1);
  auto* synth = rules->add_subcommand("synth", "Propose rules from miss reports");
  synth->add_option("--reports", f.reports, "reports.json")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", f.out, "rules.json to write")->required();
  synth->add_option("--base", f.base_rules, "Existing rules to extend")->check(CLI::ExistingFile);
  synth->add_option("--archive", f.archives, "Archive the reports refer to")->expected(1);
  synth->add_option("--proposals", f.proposals_out, "Also write the proposals here");
  synth->add_option("--accept-threshold", f.accept_threshold, "Minimum confidence to accept");
  synth->add_option("--min-evidence", f.min_evidence, "Reports needed without lexicon evidence");
  add_json(synth);
  on(synth, cmd_rules_synth);

  auto* val = app.add_subcommand("validate", "Play a trace against an isolated replayer");
  val->add_option("--archive", f.archives, "Archive directory")->required()->expected(1);
  val->add_option("--rules", f.rules, "rules.json")->check(CLI::ExistingFile);
  val->add_option("--trace", f.trace, "Request trace JSONL")->required()->check(CLI::ExistingFile);
  val->add_option("--max-level", f.max_level, "Loosest level counted as a hit (default 0)");
  add_json(val);
  on(val, cmd_validate);

  auto* env = app.add_subcommand("env", "Environment server");
  env->require_subcommand(1);
  auto* serve = env->add_subcommand("serve", "Serve environments and the session API");
  serve->add_option("--envs", f.envs, "envs.json")->required()->check(CLI::ExistingFile);
  serve->add_option("--tasks", f.tasks, "tasks.json")->required()->check(CLI::ExistingFile);
  serve->add_option("--listen", f.listen, "host:port");
  serve->add_option("--data-root", f.data_root, "Root for relative manifest paths");
  serve->add_option("--max-level", f.max_level, "Loosest fallback level for cached envs");
  serve->add_flag("--rewrite-links", f.rewrite_links, "Rewrite absolute links in cached HTML/CSS");
  on(serve, cmd_env_serve);

  auto* ev = app.add_subcommand("eval", "Judge trajectories and score attempts");
  ev->require_subcommand(1);
  auto* judge = ev->add_subcommand("judge", "Label trajectories with the judge");
  judge->add_option("--trajectories", f.trajectories, "Directory of trajectory JSONL files")
      ->required()
      ->check(CLI::ExistingDirectory);
  judge->add_option("--tasks", f.tasks, "tasks.json")->required()->check(CLI::ExistingFile);
  judge->add_option("--backend", f.backend, "mock or http");
  judge->add_option("--out", f.out, "Directory for annotated trajectories, verdicts and results");
  judge->add_option("--mock-response", f.mock_response, "Reply given by the mock backend");
  judge->add_option("--max-in-flight", f.max_in_flight, "Concurrent judge calls");
  add_json(judge);
  on(judge, cmd_eval_judge);

  auto* passk = ev->add_subcommand("passk", "pass@k over repeated attempts");
  passk->add_option("--results", f.results, "results.jsonl")->required()->check(CLI::ExistingFile);
  passk->add_option("--k", f.ks, "Comma-separated k values")->required()->delimiter(',');
  add_json(passk);
  on(passk, cmd_eval_passk);

  auto* ca = app.add_subcommand("ca", "Local CA for HTTPS interception");
  ca->require_subcommand(1);
  auto* gen = ca->add_subcommand("generate", "Write a fresh CA certificate and key");
  gen->add_option("--out", f.out, "PEM file")->required();
  gen->add_option("--cn", f.common_name, "Common name");
  on(gen, cmd_ca_generate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    // Diagnostics go to stderr so stdout stays machine-readable.
    auto logger = spdlog::get("webreplay");
    if (!logger) logger = spdlog::stderr_color_mt("webreplay");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::from_str(f.log_level));
    Config config = default_config();
    if (!f.config_path.empty()) config = load_config_file(f.config_path, config);
    if (f.match_threshold) config.diagnose.match_threshold = *f.match_threshold;
    if (f.accept_threshold) config.diagnose.accept_threshold = *f.accept_threshold;
    if (f.min_evidence) config.diagnose.min_evidence = *f.min_evidence;
    if (f.backend) config.judge.backend = *f.backend;
    if (f.mock_response) config.judge.mock_response = *f.mock_response;
    if (f.max_in_flight) config.judge.max_in_flight = *f.max_in_flight;
    if (f.max_level && (*f.max_level < 0 || *f.max_level >= kFallbackLevels))
      throw UsageError("--max-level must be within [0, " + std::to_string(kFallbackLevels - 1) + "]");
    validate(config);
    for (int k : f.ks)
      if (k < 1) throw UsageError("--k values must be positive");
    return handler(f, config);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace webreplay
