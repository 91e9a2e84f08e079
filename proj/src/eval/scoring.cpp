#include "webreplay/eval/scoring.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "webreplay/encoding.hpp"
#include "webreplay/error.hpp"

namespace webreplay::eval {

double agreement(const std::vector<Label>& a, const std::vector<Label>& b) {
  if (a.empty() || a.size() != b.size())
    throw UsageError("agreement needs two non-empty label lists of equal length");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i];
  return static_cast<double>(same) / static_cast<double>(a.size());
}

std::vector<RetainedGroup> filter_groups(const std::vector<std::vector<Verdict>>& groups) {
  std::vector<RetainedGroup> out;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    RetainedGroup kept{g, {}};
    bool success = false, failure = false;
    for (const auto& v : groups[g]) {
      if (!v.reward) continue;
      success = success || *v.reward == 1.0;
      failure = failure || *v.reward == 0.0;
      kept.members.push_back(v);
    }
    if (kept.members.size() >= 2 && success && failure) out.push_back(std::move(kept));
  }
  return out;
}

double pass_at_k(int n, int c, int k) {
  if (k < 1) throw UsageError("k must be at least 1");
  if (c < 0 || c > n) throw UsageError("success count outside [0, n]");
  if (k > n) throw KTooLarge("k=" + std::to_string(k) + " exceeds the " + std::to_string(n) + " recorded attempts");
  if (n - c < k) return 1.0;
  // C(n-c, k) / C(n, k) = prod_{i=n-c+1}^{n} (1 - k/i), free of large binomials.
  double miss = 1.0;
  for (int i = n - c + 1; i <= n; ++i) miss *= 1.0 - static_cast<double>(k) / static_cast<double>(i);
  return 1.0 - miss;
}

std::vector<TaskAttempts> parse_results(std::string_view jsonl) {
  std::vector<TaskAttempts> out;
  std::set<std::pair<std::string, int>> seen;
  std::istringstream in{std::string(jsonl)};
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    const std::string where = "line " + std::to_string(n) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(where + e.what());
    }
    TaskAttempts t;
    try {
      t.task_id = j.at("task_id").get<std::string>();
      t.seed = j.value("seed", 0);
      t.step_budget = j.value("step_budget", 30);
      for (const auto& a : j.at("attempts")) {
        if (a.is_boolean()) t.attempts.push_back(a.get<bool>());
        else if (a.is_number_integer() && (a == 0 || a == 1)) t.attempts.push_back(a == 1);
        else throw SchemaError("attempts: expected booleans");
      }
    } catch (const json::exception& e) {
      throw SchemaError(where + e.what());
    } catch (const SchemaError& e) {
      throw SchemaError(where + e.what());
    }
    if (t.attempts.empty()) throw SchemaError(where + "attempts: empty");
    if (t.step_budget < 1) throw SchemaError(where + "step_budget: must be positive");
    if (!seen.insert({t.task_id, t.seed}).second)
      throw SchemaError(where + "duplicate task " + t.task_id + " for seed " + std::to_string(t.seed));
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<TaskAttempts> load_results(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_results(ss.str());
  } catch (const SchemaError& e) {
    throw SchemaError(path + ": " + e.what());
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

PassAtKSummary summarize_pass_at_k(const std::vector<TaskAttempts>& results, int k) {
  PassAtKSummary s;
  s.k = k;
  std::map<std::string, std::vector<double>> by_task;
  std::map<int, std::vector<double>> by_seed;
  std::set<int> budgets;
  for (const auto& r : results) {
    const int n = static_cast<int>(r.attempts.size());
    const int c = static_cast<int>(std::count(r.attempts.begin(), r.attempts.end(), true));
    double est;
    try {
      est = pass_at_k(n, c, k);
    } catch (const KTooLarge& e) {
      throw KTooLarge("task " + r.task_id + ": " + e.what());
    }
    by_task[r.task_id].push_back(est);
    by_seed[r.seed].push_back(est);
    budgets.insert(r.step_budget);
  }
  auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  for (const auto& [task, ests] : by_task) s.per_task[task] = mean(ests);
  for (const auto& [seed, ests] : by_seed) s.seed_means[seed] = mean(ests);

  std::vector<double> task_means;
  for (const auto& [_, v] : s.per_task) task_means.push_back(v);
  s.mean = mean(task_means);
  if (s.seed_means.size() > 1) {
    std::vector<double> m;
    for (const auto& [_, v] : s.seed_means) m.push_back(v);
    const double mu = mean(m);
    double ss = 0.0;
    for (double v : m) ss += (v - mu) * (v - mu);
    s.stddev = std::sqrt(ss / static_cast<double>(m.size() - 1));
  }
  if (budgets.size() == 1) s.total_steps = static_cast<long long>(k) * *budgets.begin();
  else if (budgets.size() > 1) s.total_steps = -1;
  return s;
}

json summary_to_json(const PassAtKSummary& s) {
  json seeds = json::object();
  for (const auto& [seed, m] : s.seed_means) seeds[std::to_string(seed)] = m;
  return {{"k", s.k},
          {"mean", s.mean},
          {"std", s.stddev},
          {"per_task", s.per_task},
          {"seed_means", seeds},
          {"total_steps", s.total_steps >= 0 ? json(s.total_steps) : json(nullptr)}};
}

}  // namespace webreplay::eval
