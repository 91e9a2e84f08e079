#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "webreplay/eval/trajectory.hpp"

namespace webreplay::eval {

/// Fraction of positions with equal labels. Throws UsageError when the
/// lists are empty or differ in length.
double agreement(const std::vector<Label>& a, const std::vector<Label>& b);

struct RetainedGroup {
  std::size_t index = 0;
  /// Members left after website failures are discarded.
  std::vector<Verdict> members;
};

/// Drops website failures, then keeps groups with at least two members
/// holding both a 1.0 and a 0.0 reward.
std::vector<RetainedGroup> filter_groups(const std::vector<std::vector<Verdict>>& groups);

/// Unbiased any-of-k estimate 1 - C(n-c, k) / C(n, k). Throws KTooLarge
/// when k > n and UsageError for k < 1 or c > n.
double pass_at_k(int n, int c, int k);

/// Attempt outcomes for one task under one seed.
struct TaskAttempts {
  std::string task_id;
  int seed = 0;
  std::vector<bool> attempts;
  int step_budget = 30;
};

/// results.jsonl: {"task_id":..., "attempts":[true,false,...],
/// "seed":0, "step_budget":30} per line. Throws ParseError / SchemaError.
std::vector<TaskAttempts> load_results(const std::string& path);
std::vector<TaskAttempts> parse_results(std::string_view jsonl);

struct PassAtKSummary {
  int k = 0;
  /// task_id -> estimate, averaged over seeds.
  std::map<std::string, double> per_task;
  double mean = 0.0;
  /// Mean over tasks for each seed, by seed.
  std::map<int, double> seed_means;
  /// Sample standard deviation of seed_means (0 with a single seed).
  double stddev = 0.0;
  /// k x step_budget, or -1 when tasks disagree on the budget.
  long long total_steps = 0;
};

/// Throws KTooLarge when any task has fewer than k attempts.
PassAtKSummary summarize_pass_at_k(const std::vector<TaskAttempts>& results, int k);

json summary_to_json(const PassAtKSummary& s);

}  // namespace webreplay::eval
