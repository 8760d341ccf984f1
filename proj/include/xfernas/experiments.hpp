#pragma once

// Ablation grid over source/target knowledge sizes and the three-arm search
// comparison (with transfer, without transfer, random sampling).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "xfernas/search.hpp"
#include "xfernas/taskbench.hpp"
#include "xfernas/xfernet.hpp"

namespace xfernas {

struct AblationConfig {
  int pool_size = 600;
  int holdout = 50;
  int splits = 10;
  std::vector<int> source_sizes{0, 50, 100, 150};  // per source task
  std::vector<int> target_sizes{0, 10, 25, 50, 100, 150};
  SuiteDescriptor suite;
  TrainConfig train = default_train();
  std::uint64_t seed = 0;

  static TrainConfig default_train();
  void validate() const;
};

// Missing keys keep their defaults; unknown keys are rejected.
AblationConfig ablation_config_from_json(std::string_view text);
AblationConfig load_ablation_config(const std::filesystem::path& file);
std::string ablation_config_to_json(const AblationConfig& cfg);

struct AblationCell {
  int source_size = 0;
  int target_size = 0;
  int split = 0;
  double pearson_r = 0.0;

  bool operator==(const AblationCell&) const = default;
};

struct AblationSummary {
  int source_size = 0;
  int target_size = 0;
  int n = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single split
};

// One grid point for one split. Depends only on (cfg, source_size,
// target_size, split), so any cell can be recomputed on its own.
AblationCell run_ablation_cell(const AblationConfig& cfg, int source_size, int target_size, int split);

using CellCallback = std::function<void(const AblationCell&)>;
// Cells ordered by (source_size, target_size, split) as listed in cfg.
std::vector<AblationCell> run_ablation(const AblationConfig& cfg, const CellCallback& on_cell = {});
std::vector<AblationSummary> summarize(const std::vector<AblationCell>& cells);
const AblationSummary* find_summary(const std::vector<AblationSummary>& rows, int source_size, int target_size);

std::string cells_to_csv(const std::vector<AblationCell>& cells);
std::string summary_to_csv(const std::vector<AblationSummary>& rows);

// Held-out Pearson r of ridge regression from oracle features phi(g) to
// target scores: a reference that sees the true features.
double ridge_baseline(const TaskSuite& suite, const std::vector<Genome>& train, const std::vector<Genome>& test,
                      double lambda = 1e-3);
// The same with the ablation's pool and first split: train on target_size
// candidates, score on the holdout.
double ridge_learnability(const AblationConfig& cfg, int target_size);

// ---------------------------------------------------------------------------

struct ComparisonConfig {
  SuiteDescriptor suite;
  int source_per_task = 200;
  SearchConfig search = default_search();

  static SearchConfig default_search();
};

struct ComparisonRow {
  std::uint64_t seed = 0;
  double transfer = 0.0;
  double no_transfer = 0.0;
  double random = 0.0;
  int transfer_calls = 0;
  int no_transfer_calls = 0;
  int random_calls = 0;
};

struct ComparisonSummary {
  double transfer_median = 0.0;
  double no_transfer_median = 0.0;
  double random_median = 0.0;
  int wins_vs_random = 0;       // seeds where transfer best >= random best
  int wins_vs_no_transfer = 0;  // seeds where transfer best >= no-transfer best
  int seeds = 0;
};

// Per seed: source knowledge, then the three arms on the suite's target task.
ComparisonRow run_comparison_seed(const ComparisonConfig& cfg, std::uint64_t seed);
using RowCallback = std::function<void(const ComparisonRow&)>;
std::vector<ComparisonRow> run_search_comparison(const ComparisonConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                                 const RowCallback& on_row = {});
ComparisonSummary summarize(const std::vector<ComparisonRow>& rows);

std::string comparison_to_csv(const std::vector<ComparisonRow>& rows);
std::string comparison_summary_to_csv(const ComparisonSummary& s);

}  // namespace xfernas
