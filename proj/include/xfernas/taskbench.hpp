#pragma once

// Synthetic multi-task benchmark. Each task scores a genome with
//   sigmoid(<w_u, phi(g)> + tau * <w_task, phi(g)> + b_task + noise)
// where phi is a fixed random projection of operation histograms and input
// gaps, w_u is shared by all tasks, and the noise is a deterministic function
// of (seed, task, genome). The last task is the designated target.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "xfernas/archspace.hpp"

namespace xfernas {

inline constexpr int kRawFeatureDim = 2 * kNumOperations + 2;
inline constexpr int kFeatureDim = 32;

// Per-cell operation histograms (count-normalized) followed by the per-cell
// mean input gap (block node index minus input index, divided by B).
std::vector<double> raw_features(const Genome& g);

struct SuiteDescriptor {
  std::uint64_t seed = 42;
  int n_tasks = 5;
  double tau = 0.3;
  double noise_sigma = 0.01;

  bool operator==(const SuiteDescriptor&) const = default;
};

std::string suite_to_json(const SuiteDescriptor& d);
SuiteDescriptor suite_from_json(std::string_view text);
void save_suite(const SuiteDescriptor& d, const std::filesystem::path& file);
SuiteDescriptor load_suite(const std::filesystem::path& file);

class TaskSuite {
 public:
  explicit TaskSuite(SuiteDescriptor descriptor);

  const SuiteDescriptor& descriptor() const { return descriptor_; }
  int n_tasks() const { return descriptor_.n_tasks; }
  static std::string task_id(int index) { return "task_" + std::to_string(index); }
  // Throws RegistryError for ids outside this suite.
  int task_index(std::string_view id) const;
  std::vector<std::string> tasks() const;
  std::string target_task() const { return task_id(n_tasks() - 1); }
  std::vector<std::string> source_tasks() const;

  std::vector<double> features(const Genome& g) const;
  // The noiseless logit; exposed for tests and diagnostics.
  double logit(int task, const Genome& g) const;
  double evaluate(int task, const Genome& g) const;
  double evaluate(std::string_view task, const Genome& g) const { return evaluate(task_index(task), g); }

 private:
  void check_task(int task) const;

  SuiteDescriptor descriptor_;
  std::vector<double> projection_;  // kFeatureDim x kRawFeatureDim, row-major
  std::vector<double> universal_;   // unit norm
  std::vector<std::vector<double>> task_weights_;  // unit norm each
  std::vector<double> offsets_;
};

// ---------------------------------------------------------------------------

struct ObservationRecord {
  std::string task;
  Genome genome;
  double score = 0.0;

  bool operator==(const ObservationRecord&) const = default;
};

// Records in insertion order plus an ordered task registry. The target may be
// empty when the history was loaded without registry information.
class ObservationHistory {
 public:
  ObservationHistory() = default;
  ObservationHistory(std::vector<std::string> tasks, std::string target);

  const std::vector<std::string>& tasks() const { return tasks_; }
  const std::string& target() const { return target_; }
  void set_target(std::string target);
  void register_task(const std::string& task);
  bool has_task(std::string_view task) const;
  std::vector<std::string> source_tasks() const;

  // Throws DataError for scores outside [0, 1] or a genome already recorded
  // for the same task, RegistryError for unregistered tasks.
  void add(ObservationRecord record);
  void append(const ObservationHistory& other);

  bool contains(std::string_view task, const std::string& fingerprint) const;
  bool contains_any(const std::string& fingerprint) const;
  const std::vector<ObservationRecord>& records() const { return records_; }
  std::vector<ObservationRecord> records_for(std::string_view task) const;
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  bool operator==(const ObservationHistory&) const = default;

 private:
  std::vector<std::string> tasks_;
  std::string target_;
  std::vector<ObservationRecord> records_;
  std::vector<std::string> fingerprints_;  // parallel to records_
};

// n_per_task distinct random genomes for every source task; a genome never
// appears under two tasks and the target gets nothing.
ObservationHistory build_source_knowledge(const TaskSuite& suite, int n_per_task, std::uint64_t seed);

// JSONL: {"genome": {...}, "score": s, "task": "..."} per line. The registry
// of a loaded history lists tasks in order of first appearance.
void save_history(const ObservationHistory& h, const std::filesystem::path& file);
ObservationHistory load_history(const std::filesystem::path& file);
std::string history_to_jsonl(const ObservationHistory& h);
ObservationHistory history_from_jsonl(std::string_view text);

// Throws DataError for mismatched lengths, fewer than two values or zero
// variance.
double pearson(const std::vector<double>& pred, const std::vector<double>& truth);

}  // namespace xfernas
