#pragma once

// Two-phase latent-gradient search. Round 1 trains the surrogate on source
// history only and ascends the target head from the best source
// architectures; later rounds retrain on everything seen so far and start
// from the best target architectures.

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "xfernas/archspace.hpp"
#include "xfernas/taskbench.hpp"
#include "xfernas/xfernet.hpp"

namespace xfernas {

enum class Phase { source, target };

enum class Provenance { source_start, target_start, random_fill };

std::string_view provenance_name(Provenance p);

struct SearchConfig {
  int budget = 33;
  double eta = 10.0;
  int max_ascent_steps = 10;
  int starts_per_round = 11;
  int rounds = 3;
  std::uint64_t seed = 0;
  int blocks = 5;  // genome size for random fills when the source history is empty
  TrainConfig train;

  void validate() const;
};

struct Evaluation {
  Genome genome;
  double score = 0.0;
  int round = 0;
  Provenance provenance = Provenance::random_fill;
};

// One accepted ascent. start/final are target-head predictions at z0 and at
// the code that decoded to the proposal.
struct AscentTrace {
  int round = 0;
  std::string fingerprint;
  int steps = 0;
  double start_prediction = 0.0;
  double final_prediction = 0.0;
  double start_residual = 0.0;  // target residual head at z0
  double final_residual = 0.0;
};

struct RoundLog {
  int round = 0;
  std::size_t history_size = 0;
  TrainLog train;
};

struct SearchReport {
  std::vector<Evaluation> evaluated;
  std::optional<Evaluation> best;
  std::vector<RoundLog> rounds;
  std::vector<AscentTrace> ascents;
  int oracle_calls = 0;
  std::string failure;  // empty unless the oracle threw
};

using Oracle = std::function<double(const Genome&)>;

// Ranked starting genomes. Source phase: the top ceil(k / n) records of each
// of the n source tasks, merged rank by rank in registry order, truncated to
// k. Target phase: the top k target records. Ties keep insertion order.
// Throws SearchError when the requested partition is empty.
std::vector<Genome> select_starts(const ObservationHistory& history, Phase phase, int k);

struct AscentResult {
  Genome genome;
  int steps = 0;
  ArchitectureCode final_code;
  double start_prediction = 0.0;
  double final_prediction = 0.0;
};

// z <- z + eta * d predict(z, target) / dz. Every encoder state is shifted by
// the same amount so the decoder attends over states whose mean is z. After
// each step the greedy decode is returned if its fingerprint is unknown and
// the prediction has not dropped below the start.
std::optional<AscentResult> latent_ascend(const XferNet& net, const Encoding& start, double eta, int max_steps,
                                          const std::set<std::string>& known);

// The oracle scores genomes on the target task. If it throws, the search
// stops and the report carries the records gathered so far plus the message.
SearchReport xfernas_search(const Oracle& oracle, const ObservationHistory& source, const std::string& target,
                            const SearchConfig& cfg);

// Baseline: cfg.budget distinct uniform genomes outside `known`, drawn from
// the same stream the search uses for random fills.
SearchReport random_search(const Oracle& oracle, const std::set<std::string>& known, const SearchConfig& cfg);

std::string report_to_json(const SearchReport& report);
// round,provenance,score,fingerprint
std::string report_to_csv(const SearchReport& report);

}  // namespace xfernas
