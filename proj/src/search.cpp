#include "xfernas/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include <json.hpp>

#include "xfernas/archspace_json.hpp"
#include "xfernas/errors.hpp"
#include "xfernas/seeding.hpp"

namespace xfernas {

namespace {

constexpr std::uint64_t kRandomStream = 1000;

// Stable: equal scores keep insertion order.
std::vector<ObservationRecord> ranked(std::vector<ObservationRecord> records) {
  std::stable_sort(records.begin(), records.end(),
                   [](const ObservationRecord& a, const ObservationRecord& b) { return a.score > b.score; });
  return records;
}

class SearchRun {
 public:
  SearchRun(const Oracle& oracle, const ObservationHistory& source, const std::string& target, const SearchConfig& cfg)
      : oracle_(oracle), history_(source), target_(target), cfg_(cfg), rng_(mix_seed(cfg.seed, kRandomStream)) {
    if (!history_.has_task(target_)) history_.register_task(target_);
    history_.set_target(target_);
    for (const auto& r : history_.records()) known_.insert(fingerprint(r.genome));
    blocks_ = history_.empty() ? cfg_.blocks : history_.records().front().genome.normal.blocks.size();
  }

  // Random proposals only, all in round 1.
  SearchReport run_random() {
    while (report_.oracle_calls < cfg_.budget) {
      if (!evaluate(random_genome(), 1, Provenance::random_fill)) break;
    }
    return std::move(report_);
  }

  void add_known(const std::set<std::string>& known) { known_.insert(known.begin(), known.end()); }

  SearchReport run() {
    for (int round = 1; round <= cfg_.rounds && report_.oracle_calls < cfg_.budget; ++round) {
      const int quota = round == cfg_.rounds ? cfg_.budget - report_.oracle_calls
                                             : std::min(cfg_.starts_per_round, cfg_.budget - report_.oracle_calls);
      if (!propose(round, quota)) break;
    }
    return std::move(report_);
  }

 private:
  // False once the oracle has failed.
  bool propose(int round, int quota) {
    int proposed = 0;
    if (history_.empty()) {
      // Nothing to learn from yet: plain random genomes.
      while (proposed < quota) {
        if (!evaluate(random_genome(), round, Provenance::random_fill)) return false;
        ++proposed;
      }
      return true;
    }

    TrainConfig tc = cfg_.train;
    tc.seed = mix_seed(cfg_.seed, static_cast<std::uint64_t>(round));
    TrainResult trained = train(history_, tc);
    report_.rounds.push_back({round, history_.size(), std::move(trained.log)});
    const XferNet& net = trained.net;

    const bool has_target = !history_.records_for(target_).empty();
    const Phase phase = round == 1 || !has_target ? Phase::source : Phase::target;
    const Provenance provenance = phase == Phase::source ? Provenance::source_start : Provenance::target_start;
    std::vector<Genome> starts;
    if (phase == Phase::target || !history_.source_tasks().empty()) {
      starts = select_starts(history_, phase, static_cast<int>(history_.size()));
    }

    for (const Genome& start : starts) {
      if (proposed == quota) break;
      const Encoding enc = net.encode(tokenize(start));
      auto found = latent_ascend(net, enc, cfg_.eta, cfg_.max_ascent_steps, known_);
      if (!found) continue;
      report_.ascents.push_back({round, fingerprint(found->genome), found->steps, found->start_prediction,
                                 found->final_prediction, net.residual(enc.code, target_),
                                 net.residual(found->final_code, target_)});
      if (!evaluate(found->genome, round, provenance)) return false;
      ++proposed;
    }
    while (proposed < quota) {
      if (!evaluate(random_genome(), round, Provenance::random_fill)) return false;
      ++proposed;
    }
    return true;
  }

  Genome random_genome() {
    for (;;) {
      Genome g = sample_genome(rng_(), static_cast<int>(blocks_));
      if (!known_.contains(fingerprint(g))) return g;
    }
  }

  bool evaluate(const Genome& g, int round, Provenance provenance) {
    ++report_.oracle_calls;
    try {
      const double score = oracle_(g);
      history_.add({target_, g, score});
      known_.insert(fingerprint(g));
      report_.evaluated.push_back({g, score, round, provenance});
    } catch (const std::exception& e) {
      report_.failure = e.what();
      return false;
    }
    const Evaluation& last = report_.evaluated.back();
    if (!report_.best || last.score > report_.best->score) report_.best = last;
    return true;
  }

  const Oracle& oracle_;
  ObservationHistory history_;
  std::string target_;
  SearchConfig cfg_;
  std::mt19937_64 rng_;
  std::set<std::string> known_;
  std::size_t blocks_ = 0;
  SearchReport report_;
};

nlohmann::json evaluation_json(const Evaluation& e) {
  return {{"round", e.round},
          {"provenance", provenance_name(e.provenance)},
          {"score", e.score},
          {"fingerprint", fingerprint(e.genome)},
          {"genome", genome_to_json_value(e.genome)}};
}

}  // namespace

std::string_view provenance_name(Provenance p) {
  switch (p) {
    case Provenance::source_start: return "source-start";
    case Provenance::target_start: return "target-start";
    case Provenance::random_fill: return "random";
  }
  return "?";
}

void SearchConfig::validate() const {
  if (budget < 1) throw ConfigError("budget must be >= 1");
  if (!(eta > 0.0)) throw ConfigError("eta must be positive");
  if (max_ascent_steps < 1) throw ConfigError("max ascent steps must be >= 1");
  if (starts_per_round < 1) throw ConfigError("starts per round must be >= 1");
  if (rounds < 1) throw ConfigError("rounds must be >= 1");
  if (blocks < 1) throw ConfigError("blocks must be >= 1");
  train.validate();
}

std::vector<Genome> select_starts(const ObservationHistory& history, Phase phase, int k) {
  if (k < 1) throw SearchError("need at least one starting point");
  std::vector<Genome> out;
  if (phase == Phase::target) {
    const auto records = ranked(history.records_for(history.target()));
    if (records.empty()) throw SearchError("no target records to start from");
    for (const auto& r : records) {
      if (static_cast<int>(out.size()) == k) break;
      out.push_back(r.genome);
    }
    return out;
  }

  std::vector<std::vector<ObservationRecord>> per_task;
  for (const auto& task : history.source_tasks()) {
    auto records = ranked(history.records_for(task));
    if (!records.empty()) per_task.push_back(std::move(records));
  }
  if (per_task.empty()) throw SearchError("no source records to start from");
  const std::size_t n = per_task.size();
  const std::size_t take = (static_cast<std::size_t>(k) + n - 1) / n;
  for (std::size_t rank = 0; rank < take; ++rank) {
    for (const auto& records : per_task) {
      if (rank < records.size()) out.push_back(records[rank].genome);
    }
  }
  if (out.size() > static_cast<std::size_t>(k)) out.resize(static_cast<std::size_t>(k));
  return out;
}

std::optional<AscentResult> latent_ascend(const XferNet& net, const Encoding& start, double eta, int max_steps,
                                          const std::set<std::string>& known) {
  if (!(eta > 0.0)) throw ContractViolation("eta must be positive");
  const std::string& target = net.target();
  const std::size_t hidden = start.code.z.size();
  const std::size_t steps = start.states.dim(0);
  Tensor states = start.states;
  ArchitectureCode z = start.code;
  const double p0 = net.predict(z, target);
  for (int step = 1; step <= max_steps; ++step) {
    const std::vector<double> grad = net.prediction_gradient(z, target);
    for (std::size_t k = 0; k < hidden; ++k) {
      const double dz = eta * grad[k];
      z.z[k] += dz;
      for (std::size_t t = 0; t < steps; ++t) states[t * hidden + k] += dz;
    }
    Genome g = detokenize(net.decode(states).tokens);
    if (known.contains(fingerprint(g))) continue;
    const double p = net.predict(z, target);
    if (p < p0) continue;
    return AscentResult{std::move(g), step, z, p0, p};
  }
  return std::nullopt;
}

SearchReport xfernas_search(const Oracle& oracle, const ObservationHistory& source, const std::string& target,
                            const SearchConfig& cfg) {
  cfg.validate();
  if (target.empty()) throw ConfigError("search needs a target task");
  for (const auto& r : source.records()) {
    if (r.task == target) throw SearchError("source history already holds target-task records");
  }
  return SearchRun(oracle, source, target, cfg).run();
}

SearchReport random_search(const Oracle& oracle, const std::set<std::string>& known, const SearchConfig& cfg) {
  cfg.validate();
  SearchRun run(oracle, ObservationHistory({"target"}, "target"), "target", cfg);
  run.add_known(known);
  return run.run_random();
}

std::string report_to_json(const SearchReport& report) {
  nlohmann::json doc;
  doc["oracle_calls"] = report.oracle_calls;
  doc["failure"] = report.failure.empty() ? nlohmann::json(nullptr) : nlohmann::json(report.failure);
  doc["best"] = report.best ? evaluation_json(*report.best) : nlohmann::json(nullptr);
  doc["evaluated"] = nlohmann::json::array();
  for (const auto& e : report.evaluated) doc["evaluated"].push_back(evaluation_json(e));
  doc["rounds"] = nlohmann::json::array();
  for (const auto& r : report.rounds) {
    doc["rounds"].push_back(
        {{"round", r.round}, {"history_size", r.history_size}, {"steps", r.train.steps}, {"epoch_loss", r.train.epoch_loss}});
  }
  doc["ascents"] = nlohmann::json::array();
  for (const auto& a : report.ascents) {
    doc["ascents"].push_back({{"round", a.round},
                              {"fingerprint", a.fingerprint},
                              {"steps", a.steps},
                              {"start_prediction", a.start_prediction},
                              {"final_prediction", a.final_prediction},
                              {"start_residual", a.start_residual},
                              {"final_residual", a.final_residual}});
  }
  return doc.dump(2) + "\n";
}

std::string report_to_csv(const SearchReport& report) {
  std::string out = "round,provenance,score,fingerprint\n";
  char buf[64];
  for (const auto& e : report.evaluated) {
    std::snprintf(buf, sizeof buf, "%.17g", e.score);
    out += std::to_string(e.round) + "," + std::string(provenance_name(e.provenance)) + "," + buf + "," +
           fingerprint(e.genome) + "\n";
  }
  return out;
}

}  // namespace xfernas
