#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <set>
#include <stdexcept>

#include "xfernas/errors.hpp"
#include "xfernas/search.hpp"

using namespace xfernas;

namespace {

// Four source tasks with five records each; scores are distinct except for a
// deliberate tie in task s1.
ObservationHistory fixture_history() {
  ObservationHistory h({"s0", "s1", "s2", "s3", "t"}, "t");
  const double scores[4][5] = {{0.50, 0.90, 0.10, 0.70, 0.30},
                               {0.60, 0.60, 0.20, 0.95, 0.40},
                               {0.15, 0.25, 0.35, 0.45, 0.55},
                               {0.80, 0.05, 0.65, 0.75, 0.85}};
  std::uint64_t seed = 0;
  for (int t = 0; t < 4; ++t) {
    for (int i = 0; i < 5; ++i) h.add({"s" + std::to_string(t), sample_genome(seed++, 5), scores[t][i]});
  }
  return h;
}

SearchConfig tiny_config(std::uint64_t seed = 0) {
  SearchConfig cfg;
  cfg.budget = 6;
  cfg.rounds = 3;
  cfg.starts_per_round = 2;
  cfg.seed = seed;
  cfg.train.epochs = 2;
  cfg.train.max_steps = 3;
  return cfg;
}

std::set<std::string> fingerprints_of(const ObservationHistory& h) {
  std::set<std::string> out;
  for (const auto& r : h.records()) out.insert(fingerprint(r.genome));
  return out;
}

}  // namespace

TEST(SelectStarts, SourcePhaseTakesCeilPerTaskRankByRank) {
  const ObservationHistory h = fixture_history();
  const std::vector<Genome> starts = select_starts(h, Phase::source, 11);
  ASSERT_EQ(starts.size(), 11u);
  // Independent expectation: per task sort descending (stable), keep the top
  // ceil(11 / 4) = 3, then interleave rank by rank in registry order.
  std::vector<std::vector<Genome>> ranked(4);
  for (int t = 0; t < 4; ++t) {
    auto recs = h.records_for("s" + std::to_string(t));
    std::stable_sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    for (int i = 0; i < 3; ++i) ranked[static_cast<std::size_t>(t)].push_back(recs[static_cast<std::size_t>(i)].genome);
  }
  std::vector<Genome> expected;
  for (int rank = 0; rank < 3; ++rank) {
    for (int t = 0; t < 4; ++t) expected.push_back(ranked[static_cast<std::size_t>(t)][static_cast<std::size_t>(rank)]);
  }
  expected.resize(11);
  EXPECT_EQ(starts, expected);
  for (int t = 0; t < 4; ++t) {
    int count = 0;
    for (const auto& g : starts) count += h.contains("s" + std::to_string(t), fingerprint(g));
    EXPECT_LE(count, 3);
  }
}

TEST(SelectStarts, TiesKeepInsertionOrder) {
  const ObservationHistory h = fixture_history();
  const auto s1 = h.records_for("s1");
  const std::vector<Genome> starts = select_starts(h, Phase::source, 12);
  // s1 ranks: 0.95 (index 3), then the two 0.60 records in insertion order.
  EXPECT_EQ(starts[1], s1[3].genome);
  EXPECT_EQ(starts[5], s1[0].genome);
  EXPECT_EQ(starts[9], s1[1].genome);
}

TEST(SelectStarts, MoreThanAvailableReturnsAll) {
  const ObservationHistory h = fixture_history();
  EXPECT_EQ(select_starts(h, Phase::source, 100).size(), 20u);
}

TEST(SelectStarts, TargetPhase) {
  ObservationHistory h = fixture_history();
  EXPECT_THROW(select_starts(h, Phase::target, 3), SearchError);
  const Genome g = sample_genome(999, 5);
  h.add({"t", g, 0.4});
  EXPECT_EQ(select_starts(h, Phase::target, 3), std::vector<Genome>{g});
  EXPECT_THROW(select_starts(ObservationHistory({"t"}, "t"), Phase::source, 3), SearchError);
  EXPECT_THROW(select_starts(h, Phase::target, 0), SearchError);
}

TEST(LatentAscend, TinyStepFindsNothing) {
  const XferNet net({"s0"}, "t", 1);
  const Genome g = sample_genome(3, 5);
  const Encoding start = net.encode(tokenize(g));
  // The untrained decoder may not reproduce g, so mark its own decode known.
  std::set<std::string> known = {fingerprint(g), fingerprint(detokenize(net.decode(start.states).tokens))};
  EXPECT_FALSE(latent_ascend(net, start, 1e-9, 10, known).has_value());
}

TEST(LatentAscend, ExhaustedSpaceFindsNothing) {
  // B = 1: each cell is one block with inputs in {0, 1} and two ops.
  std::set<std::string> all;
  for (int a = 0; a < 4 * kNumOperations * kNumOperations; ++a) {
    Block na{a & 1, (a >> 1) & 1, operation_from_id((a >> 2) % kNumOperations),
             operation_from_id((a >> 2) / kNumOperations)};
    for (int b = 0; b < 4 * kNumOperations * kNumOperations; ++b) {
      Block rb{b & 1, (b >> 1) & 1, operation_from_id((b >> 2) % kNumOperations),
               operation_from_id((b >> 2) / kNumOperations)};
      Genome g;
      g.normal.blocks = {na};
      g.reduction.blocks = {rb};
      all.insert(fingerprint(g));
    }
  }
  ASSERT_EQ(all.size(), static_cast<std::size_t>(4 * 361 * 4 * 361));
  const XferNet net({"s0"}, "t", 2, XferNetConfig{1, 32, 96, 64, 32});
  const Encoding start = net.encode(tokenize(sample_genome(1, 1)));
  EXPECT_FALSE(latent_ascend(net, start, 10.0, 10, all).has_value());
  EXPECT_TRUE(latent_ascend(net, start, 10.0, 10, {}).has_value());
}

TEST(LatentAscend, AcceptedCandidatesNeverLoseOnTheTarget) {
  const TaskSuite suite(SuiteDescriptor{});
  ObservationHistory h = build_source_knowledge(suite, 20, 3);
  TrainConfig tc;
  tc.epochs = 10;
  const XferNet net = train(h, tc).net;
  const std::set<std::string> known = fingerprints_of(h);
  int accepted = 0;
  for (const Genome& g : select_starts(h, Phase::source, 8)) {
    const auto r = latent_ascend(net, net.encode(tokenize(g)), 10.0, 10, known);
    if (!r) continue;
    ++accepted;
    EXPECT_GE(r->final_prediction, r->start_prediction);
    EXPECT_EQ(r->final_prediction, net.predict(r->final_code, "task_4"));
    EXPECT_EQ(known.count(fingerprint(r->genome)), 0u);
    EXPECT_NO_THROW(validate(r->genome));
  }
  EXPECT_GT(accepted, 0);
}

TEST(Search, InvariantsOnTinyBudget) {
  const TaskSuite suite(SuiteDescriptor{});
  const ObservationHistory source = build_source_knowledge(suite, 10, 1);
  int calls = 0;
  const Oracle oracle = [&](const Genome& g) {
    ++calls;
    return suite.evaluate("task_4", g);
  };
  const SearchReport r = xfernas_search(oracle, source, "task_4", tiny_config());
  EXPECT_TRUE(r.failure.empty());
  EXPECT_EQ(r.oracle_calls, calls);
  EXPECT_LE(calls, 6);
  EXPECT_EQ(r.evaluated.size(), static_cast<std::size_t>(calls));
  EXPECT_EQ(r.rounds.size(), 3u);
  const std::set<std::string> source_fps = fingerprints_of(source);
  std::set<std::string> seen;
  double best = -1.0;
  for (const auto& e : r.evaluated) {
    const std::string fp = fingerprint(e.genome);
    EXPECT_TRUE(seen.insert(fp).second);
    EXPECT_EQ(source_fps.count(fp), 0u);
    EXPECT_EQ(e.score, suite.evaluate("task_4", e.genome));
    if (e.round == 1) EXPECT_NE(e.provenance, Provenance::target_start);
    if (e.round > 1) EXPECT_NE(e.provenance, Provenance::source_start);
    best = std::max(best, e.score);
  }
  ASSERT_TRUE(r.best.has_value());
  EXPECT_EQ(r.best->score, best);
  // Round 1 proposals come from a network that has never seen the target.
  for (const auto& a : r.ascents) {
    if (a.round != 1) continue;
    EXPECT_EQ(a.start_residual, 0.0);
    EXPECT_EQ(a.final_residual, 0.0);
  }
  EXPECT_EQ(r.rounds[0].history_size, source.size());
}

TEST(Search, DefaultBudgetTrainsThreeTimes) {
  const TaskSuite suite(SuiteDescriptor{});
  const ObservationHistory source = build_source_knowledge(suite, 5, 2);
  SearchConfig cfg;
  cfg.train.epochs = 1;
  cfg.train.max_steps = 1;
  int calls = 0;
  const SearchReport r = xfernas_search(
      [&](const Genome& g) {
        ++calls;
        return suite.evaluate("task_4", g);
      },
      source, "task_4", cfg);
  EXPECT_EQ(r.rounds.size(), 3u);
  EXPECT_LE(calls, 33);
  EXPECT_EQ(r.evaluated.size(), static_cast<std::size_t>(calls));
}

TEST(Search, Deterministic) {
  const TaskSuite suite(SuiteDescriptor{});
  const ObservationHistory source = build_source_knowledge(suite, 8, 4);
  const Oracle oracle = [&](const Genome& g) { return suite.evaluate("task_4", g); };
  const std::string a = report_to_json(xfernas_search(oracle, source, "task_4", tiny_config(3)));
  const std::string b = report_to_json(xfernas_search(oracle, source, "task_4", tiny_config(3)));
  EXPECT_EQ(a, b);
}

TEST(Search, EmptySourceStartsFromRandomGenomes) {
  const TaskSuite suite(SuiteDescriptor{});
  const SearchReport r = xfernas_search([&](const Genome& g) { return suite.evaluate("task_4", g); },
                                        ObservationHistory{}, "task_4", tiny_config());
  ASSERT_FALSE(r.evaluated.empty());
  for (const auto& e : r.evaluated) {
    if (e.round == 1) EXPECT_EQ(e.provenance, Provenance::random_fill);
  }
  EXPECT_LE(r.oracle_calls, 6);
}

TEST(Search, OracleFailureReturnsPartialReport) {
  const TaskSuite suite(SuiteDescriptor{});
  const ObservationHistory source = build_source_knowledge(suite, 8, 4);
  int calls = 0;
  const SearchReport r = xfernas_search(
      [&](const Genome& g) {
        if (++calls == 4) throw std::runtime_error("evaluation crashed");
        return suite.evaluate("task_4", g);
      },
      source, "task_4", tiny_config());
  EXPECT_EQ(calls, 4);
  EXPECT_EQ(r.oracle_calls, 4);
  EXPECT_EQ(r.evaluated.size(), 3u);
  EXPECT_NE(r.failure.find("evaluation crashed"), std::string::npos);
}

TEST(Search, ConfigValidation) {
  SearchConfig cfg;
  EXPECT_EQ(cfg.rounds * cfg.starts_per_round, cfg.budget);
  EXPECT_EQ(cfg.eta, 10.0);
  cfg.budget = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = SearchConfig{};
  cfg.eta = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(RandomSearch, ExactBudgetDistinctAndNovel) {
  const TaskSuite suite(SuiteDescriptor{});
  const ObservationHistory source = build_source_knowledge(suite, 10, 1);
  int calls = 0;
  const SearchReport r = random_search(
      [&](const Genome& g) {
        ++calls;
        return suite.evaluate("task_4", g);
      },
      fingerprints_of(source), SearchConfig{});
  EXPECT_EQ(calls, 33);
  std::set<std::string> seen;
  for (const auto& e : r.evaluated) {
    EXPECT_TRUE(seen.insert(fingerprint(e.genome)).second);
    EXPECT_FALSE(source.contains_any(fingerprint(e.genome)));
  }
}

TEST(Report, JsonAndCsv) {
  const TaskSuite suite(SuiteDescriptor{});
  const SearchReport r = random_search([&](const Genome& g) { return suite.evaluate("task_4", g); }, {},
                                       tiny_config());
  const auto doc = nlohmann::json::parse(report_to_json(r));
  EXPECT_EQ(doc.at("evaluated").size(), 6u);
  EXPECT_EQ(doc.at("oracle_calls"), 6);
  EXPECT_EQ(doc.at("best").at("score").get<double>(), r.best->score);
  const std::string csv = report_to_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "round,provenance,score,fingerprint");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  EXPECT_NE(csv.find(",random,"), std::string::npos);
}
