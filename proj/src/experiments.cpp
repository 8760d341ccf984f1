#include "xfernas/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <Eigen/Dense>
#include <json.hpp>

#include "xfernas/errors.hpp"
#include "xfernas/seeding.hpp"

namespace xfernas {

namespace {

constexpr int kBlocks = 5;

// Streams derived from AblationConfig::seed.
constexpr std::uint64_t kTargetPoolStream = 1;
constexpr std::uint64_t kSourcePoolStream = 2;
constexpr std::uint64_t kSplitStream = 100;
constexpr std::uint64_t kSourceSplitStream = 200;
constexpr std::uint64_t kInitStream = 300;
constexpr std::uint64_t kKnowledgeStream = 7;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<Genome> distinct_genomes(std::mt19937_64& rng, int n, std::set<std::string>& seen) {
  std::vector<Genome> out;
  out.reserve(static_cast<std::size_t>(n));
  while (static_cast<int>(out.size()) < n) {
    Genome g = sample_genome(rng(), kBlocks);
    if (seen.insert(fingerprint(g)).second) out.push_back(std::move(g));
  }
  return out;
}

struct Pools {
  std::vector<Genome> target;
  std::vector<double> target_scores;
  std::vector<std::vector<ObservationRecord>> source;  // per source task
};

Pools make_pools(const AblationConfig& cfg, const TaskSuite& suite) {
  Pools p;
  std::set<std::string> seen;
  std::mt19937_64 trng(mix_seed(cfg.seed, kTargetPoolStream));
  p.target = distinct_genomes(trng, cfg.pool_size, seen);
  for (const auto& g : p.target) p.target_scores.push_back(suite.evaluate(suite.target_task(), g));
  const int per_task = *std::max_element(cfg.source_sizes.begin(), cfg.source_sizes.end());
  std::mt19937_64 srng(mix_seed(cfg.seed, kSourcePoolStream));
  for (const auto& task : suite.source_tasks()) {
    std::vector<ObservationRecord> records;
    for (auto& g : distinct_genomes(srng, per_task, seen)) {
      const double s = suite.evaluate(task, g);
      records.push_back({task, std::move(g), s});
    }
    p.source.push_back(std::move(records));
  }
  return p;
}

// Split k: a permutation of the target pool (holdout first, then candidates)
// and one permutation per source pool.
struct Split {
  std::vector<std::size_t> target_order;
  std::vector<std::vector<std::size_t>> source_order;
};

Split make_split(const AblationConfig& cfg, const Pools& pools, int split) {
  Split s;
  s.target_order.resize(pools.target.size());
  std::iota(s.target_order.begin(), s.target_order.end(), 0);
  std::mt19937_64 rng(mix_seed(cfg.seed, kSplitStream + static_cast<std::uint64_t>(split)));
  std::shuffle(s.target_order.begin(), s.target_order.end(), rng);
  std::mt19937_64 srng(mix_seed(cfg.seed, kSourceSplitStream + static_cast<std::uint64_t>(split)));
  for (const auto& records : pools.source) {
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), srng);
    s.source_order.push_back(std::move(order));
  }
  return s;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n == 0) return std::nan("");
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

nlohmann::json train_to_json(const TrainConfig& t) {
  return {{"alpha", t.alpha},         {"lr", t.lr},
          {"weight_decay", t.weight_decay}, {"epochs", t.epochs},
          {"batch_size", t.batch_size}, {"max_steps", t.max_steps},
          {"clip_norm", t.clip_norm}};
}

template <typename T>
void take(const nlohmann::json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

void reject_unknown(const nlohmann::json& obj, std::initializer_list<std::string_view> keys, const std::string& where) {
  for (const auto& [k, v] : obj.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

}  // namespace

TrainConfig AblationConfig::default_train() {
  TrainConfig t;
  t.epochs = 100;
  t.max_steps = 110;
  return t;
}

void AblationConfig::validate() const {
  if (splits < 1) throw ConfigError("splits must be >= 1");
  if (holdout < 2) throw ConfigError("holdout must be >= 2");
  if (holdout >= pool_size) throw ConfigError("holdout must be smaller than pool_size");
  if (source_sizes.empty() || target_sizes.empty()) throw ConfigError("source_sizes and target_sizes must be nonempty");
  for (int s : source_sizes) {
    if (s < 0) throw ConfigError("source sizes must be >= 0");
  }
  for (int t : target_sizes) {
    if (t < 0 || t > pool_size - holdout) {
      throw ConfigError("target size " + std::to_string(t) + " outside [0, pool_size - holdout]");
    }
  }
  if (suite.n_tasks < 1) throw ConfigError("suite needs at least one task");
  train.validate();
}

AblationConfig ablation_config_from_json(std::string_view text) {
  AblationConfig cfg;
  try {
    const auto doc = nlohmann::json::parse(text);
    if (!doc.is_object()) throw ConfigError("ablation config must be a JSON object");
    reject_unknown(doc, {"pool_size", "holdout", "splits", "source_sizes", "target_sizes", "seed", "suite", "train"},
                   "ablation config");
    take(doc, "pool_size", cfg.pool_size);
    take(doc, "holdout", cfg.holdout);
    take(doc, "splits", cfg.splits);
    take(doc, "source_sizes", cfg.source_sizes);
    take(doc, "target_sizes", cfg.target_sizes);
    take(doc, "seed", cfg.seed);
    if (doc.contains("suite")) cfg.suite = suite_from_json(doc.at("suite").dump());
    if (doc.contains("train")) {
      const auto& t = doc.at("train");
      reject_unknown(t, {"alpha", "lr", "weight_decay", "epochs", "batch_size", "max_steps", "clip_norm", "seed"},
                     "ablation config train");
      take(t, "alpha", cfg.train.alpha);
      take(t, "lr", cfg.train.lr);
      take(t, "weight_decay", cfg.train.weight_decay);
      take(t, "epochs", cfg.train.epochs);
      take(t, "batch_size", cfg.train.batch_size);
      take(t, "max_steps", cfg.train.max_steps);
      take(t, "clip_norm", cfg.train.clip_norm);
      take(t, "seed", cfg.train.seed);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("ablation config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

AblationConfig load_ablation_config(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw ConfigError("cannot read " + file.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ablation_config_from_json(ss.str());
}

std::string ablation_config_to_json(const AblationConfig& cfg) {
  nlohmann::json doc = {{"pool_size", cfg.pool_size},
                        {"holdout", cfg.holdout},
                        {"splits", cfg.splits},
                        {"source_sizes", cfg.source_sizes},
                        {"target_sizes", cfg.target_sizes},
                        {"seed", cfg.seed},
                        {"suite", nlohmann::json::parse(suite_to_json(cfg.suite))},
                        {"train", train_to_json(cfg.train)}};
  return doc.dump(2) + "\n";
}

AblationCell run_ablation_cell(const AblationConfig& cfg, int source_size, int target_size, int split) {
  cfg.validate();
  if (source_size < 0 || target_size < 0 || target_size > cfg.pool_size - cfg.holdout || split < 0) {
    throw ConfigError("cell outside the configured grid");
  }
  const TaskSuite suite(cfg.suite);
  AblationConfig sized = cfg;
  sized.source_sizes.push_back(source_size);
  const Pools pools = make_pools(sized, suite);
  const Split sp = make_split(cfg, pools, split);
  const std::string target = suite.target_task();

  ObservationHistory history(suite.tasks(), target);
  for (std::size_t t = 0; t < pools.source.size(); ++t) {
    for (int i = 0; i < source_size; ++i) history.add(pools.source[t][sp.source_order[t][static_cast<std::size_t>(i)]]);
  }
  for (int i = 0; i < target_size; ++i) {
    const std::size_t k = sp.target_order[static_cast<std::size_t>(cfg.holdout + i)];
    history.add({target, pools.target[k], pools.target_scores[k]});
  }

  TrainConfig tc = cfg.train;
  tc.seed = mix_seed(cfg.seed, kInitStream + static_cast<std::uint64_t>(split));
  // With nothing to learn from, the freshly initialized network is scored.
  XferNet net = history.empty() ? XferNet(suite.tasks(), target, mix_seed(tc.seed, 0)) : train(history, tc).net;

  std::vector<TokenSeq> seqs;
  std::vector<double> truth;
  for (int i = 0; i < cfg.holdout; ++i) {
    const std::size_t k = sp.target_order[static_cast<std::size_t>(i)];
    seqs.push_back(tokenize(pools.target[k]));
    truth.push_back(pools.target_scores[k]);
  }
  std::vector<double> pred;
  for (const auto& e : net.encode_batch(seqs)) pred.push_back(net.predict(e.code, target));
  return {source_size, target_size, split, pearson(pred, truth)};
}

std::vector<AblationCell> run_ablation(const AblationConfig& cfg, const CellCallback& on_cell) {
  cfg.validate();
  std::vector<AblationCell> cells;
  for (int s : cfg.source_sizes) {
    for (int t : cfg.target_sizes) {
      for (int k = 0; k < cfg.splits; ++k) {
        cells.push_back(run_ablation_cell(cfg, s, t, k));
        if (on_cell) on_cell(cells.back());
      }
    }
  }
  return cells;
}

std::vector<AblationSummary> summarize(const std::vector<AblationCell>& cells) {
  std::vector<AblationSummary> rows;
  std::vector<std::vector<double>> values;
  for (const auto& c : cells) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const AblationSummary& r) {
      return r.source_size == c.source_size && r.target_size == c.target_size;
    });
    if (it == rows.end()) {
      rows.push_back({c.source_size, c.target_size});
      values.emplace_back();
      it = rows.end() - 1;
    }
    values[static_cast<std::size_t>(it - rows.begin())].push_back(c.pearson_r);
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& v = values[i];
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    rows[i].n = static_cast<int>(v.size());
    rows[i].mean = mean;
    rows[i].std = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  }
  return rows;
}

const AblationSummary* find_summary(const std::vector<AblationSummary>& rows, int source_size, int target_size) {
  for (const auto& r : rows) {
    if (r.source_size == source_size && r.target_size == target_size) return &r;
  }
  return nullptr;
}

std::string cells_to_csv(const std::vector<AblationCell>& cells) {
  std::string out = "source_size,target_size,split,pearson_r\n";
  for (const auto& c : cells) {
    out += std::to_string(c.source_size) + "," + std::to_string(c.target_size) + "," + std::to_string(c.split) + "," +
           fmt(c.pearson_r) + "\n";
  }
  return out;
}

std::string summary_to_csv(const std::vector<AblationSummary>& rows) {
  std::string out = "source_size,target_size,n,mean,std\n";
  for (const auto& r : rows) {
    out += std::to_string(r.source_size) + "," + std::to_string(r.target_size) + "," + std::to_string(r.n) + "," +
           fmt(r.mean) + "," + fmt(r.std) + "\n";
  }
  return out;
}

double ridge_baseline(const TaskSuite& suite, const std::vector<Genome>& train, const std::vector<Genome>& test,
                      double lambda) {
  if (train.empty()) throw DataError("ridge baseline needs training genomes");
  const std::string target = suite.target_task();
  const Eigen::Index d = kFeatureDim + 1;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(train.size()), d);
  Eigen::VectorXd y(static_cast<Eigen::Index>(train.size()));
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto phi = suite.features(train[i]);
    const auto r = static_cast<Eigen::Index>(i);
    for (Eigen::Index j = 0; j < kFeatureDim; ++j) x(r, j) = phi[static_cast<std::size_t>(j)];
    x(r, kFeatureDim) = 1.0;
    y(r) = suite.evaluate(target, train[i]);
  }
  Eigen::MatrixXd gram = x.transpose() * x;
  gram.diagonal().head(kFeatureDim).array() += lambda;  // the intercept is not penalized
  const Eigen::VectorXd w = gram.ldlt().solve(x.transpose() * y);
  std::vector<double> pred, truth;
  for (const auto& g : test) {
    const auto phi = suite.features(g);
    double p = w(kFeatureDim);
    for (Eigen::Index j = 0; j < kFeatureDim; ++j) p += w(j) * phi[static_cast<std::size_t>(j)];
    pred.push_back(p);
    truth.push_back(suite.evaluate(target, g));
  }
  return pearson(pred, truth);
}

double ridge_learnability(const AblationConfig& cfg, int target_size) {
  cfg.validate();
  if (target_size < 1 || target_size > cfg.pool_size - cfg.holdout) throw ConfigError("target size out of range");
  const TaskSuite suite(cfg.suite);
  AblationConfig no_source = cfg;
  no_source.source_sizes = {0};
  const Pools pools = make_pools(no_source, suite);
  const Split sp = make_split(no_source, pools, 0);
  std::vector<Genome> train_set, test_set;
  for (int i = 0; i < cfg.holdout; ++i) test_set.push_back(pools.target[sp.target_order[static_cast<std::size_t>(i)]]);
  for (int i = 0; i < target_size; ++i) {
    train_set.push_back(pools.target[sp.target_order[static_cast<std::size_t>(cfg.holdout + i)]]);
  }
  return ridge_baseline(suite, train_set, test_set);
}

// ---------------------------------------------------------------------------

SearchConfig ComparisonConfig::default_search() {
  SearchConfig s;
  s.train.max_steps = 200;
  return s;
}

ComparisonRow run_comparison_seed(const ComparisonConfig& cfg, std::uint64_t seed) {
  const TaskSuite suite(cfg.suite);
  const std::string target = suite.target_task();
  int calls = 0;
  const Oracle oracle = [&](const Genome& g) {
    ++calls;
    return suite.evaluate(target, g);
  };
  SearchConfig sc = cfg.search;
  sc.seed = seed;
  const auto best = [](const SearchReport& r) { return r.best ? r.best->score : std::nan(""); };
  const auto fail = [](const SearchReport& r) {
    if (!r.failure.empty()) throw SearchError("oracle failed: " + r.failure);
  };

  ComparisonRow row;
  row.seed = seed;
  const ObservationHistory source = build_source_knowledge(suite, cfg.source_per_task, mix_seed(seed, kKnowledgeStream));
  SearchReport with = xfernas_search(oracle, source, target, sc);
  fail(with);
  row.transfer = best(with);
  row.transfer_calls = std::exchange(calls, 0);

  SearchReport without = xfernas_search(oracle, ObservationHistory({target}, target), target, sc);
  fail(without);
  row.no_transfer = best(without);
  row.no_transfer_calls = std::exchange(calls, 0);

  SearchReport random = random_search(oracle, {}, sc);
  fail(random);
  row.random = best(random);
  row.random_calls = std::exchange(calls, 0);
  return row;
}

std::vector<ComparisonRow> run_search_comparison(const ComparisonConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                                 const RowCallback& on_row) {
  if (seeds.size() < 2) throw ConfigError("comparison needs at least two seeds");
  cfg.search.validate();
  std::vector<ComparisonRow> rows;
  for (std::uint64_t s : seeds) {
    rows.push_back(run_comparison_seed(cfg, s));
    if (on_row) on_row(rows.back());
  }
  return rows;
}

ComparisonSummary summarize(const std::vector<ComparisonRow>& rows) {
  ComparisonSummary s;
  std::vector<double> t, n, r;
  for (const auto& row : rows) {
    t.push_back(row.transfer);
    n.push_back(row.no_transfer);
    r.push_back(row.random);
    if (row.transfer >= row.random) ++s.wins_vs_random;
    if (row.transfer >= row.no_transfer) ++s.wins_vs_no_transfer;
  }
  s.transfer_median = median(t);
  s.no_transfer_median = median(n);
  s.random_median = median(r);
  s.seeds = static_cast<int>(rows.size());
  return s;
}

std::string comparison_to_csv(const std::vector<ComparisonRow>& rows) {
  std::string out = "seed,transfer,no_transfer,random,transfer_calls,no_transfer_calls,random_calls\n";
  for (const auto& r : rows) {
    out += std::to_string(r.seed) + "," + fmt(r.transfer) + "," + fmt(r.no_transfer) + "," + fmt(r.random) + "," +
           std::to_string(r.transfer_calls) + "," + std::to_string(r.no_transfer_calls) + "," +
           std::to_string(r.random_calls) + "\n";
  }
  return out;
}

std::string comparison_summary_to_csv(const ComparisonSummary& s) {
  return "seeds,transfer_median,no_transfer_median,random_median,wins_vs_random,wins_vs_no_transfer\n" +
         std::to_string(s.seeds) + "," + fmt(s.transfer_median) + "," + fmt(s.no_transfer_median) + "," +
         fmt(s.random_median) + "," + std::to_string(s.wins_vs_random) + "," + std::to_string(s.wins_vs_no_transfer) +
         "\n";
}

}  // namespace xfernas
