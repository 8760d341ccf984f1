#include "xfernas/taskbench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "xfernas/archspace_json.hpp"
#include "xfernas/errors.hpp"

namespace xfernas {

namespace {

// Spread of the projection entries; puts the logit standard deviation across
// random genomes near 1.
constexpr double kProjectionScale = 2.5;
constexpr double kOffsetScale = 0.25;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::vector<double> unit_gaussian(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> w(dim);
  double sq = 0.0;
  for (double& v : w) {
    v = normal(rng);
    sq += v * v;
  }
  const double norm = std::sqrt(sq);
  for (double& v : w) v /= norm;
  return w;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

std::vector<double> raw_features(const Genome& g) {
  std::vector<double> f(kRawFeatureDim, 0.0);
  const double blocks = g.num_blocks();
  int cell_index = 0;
  for (const Cell* cell : {&g.normal, &g.reduction}) {
    double* hist = f.data() + cell_index * kNumOperations;
    double gap = 0.0;
    for (int b = 1; b <= cell->num_blocks(); ++b) {
      const Block& blk = cell->blocks[b - 1];
      hist[operation_id(blk.op1)] += 1.0;
      hist[operation_id(blk.op2)] += 1.0;
      gap += (b + 1 - blk.input1) + (b + 1 - blk.input2);
    }
    for (int k = 0; k < kNumOperations; ++k) hist[k] /= 2.0 * blocks;
    f[2 * kNumOperations + cell_index] = gap / (2.0 * blocks) / blocks;
    ++cell_index;
  }
  return f;
}

// ---------------------------------------------------------------------------

std::string suite_to_json(const SuiteDescriptor& d) {
  nlohmann::json doc = {{"seed", d.seed}, {"n_tasks", d.n_tasks}, {"tau", d.tau}, {"noise_sigma", d.noise_sigma}};
  return doc.dump(2) + "\n";
}

SuiteDescriptor suite_from_json(std::string_view text) {
  try {
    const auto doc = nlohmann::json::parse(text);
    if (!doc.is_object()) throw FormatError("suite descriptor must be a JSON object");
    for (const auto& [key, value] : doc.items()) {
      if (key != "seed" && key != "n_tasks" && key != "tau" && key != "noise_sigma") {
        throw FormatError("suite descriptor: unknown key '" + key + "'");
      }
    }
    SuiteDescriptor d;
    d.seed = doc.value("seed", d.seed);
    d.n_tasks = doc.value("n_tasks", d.n_tasks);
    d.tau = doc.value("tau", d.tau);
    d.noise_sigma = doc.value("noise_sigma", d.noise_sigma);
    if (d.n_tasks < 1) throw ConfigError("suite needs at least one task");
    if (d.tau < 0.0 || d.noise_sigma < 0.0) throw ConfigError("suite tau and noise_sigma must be >= 0");
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("suite descriptor: ") + e.what());
  }
}

void save_suite(const SuiteDescriptor& d, const std::filesystem::path& file) {
  std::ofstream os(file);
  if (!os) throw Error("cannot write " + file.string());
  os << suite_to_json(d);
}

SuiteDescriptor load_suite(const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw Error("cannot read " + file.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return suite_from_json(ss.str());
}

TaskSuite::TaskSuite(SuiteDescriptor descriptor) : descriptor_(descriptor) {
  if (descriptor_.n_tasks < 1) throw ConfigError("suite needs at least one task");
  if (descriptor_.tau < 0.0 || descriptor_.noise_sigma < 0.0) {
    throw ConfigError("suite tau and noise_sigma must be >= 0");
  }
  std::mt19937_64 rng(descriptor_.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  projection_.resize(static_cast<std::size_t>(kFeatureDim) * kRawFeatureDim);
  for (double& v : projection_) v = kProjectionScale * normal(rng);
  universal_ = unit_gaussian(rng, kFeatureDim);
  for (int t = 0; t < descriptor_.n_tasks; ++t) task_weights_.push_back(unit_gaussian(rng, kFeatureDim));
  for (int t = 0; t < descriptor_.n_tasks; ++t) offsets_.push_back(kOffsetScale * normal(rng));
}

int TaskSuite::task_index(std::string_view id) const {
  for (int t = 0; t < n_tasks(); ++t) {
    if (task_id(t) == id) return t;
  }
  throw RegistryError("unknown task '" + std::string(id) + "'");
}

std::vector<std::string> TaskSuite::tasks() const {
  std::vector<std::string> ids;
  for (int t = 0; t < n_tasks(); ++t) ids.push_back(task_id(t));
  return ids;
}

std::vector<std::string> TaskSuite::source_tasks() const {
  std::vector<std::string> ids = tasks();
  ids.pop_back();
  return ids;
}

void TaskSuite::check_task(int task) const {
  if (task < 0 || task >= n_tasks()) throw RegistryError("task index " + std::to_string(task) + " out of range");
}

std::vector<double> TaskSuite::features(const Genome& g) const {
  const std::vector<double> raw = raw_features(g);
  std::vector<double> phi(kFeatureDim, 0.0);
  for (int r = 0; r < kFeatureDim; ++r) {
    for (int c = 0; c < kRawFeatureDim; ++c) phi[r] += projection_[r * kRawFeatureDim + c] * raw[c];
  }
  return phi;
}

double TaskSuite::logit(int task, const Genome& g) const {
  check_task(task);
  const std::vector<double> phi = features(g);
  return dot(universal_, phi) + descriptor_.tau * dot(task_weights_[task], phi) + offsets_[task];
}

double TaskSuite::evaluate(int task, const Genome& g) const {
  double z = logit(task, g);
  if (descriptor_.noise_sigma > 0.0) {
    const std::string fp = fingerprint(g);
    const std::uint64_t key =
        splitmix64(descriptor_.seed ^ splitmix64(static_cast<std::uint64_t>(task) ^ splitmix64(std::stoull(fp, nullptr, 16))));
    std::mt19937_64 rng(key);
    z += descriptor_.noise_sigma * std::normal_distribution<double>(0.0, 1.0)(rng);
  }
  return 1.0 / (1.0 + std::exp(-z));
}

// ---------------------------------------------------------------------------

ObservationHistory::ObservationHistory(std::vector<std::string> tasks, std::string target) {
  for (const auto& t : tasks) register_task(t);
  set_target(std::move(target));
}

void ObservationHistory::set_target(std::string target) {
  if (!target.empty()) register_task(target);
  target_ = std::move(target);
}

void ObservationHistory::register_task(const std::string& task) {
  if (task.empty()) throw RegistryError("task ids must be nonempty");
  if (!has_task(task)) tasks_.push_back(task);
}

bool ObservationHistory::has_task(std::string_view task) const {
  return std::find(tasks_.begin(), tasks_.end(), task) != tasks_.end();
}

std::vector<std::string> ObservationHistory::source_tasks() const {
  std::vector<std::string> out;
  for (const auto& t : tasks_) {
    if (t != target_) out.push_back(t);
  }
  return out;
}

void ObservationHistory::add(ObservationRecord record) {
  if (!has_task(record.task)) throw RegistryError("task '" + record.task + "' is not registered");
  if (!(record.score >= 0.0 && record.score <= 1.0)) {
    throw DataError("score " + std::to_string(record.score) + " outside [0, 1]");
  }
  std::string fp = fingerprint(record.genome);
  if (contains(record.task, fp)) {
    throw DataError("genome " + fp + " already recorded for task '" + record.task + "'");
  }
  records_.push_back(std::move(record));
  fingerprints_.push_back(std::move(fp));
}

void ObservationHistory::append(const ObservationHistory& other) {
  for (const auto& t : other.tasks()) register_task(t);
  for (const auto& r : other.records()) add(r);
}

bool ObservationHistory::contains(std::string_view task, const std::string& fp) const {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (fingerprints_[i] == fp && records_[i].task == task) return true;
  }
  return false;
}

bool ObservationHistory::contains_any(const std::string& fp) const {
  return std::find(fingerprints_.begin(), fingerprints_.end(), fp) != fingerprints_.end();
}

std::vector<ObservationRecord> ObservationHistory::records_for(std::string_view task) const {
  std::vector<ObservationRecord> out;
  for (const auto& r : records_) {
    if (r.task == task) out.push_back(r);
  }
  return out;
}

ObservationHistory build_source_knowledge(const TaskSuite& suite, int n_per_task, std::uint64_t seed) {
  if (n_per_task < 0) throw ConfigError("n_per_task must be >= 0");
  ObservationHistory h(suite.tasks(), suite.target_task());
  std::mt19937_64 rng(seed);
  std::set<std::string> seen;
  for (const std::string& task : suite.source_tasks()) {
    const int index = suite.task_index(task);
    int made = 0;
    while (made < n_per_task) {
      Genome g = sample_genome(rng(), 5);
      if (!seen.insert(fingerprint(g)).second) continue;
      const double score = suite.evaluate(index, g);
      h.add({task, std::move(g), score});
      ++made;
    }
  }
  return h;
}

// ---------------------------------------------------------------------------

std::string history_to_jsonl(const ObservationHistory& h) {
  std::string out;
  for (const auto& r : h.records()) {
    nlohmann::json line = {{"task", r.task}, {"score", r.score}, {"genome", genome_to_json_value(r.genome)}};
    out += line.dump();
    out += '\n';
  }
  return out;
}

ObservationHistory history_from_jsonl(std::string_view text) {
  ObservationHistory h;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const std::string where = "history line " + std::to_string(line_no) + ": ";
    try {
      const auto doc = nlohmann::json::parse(line);
      if (!doc.is_object() || !doc.contains("task") || !doc.contains("score") || !doc.contains("genome")) {
        throw FormatError("expected keys task, score, genome");
      }
      ObservationRecord r;
      r.task = doc.at("task").get<std::string>();
      if (!doc.at("score").is_number()) throw FormatError("score must be a number");
      r.score = doc.at("score").get<double>();
      if (!(r.score >= 0.0 && r.score <= 1.0)) {
        throw DataError("score " + doc.at("score").dump() + " outside [0, 1]");
      }
      r.genome = genome_from_json_value(doc.at("genome"));
      h.register_task(r.task);
      h.add(std::move(r));
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    } catch (const Error& e) {
      throw FormatError(where + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + e.what());
    }
  }
  return h;
}

void save_history(const ObservationHistory& h, const std::filesystem::path& file) {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + file.string());
  os << history_to_jsonl(h);
}

ObservationHistory load_history(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw Error("cannot read " + file.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return history_from_jsonl(ss.str());
}

double pearson(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.size() != truth.size()) throw DataError("pearson: length mismatch");
  if (pred.size() < 2) throw DataError("pearson: need at least two values");
  const double n = static_cast<double>(pred.size());
  double mp = 0.0, mt = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mp += pred[i];
    mt += truth[i];
  }
  mp /= n;
  mt /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double dx = pred[i] - mp, dy = truth[i] - mt;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) throw DataError("pearson: correlation undefined for zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

}  // namespace xfernas
