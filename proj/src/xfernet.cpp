#include "xfernas/xfernet.hpp"

#include <algorithm>
#include <cstdlib>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include <json.hpp>

#include "xfernas/errors.hpp"
#include "xfernas/optim.hpp"
#include "xfernas/seeding.hpp"

namespace xfernas {

using ad::Graph;
using ad::Var;

namespace {

constexpr std::size_t kEncodeChunk = 64;

std::string res_path(std::string_view task, const char* leaf) {
  return "res/" + std::string(task) + "/" + leaf;
}

struct LstmState {
  Var h;
  Var c;
};

// gates_in already holds x·W_x for this step; order of gate blocks is
// input, forget, candidate, output.
LstmState lstm_step(Var gates_in, LstmState s, Var wh, Var bias, std::size_t hidden) {
  Var gates = ad::add(ad::add(gates_in, ad::matmul(s.h, wh)), bias);
  Var i = ad::sigmoid(ad::slice_cols(gates, 0, hidden));
  Var f = ad::sigmoid(ad::slice_cols(gates, hidden, hidden));
  Var cand = ad::tanh(ad::slice_cols(gates, 2 * hidden, hidden));
  Var o = ad::sigmoid(ad::slice_cols(gates, 3 * hidden, hidden));
  Var c = ad::add(ad::mul(f, s.c), ad::mul(i, cand));
  Var h = ad::mul(o, ad::tanh(c));
  return {h, c};
}

}  // namespace

void TrainConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
}

XferNet::XferNet(std::vector<std::string> tasks, std::string target, std::uint64_t seed, XferNetConfig config)
    : config_(config), tasks_(std::move(tasks)), target_(std::move(target)) {
  if (config_.blocks < 1) throw ConfigError("XferNet needs B >= 1");
  if (target_.empty()) throw ConfigError("XferNet needs a designated target task");
  if (std::find(tasks_.begin(), tasks_.end(), target_) == tasks_.end()) tasks_.push_back(target_);
  for (const auto& t : tasks_) {
    if (t == kUniversal || t.empty()) throw RegistryError("invalid task id '" + t + "'");
    if (std::count(tasks_.begin(), tasks_.end(), t) != 1) throw RegistryError("duplicate task id '" + t + "'");
  }
  params_ = init_params(seed, param_specs());
}

std::vector<ParamSpec> XferNet::param_specs() const {
  const std::size_t v = vocab_size(config_.blocks);
  const std::size_t e = config_.embedding, h = config_.hidden;
  const std::size_t uh = config_.universal_hidden, rh = config_.residual_hidden;
  using enum InitScheme;
  std::vector<ParamSpec> specs = {
      {"embedding", {v, e}, uniform_fan_in, e, true},
      {"enc/wx", {e, 4 * h}, uniform_fan_in, h, true},
      {"enc/wh", {h, 4 * h}, uniform_fan_in, h, true},
      {"enc/b", {4 * h}, zeros, 0, false},
      {"dec/wx", {e, 4 * h}, uniform_fan_in, h, true},
      {"dec/wh", {h, 4 * h}, uniform_fan_in, h, true},
      {"dec/b", {4 * h}, zeros, 0, false},
      {"attn/wq", {h, h}, uniform_fan_in, h, true},
      {"attn/wc", {2 * h, h}, uniform_fan_in, 2 * h, true},
      {"attn/bc", {h}, zeros, 0, false},
      {"out/w", {h, v}, uniform_fan_in, h, true},
      {"out/b", {v}, zeros, 0, false},
      {"uni/w1", {h, uh}, uniform_fan_in, h, true},
      {"uni/b1", {uh}, zeros, 0, false},
      {"uni/w2", {uh, 1}, uniform_fan_in, uh, true},
      {"uni/b2", {1}, zeros, 0, false},
  };
  for (const auto& task : tasks_) {
    specs.push_back({res_path(task, "w1"), {h, rh}, uniform_fan_in, h, true});
    specs.push_back({res_path(task, "b1"), {rh}, zeros, 0, false});
    // Zero output layer: a fresh residual contributes exactly nothing.
    specs.push_back({res_path(task, "w2"), {rh, 1}, zeros, 0, true});
    specs.push_back({res_path(task, "b2"), {1}, zeros, 0, false});
  }
  return specs;
}

void XferNet::check_task(std::string_view task) const {
  if (task == kUniversal) return;
  if (std::find(tasks_.begin(), tasks_.end(), task) == tasks_.end()) {
    throw RegistryError("task '" + std::string(task) + "' has no residual head");
  }
}

void XferNet::check_tokens(const TokenSeq& seq) const {
  if (seq.blocks != config_.blocks || seq.length() != sequence_length(config_.blocks)) {
    throw ContractViolation("token sequence does not match the network's B=" + std::to_string(config_.blocks));
  }
  for (int t : seq.tokens) {
    if (t < 0 || t >= vocab_size(config_.blocks)) {
      throw ContractViolation("token " + std::to_string(t) + " outside the vocabulary");
    }
  }
}

// ---------------------------------------------------------------------------

XferNet::EncoderPass XferNet::encoder(Graph& g, const ParamStore& p, std::span<const TokenSeq> seqs) const {
  const std::size_t n = seqs.size();
  const std::size_t steps = sequence_length(config_.blocks);
  const std::size_t hidden = config_.hidden;
  std::vector<int> indices(steps * n);
  for (std::size_t i = 0; i < n; ++i) {
    check_tokens(seqs[i]);
    for (std::size_t t = 0; t < steps; ++t) indices[t * n + i] = seqs[i].tokens[t];
  }
  Var xw = ad::matmul(ad::embedding(g.param(p, "embedding"), indices), g.param(p, "enc/wx"));
  Var wh = g.param(p, "enc/wh");
  Var bias = g.param(p, "enc/b");
  LstmState s{g.constant(Tensor({n, hidden})), g.constant(Tensor({n, hidden}))};
  std::vector<Var> hs;
  hs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    s = lstm_step(ad::slice_rows(xw, t * n, n), s, wh, bias, hidden);
    hs.push_back(s.h);
  }
  Var states = ad::stack(hs);
  return {states, ad::mean_axis0(states)};
}

Var XferNet::universal_head(Graph& g, const ParamStore& p, Var z) const {
  Var h = ad::tanh(ad::add(ad::matmul(z, g.param(p, "uni/w1")), g.param(p, "uni/b1")));
  return ad::add(ad::matmul(h, g.param(p, "uni/w2")), g.param(p, "uni/b2"));
}

Var XferNet::residual_head(Graph& g, const ParamStore& p, Var z, std::string_view task) const {
  Var h = ad::tanh(ad::add(ad::matmul(z, g.param(p, res_path(task, "w1"))), g.param(p, res_path(task, "b1"))));
  return ad::add(ad::matmul(h, g.param(p, res_path(task, "w2"))), g.param(p, res_path(task, "b2")));
}

Var XferNet::task_predictions(Graph& g, const ParamStore& p, Var z, std::span<const std::string> tasks) const {
  const std::size_t n = tasks.size();
  Var pred = universal_head(g, p, z);
  for (const auto& task : tasks_) {
    std::vector<int> rows;
    for (std::size_t i = 0; i < n; ++i) {
      if (tasks[i] == task) rows.push_back(static_cast<int>(i));
    }
    if (rows.empty()) continue;
    Var r = rows.size() == n ? residual_head(g, p, z, task)
                             : ad::scatter_rows(residual_head(g, p, ad::gather_rows(z, rows), task), rows, n);
    pred = ad::add(pred, r);
  }
  return pred;
}

LossTerms XferNet::loss(Graph& g, const ParamStore& p, std::span<const TrainingExample> batch, double alpha) const {
  if (batch.empty()) throw ContractViolation("loss of an empty batch");
  const std::size_t n = batch.size();
  const std::size_t steps = sequence_length(config_.blocks);
  const std::size_t hidden = config_.hidden;

  std::vector<TokenSeq> seqs;
  std::vector<std::string> tasks;
  Tensor scores({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    if (!(batch[i].score >= 0.0 && batch[i].score <= 1.0)) {
      throw DataError("training score " + std::to_string(batch[i].score) + " outside [0, 1]");
    }
    check_task(batch[i].task);
    seqs.push_back(batch[i].tokens);
    tasks.push_back(batch[i].task);
    scores[i] = batch[i].score;
  }
  EncoderPass enc = encoder(g, p, seqs);

  LossTerms terms;
  terms.prediction = ad::squared_error(task_predictions(g, p, enc.code, tasks), scores);

  // Teacher-forced decoder: step t sees token t-1 (a zero vector at t = 0).
  std::vector<int> inputs(steps * n);
  for (std::size_t i = 0; i < n; ++i) {
    inputs[i] = -1;
    for (std::size_t t = 1; t < steps; ++t) inputs[t * n + i] = seqs[i].tokens[t - 1];
  }
  Var xw = ad::matmul(ad::embedding(g.param(p, "embedding"), inputs), g.param(p, "dec/wx"));
  Var wh = g.param(p, "dec/wh"), bias = g.param(p, "dec/b");
  Var wq = g.param(p, "attn/wq"), wc = g.param(p, "attn/wc"), bc = g.param(p, "attn/bc");
  Var wo = g.param(p, "out/w"), bo = g.param(p, "out/b");
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hidden));
  LstmState s{enc.code, enc.code};
  std::vector<Var> hs;
  hs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    s = lstm_step(ad::slice_rows(xw, t * n, n), s, wh, bias, hidden);
    hs.push_back(s.h);
  }
  // Attention does not feed back into the recurrence, so every position is
  // handled at once: row t*n + i is record i at step t.
  Var h = ad::reshape(ad::stack(hs), {steps * n, hidden});
  Var weights = ad::softmax_rows(ad::attention_scores(enc.states, ad::matmul(h, wq), attn_scale));
  Var ctx = ad::attention_context(weights, enc.states);
  const Var both[] = {h, ctx};
  Var combined = ad::tanh(ad::add(ad::matmul(ad::concat_cols(both), wc), bc));
  Var logits = ad::add(ad::matmul(combined, wo), bo);
  std::vector<int> targets(steps * n);
  std::vector<TokenRange> ranges(steps * n);
  for (std::size_t t = 0; t < steps; ++t) {
    const TokenRange legal = legal_tokens(config_.blocks, static_cast<int>(t));
    for (std::size_t i = 0; i < n; ++i) {
      targets[t * n + i] = seqs[i].tokens[t];
      ranges[t * n + i] = legal;
    }
  }
  Var rec = ad::cross_entropy(logits, targets, ranges);
  // Averaged over positions so one record weighs the same in both terms.
  terms.reconstruction = ad::scale(rec, 1.0 / static_cast<double>(steps));
  terms.total = ad::add(ad::scale(terms.prediction, alpha), ad::scale(terms.reconstruction, 1.0 - alpha));
  return terms;
}

// ---------------------------------------------------------------------------

std::vector<Encoding> XferNet::encode_batch(std::span<const TokenSeq> seqs) const {
  std::vector<Encoding> out;
  out.reserve(seqs.size());
  const std::size_t steps = sequence_length(config_.blocks);
  const std::size_t hidden = config_.hidden;
  for (std::size_t start = 0; start < seqs.size(); start += kEncodeChunk) {
    const std::size_t n = std::min(kEncodeChunk, seqs.size() - start);
    Graph g;
    EncoderPass enc = encoder(g, params_, seqs.subspan(start, n));
    const Tensor& states = enc.states.value();
    const Tensor& code = enc.code.value();
    for (std::size_t i = 0; i < n; ++i) {
      Encoding e{Tensor({steps, hidden}), {std::vector<double>(hidden)}};
      for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t k = 0; k < hidden; ++k) e.states[t * hidden + k] = states[(t * n + i) * hidden + k];
      }
      for (std::size_t k = 0; k < hidden; ++k) e.code.z[k] = code[i * hidden + k];
      out.push_back(std::move(e));
    }
  }
  return out;
}

Encoding XferNet::encode(const TokenSeq& seq) const {
  return std::move(encode_batch(std::span<const TokenSeq>(&seq, 1)).front());
}

double XferNet::universal(const ArchitectureCode& code) const { return predict(code, kUniversal); }

double XferNet::predict(const ArchitectureCode& code, std::string_view task) const {
  check_task(task);
  if (code.z.size() != static_cast<std::size_t>(config_.hidden)) throw ContractViolation("architecture code has the wrong dimension");
  Graph g;
  Var z = g.constant(Tensor({1, code.z.size()}, code.z));
  const double u = universal_head(g, params_, z).value().item();
  if (task == kUniversal) return u;
  return u + residual_head(g, params_, z, task).value().item();
}

double XferNet::residual(const ArchitectureCode& code, std::string_view task) const {
  check_task(task);
  if (task == kUniversal) return 0.0;
  if (code.z.size() != static_cast<std::size_t>(config_.hidden)) throw ContractViolation("architecture code has the wrong dimension");
  Graph g;
  Var z = g.constant(Tensor({1, code.z.size()}, code.z));
  return residual_head(g, params_, z, task).value().item();
}

std::vector<double> XferNet::prediction_gradient(const ArchitectureCode& code, std::string_view task) const {
  check_task(task);
  Graph g;
  Var z = g.input(Tensor({1, code.z.size()}, code.z));
  Var pred = universal_head(g, params_, z);
  if (task != kUniversal) pred = ad::add(pred, residual_head(g, params_, z, task));
  g.backward(pred);
  const Tensor& dz = z.grad();
  return {dz.data().begin(), dz.data().end()};
}

Decoded XferNet::decode(const Tensor& states, const TokenSeq* teacher) const {
  const std::size_t steps = sequence_length(config_.blocks);
  const std::size_t hidden = config_.hidden;
  const std::size_t vocab = vocab_size(config_.blocks);
  if (states.rank() != 2 || states.dim(0) != steps || states.dim(1) != hidden) {
    throw ContractViolation("decode expects encoder states of shape " + shape_string({steps, hidden}));
  }
  if (teacher) check_tokens(*teacher);

  Graph g;
  Var mem = g.constant(Tensor({steps, 1, hidden}, {states.data().begin(), states.data().end()}));
  Var code = ad::mean_axis0(mem);
  Var emb = g.param(params_, "embedding");
  Var wx = g.param(params_, "dec/wx"), wh = g.param(params_, "dec/wh"), bias = g.param(params_, "dec/b");
  Var wq = g.param(params_, "attn/wq"), wc = g.param(params_, "attn/wc"), bc = g.param(params_, "attn/bc");
  Var wo = g.param(params_, "out/w"), bo = g.param(params_, "out/b");
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hidden));

  Decoded out{Tensor({steps, vocab}, -std::numeric_limits<double>::infinity()), TokenSeq{config_.blocks, {}}};
  LstmState s{code, code};
  int previous = -1;
  for (std::size_t t = 0; t < steps; ++t) {
    const int in[] = {previous};
    s = lstm_step(ad::matmul(ad::embedding(emb, in), wx), s, wh, bias, hidden);
    Var weights = ad::softmax_rows(ad::attention_scores(mem, ad::matmul(s.h, wq), attn_scale));
    Var ctx = ad::attention_context(weights, mem);
    const Var both[] = {s.h, ctx};
    Var combined = ad::tanh(ad::add(ad::matmul(ad::concat_cols(both), wc), bc));
    const Tensor& logits = ad::add(ad::matmul(combined, wo), bo).value();
    const TokenRange range = legal_tokens(config_.blocks, static_cast<int>(t));
    int best = range.first;
    for (int k = range.first; k < range.last; ++k) {
      out.logits[t * vocab + k] = logits[k];
      if (logits[k] > logits[best]) best = k;
    }
    out.tokens.tokens.push_back(best);
    previous = teacher ? teacher->tokens[t] : best;
  }
  return out;
}

TokenSeq XferNet::reconstruct(const TokenSeq& seq) const { return decode(encode(seq).states).tokens; }

// ---------------------------------------------------------------------------

void XferNet::save(const std::filesystem::path& prefix) const {
  save_params(params_, prefix.string() + ".params");
  nlohmann::json doc = {
      {"format", "xfernet"},
      {"version", 1},
      {"tasks", tasks_},
      {"target", target_},
      {"config",
       {{"blocks", config_.blocks},
        {"embedding", config_.embedding},
        {"hidden", config_.hidden},
        {"universal_hidden", config_.universal_hidden},
        {"residual_hidden", config_.residual_hidden}}},
  };
  std::ofstream os(prefix.string() + ".json");
  if (!os) throw Error("cannot write " + prefix.string() + ".json");
  os << doc.dump(2) << "\n";
}

XferNet XferNet::load(const std::filesystem::path& prefix) {
  std::ifstream is(prefix.string() + ".json");
  if (!is) throw Error("cannot read " + prefix.string() + ".json");
  XferNet net;
  try {
    const auto doc = nlohmann::json::parse(is);
    if (doc.value("format", "") != "xfernet") throw FormatError("not an xfernet sidecar");
    net.tasks_ = doc.at("tasks").get<std::vector<std::string>>();
    net.target_ = doc.at("target").get<std::string>();
    const auto& c = doc.at("config");
    net.config_ = {c.at("blocks").get<int>(), c.at("embedding").get<int>(), c.at("hidden").get<int>(),
                   c.at("universal_hidden").get<int>(), c.at("residual_hidden").get<int>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(prefix.string() + ".json: " + e.what());
  }
  net.params_ = load_params(prefix.string() + ".params");
  for (const ParamSpec& spec : net.param_specs()) {
    if (!net.params_.contains(spec.path) || net.params_.value(spec.path).shape() != spec.shape) {
      throw FormatError("checkpoint does not match the registry: " + spec.path);
    }
  }
  if (net.params_.size() != net.param_specs().size()) throw FormatError("checkpoint holds unexpected parameters");
  return net;
}

// ---------------------------------------------------------------------------

std::vector<TrainingExample> training_examples(const ObservationHistory& history) {
  std::vector<TrainingExample> out;
  out.reserve(history.size());
  for (const auto& r : history.records()) out.push_back({tokenize(r.genome), r.task, r.score});
  return out;
}

TrainResult train(const ObservationHistory& history, const TrainConfig& cfg, XferNetConfig config) {
  cfg.validate();
  if (history.empty()) throw ConfigError("cannot train on an empty history");
  if (history.target().empty()) throw ConfigError("history has no designated target task");
  const std::vector<TrainingExample> examples = training_examples(history);
  config.blocks = examples.front().tokens.blocks;
  for (const auto& ex : examples) {
    if (ex.tokens.blocks != config.blocks) throw DataError("history mixes genomes with different B");
  }

  TrainResult result{XferNet(history.tasks(), history.target(), mix_seed(cfg.seed, 0), config), {}};
  XferNet& net = result.net;
  std::mt19937_64 rng(mix_seed(cfg.seed, 1));
  std::vector<std::size_t> order(examples.size());
  const AdamConfig adam{cfg.lr, cfg.weight_decay};
  std::vector<TrainingExample> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_steps > 0 && result.log.steps >= cfg.max_steps) break;
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      if (cfg.max_steps > 0 && result.log.steps >= cfg.max_steps) break;
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(examples[order[i]]);
      Graph g;
      LossTerms terms = net.loss(g, net.params(), batch, cfg.alpha);
      const double value = terms.total.value().item();
      if (!std::isfinite(value)) throw DataError("training loss became non-finite");
      g.backward(terms.total);
      Gradients grads = g.param_grads(net.params());
      clip_global_norm(grads, cfg.clip_norm);
      adam_step(net.params(), grads, adam);
      total += value;
      seen += batch.size();
      ++result.log.steps;
    }
    if (seen > 0) result.log.epoch_loss.push_back(total / static_cast<double>(seen));
  }
  return result;
}

}  // namespace xfernas
