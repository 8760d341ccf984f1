#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "xfernas/errors.hpp"
#include "xfernas/xfernet.hpp"

using namespace xfernas;

namespace {

const std::vector<std::string> kTasks = {"a", "b", "t"};

ArchitectureCode random_code(std::mt19937_64& rng, int dim = 96, double scale = 0.5) {
  std::normal_distribution<double> n(0.0, scale);
  ArchitectureCode c;
  for (int i = 0; i < dim; ++i) c.z.push_back(n(rng));
  return c;
}

void randomize(Tensor& t, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : t.data()) v = n(rng);
}

std::vector<TrainingExample> examples(int n, const std::vector<std::string>& tasks, int blocks = 5) {
  std::vector<TrainingExample> out;
  for (int i = 0; i < n; ++i) {
    out.push_back({tokenize(sample_genome(static_cast<std::uint64_t>(100 + i), blocks)),
                   tasks[static_cast<std::size_t>(i) % tasks.size()], 0.1 + 0.8 * i / n});
  }
  return out;
}

ObservationHistory small_history(int per_task, std::vector<std::string> tasks, std::string target, int blocks = 5) {
  ObservationHistory h(tasks, target);
  int k = 0;
  for (const auto& t : tasks) {
    if (t == target) continue;
    for (int i = 0; i < per_task; ++i, ++k) {
      const Genome g = sample_genome(static_cast<std::uint64_t>(1000 + k), blocks);
      h.add({t, g, 0.3 + 0.4 * std::sin(0.7 * k) * std::sin(0.7 * k)});
    }
  }
  return h;
}

double scalar(const ad::Var& v) { return v.value().item(); }

}  // namespace

TEST(Encode, DimensionsAndMean) {
  const XferNet net(kTasks, "t", 1);
  const TokenSeq seq = tokenize(sample_genome(4, 5));
  const Encoding e = net.encode(seq);
  ASSERT_EQ(e.states.shape(), (std::vector<std::size_t>{40, 96}));
  ASSERT_EQ(e.code.z.size(), 96u);
  for (std::size_t j = 0; j < 96; ++j) {
    double s = 0.0;
    for (std::size_t t = 0; t < 40; ++t) s += e.states[t * 96 + j];
    EXPECT_NEAR(e.code.z[j], s / 40.0, 1e-14);
  }
  EXPECT_EQ(net.encode(seq).code, e.code);
  EXPECT_NE(net.encode(tokenize(sample_genome(5, 5))).code, e.code);
}

TEST(Encode, BatchMatchesSingle) {
  const XferNet net(kTasks, "t", 2);
  std::vector<TokenSeq> seqs;
  for (int i = 0; i < 5; ++i) seqs.push_back(tokenize(sample_genome(static_cast<std::uint64_t>(i), 5)));
  const auto batch = net.encode_batch(seqs);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto single = net.encode(seqs[i]).code.z;
    for (std::size_t j = 0; j < 96; ++j) EXPECT_NEAR(batch[i].code.z[j], single[j], 1e-13);
  }
}

TEST(Encode, RejectsOutOfVocabulary) {
  const XferNet net(kTasks, "t", 1);
  TokenSeq seq = tokenize(sample_genome(4, 5));
  seq.tokens[1] = 25;
  EXPECT_THROW(net.encode(seq), ContractViolation);
  seq.tokens[1] = -1;
  EXPECT_THROW(net.encode(seq), ContractViolation);
}

TEST(Registry, TargetAlwaysRegistered) {
  const XferNet net({"a", "b"}, "t", 0);
  EXPECT_EQ(net.tasks(), (std::vector<std::string>{"a", "b", "t"}));
  for (const char* t : {"a", "b", "t"}) EXPECT_TRUE(net.params().contains(std::string("res/") + t + "/w2"));
  EXPECT_THROW(XferNet({"a", "a"}, "t", 0), RegistryError);
  EXPECT_THROW(XferNet({"a"}, "", 0), ConfigError);
  EXPECT_THROW(XferNet({std::string(kUniversal)}, "t", 0), RegistryError);
}

TEST(Predict, FreshResidualsAreExactlyZero) {
  const XferNet net(kTasks, "t", 3);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    const ArchitectureCode c = random_code(rng);
    const double u = net.universal(c);
    for (const auto& t : kTasks) {
      EXPECT_EQ(net.residual(c, t), 0.0);
      EXPECT_EQ(net.predict(c, t), u);
    }
    EXPECT_EQ(net.predict(c, kUniversal), u);
  }
}

TEST(Predict, Additivity) {
  XferNet net(kTasks, "t", 3);
  for (auto& [path, param] : net.params()) {
    if (path.rfind("res/", 0) == 0) randomize(param.value, path.size() * 31 + path.back(), 0.3);
  }
  std::mt19937_64 rng(2);
  for (int i = 0; i < 20; ++i) {
    const ArchitectureCode c = random_code(rng);
    const double u = net.universal(c);
    for (const auto& t : kTasks) {
      EXPECT_NE(net.residual(c, t), 0.0);
      EXPECT_EQ(net.predict(c, t), u + net.residual(c, t));
    }
    EXPECT_EQ(net.predict(c, "a") - net.predict(c, "b"),
              (u + net.residual(c, "a")) - (u + net.residual(c, "b")));
  }
}

TEST(Predict, HandSetHeads) {
  XferNet net(kTasks, "t", 3);
  ParamStore& p = net.params();
  p.value("uni/w2").fill(0.0);
  p.value("uni/b2")[0] = 0.6;
  p.value("res/a/b2")[0] = -0.1;
  std::mt19937_64 rng(3);
  const ArchitectureCode c = random_code(rng);
  EXPECT_DOUBLE_EQ(net.universal(c), 0.6);
  EXPECT_DOUBLE_EQ(net.residual(c, "a"), -0.1);
  EXPECT_DOUBLE_EQ(net.predict(c, "a"), 0.5);
  EXPECT_THROW(net.predict(c, "zzz"), RegistryError);
}

TEST(Predict, GradientMatchesFiniteDifferences) {
  XferNet net(kTasks, "t", 4);
  randomize(net.params().value("res/t/w2"), 9, 0.3);
  std::mt19937_64 rng(4);
  const ArchitectureCode c = random_code(rng);
  const std::vector<double> grad = net.prediction_gradient(c, "t");
  ASSERT_EQ(grad.size(), 96u);
  for (std::size_t j = 0; j < 96; j += 7) {
    ArchitectureCode up = c, down = c;
    up.z[j] += 1e-5;
    down.z[j] -= 1e-5;
    const double numeric = (net.predict(up, "t") - net.predict(down, "t")) / 2e-5;
    EXPECT_NEAR(grad[j], numeric, 1e-7 + 1e-5 * std::abs(numeric));
  }
}

TEST(Decode, MaskAllowsOnlyLegalTokens) {
  const XferNet net(kTasks, "t", 5);
  const Decoded d = net.decode(net.encode(tokenize(sample_genome(1, 5))).states);
  ASSERT_EQ(d.logits.shape(), (std::vector<std::size_t>{40, 25}));
  for (int pos = 0; pos < 40; ++pos) {
    const TokenRange r = legal_tokens(5, pos);
    for (int k = 0; k < 25; ++k) {
      const double v = d.logits[static_cast<std::size_t>(pos * 25 + k)];
      EXPECT_EQ(std::isfinite(v), k >= r.first && k < r.last) << pos << " " << k;
    }
  }
  // First block: inputs 0 and 1 only.
  for (int pos : {0, 2}) {
    for (int k = 0; k < 25; ++k) EXPECT_EQ(std::isfinite(d.logits[static_cast<std::size_t>(pos * 25 + k)]), k < 2);
  }
}

TEST(Decode, AlwaysLegal) {
  XferNet net(kTasks, "t", 6);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int i = 0; i < 30; ++i) {
    Tensor states({40, 96});
    for (double& v : states.data()) v = n(rng);
    const Decoded d = net.decode(states);
    EXPECT_NO_THROW(validate(detokenize(d.tokens)));
  }
  // Perturbed real encodings too.
  for (int i = 0; i < 10; ++i) {
    Tensor states = net.encode(tokenize(sample_genome(static_cast<std::uint64_t>(i), 5))).states;
    for (double& v : states.data()) v += 0.5 * n(rng);
    EXPECT_NO_THROW(validate(detokenize(net.decode(states).tokens)));
  }
}

TEST(Loss, AlphaEndpoints) {
  const XferNet net(kTasks, "t", 7);
  const auto batch = examples(4, kTasks);
  for (double alpha : {0.0, 1.0, 0.3}) {
    ad::Graph g;
    const LossTerms terms = net.loss(g, net.params(), batch, alpha);
    const double expected = alpha * scalar(terms.prediction) + (1.0 - alpha) * scalar(terms.reconstruction);
    EXPECT_NEAR(scalar(terms.total), expected, 1e-12 * std::abs(expected));
    if (alpha == 1.0) EXPECT_EQ(scalar(terms.total), scalar(terms.prediction));
    if (alpha == 0.0) EXPECT_EQ(scalar(terms.total), scalar(terms.reconstruction));
  }
}

TEST(Loss, TermsMatchIndependentRecomputation) {
  XferNet net(kTasks, "t", 8);
  for (const auto& t : kTasks) randomize(net.params().value("res/" + t + "/w2"), t.size() + 17, 0.3);
  const auto batch = examples(6, kTasks);
  ad::Graph g;
  const LossTerms terms = net.loss(g, net.params(), batch, 0.8);
  double pred = 0.0, rec = 0.0;
  for (const auto& ex : batch) {
    const Encoding e = net.encode(ex.tokens);
    // Each record is scored by its own task head.
    const double d = net.predict(e.code, ex.task) - ex.score;
    pred += d * d;
    const Decoded dec = net.decode(e.states, &ex.tokens);
    double ce = 0.0;
    for (int pos = 0; pos < 40; ++pos) {
      const double* row = dec.logits.data().data() + pos * 25;
      double mx = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < 25; ++k) mx = std::max(mx, row[k]);
      double z = 0.0;
      for (int k = 0; k < 25; ++k) z += std::exp(row[k] - mx);
      ce += std::log(z) + mx - row[ex.tokens.tokens[static_cast<std::size_t>(pos)]];
    }
    rec += ce / 40.0;
  }
  EXPECT_NEAR(scalar(terms.prediction), pred, 1e-10);
  EXPECT_NEAR(scalar(terms.reconstruction), rec, 1e-9);
}

TEST(Loss, Errors) {
  const XferNet net(kTasks, "t", 7);
  auto batch = examples(2, kTasks);
  batch[1].score = 1.5;
  ad::Graph g;
  EXPECT_THROW(net.loss(g, net.params(), batch, 0.8), DataError);
  batch[1].score = 0.5;
  batch[1].task = "nope";
  EXPECT_THROW(net.loss(g, net.params(), batch, 0.8), RegistryError);
  EXPECT_THROW(net.loss(g, net.params(), {}, 0.8), ContractViolation);
}

TEST(Loss, GradCheckSmallModel) {
  const XferNetConfig small{2, 6, 8, 5, 4};
  XferNet net({"a", "b"}, "b", 9, small);
  randomize(net.params().value("res/b/w2"), 3, 0.3);
  const auto batch = examples(4, {"a", "b"}, 2);
  const auto f = [&](ad::Graph& g, const ParamStore& p) { return net.loss(g, p, batch, 0.8).total; };
  const auto r = ad::grad_check(f, net.params(), 1e-5, 300, 1);
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_path << "[" << r.worst_index << "]";
}

TEST(TrainConfigTest, DefaultsAndValidation) {
  const TrainConfig c;
  EXPECT_EQ(c.alpha, 0.8);
  EXPECT_EQ(c.lr, 1e-3);
  EXPECT_EQ(c.weight_decay, 1e-4);
  EXPECT_EQ(c.epochs, 200);
  EXPECT_EQ(c.batch_size, 32);
  TrainConfig bad;
  bad.alpha = 1.5;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(train(ObservationHistory({"a", "t"}, "t"), TrainConfig{}), ConfigError);
}

TEST(Train, LossDescends) {
  const ObservationHistory h = small_history(25, {"a", "b", "t"}, "t");
  ASSERT_EQ(h.size(), 50u);
  TrainConfig cfg;
  cfg.epochs = 50;
  const TrainResult r = train(h, cfg);
  ASSERT_EQ(r.log.epoch_loss.size(), 50u);
  EXPECT_EQ(r.log.steps, 100);
  EXPECT_LT(r.log.epoch_loss.back(), r.log.epoch_loss.front());
  for (double v : r.log.epoch_loss) EXPECT_TRUE(std::isfinite(v));
  // Only source records: the target residual head never moved.
  std::mt19937_64 rng(11);
  for (int i = 0; i < 10; ++i) {
    const ArchitectureCode c = random_code(rng);
    EXPECT_EQ(r.net.residual(c, "t"), 0.0);
    EXPECT_EQ(r.net.predict(c, "t"), r.net.universal(c));
  }
}

TEST(Train, DeterministicAndSaveLoad) {
  const ObservationHistory h = small_history(6, {"a", "t"}, "t");
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 5;
  const TrainResult a = train(h, cfg);
  const TrainResult b = train(h, cfg);
  EXPECT_EQ(a.net.params(), b.net.params());
  EXPECT_EQ(a.log.epoch_loss, b.log.epoch_loss);
  cfg.seed = 6;
  EXPECT_NE(train(h, cfg).net.params(), a.net.params());

  const auto prefix = std::filesystem::temp_directory_path() / "xfernas_net_test";
  a.net.save(prefix);
  const XferNet back = XferNet::load(prefix);
  EXPECT_EQ(back.params(), a.net.params());
  EXPECT_EQ(back.tasks(), a.net.tasks());
  EXPECT_EQ(back.target(), "t");
  const Encoding e = back.encode(tokenize(sample_genome(1, 5)));
  EXPECT_EQ(back.predict(e.code, "t"), a.net.predict(a.net.encode(tokenize(sample_genome(1, 5))).code, "t"));
  std::filesystem::remove(prefix.string() + ".params");
  std::filesystem::remove(prefix.string() + ".json");
  EXPECT_THROW(XferNet::load(prefix), Error);
}

TEST(Train, OverfitDrivesLossToZero) {
  const XferNetConfig small{2, 32, 96, 64, 32};
  ObservationHistory h({"a", "t"}, "t");
  h.add({"a", sample_genome(1, 2), 0.7});
  h.add({"a", sample_genome(2, 2), 0.3});
  TrainConfig cfg;
  cfg.epochs = 1500;
  cfg.weight_decay = 0.0;
  const TrainResult r = train(h, cfg, small);
  EXPECT_LT(r.log.epoch_loss.back(), 1e-3);
  for (const auto& rec : h.records()) {
    const TokenSeq seq = tokenize(rec.genome);
    EXPECT_EQ(r.net.reconstruct(seq), seq);
    EXPECT_NEAR(r.net.predict(r.net.encode(seq).code, "a"), rec.score, 0.05);
  }
}
