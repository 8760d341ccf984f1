#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "xfernas/autodiff.hpp"
#include "xfernas/errors.hpp"

using namespace xfernas;
using ad::Graph;
using ad::Var;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : t.data()) v = n(rng);
  return t;
}

// Contracts `v` against fixed random weights so every output element
// carries a distinct upstream gradient.
Var probe(Graph& g, Var v, std::uint64_t seed = 99) {
  return ad::sum(ad::mul(v, g.constant(random_tensor(v.value().shape(), seed))));
}

ParamStore store_of(std::initializer_list<std::pair<std::string, Tensor>> items) {
  ParamStore s;
  for (const auto& [k, v] : items) s.add(k, v);
  return s;
}

double check(const ad::LossBuilder& f, const ParamStore& s) { return ad::grad_check(f, s).max_relative_error; }

}  // namespace

TEST(Backward, Square) {
  Graph g;
  Var x = g.input(Tensor::scalar(3.0));
  g.backward(ad::mul(x, x));
  EXPECT_EQ(x.grad().item(), 6.0);
}

TEST(Backward, MeanSpreadsEvenly) {
  Graph g;
  Var x = g.input(Tensor::matrix(1, 4, {1, 2, 3, 4}));
  g.backward(ad::mean(x));
  for (double v : x.grad().data()) EXPECT_EQ(v, 0.25);
}

TEST(Backward, NonScalarLossRejected) {
  Graph g;
  Var x = g.input(Tensor::matrix(1, 2, {1, 2}));
  EXPECT_THROW(g.backward(ad::tanh(x)), ContractViolation);
}

TEST(Backward, SharedParameterAccumulates) {
  const ParamStore s = store_of({{"w", Tensor::scalar(2.0)}});
  Graph g;
  Var w1 = g.param(s, "w");
  Var w2 = g.param(s, "w");
  EXPECT_EQ(w1.id, w2.id);
  g.backward(ad::add(ad::mul(w1, w2), w1));
  const Gradients grads = g.param_grads(s);
  EXPECT_EQ(grads.at("w").item(), 5.0);
}

TEST(Backward, UnreachedParametersGetZeros) {
  const ParamStore s = store_of({{"a", Tensor::scalar(1.0)}, {"b", Tensor::matrix(1, 2, {1, 1})}});
  Graph g;
  g.backward(ad::scale(g.param(s, "a"), 3.0));
  const Gradients grads = g.param_grads(s);
  EXPECT_EQ(grads.at("a").item(), 3.0);
  EXPECT_EQ(grads.at("b"), Tensor({1, 2}));
}

TEST(GradCheck, LinearModelIsExact) {
  const ParamStore s = store_of({{"w", random_tensor({3, 2}, 1)}, {"b", random_tensor({2}, 2)}});
  const Tensor x = random_tensor({4, 3}, 3);
  const auto f = [&](Graph& g, const ParamStore& p) {
    return probe(g, ad::add(ad::matmul(g.constant(x), g.param(p, "w")), g.param(p, "b")));
  };
  EXPECT_LT(check(f, s), 1e-7);
}

TEST(GradCheck, Elementwise) {
  const ParamStore s = store_of({{"a", random_tensor({3, 4}, 4)}, {"b", random_tensor({3, 4}, 5)}});
  const auto run = [&](auto op) {
    return check([&](Graph& g, const ParamStore& p) { return probe(g, op(g.param(p, "a"), g.param(p, "b"))); }, s);
  };
  EXPECT_LT(run([](Var a, Var b) { return ad::add(a, b); }), 1e-7);
  EXPECT_LT(run([](Var a, Var b) { return ad::sub(a, b); }), 1e-7);
  EXPECT_LT(run([](Var a, Var b) { return ad::mul(a, b); }), 1e-6);
  EXPECT_LT(run([](Var a, Var) { return ad::scale(a, -1.7); }), 1e-7);
  EXPECT_LT(run([](Var a, Var) { return ad::tanh(a); }), 1e-6);
  EXPECT_LT(run([](Var a, Var) { return ad::sigmoid(a); }), 1e-6);
  EXPECT_LT(run([](Var a, Var) { return ad::softmax_rows(a); }), 1e-6);
}

TEST(GradCheck, ReluAwayFromKink) {
  Tensor a = random_tensor({4, 5}, 6);
  for (double& v : a.data()) v += v > 0 ? 0.1 : -0.1;
  const ParamStore s = store_of({{"a", a}});
  EXPECT_LT(check([](Graph& g, const ParamStore& p) { return probe(g, ad::relu(g.param(p, "a"))); }, s), 1e-7);
}

TEST(GradCheck, BroadcastAdd) {
  const ParamStore s = store_of({{"a", random_tensor({3, 4}, 7)}, {"r", random_tensor({1, 4}, 8)}});
  EXPECT_LT(check([](Graph& g, const ParamStore& p) { return probe(g, ad::add(g.param(p, "a"), g.param(p, "r"))); }, s),
            1e-7);
}

TEST(GradCheck, ShapeOps) {
  const ParamStore s = store_of({{"a", random_tensor({3, 4}, 9)}, {"b", random_tensor({3, 2}, 10)},
                                 {"c", random_tensor({3, 4}, 11)}});
  const auto f = [](Graph& g, const ParamStore& p) {
    const Var parts[] = {g.param(p, "a"), g.param(p, "b")};
    Var cat = ad::concat_cols(parts);
    Var sl = ad::slice_cols(cat, 1, 4);
    Var rows = ad::slice_rows(g.param(p, "c"), 1, 2);
    const Var st[] = {sl, g.param(p, "c")};
    Var stacked = ad::stack(st);
    return ad::add(ad::add(probe(g, stacked, 1), probe(g, ad::mean_axis0(stacked), 2)), probe(g, rows, 3));
  };
  EXPECT_LT(check(f, s), 1e-7);
}

TEST(GradCheck, EmbeddingGatherScatter) {
  const ParamStore s = store_of({{"t", random_tensor({6, 3}, 12)}});
  const std::vector<int> idx = {2, -1, 5, 2, 0};
  const std::vector<int> rows = {3, 0};
  const auto f = [&](Graph& g, const ParamStore& p) {
    Var e = ad::embedding(g.param(p, "t"), idx);
    Var gathered = ad::gather_rows(e, rows);
    return ad::add(probe(g, e, 1), probe(g, ad::scatter_rows(gathered, rows, 7), 2));
  };
  EXPECT_LT(check(f, s), 1e-7);
  Graph g;
  Var e = ad::embedding(g.param(s, "t"), idx);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(e.value()[3 + k], 0.0);
}

TEST(GradCheck, Attention) {
  const ParamStore s = store_of({{"keys", random_tensor({5, 2, 4}, 13)}, {"q", random_tensor({2, 4}, 14)}});
  const auto f = [](Graph& g, const ParamStore& p) {
    Var keys = g.param(p, "keys");
    Var w = ad::softmax_rows(ad::attention_scores(keys, g.param(p, "q"), 0.5));
    return probe(g, ad::attention_context(w, keys));
  };
  EXPECT_LT(check(f, s), 1e-6);
}

TEST(GradCheck, CrossEntropyAndSquaredError) {
  const ParamStore s = store_of({{"l", random_tensor({3, 8}, 15)}, {"y", random_tensor({3, 1}, 16)}});
  const std::vector<int> targets = {2, 4, 3};
  const auto f = [&](Graph& g, const ParamStore& p) {
    return ad::add(ad::cross_entropy(g.param(p, "l"), targets, {2, 6}),
                   ad::squared_error(g.param(p, "y"), Tensor::matrix(3, 1, {0.1, 0.5, 0.9})));
  };
  EXPECT_LT(check(f, s), 1e-6);
  // Independent value: -log softmax over the legal slice only.
  Graph g;
  const Var ce = ad::cross_entropy(g.param(s, "l"), targets, {2, 6});
  const Tensor& l = s.value("l");
  double expected = 0.0;
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0.0;
    for (std::size_t k = 2; k < 6; ++k) z += std::exp(l[r * 8 + k]);
    expected += std::log(z) - l[r * 8 + static_cast<std::size_t>(targets[r])];
  }
  EXPECT_NEAR(ce.value().item(), expected, 1e-12);
}

TEST(GradCheck, ThreeLayerNet) {
  const ParamStore s = store_of({{"w1", random_tensor({5, 8}, 20, 0.5)},
                                 {"b1", random_tensor({8}, 21, 0.1)},
                                 {"w2", random_tensor({8, 6}, 22, 0.5)},
                                 {"b2", random_tensor({6}, 23, 0.1)},
                                 {"w3", random_tensor({6, 1}, 24, 0.5)},
                                 {"b3", random_tensor({1}, 25, 0.1)}});
  const Tensor x = random_tensor({7, 5}, 26);
  const Tensor y = random_tensor({7, 1}, 27);
  const auto f = [&](Graph& g, const ParamStore& p) {
    Var h = ad::tanh(ad::add(ad::matmul(g.constant(x), g.param(p, "w1")), g.param(p, "b1")));
    h = ad::sigmoid(ad::add(ad::matmul(h, g.param(p, "w2")), g.param(p, "b2")));
    return ad::squared_error(ad::add(ad::matmul(h, g.param(p, "w3")), g.param(p, "b3")), y);
  };
  const auto r = ad::grad_check(f, s, 1e-4, 200);
  EXPECT_EQ(r.coordinates, 109u);  // every coordinate of the small net
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(GradCheck, CorruptedBackwardIsCaught) {
  const ParamStore s = store_of({{"a", random_tensor({2, 3}, 30)}});
  // x^2 with the derivative off by a factor 1.5
  const auto bad_square = [](Var a) {
    Graph& g = *a.graph;
    Tensor out = a.value();
    for (double& v : out.data()) v *= v;
    const auto ia = a.id;
    return g.record(std::move(out), {a}, [ia](Graph& g, std::uint32_t self) {
      Tensor& dx = g.accumulate(ia);
      const Tensor& x = g.value(ia);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g.grad(self)[i] * 3.0 * x[i];
    });
  };
  const double err = check([&](Graph& g, const ParamStore& p) { return probe(g, bad_square(g.param(p, "a"))); }, s);
  EXPECT_GT(err, 1e-2);
}
