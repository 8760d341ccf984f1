#pragma once

// Reverse-mode automatic differentiation over a dynamically recorded graph.
// Nodes are appended in evaluation order, so the node vector is already a
// topological order; backward() walks it in reverse.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xfernas/archspace.hpp"
#include "xfernas/tensor.hpp"

namespace xfernas::ad {

class Graph;

struct Var {
  Graph* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
};

class Graph {
 public:
  // Called once per node during backward with the node's own id. Must only
  // touch the grads of the node's inputs (via accumulate()).
  using BackwardFn = std::function<void(Graph&, std::uint32_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // Differentiable leaf that is not a parameter (e.g. an architecture code).
  Var input(Tensor value);
  // Leaf bound to a ParamStore entry; repeated calls with the same path return
  // the same node.
  Var param(const ParamStore& store, const std::string& path);

  // Records a primitive. `backward` may be empty for non-differentiable nodes.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::uint32_t id) const;
  const std::vector<std::uint32_t>& inputs(std::uint32_t id) const { return nodes_[id].inputs; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  // Grad buffer of node `id`, zero-allocated on first use.
  Tensor& accumulate(std::uint32_t id);
  // Like accumulate(), but a new buffer is left uninitialized and `fresh` is
  // set so the caller assigns instead of adding.
  Tensor& grad_buffer(std::uint32_t id, bool& fresh);

  // Seeds d(loss)/d(loss) = 1 and propagates. Throws ContractViolation unless
  // the loss holds exactly one element.
  void backward(Var loss);

  // One entry per store parameter; parameters not reached by the graph get
  // zero tensors.
  Gradients param_grads(const ParamStore& store) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::map<std::string, std::uint32_t> param_nodes_;
  Tensor empty_grad_;
};

// --- primitives -------------------------------------------------------------
// 2-D tensors are (rows, cols). Vectors of shape (n) broadcast as (1, n) rows.

Var matmul(Var a, Var b);
Var add(Var a, Var b);  // b may be a row vector broadcast over a's rows
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);
Var softmax_rows(Var a);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var stack(std::span<const Var> parts);  // n x (r, c) -> (n, r, c)
Var mean_axis0(Var a);                  // (n, r, c) -> (r, c)
Var sum(Var a);                         // -> scalar
Var mean(Var a);                        // -> scalar
// Rows of `table` selected by `indices`; a negative index yields a zero row.
Var embedding(Var table, std::span<const int> indices);
Var gather_rows(Var a, std::span<const int> rows);
Var scatter_rows(Var a, std::span<const int> rows, std::size_t total_rows);
// keys: (T, B, H), query: (Q*B, H) -> (Q*B, T), Q queries per batch entry in
// row q*B + b: score[q*B + b][t] = s * <keys[t][b], query[q*B + b]>.
Var attention_scores(Var keys, Var query, double s);
// weights: (Q*B, T), values: (T, B, H) -> (Q*B, H), rows laid out as above.
Var attention_context(Var weights, Var values);
// Sum over rows of -log softmax(logits[row][range])[target[row]]; logits
// outside the range are excluded from the normalizer.
Var cross_entropy(Var logits, std::span<const int> targets, TokenRange range);
// The same with one legal range per row.
Var cross_entropy(Var logits, std::span<const int> targets, std::span<const TokenRange> ranges);
// Same data, new shape with the same element count.
Var reshape(Var a, std::vector<std::size_t> shape);
// Sum of squared differences; the target is treated as a constant.
Var squared_error(Var prediction, const Tensor& target);

// --- gradient checking -------------------------------------------------------

// Builds the loss for the given parameter values inside the supplied graph.
using LossBuilder = std::function<Var(Graph&, const ParamStore&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_path;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares reverse-mode gradients with central differences on a seeded random
// subsample of `samples` coordinates (every coordinate if the model is
// smaller). Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckResult grad_check(const LossBuilder& build, const ParamStore& store, double eps = 1e-4,
                           std::size_t samples = 200, std::uint64_t seed = 0, double floor = 1e-6);

}  // namespace xfernas::ad
