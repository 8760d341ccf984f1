#include "xfernas/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "xfernas/errors.hpp"

namespace xfernas::ad {

const Tensor& Var::value() const { return graph->value(id); }
const Tensor& Var::grad() const { return graph->grad(id); }

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::input(Tensor value) {
  Var v = constant(std::move(value));
  nodes_[v.id].requires_grad = true;
  return v;
}

Var Graph::param(const ParamStore& store, const std::string& path) {
  if (auto it = param_nodes_.find(path); it != param_nodes_.end()) return {this, it->second};
  Var v = input(store.value(path));
  param_nodes_.emplace(path, v.id);
  return v;
}

Var Graph::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (in.graph != this) throw ContractViolation("mixing nodes from different graphs");
    n.inputs.push_back(in.id);
    n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Graph::grad(std::uint32_t id) const {
  const Node& n = nodes_[id];
  if (n.has_grad) return n.grad;
  // Unreached nodes have zero gradient; hand out a zero tensor of the same
  // shape without mutating the graph.
  static thread_local Tensor zeros;
  zeros = Tensor(n.value.shape());
  return zeros;
}

Tensor& Graph::accumulate(std::uint32_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

Tensor& Graph::grad_buffer(std::uint32_t id, bool& fresh) {
  Node& n = nodes_[id];
  fresh = !n.has_grad;
  if (fresh) {
    n.grad = Tensor::uninitialized(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

void Graph::backward(Var loss) {
  if (loss.graph != this) throw ContractViolation("loss belongs to another graph");
  if (nodes_[loss.id].value.size() != 1) {
    throw ContractViolation("backward() needs a scalar loss, got shape " +
                            shape_string(nodes_[loss.id].value.shape()));
  }
  accumulate(loss.id)[0] += 1.0;
  for (std::uint32_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.has_grad && n.backward) n.backward(*this, id);
  }
}

Gradients Graph::param_grads(const ParamStore& store) const {
  Gradients grads;
  for (const auto& [path, p] : store) {
    auto it = param_nodes_.find(path);
    if (it != param_nodes_.end() && nodes_[it->second].has_grad) {
      grads.emplace(path, nodes_[it->second].grad);
    } else {
      grads.emplace(path, Tensor(p.value.shape()));
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------

namespace {

Graph& graph_of(Var a) {
  if (!a.graph) throw ContractViolation("use of an unbound Var");
  return *a.graph;
}

void require(bool ok, const char* op, const Tensor& a, const Tensor& b) {
  if (!ok) {
    throw ContractViolation(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) +
                            " and " + shape_string(b.shape()));
  }
}

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

// grad(id) += e, assigning when the buffer is new.
template <typename Expr>
void add_grad(Graph& g, std::uint32_t id, const Expr& e) {
  bool fresh = false;
  auto m = g.grad_buffer(id, fresh).matrix();
  if (fresh) {
    m.noalias() = e;
  } else {
    m.noalias() += e;
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0), "matmul", av, bv);
  Tensor out = Tensor::uninitialized({av.dim(0), bv.dim(1)});
  out.matrix().noalias() = av.matrix() * bv.matrix();
  const auto ia = a.id, ib = b.id;
  return g.record(std::move(out), {a, b}, [ia, ib](Graph& g, std::uint32_t self) {
    const auto dy = g.grad(self).matrix();
    if (g.requires_grad(ia)) add_grad(g, ia, dy * g.value(ib).matrix().transpose());
    if (g.requires_grad(ib)) add_grad(g, ib, g.value(ia).matrix().transpose() * dy);
  });
}

Var add(Var a, Var b) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const auto ia = a.id, ib = b.id;
  if (av.same_shape(bv)) {
    Tensor out = Tensor::uninitialized(av.shape());
    out.matrix() = av.matrix() + bv.matrix();
    return g.record(std::move(out), {a, b}, [ia, ib](Graph& g, std::uint32_t self) {
      const auto dy = g.grad(self).matrix();
      if (g.requires_grad(ia)) add_grad(g, ia, dy);
      if (g.requires_grad(ib)) add_grad(g, ib, dy);
    });
  }
  require(av.rank() == 2 && bv.size() == av.dim(1), "add", av, bv);
  Tensor out = av;
  const Eigen::Map<const Eigen::RowVectorXd> row(bv.data().data(), idx(bv.size()));
  out.matrix().rowwise() += row;
  return g.record(std::move(out), {a, b}, [ia, ib](Graph& g, std::uint32_t self) {
    const auto dy = g.grad(self).matrix();
    if (g.requires_grad(ia)) add_grad(g, ia, dy);
    if (g.requires_grad(ib)) {
      Tensor& gb = g.accumulate(ib);
      Eigen::Map<Eigen::RowVectorXd>(gb.data().data(), idx(gb.size())) += dy.colwise().sum();
    }
  });
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.same_shape(bv), "sub", av, bv);
  Tensor out = Tensor::uninitialized(av.shape());
  out.matrix() = av.matrix() - bv.matrix();
  const auto ia = a.id, ib = b.id;
  return g.record(std::move(out), {a, b}, [ia, ib](Graph& g, std::uint32_t self) {
    const auto dy = g.grad(self).matrix();
    if (g.requires_grad(ia)) add_grad(g, ia, dy);
    if (g.requires_grad(ib)) add_grad(g, ib, -dy);
  });
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.same_shape(bv), "mul", av, bv);
  Tensor out = Tensor::uninitialized(av.shape());
  out.matrix().array() = av.matrix().array() * bv.matrix().array();
  const auto ia = a.id, ib = b.id;
  return g.record(std::move(out), {a, b}, [ia, ib](Graph& g, std::uint32_t self) {
    const auto dy = g.grad(self).matrix().array();
    if (g.requires_grad(ia)) add_grad(g, ia, (dy * g.value(ib).matrix().array()).matrix());
    if (g.requires_grad(ib)) add_grad(g, ib, (dy * g.value(ia).matrix().array()).matrix());
  });
}

Var scale(Var a, double s) {
  Graph& g = graph_of(a);
  Tensor out = a.value();
  out.matrix() *= s;
  const auto ia = a.id;
  return g.record(std::move(out), {a}, [ia, s](Graph& g, std::uint32_t self) {
    add_grad(g, ia, s * g.grad(self).matrix());
  });
}

// tanh(x) = sign(x) (1 - e) / (1 + e) with e = exp(-2|x|); vectorizes.
template <typename Block>
void fast_tanh(Block x) {
  const auto e = (-2.0 * x.abs()).exp().eval();
  x = x.sign() * (1.0 - e) / (1.0 + e);
}

Var tanh(Var a) {
  Graph& g = graph_of(a);
  Tensor out = a.value();
  fast_tanh(out.matrix().array());
  const auto ia = a.id;
  return g.record(std::move(out), {a}, [ia](Graph& g, std::uint32_t self) {
    const auto y = g.value(self).matrix().array();
    add_grad(g, ia, (g.grad(self).matrix().array() * (1.0 - y.square())).matrix());
  });
}

Var sigmoid(Var a) {
  Graph& g = graph_of(a);
  Tensor out = Tensor::uninitialized(a.value().shape());
  out.matrix().array() = 1.0 / (1.0 + (-a.value().matrix().array()).exp());
  const auto ia = a.id;
  return g.record(std::move(out), {a}, [ia](Graph& g, std::uint32_t self) {
    const auto y = g.value(self).matrix().array();
    add_grad(g, ia, (g.grad(self).matrix().array() * y * (1.0 - y)).matrix());
  });
}

Var relu(Var a) {
  Graph& g = graph_of(a);
  Tensor out = a.value();
  out.matrix() = out.matrix().cwiseMax(0.0);
  const auto ia = a.id;
  return g.record(std::move(out), {a}, [ia](Graph& g, std::uint32_t self) {
    const auto x = g.value(ia).matrix().array();
    g.accumulate(ia).matrix().array() += (x > 0.0).select(g.grad(self).matrix().array(), 0.0);
  });
}

Var softmax_rows(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  if (av.rank() != 2) throw ContractViolation("softmax_rows expects a matrix");
  Tensor out = av;
  auto m = out.matrix();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    row.array() = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
  const auto ia = a.id;
  return g.record(std::move(out), {a}, [ia](Graph& g, std::uint32_t self) {
    const auto y = g.value(self).matrix();
    const auto dy = g.grad(self).matrix();
    auto dx = g.accumulate(ia).matrix();
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = y.row(r).dot(dy.row(r));
      dx.row(r).array() += y.row(r).array() * (dy.row(r).array() - dot);
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractViolation("concat_cols of nothing");
  Graph& g = graph_of(parts[0]);
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    require(v.rank() == 2 && v.rows() == rows, "concat_cols", parts[0].value(), v);
    offsets.push_back(cols);
    cols += v.cols();
  }
  Tensor out = Tensor::uninitialized({rows, cols});
  auto m = out.matrix();
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& v = parts[i].value();
    m.middleCols(idx(offsets[i]), idx(v.cols())) = v.matrix();
  }
  std::vector<std::uint32_t> ids;
  for (const Var& p : parts) ids.push_back(p.id);
  return g.record(std::move(out), {parts.begin(), parts.end()},
                  [ids, offsets](Graph& g, std::uint32_t self) {
                    const auto dy = g.grad(self).matrix();
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      if (!g.requires_grad(ids[i])) continue;
                      add_grad(g, ids[i], dy.middleCols(idx(offsets[i]), idx(g.value(ids[i]).cols())));
                    }
                  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  if (av.rank() != 2 || begin + count > av.cols()) throw ContractViolation("slice_cols out of range");
  Tensor out = Tensor::uninitialized({av.rows(), count});
  out.matrix() = av.matrix().middleCols(idx(begin), idx(count));
  const auto ia = a.id;
  return g.record(std::move(out), {a}, [ia, begin, count](Graph& g, std::uint32_t self) {
    g.accumulate(ia).matrix().middleCols(idx(begin), idx(count)) += g.grad(self).matrix();
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  if (av.rank() != 2 || begin + count > av.rows()) throw ContractViolation("slice_rows out of range");
  Tensor out = Tensor::uninitialized({count, av.cols()});
  out.matrix() = av.matrix().middleRows(idx(begin), idx(count));
  const auto ia = a.id;
  return g.record(std::move(out), {a}, [ia, begin, count](Graph& g, std::uint32_t self) {
    g.accumulate(ia).matrix().middleRows(idx(begin), idx(count)) += g.grad(self).matrix();
  });
}

Var stack(std::span<const Var> parts) {
  if (parts.empty()) throw ContractViolation("stack of nothing");
  Graph& g = graph_of(parts[0]);
  const Tensor& first = parts[0].value();
  if (first.rank() != 2) throw ContractViolation("stack expects matrices");
  const std::size_t each = first.size();
  Tensor out = Tensor::uninitialized({parts.size(), first.dim(0), first.dim(1)});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& v = parts[i].value();
    require(v.same_shape(first), "stack", first, v);
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * each));
  }
  std::vector<std::uint32_t> ids;
  for (const Var& p : parts) ids.push_back(p.id);
  return g.record(std::move(out), {parts.begin(), parts.end()}, [ids, each](Graph& g, std::uint32_t self) {
    const double* dy = g.grad(self).data().data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!g.requires_grad(ids[i])) continue;
      const Tensor& v = g.value(ids[i]);
      add_grad(g, ids[i], ConstMatrixMap(dy + i * each, idx(v.rows()), idx(v.cols())));
    }
  });
}

Var reshape(Var a, std::vector<std::size_t> shape) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  std::size_t count = 1;
  for (std::size_t d : shape) count *= d;
  if (count != av.size()) throw ContractViolation("reshape " + shape_string(av.shape()) + " to " + shape_string(shape));
  Tensor out = Tensor::uninitialized(std::move(shape));
  std::copy(av.data().begin(), av.data().end(), out.data().begin());
  const auto ia = a.id;
  return g.record(std::move(out), {a}, [ia](Graph& g, std::uint32_t self) {
    const auto dy = g.grad(self).data();
    bool fresh = false;
    const auto dx = g.grad_buffer(ia, fresh).data();
    const Eigen::Map<const Eigen::VectorXd> src(dy.data(), idx(dy.size()));
    Eigen::Map<Eigen::VectorXd> dst(dx.data(), idx(dx.size()));
    if (fresh) {
      dst = src;
    } else {
      dst += src;
    }
  });
}

Var mean_axis0(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  if (av.rank() != 3) throw ContractViolation("mean_axis0 expects a rank-3 tensor");
  const std::size_t n = av.dim(0);
  const std::size_t each = av.size() / n;
  Tensor out({av.dim(1), av.dim(2)});
  Eigen::Map<Eigen::VectorXd> o(out.data().data(), idx(each));
  for (std::size_t i = 0; i < n; ++i) {
    o += Eigen::Map<const Eigen::VectorXd>(av.data().data() + i * each, idx(each));
  }
  o /= static_cast<double>(n);
  const auto ia = a.id;
  return g.record(std::move(out), {a}, [ia, n, each](Graph& g, std::uint32_t self) {
    const Eigen::Map<const Eigen::VectorXd> dy(g.grad(self).data().data(), idx(each));
    Tensor& dx = g.accumulate(ia);
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::Map<Eigen::VectorXd>(dx.data().data() + i * each, idx(each)) += dy / static_cast<double>(n);
    }
  });
}

Var sum(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.data()) s += v;
  const auto ia = a.id;
  return g.record(Tensor::scalar(s), {a}, [ia](Graph& g, std::uint32_t self) {
    const double dy = g.grad(self)[0];
    for (double& v : g.accumulate(ia).data()) v += dy;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var embedding(Var table, std::span<const int> indices) {
  Graph& g = graph_of(table);
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw ContractViolation("embedding table must be a matrix");
  const std::size_t width = tv.dim(1);
  Tensor out({indices.size(), width});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const int k = indices[r];
    if (k >= static_cast<int>(tv.dim(0))) {
      throw ContractViolation("embedding index " + std::to_string(k) + " out of vocabulary");
    }
    if (k < 0) continue;
    std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(k * width), width,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  std::vector<int> rows(indices.begin(), indices.end());
  const auto it = table.id;
  return g.record(std::move(out), {table}, [it, rows = std::move(rows), width](Graph& g, std::uint32_t self) {
    const auto dy = g.grad(self).data();
    auto dt = g.accumulate(it).data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r] < 0) continue;
      const std::size_t base = static_cast<std::size_t>(rows[r]) * width;
      for (std::size_t c = 0; c < width; ++c) dt[base + c] += dy[r * width + c];
    }
  });
}

Var gather_rows(Var a, std::span<const int> rows) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  if (av.rank() != 2) throw ContractViolation("gather_rows expects a matrix");
  Tensor out({rows.size(), av.cols()});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= static_cast<int>(av.rows())) throw ContractViolation("gather_rows index out of range");
    out.matrix().row(idx(r)) = av.matrix().row(rows[r]);
  }
  std::vector<int> sel(rows.begin(), rows.end());
  const auto ia = a.id;
  return g.record(std::move(out), {a}, [ia, sel = std::move(sel)](Graph& g, std::uint32_t self) {
    const auto dy = g.grad(self).matrix();
    auto dx = g.accumulate(ia).matrix();
    for (std::size_t r = 0; r < sel.size(); ++r) dx.row(sel[r]) += dy.row(idx(r));
  });
}

Var scatter_rows(Var a, std::span<const int> rows, std::size_t total_rows) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  if (av.rank() != 2 || av.rows() != rows.size()) throw ContractViolation("scatter_rows shape mismatch");
  Tensor out({total_rows, av.cols()});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= static_cast<int>(total_rows)) throw ContractViolation("scatter_rows index out of range");
    out.matrix().row(rows[r]) += av.matrix().row(idx(r));
  }
  std::vector<int> sel(rows.begin(), rows.end());
  const auto ia = a.id;
  return g.record(std::move(out), {a}, [ia, sel = std::move(sel)](Graph& g, std::uint32_t self) {
    const auto dy = g.grad(self).matrix();
    auto dx = g.accumulate(ia).matrix();
    for (std::size_t r = 0; r < sel.size(); ++r) dx.row(idx(r)) += dy.row(sel[r]);
  });
}

namespace {

using StridedMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

// Rows b, b + n, b + 2n, ... of a row-major buffer with `cols` columns.
ConstStridedMap rows_of(const double* base, std::size_t b, std::size_t n, std::size_t count, std::size_t cols) {
  return {base + b * cols, idx(count), idx(cols), Eigen::OuterStride<>(idx(n * cols))};
}
StridedMap rows_of(double* base, std::size_t b, std::size_t n, std::size_t count, std::size_t cols) {
  return {base + b * cols, idx(count), idx(cols), Eigen::OuterStride<>(idx(n * cols))};
}

// Writes or accumulates one strided block of a gradient buffer.
template <typename Expr>
void put(StridedMap dst, const Expr& e, bool fresh) {
  if (fresh) {
    dst.noalias() = e;
  } else {
    dst.noalias() += e;
  }
}

}  // namespace

Var attention_scores(Var keys, Var query, double s) {
  Graph& g = graph_of(keys);
  const Tensor& kv = keys.value();
  const Tensor& qv = query.value();
  require(kv.rank() == 3 && qv.rank() == 2 && kv.dim(2) == qv.dim(1) && qv.dim(0) % kv.dim(1) == 0 &&
              qv.dim(0) > 0,
          "attention_scores", kv, qv);
  const std::size_t steps = kv.dim(0), batch = kv.dim(1), width = kv.dim(2), queries = qv.dim(0) / batch;
  Tensor out = Tensor::uninitialized({queries * batch, steps});
  for (std::size_t b = 0; b < batch; ++b) {
    rows_of(out.data().data(), b, batch, queries, steps).noalias() =
        s * rows_of(qv.data().data(), b, batch, queries, width) *
        rows_of(kv.data().data(), b, batch, steps, width).transpose();
  }
  const auto ik = keys.id, iq = query.id;
  return g.record(std::move(out), {keys, query}, [=](Graph& g, std::uint32_t self) {
    const double* dy = g.grad(self).data().data();
    if (g.requires_grad(iq)) {
      bool fresh = false;
      double* dq = g.grad_buffer(iq, fresh).data().data();
      const double* k = g.value(ik).data().data();
      for (std::size_t b = 0; b < batch; ++b) {
        put(rows_of(dq, b, batch, queries, width),
            s * rows_of(dy, b, batch, queries, steps) * rows_of(k, b, batch, steps, width), fresh);
      }
    }
    if (g.requires_grad(ik)) {
      bool fresh = false;
      double* dk = g.grad_buffer(ik, fresh).data().data();
      const double* q = g.value(iq).data().data();
      for (std::size_t b = 0; b < batch; ++b) {
        put(rows_of(dk, b, batch, steps, width),
            s * rows_of(dy, b, batch, queries, steps).transpose() * rows_of(q, b, batch, queries, width), fresh);
      }
    }
  });
}

Var attention_context(Var weights, Var values) {
  Graph& g = graph_of(weights);
  const Tensor& wv = weights.value();
  const Tensor& vv = values.value();
  require(vv.rank() == 3 && wv.rank() == 2 && wv.dim(1) == vv.dim(0) && wv.dim(0) % vv.dim(1) == 0 && wv.dim(0) > 0,
          "attention_context", wv, vv);
  const std::size_t steps = vv.dim(0), batch = vv.dim(1), width = vv.dim(2), queries = wv.dim(0) / batch;
  Tensor out = Tensor::uninitialized({queries * batch, width});
  for (std::size_t b = 0; b < batch; ++b) {
    rows_of(out.data().data(), b, batch, queries, width).noalias() =
        rows_of(wv.data().data(), b, batch, queries, steps) * rows_of(vv.data().data(), b, batch, steps, width);
  }
  const auto iw = weights.id, iv = values.id;
  return g.record(std::move(out), {weights, values}, [=](Graph& g, std::uint32_t self) {
    const double* dy = g.grad(self).data().data();
    if (g.requires_grad(iw)) {
      bool fresh = false;
      double* dw = g.grad_buffer(iw, fresh).data().data();
      const double* v = g.value(iv).data().data();
      for (std::size_t b = 0; b < batch; ++b) {
        put(rows_of(dw, b, batch, queries, steps),
            rows_of(dy, b, batch, queries, width) * rows_of(v, b, batch, steps, width).transpose(), fresh);
      }
    }
    if (g.requires_grad(iv)) {
      bool fresh = false;
      double* dv = g.grad_buffer(iv, fresh).data().data();
      const double* w = g.value(iw).data().data();
      for (std::size_t b = 0; b < batch; ++b) {
        put(rows_of(dv, b, batch, steps, width),
            rows_of(w, b, batch, queries, steps).transpose() * rows_of(dy, b, batch, queries, width), fresh);
      }
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> targets, TokenRange range) {
  const std::vector<TokenRange> ranges(targets.size(), range);
  return cross_entropy(logits, targets, ranges);
}

Var cross_entropy(Var logits, std::span<const int> targets, std::span<const TokenRange> ranges) {
  Graph& g = graph_of(logits);
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || lv.rows() != targets.size() || ranges.size() != targets.size()) {
    throw ContractViolation("cross_entropy shape mismatch");
  }
  // Softmax over each row's legal range, kept for backward; other entries 0.
  RowMatrix probs = RowMatrix::Zero(idx(lv.rows()), idx(lv.cols()));
  double loss = 0.0;
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    const TokenRange range = ranges[static_cast<std::size_t>(r)];
    if (range.first < 0 || range.last > static_cast<int>(lv.cols()) || range.first >= range.last) {
      throw ContractViolation("cross_entropy: bad token range");
    }
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < range.first || t >= range.last) throw ContractViolation("cross_entropy target outside legal range");
    auto row = probs.row(r).segment(range.first, range.last - range.first);
    row = lv.matrix().row(r).segment(range.first, range.last - range.first);
    const double mx = row.maxCoeff();
    row.array() = (row.array() - mx).exp();
    const double z = row.sum();
    loss -= (lv.matrix()(r, t) - mx) - std::log(z);
    row /= z;
  }
  std::vector<int> tg(targets.begin(), targets.end());
  const auto il = logits.id;
  return g.record(Tensor::scalar(loss), {logits},
                  [il, probs = std::move(probs), tg = std::move(tg)](Graph& g, std::uint32_t self) {
                    const double dy = g.grad(self)[0];
                    auto dx = g.accumulate(il).matrix();
                    dx += dy * probs;
                    for (std::size_t r = 0; r < tg.size(); ++r) dx(idx(r), tg[r]) -= dy;
                  });
}

Var squared_error(Var prediction, const Tensor& target) {
  Graph& g = graph_of(prediction);
  const Tensor& pv = prediction.value();
  require(pv.size() == target.size(), "squared_error", pv, target);
  Tensor diff = pv;
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] -= target[i];
  double loss = 0.0;
  for (double d : diff.data()) loss += d * d;
  const auto ip = prediction.id;
  return g.record(Tensor::scalar(loss), {prediction}, [ip, diff = std::move(diff)](Graph& g, std::uint32_t self) {
    const double dy = g.grad(self)[0];
    auto dx = g.accumulate(ip).data();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += 2.0 * dy * diff[i];
  });
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(const LossBuilder& build, const ParamStore& store, double eps,
                           std::size_t samples, std::uint64_t seed, double floor) {
  Gradients analytic;
  {
    Graph g;
    Var loss = build(g, store);
    g.backward(loss);
    analytic = g.param_grads(store);
  }
  auto evaluate = [&build](const ParamStore& s) {
    Graph g;
    return build(g, s).value().item();
  };

  std::vector<std::pair<std::string, std::size_t>> coords;
  for (const auto& [path, p] : store) {
    for (std::size_t i = 0; i < p.value.size(); ++i) coords.emplace_back(path, i);
  }
  if (coords.size() > samples) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(samples);
  }

  GradCheckResult result;
  ParamStore probe = store;
  for (const auto& [path, i] : coords) {
    double& x = probe.value(path)[i];
    const double saved = x;
    x = saved + eps;
    const double up = evaluate(probe);
    x = saved - eps;
    const double down = evaluate(probe);
    x = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic.at(path)[i];
    const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    ++result.coordinates;
    if (err >= result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_path = path;
      result.worst_index = i;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace xfernas::ad
