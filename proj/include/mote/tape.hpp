// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "mote/tensor.hpp"

namespace mote {

/// Per-parameter gradient accumulators, aligned with a parameter list.
/// A slot stays empty until the parameter is touched, so "exactly zero"
/// gradients are represented exactly.
struct GradSink {
  std::vector<std::vector<double>> slots;

  explicit GradSink(std::size_t n_params = 0) : slots(n_params) {}

  std::vector<double>& slot(std::size_t id, std::size_t n) {
    if (slots[id].empty()) slots[id].assign(n, 0.0);
    return slots[id];
  }

  /// Adds other into this, in slot order.
  void merge(const GradSink& other) {
    if (slots.size() < other.slots.size()) slots.resize(other.slots.size());
    for (std::size_t i = 0; i < other.slots.size(); ++i) {
      if (other.slots[i].empty()) continue;
      auto& dst = slot(i, other.slots[i].size());
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += other.slots[i][j];
    }
  }
};

// Reverse-mode tape over a fixed set of primitive operations. A tape is
// rebuilt for every forward pass and owned by a single thread; nodes are
// stored in topological order by construction.
class Tape {
 public:
  enum class Op {
    kLeaf,
    kGatherRows,
    kAdd,
    kAddBias,
    kMatmul,
    kMatmulNT,
    kScale,
    kLayerNorm,
    kGelu,
    kSoftmaxRows,
    kSliceCols,
    kConcatCols,
    kMeanRows,
    kL2Normalize,
    kDot,
    kStackRows,
    kScatterRows,
    kScaleRows,
    kGatherElems,
    kCrossEntropyDiag,
  };

  struct Node {
    Op op;
    std::vector<int> inputs;
    Tensor val;                   // owned value (unused for external leaves)
    const Tensor* ext = nullptr;  // external leaf storage (parameters)
    int param_id = -1;            // index into the GradSink, or -1
    std::vector<double> grad;     // lazily allocated
    double scalar = 0.0;          // scale factor / eps / temperature
    std::size_t a = 0, b = 0;     // slice bounds, scatter height
    std::vector<std::uint32_t> idx;
    std::vector<double> aux;      // cached forward intermediates
  };

  const Tensor& value(int id) const {
    const Node& n = nodes_[id];
    return n.ext ? *n.ext : n.val;
  }

  /// Gradient of a node after backward(); empty if never reached.
  const std::vector<double>& grad(int id) const { return nodes_[id].grad; }

  std::size_t size() const { return nodes_.size(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }

  /// Leaf over external storage; param_id >= 0 routes its gradient into the
  /// GradSink during backward().
  int leaf(const Tensor* external, int param_id = -1) {
    Node n;
    n.op = Op::kLeaf;
    n.ext = external;
    n.param_id = param_id;
    return push(std::move(n));
  }

  /// Leaf owning a constant value (no gradient routing).
  int constant(Tensor v) {
    Node n;
    n.op = Op::kLeaf;
    n.val = std::move(v);
    return push(std::move(n));
  }

  int gather_rows(int x, std::vector<std::uint32_t> rows) {
    const Tensor& xv = value(x);
    const std::size_t d = xv.cols();
    Node n;
    n.op = Op::kGatherRows;
    n.inputs = {x};
    n.idx = std::move(rows);
    n.val = Tensor({n.idx.size(), d});
    for (std::size_t r = 0; r < n.idx.size(); ++r) {
      if (n.idx[r] >= xv.rows())
        throw ShapeError("gather_rows: row index out of range");
      std::copy_n(xv.data.data() + n.idx[r] * d, d, n.val.data.data() + r * d);
    }
    return push(std::move(n));
  }

  int add(int a, int b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.shape != bv.shape)
      throw ShapeError("add: shapes " + Tensor::shape_str(av.shape) + " and " +
                       Tensor::shape_str(bv.shape) + " differ");
    Node n;
    n.op = Op::kAdd;
    n.inputs = {a, b};
    n.val = Tensor(av.shape);
    for (std::size_t i = 0; i < av.numel(); ++i)
      n.val.data[i] = av.data[i] + bv.data[i];
    return push(std::move(n));
  }

  /// X[n x d] + row vector b[d].
  int add_bias(int x, int bias) {
    const Tensor& xv = value(x);
    const Tensor& bv = value(bias);
    if (bv.numel() != xv.cols())
      throw ShapeError("add_bias: bias length " + std::to_string(bv.numel()) +
                       " vs width " + std::to_string(xv.cols()));
    Node n;
    n.op = Op::kAddBias;
    n.inputs = {x, bias};
    n.val = Tensor(xv.shape);
    const std::size_t d = xv.cols();
    for (std::size_t i = 0; i < xv.rows(); ++i)
      for (std::size_t j = 0; j < d; ++j)
        n.val.data[i * d + j] = xv.data[i * d + j] + bv.data[j];
    return push(std::move(n));
  }

  int matmul(int a, int b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.shape.size() != 2 || bv.shape.size() != 2 || av.shape[1] != bv.shape[0])
      throw ShapeError("matmul: incompatible shapes " +
                       Tensor::shape_str(av.shape) + " and " +
                       Tensor::shape_str(bv.shape));
    Node n;
    n.op = Op::kMatmul;
    n.inputs = {a, b};
    n.val = Tensor({av.shape[0], bv.shape[1]});
    detail::matmul_acc(av.data.data(), bv.data.data(), n.val.data.data(),
                       av.shape[0], av.shape[1], bv.shape[1]);
    return push(std::move(n));
  }

  /// A[m x k] * B[n x k]^T -> [m x n]
  int matmul_nt(int a, int b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.shape.size() != 2 || bv.shape.size() != 2 || av.shape[1] != bv.shape[1])
      throw ShapeError("matmul_nt: incompatible shapes " +
                       Tensor::shape_str(av.shape) + " and " +
                       Tensor::shape_str(bv.shape));
    Node n;
    n.op = Op::kMatmulNT;
    n.inputs = {a, b};
    n.val = Tensor({av.shape[0], bv.shape[0]});
    detail::matmul_nt_acc(av.data.data(), bv.data.data(), n.val.data.data(),
                          av.shape[0], av.shape[1], bv.shape[0]);
    return push(std::move(n));
  }

  int scale(int x, double c) {
    const Tensor& xv = value(x);
    Node n;
    n.op = Op::kScale;
    n.inputs = {x};
    n.scalar = c;
    n.val = Tensor(xv.shape);
    for (std::size_t i = 0; i < xv.numel(); ++i) n.val.data[i] = xv.data[i] * c;
    return push(std::move(n));
  }

  int layer_norm(int x, int gain, int bias, double eps) {
    const Tensor& xv = value(x);
    const Tensor& gv = value(gain);
    const Tensor& bv = value(bias);
    const std::size_t d = xv.cols();
    if (d == 0) throw ShapeError("layer_norm: empty normalization axis");
    if (gv.numel() != d || bv.numel() != d)
      throw ShapeError("layer_norm: gain/bias width mismatch");
    Node n;
    n.op = Op::kLayerNorm;
    n.inputs = {x, gain, bias};
    n.scalar = eps;
    n.val = Tensor(xv.shape);
    n.aux.resize(2 * xv.rows());  // mean, inv-stddev per row
    for (std::size_t i = 0; i < xv.rows(); ++i) {
      const double* row = xv.data.data() + i * d;
      double mean = 0.0;
      for (std::size_t j = 0; j < d; ++j) mean += row[j];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double c = row[j] - mean;
        var += c * c;
      }
      var /= static_cast<double>(d);
      const double inv = 1.0 / std::sqrt(var + eps);
      n.aux[2 * i] = mean;
      n.aux[2 * i + 1] = inv;
      double* out = n.val.data.data() + i * d;
      for (std::size_t j = 0; j < d; ++j)
        out[j] = (row[j] - mean) * inv * gv.data[j] + bv.data[j];
    }
    return push(std::move(n));
  }

  int gelu(int x) {
    const Tensor& xv = value(x);
    Node n;
    n.op = Op::kGelu;
    n.inputs = {x};
    n.val = Tensor(xv.shape);
    for (std::size_t i = 0; i < xv.numel(); ++i)
      n.val.data[i] = detail::gelu(xv.data[i]);
    return push(std::move(n));
  }

  int softmax_rows(int x) {
    const Tensor& xv = value(x);
    Node n;
    n.op = Op::kSoftmaxRows;
    n.inputs = {x};
    n.val = Tensor(xv.shape);
    const std::size_t d = xv.cols();
    for (std::size_t i = 0; i < xv.rows(); ++i)
      detail::softmax_row(xv.data.data() + i * d, d, n.val.data.data() + i * d);
    return push(std::move(n));
  }

  int slice_cols(int x, std::size_t c0, std::size_t c1) {
    const Tensor& xv = value(x);
    if (c0 >= c1 || c1 > xv.cols()) throw ShapeError("slice_cols: bad range");
    Node n;
    n.op = Op::kSliceCols;
    n.inputs = {x};
    n.a = c0;
    n.b = c1;
    const std::size_t w = c1 - c0;
    n.val = Tensor({xv.rows(), w});
    for (std::size_t i = 0; i < xv.rows(); ++i)
      std::copy_n(xv.data.data() + i * xv.cols() + c0, w,
                  n.val.data.data() + i * w);
    return push(std::move(n));
  }

  int concat_cols(const std::vector<int>& xs) {
    if (xs.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t rows = value(xs[0]).rows();
    std::size_t total = 0;
    for (int x : xs) {
      if (value(x).rows() != rows) throw ShapeError("concat_cols: row mismatch");
      total += value(x).cols();
    }
    Node n;
    n.op = Op::kConcatCols;
    n.inputs = xs;
    n.val = Tensor({rows, total});
    std::size_t off = 0;
    for (int x : xs) {
      const Tensor& xv = value(x);
      for (std::size_t i = 0; i < rows; ++i)
        std::copy_n(xv.data.data() + i * xv.cols(), xv.cols(),
                    n.val.data.data() + i * total + off);
      off += xv.cols();
    }
    return push(std::move(n));
  }

  /// Column means: [n x d] -> [d].
  int mean_rows(int x) {
    const Tensor& xv = value(x);
    if (xv.rows() == 0) throw ShapeError("mean_rows: no rows");
    Node n;
    n.op = Op::kMeanRows;
    n.inputs = {x};
    const std::size_t d = xv.cols();
    n.val = Tensor({d});
    for (std::size_t i = 0; i < xv.rows(); ++i)
      for (std::size_t j = 0; j < d; ++j) n.val.data[j] += xv.data[i * d + j];
    const double inv = 1.0 / static_cast<double>(xv.rows());
    for (std::size_t j = 0; j < d; ++j) n.val.data[j] *= inv;
    return push(std::move(n));
  }

  int l2_normalize(int x) {
    const Tensor& xv = value(x);
    const double r = detail::l2_norm(xv.data.data(), xv.numel());
    if (r == 0.0) throw DegenerateInputError("l2_normalize: zero-norm vector");
    Node n;
    n.op = Op::kL2Normalize;
    n.inputs = {x};
    n.scalar = r;
    n.val = Tensor(xv.shape);
    for (std::size_t i = 0; i < xv.numel(); ++i) n.val.data[i] = xv.data[i] / r;
    return push(std::move(n));
  }

  int dot(int u, int v) {
    const Tensor& uv = value(u);
    const Tensor& vv = value(v);
    if (uv.numel() != vv.numel()) throw ShapeError("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < uv.numel(); ++i) s += uv.data[i] * vv.data[i];
    Node n;
    n.op = Op::kDot;
    n.inputs = {u, v};
    n.val = Tensor({1}, {s});
    return push(std::move(n));
  }

  /// Stacks equal-length vectors into a matrix, one per row.
  int stack_rows(const std::vector<int>& vs) {
    if (vs.empty()) throw ShapeError("stack_rows: no inputs");
    const std::size_t d = value(vs[0]).numel();
    Node n;
    n.op = Op::kStackRows;
    n.inputs = vs;
    n.val = Tensor({vs.size(), d});
    for (std::size_t i = 0; i < vs.size(); ++i) {
      const Tensor& v = value(vs[i]);
      if (v.numel() != d) throw ShapeError("stack_rows: length mismatch");
      std::copy_n(v.data.data(), d, n.val.data.data() + i * d);
    }
    return push(std::move(n));
  }

  /// Places row r of x at row idx[r] of an [height x d] zero matrix.
  int scatter_rows(int x, std::vector<std::uint32_t> rows, std::size_t height) {
    const Tensor& xv = value(x);
    if (rows.size() != xv.rows()) throw ShapeError("scatter_rows: index count");
    Node n;
    n.op = Op::kScatterRows;
    n.inputs = {x};
    n.idx = std::move(rows);
    n.a = height;
    const std::size_t d = xv.cols();
    n.val = Tensor({height, d});
    for (std::size_t r = 0; r < n.idx.size(); ++r) {
      if (n.idx[r] >= height) throw ShapeError("scatter_rows: index out of range");
      std::copy_n(xv.data.data() + r * d, d, n.val.data.data() + n.idx[r] * d);
    }
    return push(std::move(n));
  }

  /// Row i of x scaled by s[i].
  int scale_rows(int x, int s) {
    const Tensor& xv = value(x);
    const Tensor& sv = value(s);
    if (sv.numel() != xv.rows()) throw ShapeError("scale_rows: length mismatch");
    Node n;
    n.op = Op::kScaleRows;
    n.inputs = {x, s};
    const std::size_t d = xv.cols();
    n.val = Tensor(xv.shape);
    for (std::size_t i = 0; i < xv.rows(); ++i)
      for (std::size_t j = 0; j < d; ++j)
        n.val.data[i * d + j] = xv.data[i * d + j] * sv.data[i];
    return push(std::move(n));
  }

  /// Gathers flat elements x.data[idx[t]] into a vector.
  int gather_elems(int x, std::vector<std::uint32_t> flat) {
    const Tensor& xv = value(x);
    Node n;
    n.op = Op::kGatherElems;
    n.inputs = {x};
    n.idx = std::move(flat);
    n.val = Tensor({n.idx.size()});
    for (std::size_t t = 0; t < n.idx.size(); ++t) {
      if (n.idx[t] >= xv.numel())
        throw ShapeError("gather_elems: index out of range");
      n.val.data[t] = xv.data[n.idx[t]];
    }
    return push(std::move(n));
  }

  /// InfoNCE head over a square similarity matrix: the diagonal entry of
  /// each row is the positive, every column a candidate. Returns the mean
  /// of -log softmax(S_i / temperature)[i].
  int cross_entropy_diag(int s, double temperature) {
    const Tensor& sv = value(s);
    if (sv.rows() != sv.cols() || sv.rows() == 0)
      throw ShapeError("cross_entropy_diag: square matrix required");
    Node n;
    n.op = Op::kCrossEntropyDiag;
    n.inputs = {s};
    n.scalar = temperature;
    const std::size_t bsz = sv.rows();
    n.aux.resize(bsz * bsz);  // row-softmax of S / temperature
    double loss = 0.0;
    std::vector<double> logits(bsz);
    for (std::size_t i = 0; i < bsz; ++i) {
      for (std::size_t j = 0; j < bsz; ++j)
        logits[j] = sv.data[i * bsz + j] / temperature;
      detail::softmax_row(logits.data(), bsz, n.aux.data() + i * bsz);
      double mx = logits[0];
      for (std::size_t j = 1; j < bsz; ++j) mx = std::max(mx, logits[j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < bsz; ++j) sum += std::exp(logits[j] - mx);
      loss += mx + std::log(sum) - logits[i];
    }
    n.val = Tensor({1}, {loss / static_cast<double>(bsz)});
    return push(std::move(n));
  }

  /// Reverse pass. Each seed adds a gradient at a node; parameter leaves
  /// accumulate into the sink (when given). Visits each node exactly once.
  void backward(const std::vector<std::pair<int, std::vector<double>>>& seeds,
                GradSink* sink) {
    for (const auto& [id, g] : seeds) {
      Node& n = nodes_[id];
      const std::size_t want = value(id).numel();
      if (g.size() != want) throw ShapeError("backward: seed length mismatch");
      if (n.grad.empty()) n.grad.assign(want, 0.0);
      for (std::size_t i = 0; i < want; ++i) n.grad[i] += g[i];
    }
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.grad.empty()) continue;
      backprop(n);
      if (n.op == Op::kLeaf && n.param_id >= 0 && sink != nullptr) {
        auto& dst = sink->slot(static_cast<std::size_t>(n.param_id),
                               value(id).numel());
        for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i];
      }
    }
  }

 private:
  std::vector<Node> nodes_;

  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<double>& grad_buf(int id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(id).numel(), 0.0);
    return n.grad;
  }

  void backprop(Node& n) {
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kGatherRows: {
        auto& dx = grad_buf(n.inputs[0]);
        const std::size_t d = n.val.cols();
        for (std::size_t r = 0; r < n.idx.size(); ++r) {
          double* dst = dx.data() + n.idx[r] * d;
          const double* src = n.grad.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
        break;
      }
      case Op::kAdd: {
        auto& da = grad_buf(n.inputs[0]);
        auto& db = grad_buf(n.inputs[1]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          da[i] += n.grad[i];
          db[i] += n.grad[i];
        }
        break;
      }
      case Op::kAddBias: {
        auto& dx = grad_buf(n.inputs[0]);
        auto& db = grad_buf(n.inputs[1]);
        const std::size_t d = n.val.cols();
        for (std::size_t i = 0; i < n.val.rows(); ++i)
          for (std::size_t j = 0; j < d; ++j) {
            dx[i * d + j] += n.grad[i * d + j];
            db[j] += n.grad[i * d + j];
          }
        break;
      }
      case Op::kMatmul: {
        const Tensor& a = value(n.inputs[0]);
        const Tensor& b = value(n.inputs[1]);
        const std::size_t m = a.shape[0], k = a.shape[1], c = b.shape[1];
        auto& da = grad_buf(n.inputs[0]);
        auto& db = grad_buf(n.inputs[1]);
        detail::matmul_nt_acc(n.grad.data(), b.data.data(), da.data(), m, c, k);
        detail::matmul_tn_acc(a.data.data(), n.grad.data(), db.data(), m, k, c);
        break;
      }
      case Op::kMatmulNT: {
        const Tensor& a = value(n.inputs[0]);
        const Tensor& b = value(n.inputs[1]);
        const std::size_t m = a.shape[0], k = a.shape[1], c = b.shape[0];
        auto& da = grad_buf(n.inputs[0]);
        auto& db = grad_buf(n.inputs[1]);
        detail::matmul_acc(n.grad.data(), b.data.data(), da.data(), m, c, k);
        detail::matmul_tn_acc(n.grad.data(), a.data.data(), db.data(), m, c, k);
        break;
      }
      case Op::kScale: {
        auto& dx = grad_buf(n.inputs[0]);
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          dx[i] += n.scalar * n.grad[i];
        break;
      }
      case Op::kLayerNorm: {
        const Tensor& x = value(n.inputs[0]);
        const Tensor& g = value(n.inputs[1]);
        auto& dx = grad_buf(n.inputs[0]);
        auto& dg = grad_buf(n.inputs[1]);
        auto& db = grad_buf(n.inputs[2]);
        const std::size_t d = x.cols();
        const double dinv = 1.0 / static_cast<double>(d);
        for (std::size_t i = 0; i < x.rows(); ++i) {
          const double mean = n.aux[2 * i];
          const double inv = n.aux[2 * i + 1];
          const double* xr = x.data.data() + i * d;
          const double* dy = n.grad.data() + i * d;
          double sum_gdy = 0.0, sum_gdyx = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (xr[j] - mean) * inv;
            const double gdy = g.data[j] * dy[j];
            sum_gdy += gdy;
            sum_gdyx += gdy * xhat;
            dg[j] += dy[j] * xhat;
            db[j] += dy[j];
          }
          const double m1 = sum_gdy * dinv;
          const double m2 = sum_gdyx * dinv;
          double* dxr = dx.data() + i * d;
          for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (xr[j] - mean) * inv;
            dxr[j] += (g.data[j] * dy[j] - m1 - xhat * m2) * inv;
          }
        }
        break;
      }
      case Op::kGelu: {
        const Tensor& x = value(n.inputs[0]);
        auto& dx = grad_buf(n.inputs[0]);
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          dx[i] += n.grad[i] * detail::gelu_grad(x.data[i]);
        break;
      }
      case Op::kSoftmaxRows: {
        auto& dx = grad_buf(n.inputs[0]);
        const std::size_t d = n.val.cols();
        for (std::size_t i = 0; i < n.val.rows(); ++i) {
          const double* y = n.val.data.data() + i * d;
          const double* dy = n.grad.data() + i * d;
          double s = 0.0;
          for (std::size_t j = 0; j < d; ++j) s += dy[j] * y[j];
          double* dxr = dx.data() + i * d;
          for (std::size_t j = 0; j < d; ++j) dxr[j] += y[j] * (dy[j] - s);
        }
        break;
      }
      case Op::kSliceCols: {
        const Tensor& x = value(n.inputs[0]);
        auto& dx = grad_buf(n.inputs[0]);
        const std::size_t w = n.b - n.a;
        for (std::size_t i = 0; i < n.val.rows(); ++i)
          for (std::size_t j = 0; j < w; ++j)
            dx[i * x.cols() + n.a + j] += n.grad[i * w + j];
        break;
      }
      case Op::kConcatCols: {
        std::size_t off = 0;
        const std::size_t total = n.val.cols();
        for (int in : n.inputs) {
          const Tensor& x = value(in);
          auto& dx = grad_buf(in);
          for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j)
              dx[i * x.cols() + j] += n.grad[i * total + off + j];
          off += x.cols();
        }
        break;
      }
      case Op::kMeanRows: {
        const Tensor& x = value(n.inputs[0]);
        auto& dx = grad_buf(n.inputs[0]);
        const std::size_t d = x.cols();
        const double inv = 1.0 / static_cast<double>(x.rows());
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t j = 0; j < d; ++j) dx[i * d + j] += n.grad[j] * inv;
        break;
      }
      case Op::kL2Normalize: {
        auto& dx = grad_buf(n.inputs[0]);
        const double r = n.scalar;
        double ydy = 0.0;
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          ydy += n.val.data[i] * n.grad[i];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          dx[i] += (n.grad[i] - n.val.data[i] * ydy) / r;
        break;
      }
      case Op::kDot: {
        const Tensor& u = value(n.inputs[0]);
        const Tensor& v = value(n.inputs[1]);
        auto& du = grad_buf(n.inputs[0]);
        auto& dv = grad_buf(n.inputs[1]);
        const double dy = n.grad[0];
        for (std::size_t i = 0; i < u.numel(); ++i) {
          du[i] += dy * v.data[i];
          dv[i] += dy * u.data[i];
        }
        break;
      }
      case Op::kStackRows: {
        const std::size_t d = n.val.cols();
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
          auto& dv = grad_buf(n.inputs[i]);
          for (std::size_t j = 0; j < d; ++j) dv[j] += n.grad[i * d + j];
        }
        break;
      }
      case Op::kScatterRows: {
        auto& dx = grad_buf(n.inputs[0]);
        const std::size_t d = n.val.cols();
        for (std::size_t r = 0; r < n.idx.size(); ++r)
          for (std::size_t j = 0; j < d; ++j)
            dx[r * d + j] += n.grad[n.idx[r] * d + j];
        break;
      }
      case Op::kScaleRows: {
        const Tensor& x = value(n.inputs[0]);
        const Tensor& s = value(n.inputs[1]);
        auto& dx = grad_buf(n.inputs[0]);
        auto& ds = grad_buf(n.inputs[1]);
        const std::size_t d = x.cols();
        for (std::size_t i = 0; i < x.rows(); ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dx[i * d + j] += n.grad[i * d + j] * s.data[i];
            acc += n.grad[i * d + j] * x.data[i * d + j];
          }
          ds[i] += acc;
        }
        break;
      }
      case Op::kGatherElems: {
        auto& dx = grad_buf(n.inputs[0]);
        for (std::size_t t = 0; t < n.idx.size(); ++t)
          dx[n.idx[t]] += n.grad[t];
        break;
      }
      case Op::kCrossEntropyDiag: {
        auto& ds = grad_buf(n.inputs[0]);
        const std::size_t bsz = value(n.inputs[0]).rows();
        const double c = n.grad[0] / (static_cast<double>(bsz) * n.scalar);
        for (std::size_t i = 0; i < bsz; ++i)
          for (std::size_t j = 0; j < bsz; ++j) {
            double p = n.aux[i * bsz + j];
            if (i == j) p -= 1.0;
            ds[i * bsz + j] += c * p;
          }
        break;
      }
    }
  }
};

/// Loss callback for gradient_check. When the sink argument is non-null the
/// callee must also fill analytic gradients, one slot per checked tensor in
/// the same order as the tensor list.
using CheckedLossFn = std::function<double(std::vector<std::vector<double>>*)>;

/// Central finite differences over every scalar of every listed tensor.
/// Returns max over scalars of |analytic - numeric| / max(1, |numeric|).
inline double gradient_check(const CheckedLossFn& loss_fn,
                             const std::vector<Tensor*>& params, double step) {
  if (!(step > 0.0) || step > 1e-2)
    throw ConfigError("gradient_check: step must be in (0, 1e-2]");
  const double l0 = loss_fn(nullptr);
  const double l0_again = loss_fn(nullptr);
  if (!(l0 == l0_again))
    throw DeterminismError(
        "gradient_check: loss function is not deterministic");

  std::vector<std::vector<double>> analytic(params.size());
  loss_fn(&analytic);

  double max_rel = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = *params[p];
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double orig = t.data[i];
      t.data[i] = orig + step;
      const double lp = loss_fn(nullptr);
      t.data[i] = orig - step;
      const double lm = loss_fn(nullptr);
      t.data[i] = orig;
      const double numeric = (lp - lm) / (2.0 * step);
      const double a = analytic[p].empty() ? 0.0 : analytic[p][i];
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace mote
