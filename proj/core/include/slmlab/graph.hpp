#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "slmlab/tensor.hpp"

namespace slm {

using NodeId = int32_t;

template <typename T>
class GraphT;

// Composite operations (the token mixers) plug in here: forward is run at
// record time, backward must accumulate into the adjoints of the node's
// inputs. Keeps the tape small where a per-step op-by-op recording would
// dominate memory and runtime.
template <typename T>
struct CustomOpT {
  virtual ~CustomOpT() = default;
  virtual std::string kind() const = 0;
  virtual TensorT<T> forward(const GraphT<T>& g, const std::vector<NodeId>& inputs) = 0;
  virtual void backward(GraphT<T>& g, NodeId self) = 0;
};

// Record-then-reverse tape. Nodes are appended in execution order, so the
// vector itself is the topological order. Single-threaded by contract;
// distinct graphs may live on distinct threads.
template <typename T>
class GraphT {
 public:
  enum class Op {
    kLeaf,
    kMatmul,
    kLinear,       // x . W^T
    kTranspose,
    kAdd,
    kMul,
    kScale,
    kScaleColumns,  // x[t,c] * g[c]
    kSilu,
    kSigmoid,
    kSoftmaxRows,
    kRmsNorm,
    kLayerNorm,
    kL2NormRows,
    kEmbedding,
    kConcatRows,
    kSliceRows,
    kCrossEntropy,
    kSum,
    kCustom,
  };

  struct Node {
    Op op;
    std::vector<NodeId> inputs;
    TensorT<T> value;
    TensorT<T> adjoint;  // sized lazily in backward
    bool requires_grad = false;
    // op-specific extras
    T scalar = 0;
    int64_t i0 = 0, i1 = 0;
    std::vector<int32_t> indices;          // embedding/cross-entropy targets
    TensorT<T> cache;                      // probs, inv-rms, ...
    std::unique_ptr<CustomOpT<T>> custom;
  };

  NodeId leaf(TensorT<T> value, bool requires_grad = false) {
    Node n;
    n.op = Op::kLeaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  NodeId matmul(NodeId a, NodeId b) {
    Node n = unary_common(Op::kMatmul, slm::matmul(value(a), value(b)), {a, b});
    return push(std::move(n));
  }

  NodeId linear(NodeId x, NodeId w) {
    Node n = unary_common(Op::kLinear, slm::linear(value(x), value(w)), {x, w});
    return push(std::move(n));
  }

  NodeId transpose(NodeId a) {
    Node n = unary_common(Op::kTranspose, slm::transpose(value(a)), {a});
    return push(std::move(n));
  }

  NodeId add(NodeId a, NodeId b) {
    Node n = unary_common(Op::kAdd, slm::add(value(a), value(b)), {a, b});
    return push(std::move(n));
  }

  NodeId sub(NodeId a, NodeId b) { return add(a, scale(b, T(-1))); }

  NodeId mul(NodeId a, NodeId b) {
    Node n = unary_common(Op::kMul, slm::mul(value(a), value(b)), {a, b});
    return push(std::move(n));
  }

  NodeId scale(NodeId a, T c) {
    Node n = unary_common(Op::kScale, slm::scale(value(a), c), {a});
    n.scalar = c;
    return push(std::move(n));
  }

  // x[t x d] scaled per column by gain g[1 x d] (explicit op; the tape has no
  // implicit broadcasting beyond scalar * tensor).
  NodeId scale_columns(NodeId x, NodeId g) {
    const auto& xv = value(x);
    const auto& gv = value(g);
    if (gv.numel() != xv.cols())
      throw ShapeError("scale_columns gain " + gv.shape_str() + " vs x " + xv.shape_str());
    TensorT<T> out = xv;
    for (int64_t r = 0; r < out.rows(); ++r) {
      T* row = out.row_ptr(r);
      for (int64_t c = 0; c < out.cols(); ++c) row[c] *= gv[c];
    }
    Node n = unary_common(Op::kScaleColumns, std::move(out), {x, g});
    return push(std::move(n));
  }

  NodeId silu(NodeId a) {
    Node n = unary_common(Op::kSilu, slm::silu(value(a)), {a});
    return push(std::move(n));
  }

  NodeId sigmoid(NodeId a) {
    Node n = unary_common(Op::kSigmoid, slm::sigmoid(value(a)), {a});
    return push(std::move(n));
  }

  NodeId softmax_rows(NodeId a) {
    Node n = unary_common(Op::kSoftmaxRows, slm::softmax_rows(value(a)), {a});
    return push(std::move(n));
  }

  NodeId rms_norm(NodeId a, T eps = T(1e-8)) {
    const auto& x = value(a);
    check_nonempty_rows(x, "rms_norm");
    TensorT<T> out = x;
    TensorT<T> inv({x.rows()});
    const int64_t c = x.cols();
    for (int64_t r = 0; r < x.rows(); ++r) {
      T* row = out.row_ptr(r);
      double ms = 0;
      for (int64_t j = 0; j < c; ++j) ms += double(row[j]) * double(row[j]);
      inv[r] = T(1.0 / std::sqrt(ms / double(c) + double(eps)));
      for (int64_t j = 0; j < c; ++j) row[j] *= inv[r];
    }
    Node n = unary_common(Op::kRmsNorm, std::move(out), {a});
    n.cache = std::move(inv);
    return push(std::move(n));
  }

  NodeId layer_norm(NodeId a, T eps = T(1e-8)) {
    const auto& x = value(a);
    check_nonempty_rows(x, "layer_norm");
    TensorT<T> out = x;
    TensorT<T> stats(x.rows(), 2);  // mean, inv-std per row
    const int64_t c = x.cols();
    for (int64_t r = 0; r < x.rows(); ++r) {
      T* row = out.row_ptr(r);
      double mean = 0;
      for (int64_t j = 0; j < c; ++j) mean += row[j];
      mean /= double(c);
      double var = 0;
      for (int64_t j = 0; j < c; ++j) {
        double d = row[j] - mean;
        var += d * d;
      }
      var /= double(c);
      double inv = 1.0 / std::sqrt(var + double(eps));
      for (int64_t j = 0; j < c; ++j) row[j] = T((row[j] - mean) * inv);
      stats.at(r, 0) = T(mean);
      stats.at(r, 1) = T(inv);
    }
    Node n = unary_common(Op::kLayerNorm, std::move(out), {a});
    n.cache = std::move(stats);
    return push(std::move(n));
  }

  NodeId l2_normalize_rows(NodeId a, int64_t n_segments = 1, T eps = T(1e-8)) {
    Node n = unary_common(Op::kL2NormRows,
                          slm::l2_normalize_rows(value(a), n_segments, eps), {a});
    n.scalar = eps;
    n.i0 = n_segments;
    return push(std::move(n));
  }

  // out[t,:] = table[ids[t],:]
  NodeId embedding(NodeId table, std::vector<int32_t> ids) {
    const auto& tab = value(table);
    TensorT<T> out(static_cast<int64_t>(ids.size()), tab.cols());
    for (size_t t = 0; t < ids.size(); ++t) {
      if (ids[t] < 0 || ids[t] >= tab.rows())
        throw ShapeError("embedding id " + std::to_string(ids[t]) + " out of range for table " +
                         tab.shape_str());
      std::copy(tab.row_ptr(ids[t]), tab.row_ptr(ids[t]) + tab.cols(), out.row_ptr(t));
    }
    Node n = unary_common(Op::kEmbedding, std::move(out), {table});
    n.indices = std::move(ids);
    return push(std::move(n));
  }

  NodeId concat_rows(NodeId a, NodeId b) {
    const auto& av = value(a);
    const auto& bv = value(b);
    if (av.cols() != bv.cols())
      throw ShapeError("concat_rows column mismatch: " + av.shape_str() + " vs " +
                       bv.shape_str());
    TensorT<T> out(av.rows() + bv.rows(), av.cols());
    std::copy(av.data(), av.data() + av.numel(), out.data());
    std::copy(bv.data(), bv.data() + bv.numel(), out.data() + av.numel());
    Node n = unary_common(Op::kConcatRows, std::move(out), {a, b});
    return push(std::move(n));
  }

  NodeId slice_rows(NodeId a, int64_t start, int64_t len) {
    const auto& av = value(a);
    if (start < 0 || len < 0 || start + len > av.rows())
      throw ShapeError("slice_rows [" + std::to_string(start) + ", +" + std::to_string(len) +
                       ") out of " + av.shape_str());
    TensorT<T> out(len, av.cols());
    std::copy(av.row_ptr(start), av.row_ptr(start) + len * av.cols(), out.data());
    Node n = unary_common(Op::kSliceRows, std::move(out), {a});
    n.i0 = start;
    n.i1 = len;
    return push(std::move(n));
  }

  // mean negative log-likelihood over rows; returns a scalar node
  NodeId cross_entropy(NodeId logits, std::vector<int32_t> targets) {
    const auto& lg = value(logits);
    if (static_cast<int64_t>(targets.size()) != lg.rows())
      throw ShapeError("cross_entropy targets " + std::to_string(targets.size()) +
                       " vs logits " + lg.shape_str());
    TensorT<T> probs = slm::softmax_rows(lg);
    double nll = 0;
    for (int64_t r = 0; r < lg.rows(); ++r) {
      int32_t tgt = targets[r];
      if (tgt < 0 || tgt >= lg.cols())
        throw ShapeError("cross_entropy target out of range: " + std::to_string(tgt));
      nll -= std::log(std::max(double(probs.at(r, tgt)), 1e-300));
    }
    TensorT<T> out({1});
    out[0] = T(nll / double(std::max<int64_t>(1, lg.rows())));
    Node n = unary_common(Op::kCrossEntropy, std::move(out), {logits});
    n.indices = std::move(targets);
    n.cache = std::move(probs);
    return push(std::move(n));
  }

  NodeId sum(NodeId a) {
    const auto& av = value(a);
    TensorT<T> out({1});
    double s = 0;
    for (int64_t i = 0; i < av.numel(); ++i) s += av[i];
    out[0] = T(s);
    Node n = unary_common(Op::kSum, std::move(out), {a});
    return push(std::move(n));
  }

  NodeId custom(std::unique_ptr<CustomOpT<T>> op, std::vector<NodeId> inputs) {
    Node n;
    n.op = Op::kCustom;
    n.inputs = std::move(inputs);
    for (NodeId i : n.inputs) n.requires_grad |= node(i).requires_grad;
    n.value = op->forward(*this, n.inputs);
    n.custom = std::move(op);
    return push(std::move(n));
  }

  const TensorT<T>& value(NodeId id) const { return node(id).value; }

  const TensorT<T>& grad(NodeId id) const { return node(id).adjoint; }

  TensorT<T>& adjoint(NodeId id) { return node(id).adjoint; }

  bool requires_grad(NodeId id) const { return node(id).requires_grad; }

  std::string op_name(NodeId id) const {
    static const char* names[] = {
        "leaf",       "matmul",     "linear",    "transpose",   "add",
        "mul",        "scale",      "scale_columns", "silu",    "sigmoid",
        "softmax_rows", "rms_norm", "layer_norm", "l2_normalize_rows", "embedding",
        "concat_rows", "slice_rows", "cross_entropy", "sum",    "custom"};
    const Node& n = node(id);
    if (n.op == Op::kCustom) return n.custom->kind();
    return names[static_cast<int>(n.op)];
  }

  size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar loss. Adjoints are reset first, so repeated
  // calls on the same graph are reproducible bit for bit.
  void backward(NodeId loss) {
    if (value(loss).numel() != 1)
      throw ShapeError("backward requires a scalar loss node, got " +
                       value(loss).shape_str());
    for (auto& n : nodes_) {
      if (n.requires_grad)
        n.adjoint = TensorT<T>(n.value.shape());
      else
        n.adjoint = TensorT<T>();
    }
    if (!node(loss).requires_grad) return;
    node(loss).adjoint.fill(T(1));
    for (NodeId id = loss; id >= 0; --id) {
      Node& n = node(id);
      if (!n.requires_grad || n.adjoint.empty()) continue;
      step_backward(id, n);
    }
  }

  // Adjoints of all gradient-bearing leaves, keyed by node id.
  std::map<NodeId, TensorT<T>> gradient_map() const {
    std::map<NodeId, TensorT<T>> out;
    for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) {
      const Node& n = node(id);
      if (n.op == Op::kLeaf && n.requires_grad && !n.adjoint.empty()) out[id] = n.adjoint;
    }
    return out;
  }

  Node& node(NodeId id) { return nodes_[id]; }
  const Node& node(NodeId id) const { return nodes_[id]; }

 private:
  Node unary_common(Op op, TensorT<T> val, std::vector<NodeId> inputs) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    n.value = std::move(val);
    for (NodeId i : n.inputs) n.requires_grad |= node(i).requires_grad;
    return n;
  }

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  void accum(NodeId id, const TensorT<T>& g) {
    Node& n = node(id);
    if (!n.requires_grad) return;
    for (int64_t i = 0; i < g.numel(); ++i) n.adjoint[i] += g[i];
  }

  void step_backward(NodeId id, Node& n) {
    const TensorT<T>& dy = n.adjoint;
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kMatmul: {
        const auto& a = value(n.inputs[0]);
        const auto& b = value(n.inputs[1]);
        if (node(n.inputs[0]).requires_grad)
          accum(n.inputs[0], slm::matmul(dy, slm::transpose(b)));
        if (node(n.inputs[1]).requires_grad)
          accum(n.inputs[1], slm::matmul(slm::transpose(a), dy));
        break;
      }
      case Op::kLinear: {
        // y = x . W^T : dx = dy . W ; dW = dy^T . x
        const auto& x = value(n.inputs[0]);
        const auto& w = value(n.inputs[1]);
        if (node(n.inputs[0]).requires_grad) accum(n.inputs[0], slm::matmul(dy, w));
        if (node(n.inputs[1]).requires_grad) {
          TensorT<T> dw(w.rows(), w.cols());
          for (int64_t t = 0; t < x.rows(); ++t) {
            const T* dyr = dy.row_ptr(t);
            const T* xr = x.row_ptr(t);
            for (int64_t o = 0; o < w.rows(); ++o) {
              T* dwr = dw.row_ptr(o);
              const T d = dyr[o];
              for (int64_t p = 0; p < w.cols(); ++p) dwr[p] += d * xr[p];
            }
          }
          accum(n.inputs[1], dw);
        }
        break;
      }
      case Op::kTranspose:
        accum(n.inputs[0], slm::transpose(dy));
        break;
      case Op::kAdd:
        accum(n.inputs[0], dy);
        accum(n.inputs[1], dy);
        break;
      case Op::kMul:
        if (node(n.inputs[0]).requires_grad)
          accum(n.inputs[0], slm::mul(dy, value(n.inputs[1])));
        if (node(n.inputs[1]).requires_grad)
          accum(n.inputs[1], slm::mul(dy, value(n.inputs[0])));
        break;
      case Op::kScale:
        accum(n.inputs[0], slm::scale(dy, n.scalar));
        break;
      case Op::kScaleColumns: {
        const auto& x = value(n.inputs[0]);
        const auto& g = value(n.inputs[1]);
        if (node(n.inputs[0]).requires_grad) {
          TensorT<T> dx = dy;
          for (int64_t r = 0; r < dx.rows(); ++r)
            for (int64_t c = 0; c < dx.cols(); ++c) dx.at(r, c) *= g[c];
          accum(n.inputs[0], dx);
        }
        if (node(n.inputs[1]).requires_grad) {
          TensorT<T> dg(g.shape());
          for (int64_t r = 0; r < x.rows(); ++r)
            for (int64_t c = 0; c < x.cols(); ++c) dg[c] += dy.at(r, c) * x.at(r, c);
          accum(n.inputs[1], dg);
        }
        break;
      }
      case Op::kSilu: {
        const auto& x = value(n.inputs[0]);
        TensorT<T> dx = dy;
        for (int64_t i = 0; i < dx.numel(); ++i) {
          double v = x[i];
          double s = 1.0 / (1.0 + std::exp(-v));
          dx[i] *= T(s * (1.0 + v * (1.0 - s)));
        }
        accum(n.inputs[0], dx);
        break;
      }
      case Op::kSigmoid: {
        TensorT<T> dx = dy;
        for (int64_t i = 0; i < dx.numel(); ++i) {
          double s = n.value[i];
          dx[i] *= T(s * (1.0 - s));
        }
        accum(n.inputs[0], dx);
        break;
      }
      case Op::kSoftmaxRows: {
        const auto& y = n.value;
        TensorT<T> dx = dy;
        for (int64_t r = 0; r < y.rows(); ++r) {
          double dot = 0;
          for (int64_t c = 0; c < y.cols(); ++c) dot += double(dy.at(r, c)) * double(y.at(r, c));
          for (int64_t c = 0; c < y.cols(); ++c)
            dx.at(r, c) = T((double(dy.at(r, c)) - dot) * double(y.at(r, c)));
        }
        accum(n.inputs[0], dx);
        break;
      }
      case Op::kRmsNorm: {
        const auto& x = value(n.inputs[0]);
        const auto& inv = n.cache;
        TensorT<T> dx(x.shape());
        const int64_t c = x.cols();
        for (int64_t r = 0; r < x.rows(); ++r) {
          double dot = 0;
          for (int64_t j = 0; j < c; ++j) dot += double(dy.at(r, j)) * double(x.at(r, j));
          double r1 = inv[r];
          double k = r1 * r1 * r1 * dot / double(c);
          for (int64_t j = 0; j < c; ++j)
            dx.at(r, j) = T(r1 * double(dy.at(r, j)) - k * double(x.at(r, j)));
        }
        accum(n.inputs[0], dx);
        break;
      }
      case Op::kLayerNorm: {
        const auto& y = n.value;
        const auto& stats = n.cache;
        TensorT<T> dx(y.shape());
        const int64_t c = y.cols();
        for (int64_t r = 0; r < y.rows(); ++r) {
          double inv = stats.at(r, 1);
          double mean_dy = 0, mean_dyy = 0;
          for (int64_t j = 0; j < c; ++j) {
            mean_dy += dy.at(r, j);
            mean_dyy += double(dy.at(r, j)) * double(y.at(r, j));
          }
          mean_dy /= double(c);
          mean_dyy /= double(c);
          for (int64_t j = 0; j < c; ++j)
            dx.at(r, j) =
                T(inv * (double(dy.at(r, j)) - mean_dy - double(y.at(r, j)) * mean_dyy));
        }
        accum(n.inputs[0], dx);
        break;
      }
      case Op::kL2NormRows: {
        const auto& x = value(n.inputs[0]);
        TensorT<T> dx(x.shape());
        const double eps = n.scalar;
        const int64_t nseg = std::max<int64_t>(1, n.i0);
        const int64_t seg = x.cols() / nseg;
        for (int64_t r = 0; r < x.rows(); ++r) {
          for (int64_t sgi = 0; sgi < nseg; ++sgi) {
            const int64_t off = sgi * seg;
            double ss = 0, dot = 0;
            for (int64_t j = 0; j < seg; ++j) {
              ss += double(x.at(r, off + j)) * double(x.at(r, off + j));
              dot += double(dy.at(r, off + j)) * double(x.at(r, off + j));
            }
            double s = std::sqrt(ss);
            double u = 1.0 / (s + eps);
            double k = u * u * dot / std::max(s, 1e-30);
            for (int64_t j = 0; j < seg; ++j)
              dx.at(r, off + j) =
                  T(u * double(dy.at(r, off + j)) - k * double(x.at(r, off + j)));
          }
        }
        accum(n.inputs[0], dx);
        break;
      }
      case Op::kEmbedding: {
        const auto& tab = value(n.inputs[0]);
        if (node(n.inputs[0]).requires_grad) {
          TensorT<T> dt(tab.shape());
          for (size_t t = 0; t < n.indices.size(); ++t) {
            T* drow = dt.row_ptr(n.indices[t]);
            const T* dyr = dy.row_ptr(static_cast<int64_t>(t));
            for (int64_t j = 0; j < tab.cols(); ++j) drow[j] += dyr[j];
          }
          accum(n.inputs[0], dt);
        }
        break;
      }
      case Op::kConcatRows: {
        const auto& a = value(n.inputs[0]);
        const auto& b = value(n.inputs[1]);
        if (node(n.inputs[0]).requires_grad) {
          TensorT<T> da(a.shape());
          std::copy(dy.data(), dy.data() + a.numel(), da.data());
          accum(n.inputs[0], da);
        }
        if (node(n.inputs[1]).requires_grad) {
          TensorT<T> db(b.shape());
          std::copy(dy.data() + a.numel(), dy.data() + a.numel() + b.numel(), db.data());
          accum(n.inputs[1], db);
        }
        break;
      }
      case Op::kSliceRows: {
        const auto& x = value(n.inputs[0]);
        TensorT<T> dx(x.shape());
        std::copy(dy.data(), dy.data() + dy.numel(), dx.row_ptr(n.i0));
        accum(n.inputs[0], dx);
        break;
      }
      case Op::kCrossEntropy: {
        const auto& probs = n.cache;
        const double d = double(dy[0]) / double(std::max<int64_t>(1, probs.rows()));
        TensorT<T> dl = probs;
        for (int64_t r = 0; r < probs.rows(); ++r) {
          T* row = dl.row_ptr(r);
          row[n.indices[r]] -= T(1);
          for (int64_t c = 0; c < probs.cols(); ++c) row[c] *= T(d);
        }
        accum(n.inputs[0], dl);
        break;
      }
      case Op::kSum: {
        const auto& x = value(n.inputs[0]);
        accum(n.inputs[0], TensorT<T>::full(x.shape(), dy[0]));
        break;
      }
      case Op::kCustom:
        n.custom->backward(*this, id);
        break;
    }
  }

  std::vector<Node> nodes_;
};

using Graph = GraphT<double>;

}  // namespace slm
