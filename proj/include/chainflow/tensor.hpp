#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "chainflow/rng.hpp"

namespace chainflow {

// Shaped row-major array of 64-bit reals. Treated as a matrix by every
// operation: a 1-D shape {n} behaves as {1, n}.
struct Array {
  std::vector<int> shape;
  std::vector<double> data;

  Array() = default;
  Array(int r, int c) : shape{r, c}, data(static_cast<std::size_t>(r) * c, 0.0) {}

  static Array zeros(int r, int c) { return Array(r, c); }
  static Array full(int r, int c, double v) {
    Array a(r, c);
    std::fill(a.data.begin(), a.data.end(), v);
    return a;
  }
  static Array scalar(double v) {
    Array a(1, 1);
    a.data[0] = v;
    return a;
  }
  static Array row(std::vector<double> v) {
    Array a;
    a.shape = {1, static_cast<int>(v.size())};
    a.data = std::move(v);
    return a;
  }
  static Array randn(int r, int c, RngStream& rng, double sigma = 1.0) {
    Array a(r, c);
    for (double& x : a.data) x = rng.normal(0.0, sigma);
    return a;
  }

  int rows() const { return shape.size() == 1 ? 1 : shape[0]; }
  int cols() const { return shape.size() == 1 ? shape[0] : shape.back(); }
  std::size_t size() const { return data.size(); }

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

  bool finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
  bool same_shape(const Array& o) const {
    return rows() == o.rows() && cols() == o.cols();
  }
};

inline std::string shape_str(const Array& a) {
  return "[" + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + "]";
}

// Named parameter set with gradient accumulators and AdamW moment state.
class ParamStore {
 public:
  struct Entry {
    Array value;
    Array grad;
    Array m;  // first moment
    Array v;  // second moment
  };

  Array& create(const std::string& name, Array init) {
    if (index_.count(name)) {
      throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
    }
    index_[name] = entries_.size();
    order_.push_back(name);
    Entry e;
    e.grad = Array::zeros(init.rows(), init.cols());
    e.m = Array::zeros(init.rows(), init.cols());
    e.v = Array::zeros(init.rows(), init.cols());
    e.value = std::move(init);
    entries_.push_back(std::move(e));
    return entries_.back().value;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Entry& entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw std::out_of_range("ParamStore: unknown parameter '" + name + "'");
    }
    return entries_[it->second];
  }
  const Entry& entry(const std::string& name) const {
    return const_cast<ParamStore*>(this)->entry(name);
  }

  const Array& value(const std::string& name) const { return entry(name).value; }
  const std::vector<std::string>& names() const { return order_; }

  std::vector<std::string> names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& n : order_)
      if (n.rfind(prefix, 0) == 0) out.push_back(n);
    return out;
  }

  void zero_grads() {
    for (auto& e : entries_) std::fill(e.grad.data.begin(), e.grad.data.end(), 0.0);
  }

  double grad_norm(const std::vector<std::string>& subset) const {
    double s = 0.0;
    for (const auto& n : subset)
      for (double g : entry(n).grad.data) s += g * g;
    return std::sqrt(s);
  }

  void scale_grads(const std::vector<std::string>& subset, double factor) {
    for (const auto& n : subset)
      for (double& g : entry(n).grad.data) g *= factor;
  }

  std::int64_t adam_step = 0;

 private:
  std::vector<std::string> order_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam update over the named subset. Moment state
// persists in the store; the shared step counter advances once per call.
inline void adamw_step(ParamStore& ps, const std::vector<std::string>& names,
                       const AdamWConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("adamw_step: lr must be > 0");
  ps.adam_step += 1;
  const double t = static_cast<double>(ps.adam_step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& name : names) {
    auto& e = ps.entry(name);
    for (std::size_t i = 0; i < e.value.data.size(); ++i) {
      const double g = e.grad.data[i];
      e.m.data[i] = cfg.beta1 * e.m.data[i] + (1.0 - cfg.beta1) * g;
      e.v.data[i] = cfg.beta2 * e.v.data[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = e.m.data[i] / bc1;
      const double vhat = e.v.data[i] / bc2;
      e.value.data[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                                   cfg.weight_decay * e.value.data[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// Reverse-mode tape over a closed op set
// ---------------------------------------------------------------------------

enum class Op {
  kInput,
  kParam,
  kAdd,
  kSub,
  kMul,
  kAddRowVec,
  kMulRowVec,
  kScale,
  kMatmul,
  kLinear,
  kTanh,
  kSigmoid,
  kGelu,
  kRelu,
  kCos,
  kSin,
  kWrapAngle,
  kLayerNorm,
  kAdaptiveModulate,
  kAttention,
  kConcatCols,
  kSliceCols,
  kConcatRows,
  kSliceRows,
  kReshape,
  kMeanRows,
  kSumAll,
  kMse,
  kBceWithLogits,
};

// Gradients for one backward pass, keyed by parameter name. Lets batch
// shards accumulate independently and reduce in a fixed order afterwards.
using GradMap = std::unordered_map<std::string, Array>;

// Eagerly-evaluated computation tape. Node values are computed when ops are
// recorded; backward() walks the recorded graph in reverse and accumulates
// parameter gradients either into the owning ParamStore or a GradMap sink.
class Tape {
 public:
  using Id = int;

  struct Node {
    Op op;
    std::vector<Id> in;
    Array val;
    Array cache;  // op-specific (attention probabilities, layer-norm stats)
    double c = 0.0;
    int i0 = 0, i1 = 0;
    bool requires_grad = false;
    ParamStore* store = nullptr;
    std::string pname;
  };

  Id input(Array v) {
    Node n;
    n.op = Op::kInput;
    n.val = std::move(v);
    return push(std::move(n));
  }

  Id param(ParamStore& ps, const std::string& name) {
    auto it = param_cache_.find(&ps.entry(name));
    if (it != param_cache_.end()) return it->second;
    Node n;
    n.op = Op::kParam;
    n.val = ps.value(name);
    n.requires_grad = true;
    n.store = &ps;
    n.pname = name;
    Id id = push(std::move(n));
    param_cache_[&ps.entry(name)] = id;
    return id;
  }

  const Array& val(Id id) const { return nodes_[check(id)].val; }
  double scalar(Id id) const {
    const Array& a = val(id);
    if (a.size() != 1) throw std::logic_error("Tape::scalar: node is not 1x1");
    return a.data[0];
  }
  std::size_t size() const { return nodes_.size(); }

  // --- elementwise / broadcast ---

  Id add(Id a, Id b) { return binary(Op::kAdd, a, b); }
  Id sub(Id a, Id b) { return binary(Op::kSub, a, b); }
  Id mul(Id a, Id b) { return binary(Op::kMul, a, b); }

  Id add_rowvec(Id x, Id v) { return rowvec(Op::kAddRowVec, x, v); }
  Id mul_rowvec(Id x, Id v) { return rowvec(Op::kMulRowVec, x, v); }

  Id scale(Id x, double c) {
    Node n = unary_node(Op::kScale, x);
    n.c = c;
    n.val = nodes_[x].val;
    for (double& d : n.val.data) d *= c;
    return push(std::move(n));
  }

  Id tanh_op(Id x) { return map(Op::kTanh, x, [](double v) { return std::tanh(v); }); }
  Id sigmoid(Id x) {
    return map(Op::kSigmoid, x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  }
  Id gelu(Id x) {
    return map(Op::kGelu, x,
               [](double v) { return 0.5 * v * (1.0 + std::erf(v / 1.4142135623730951)); });
  }
  Id relu(Id x) { return map(Op::kRelu, x, [](double v) { return v > 0.0 ? v : 0.0; }); }
  Id cos_op(Id x) { return map(Op::kCos, x, [](double v) { return std::cos(v); }); }
  Id sin_op(Id x) { return map(Op::kSin, x, [](double v) { return std::sin(v); }); }
  Id wrap_angle_op(Id x) {
    return map(Op::kWrapAngle, x, [](double v) {
      double r = std::fmod(v + 3.14159265358979323846, 2.0 * 3.14159265358979323846);
      if (r <= 0.0) r += 2.0 * 3.14159265358979323846;
      return r - 3.14159265358979323846;
    });
  }

  // --- linear algebra ---

  Id matmul(Id a, Id b) {
    const Array& A = nodes_[check(a)].val;
    const Array& B = nodes_[check(b)].val;
    if (A.cols() != B.rows()) {
      throw std::invalid_argument("matmul: shape mismatch " + shape_str(A) + " x " +
                                  shape_str(B));
    }
    Node n;
    n.op = Op::kMatmul;
    n.in = {a, b};
    n.val = matmul_values(A, B);
    return push(std::move(n));
  }

  // y = x @ w + bias (bias optional, pass -1)
  Id linear(Id x, Id w, Id bias = -1) {
    const Array& X = nodes_[check(x)].val;
    const Array& W = nodes_[check(w)].val;
    if (X.cols() != W.rows()) {
      throw std::invalid_argument("linear: shape mismatch " + shape_str(X) + " x " +
                                  shape_str(W));
    }
    Node n;
    n.op = Op::kLinear;
    n.in = bias >= 0 ? std::vector<Id>{x, w, bias} : std::vector<Id>{x, w};
    n.val = matmul_values(X, W);
    if (bias >= 0) {
      const Array& B = nodes_[check(bias)].val;
      if (B.rows() != 1 || B.cols() != n.val.cols()) {
        throw std::invalid_argument("linear: bias shape " + shape_str(B) +
                                    " does not match output " + shape_str(n.val));
      }
      for (int r = 0; r < n.val.rows(); ++r)
        for (int c = 0; c < n.val.cols(); ++c) n.val.at(r, c) += B.at(0, c);
    }
    return push(std::move(n));
  }

  // Per-row standardization followed by affine gain/shift (both [1, C]).
  Id layer_norm(Id x, Id gain, Id shift) {
    const Array& X = nodes_[check(x)].val;
    check_rowvec(X, nodes_[check(gain)].val, "layer_norm gain");
    check_rowvec(X, nodes_[check(shift)].val, "layer_norm shift");
    Node n;
    n.op = Op::kLayerNorm;
    n.in = {x, gain, shift};
    normalize_rows(X, n.val, n.cache);
    const Array& G = nodes_[gain].val;
    const Array& S = nodes_[shift].val;
    for (int r = 0; r < n.val.rows(); ++r)
      for (int c = 0; c < n.val.cols(); ++c)
        n.val.at(r, c) = n.val.at(r, c) * G.at(0, c) + S.at(0, c);
    return push(std::move(n));
  }

  // normalize(x) * (1 + scale) + shift with scale/shift [1, C] produced
  // from a conditioning vector.
  Id adaptive_modulate(Id x, Id scale_v, Id shift_v) {
    const Array& X = nodes_[check(x)].val;
    check_rowvec(X, nodes_[check(scale_v)].val, "adaptive_modulate scale");
    check_rowvec(X, nodes_[check(shift_v)].val, "adaptive_modulate shift");
    Node n;
    n.op = Op::kAdaptiveModulate;
    n.in = {x, scale_v, shift_v};
    normalize_rows(X, n.val, n.cache);
    const Array& S = nodes_[scale_v].val;
    const Array& H = nodes_[shift_v].val;
    for (int r = 0; r < n.val.rows(); ++r)
      for (int c = 0; c < n.val.cols(); ++c)
        n.val.at(r, c) = n.val.at(r, c) * (1.0 + S.at(0, c)) + H.at(0, c);
    return push(std::move(n));
  }

  // Scaled dot-product attention. q [Tq, D], k [Tk, D], v [Tk, Dv]; D and
  // Dv must divide into n_heads. Optional additive mask [Tq, Tk].
  Id attention(Id q, Id k, Id v, int n_heads = 1, Id mask = -1) {
    const Array& Q = nodes_[check(q)].val;
    const Array& K = nodes_[check(k)].val;
    const Array& V = nodes_[check(v)].val;
    if (Q.cols() != K.cols() || K.rows() != V.rows()) {
      throw std::invalid_argument("attention: shape mismatch q" + shape_str(Q) + " k" +
                                  shape_str(K) + " v" + shape_str(V));
    }
    if (n_heads < 1 || Q.cols() % n_heads != 0 || V.cols() % n_heads != 0) {
      throw std::invalid_argument("attention: head count " + std::to_string(n_heads) +
                                  " incompatible with dims " + shape_str(Q) + "/" +
                                  shape_str(V));
    }
    const int tq = Q.rows(), tk = K.rows();
    const int dh = Q.cols() / n_heads, dvh = V.cols() / n_heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const Array* M = nullptr;
    if (mask >= 0) {
      M = &nodes_[check(mask)].val;
      if (M->rows() != tq || M->cols() != tk) {
        throw std::invalid_argument("attention: mask shape " + shape_str(*M) +
                                    " does not match scores [" + std::to_string(tq) +
                                    "x" + std::to_string(tk) + "]");
      }
    }
    Node n;
    n.op = Op::kAttention;
    n.in = mask >= 0 ? std::vector<Id>{q, k, v, mask} : std::vector<Id>{q, k, v};
    n.i0 = n_heads;
    n.val = Array::zeros(tq, V.cols());
    n.cache = Array::zeros(n_heads * tq, tk);  // softmax probabilities per head
    std::vector<double> row(static_cast<std::size_t>(tk));
    for (int h = 0; h < n_heads; ++h) {
      for (int i = 0; i < tq; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < tk; ++j) {
          double s = 0.0;
          for (int d = 0; d < dh; ++d) s += Q.at(i, h * dh + d) * K.at(j, h * dh + d);
          s *= sc;
          if (M) s += M->at(i, j);
          row[j] = s;
          mx = std::max(mx, s);
        }
        double denom = 0.0;
        for (int j = 0; j < tk; ++j) {
          row[j] = std::exp(row[j] - mx);
          denom += row[j];
        }
        for (int j = 0; j < tk; ++j) {
          const double p = row[j] / denom;
          n.cache.at(h * tq + i, j) = p;
          for (int d = 0; d < dvh; ++d)
            n.val.at(i, h * dvh + d) += p * V.at(j, h * dvh + d);
        }
      }
    }
    return push(std::move(n));
  }

  // --- structure ---

  Id concat_cols(Id a, Id b) {
    const Array& A = nodes_[check(a)].val;
    const Array& B = nodes_[check(b)].val;
    if (A.rows() != B.rows()) {
      throw std::invalid_argument("concat_cols: row mismatch " + shape_str(A) + " vs " +
                                  shape_str(B));
    }
    Node n;
    n.op = Op::kConcatCols;
    n.in = {a, b};
    n.val = Array::zeros(A.rows(), A.cols() + B.cols());
    for (int r = 0; r < A.rows(); ++r) {
      for (int c = 0; c < A.cols(); ++c) n.val.at(r, c) = A.at(r, c);
      for (int c = 0; c < B.cols(); ++c) n.val.at(r, A.cols() + c) = B.at(r, c);
    }
    n.i0 = A.cols();
    return push(std::move(n));
  }

  Id slice_cols(Id x, int c0, int len) {
    const Array& X = nodes_[check(x)].val;
    if (c0 < 0 || len < 1 || c0 + len > X.cols()) {
      throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + ", " +
                                  std::to_string(c0 + len) + ") out of " + shape_str(X));
    }
    Node n;
    n.op = Op::kSliceCols;
    n.in = {x};
    n.i0 = c0;
    n.i1 = len;
    n.val = Array::zeros(X.rows(), len);
    for (int r = 0; r < X.rows(); ++r)
      for (int c = 0; c < len; ++c) n.val.at(r, c) = X.at(r, c0 + c);
    return push(std::move(n));
  }

  Id concat_rows(const std::vector<Id>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    int cols = nodes_[check(parts[0])].val.cols();
    int rows = 0;
    for (Id p : parts) {
      const Array& P = nodes_[check(p)].val;
      if (P.cols() != cols) {
        throw std::invalid_argument("concat_rows: column mismatch " + shape_str(P));
      }
      rows += P.rows();
    }
    Node n;
    n.op = Op::kConcatRows;
    n.in = parts;
    n.val = Array::zeros(rows, cols);
    int r0 = 0;
    for (Id p : parts) {
      const Array& P = nodes_[p].val;
      for (int r = 0; r < P.rows(); ++r)
        for (int c = 0; c < cols; ++c) n.val.at(r0 + r, c) = P.at(r, c);
      r0 += P.rows();
    }
    return push(std::move(n));
  }

  Id slice_rows(Id x, int r0, int len) {
    const Array& X = nodes_[check(x)].val;
    if (r0 < 0 || len < 1 || r0 + len > X.rows()) {
      throw std::invalid_argument("slice_rows: range [" + std::to_string(r0) + ", " +
                                  std::to_string(r0 + len) + ") out of " + shape_str(X));
    }
    Node n;
    n.op = Op::kSliceRows;
    n.in = {x};
    n.i0 = r0;
    n.i1 = len;
    n.val = Array::zeros(len, X.cols());
    for (int r = 0; r < len; ++r)
      for (int c = 0; c < X.cols(); ++c) n.val.at(r, c) = X.at(r0 + r, c);
    return push(std::move(n));
  }

  Id reshape(Id x, int r, int c) {
    const Array& X = nodes_[check(x)].val;
    if (static_cast<std::size_t>(r) * c != X.size()) {
      throw std::invalid_argument("reshape: cannot view " + shape_str(X) + " as [" +
                                  std::to_string(r) + "x" + std::to_string(c) + "]");
    }
    Node n;
    n.op = Op::kReshape;
    n.in = {x};
    n.val = X;
    n.val.shape = {r, c};
    return push(std::move(n));
  }

  // --- reductions ---

  Id mean_rows(Id x) {
    const Array& X = nodes_[check(x)].val;
    Node n;
    n.op = Op::kMeanRows;
    n.in = {x};
    n.val = Array::zeros(1, X.cols());
    for (int r = 0; r < X.rows(); ++r)
      for (int c = 0; c < X.cols(); ++c) n.val.at(0, c) += X.at(r, c);
    for (double& v : n.val.data) v /= X.rows();
    return push(std::move(n));
  }

  Id sum_all(Id x) {
    const Array& X = nodes_[check(x)].val;
    double s = 0.0;
    for (double v : X.data) s += v;
    Node n;
    n.op = Op::kSumAll;
    n.in = {x};
    n.val = Array::scalar(s);
    return push(std::move(n));
  }

  // Mean squared error over all elements.
  Id mse(Id pred, Id target) {
    const Array& P = nodes_[check(pred)].val;
    const Array& T = nodes_[check(target)].val;
    if (!P.same_shape(T)) {
      throw std::invalid_argument("mse: shape mismatch " + shape_str(P) + " vs " +
                                  shape_str(T));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < P.data.size(); ++i) {
      const double d = P.data[i] - T.data[i];
      s += d * d;
    }
    Node n;
    n.op = Op::kMse;
    n.in = {pred, target};
    n.val = Array::scalar(s / static_cast<double>(P.size()));
    return push(std::move(n));
  }

  // Mean over elements of softplus(l) - l*y; numerically stable BCE on
  // logits l against targets y in [0, 1].
  Id bce_with_logits(Id logits, Id targets) {
    const Array& L = nodes_[check(logits)].val;
    const Array& Y = nodes_[check(targets)].val;
    if (!L.same_shape(Y)) {
      throw std::invalid_argument("bce_with_logits: shape mismatch " + shape_str(L) +
                                  " vs " + shape_str(Y));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < L.data.size(); ++i) {
      const double l = L.data[i], y = Y.data[i];
      s += std::max(l, 0.0) - l * y + std::log1p(std::exp(-std::abs(l)));
    }
    Node n;
    n.op = Op::kBceWithLogits;
    n.in = {logits, targets};
    n.val = Array::scalar(s / static_cast<double>(L.size()));
    return push(std::move(n));
  }

  // --- backward ---

  // Accumulates d(loss)/d(param) for every parameter feeding the loss.
  // Gradients go into `sink` when given, otherwise into the ParamStore
  // entries; repeated calls accumulate additively.
  void backward(Id loss, GradMap* sink = nullptr) {
    const Array& L = nodes_[check(loss)].val;
    if (L.size() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(L));
    }
    std::vector<Array> grads(static_cast<std::size_t>(loss) + 1);
    grads[loss] = Array::scalar(1.0);
    for (Id id = loss; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || grads[id].size() == 0) continue;
      backprop_node(id, n, grads);
      if (n.op == Op::kParam) {
        Array& dst = sink ? (*sink)[n.pname] : n.store->entry(n.pname).grad;
        if (dst.size() == 0) dst = Array::zeros(n.val.rows(), n.val.cols());
        for (std::size_t i = 0; i < dst.data.size(); ++i)
          dst.data[i] += grads[id].data[i];
      }
    }
  }

 private:
  static Array matmul_values(const Array& A, const Array& B) {
    const int R = A.rows(), K = A.cols(), C = B.cols();
    Array out(R, C);
    for (int r = 0; r < R; ++r) {
      const double* arow = &A.data[static_cast<std::size_t>(r) * K];
      double* orow = &out.data[static_cast<std::size_t>(r) * C];
      for (int k = 0; k < K; ++k) {
        const double a = arow[k];
        if (a == 0.0) continue;
        const double* brow = &B.data[static_cast<std::size_t>(k) * C];
        for (int c = 0; c < C; ++c) orow[c] += a * brow[c];
      }
    }
    return out;
  }

  // Parameter-free per-row standardization; cache holds {mean, inv_std}
  // pairs per row, val receives the normalized values.
  static void normalize_rows(const Array& X, Array& val, Array& cache) {
    constexpr double kEps = 1e-5;
    val = Array::zeros(X.rows(), X.cols());
    cache = Array::zeros(X.rows(), 2);
    for (int r = 0; r < X.rows(); ++r) {
      double mean = 0.0;
      for (int c = 0; c < X.cols(); ++c) mean += X.at(r, c);
      mean /= X.cols();
      double var = 0.0;
      for (int c = 0; c < X.cols(); ++c) {
        const double d = X.at(r, c) - mean;
        var += d * d;
      }
      var /= X.cols();
      const double inv = 1.0 / std::sqrt(var + kEps);
      cache.at(r, 0) = mean;
      cache.at(r, 1) = inv;
      for (int c = 0; c < X.cols(); ++c) val.at(r, c) = (X.at(r, c) - mean) * inv;
    }
  }

  // d(loss)/dx for y = normalize(x) given upstream dn w.r.t. normalized rows.
  static void normalize_backward(const Array& X, const Array& cache, const Array& dn,
                                 Array& dx) {
    const int C = X.cols();
    for (int r = 0; r < X.rows(); ++r) {
      const double mean = cache.at(r, 0), inv = cache.at(r, 1);
      double dn_mean = 0.0, dn_dot_n = 0.0;
      for (int c = 0; c < C; ++c) {
        const double nv = (X.at(r, c) - mean) * inv;
        dn_mean += dn.at(r, c);
        dn_dot_n += dn.at(r, c) * nv;
      }
      dn_mean /= C;
      dn_dot_n /= C;
      for (int c = 0; c < C; ++c) {
        const double nv = (X.at(r, c) - mean) * inv;
        dx.at(r, c) += inv * (dn.at(r, c) - dn_mean - nv * dn_dot_n);
      }
    }
  }

  void backprop_node(Id id, Node& n, std::vector<Array>& grads) {
    const Array& g = grads[id];
    auto acc = [&](Id in) -> Array& {
      Array& a = grads[in];
      if (a.size() == 0)
        a = Array::zeros(nodes_[in].val.rows(), nodes_[in].val.cols());
      return a;
    };
    auto needs = [&](Id in) { return nodes_[in].requires_grad; };

    switch (n.op) {
      case Op::kInput:
      case Op::kParam:
        break;
      case Op::kAdd: {
        if (needs(n.in[0])) add_into(acc(n.in[0]), g, 1.0);
        if (needs(n.in[1])) add_into(acc(n.in[1]), g, 1.0);
        break;
      }
      case Op::kSub: {
        if (needs(n.in[0])) add_into(acc(n.in[0]), g, 1.0);
        if (needs(n.in[1])) add_into(acc(n.in[1]), g, -1.0);
        break;
      }
      case Op::kMul: {
        const Array& A = nodes_[n.in[0]].val;
        const Array& B = nodes_[n.in[1]].val;
        if (needs(n.in[0])) {
          Array& da = acc(n.in[0]);
          for (std::size_t i = 0; i < g.data.size(); ++i)
            da.data[i] += g.data[i] * B.data[i];
        }
        if (needs(n.in[1])) {
          Array& db = acc(n.in[1]);
          for (std::size_t i = 0; i < g.data.size(); ++i)
            db.data[i] += g.data[i] * A.data[i];
        }
        break;
      }
      case Op::kAddRowVec: {
        if (needs(n.in[0])) add_into(acc(n.in[0]), g, 1.0);
        if (needs(n.in[1])) {
          Array& dv = acc(n.in[1]);
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) dv.at(0, c) += g.at(r, c);
        }
        break;
      }
      case Op::kMulRowVec: {
        const Array& X = nodes_[n.in[0]].val;
        const Array& V = nodes_[n.in[1]].val;
        if (needs(n.in[0])) {
          Array& dx = acc(n.in[0]);
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) dx.at(r, c) += g.at(r, c) * V.at(0, c);
        }
        if (needs(n.in[1])) {
          Array& dv = acc(n.in[1]);
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) dv.at(0, c) += g.at(r, c) * X.at(r, c);
        }
        break;
      }
      case Op::kScale: {
        if (needs(n.in[0])) add_into(acc(n.in[0]), g, n.c);
        break;
      }
      case Op::kTanh: {
        if (needs(n.in[0])) {
          Array& dx = acc(n.in[0]);
          for (std::size_t i = 0; i < g.data.size(); ++i) {
            const double y = n.val.data[i];
            dx.data[i] += g.data[i] * (1.0 - y * y);
          }
        }
        break;
      }
      case Op::kSigmoid: {
        if (needs(n.in[0])) {
          Array& dx = acc(n.in[0]);
          for (std::size_t i = 0; i < g.data.size(); ++i) {
            const double y = n.val.data[i];
            dx.data[i] += g.data[i] * y * (1.0 - y);
          }
        }
        break;
      }
      case Op::kGelu: {
        if (needs(n.in[0])) {
          const Array& X = nodes_[n.in[0]].val;
          Array& dx = acc(n.in[0]);
          for (std::size_t i = 0; i < g.data.size(); ++i) {
            const double x = X.data[i];
            const double cdf = 0.5 * (1.0 + std::erf(x / 1.4142135623730951));
            const double pdf = std::exp(-0.5 * x * x) / 2.5066282746310002;
            dx.data[i] += g.data[i] * (cdf + x * pdf);
          }
        }
        break;
      }
      case Op::kRelu: {
        if (needs(n.in[0])) {
          const Array& X = nodes_[n.in[0]].val;
          Array& dx = acc(n.in[0]);
          for (std::size_t i = 0; i < g.data.size(); ++i)
            if (X.data[i] > 0.0) dx.data[i] += g.data[i];
        }
        break;
      }
      case Op::kCos: {
        if (needs(n.in[0])) {
          const Array& X = nodes_[n.in[0]].val;
          Array& dx = acc(n.in[0]);
          for (std::size_t i = 0; i < g.data.size(); ++i)
            dx.data[i] += -std::sin(X.data[i]) * g.data[i];
        }
        break;
      }
      case Op::kSin: {
        if (needs(n.in[0])) {
          const Array& X = nodes_[n.in[0]].val;
          Array& dx = acc(n.in[0]);
          for (std::size_t i = 0; i < g.data.size(); ++i)
            dx.data[i] += std::cos(X.data[i]) * g.data[i];
        }
        break;
      }
      case Op::kWrapAngle: {
        // piecewise shift by multiples of 2*pi; unit derivative a.e.
        if (needs(n.in[0])) add_into(acc(n.in[0]), g, 1.0);
        break;
      }
      case Op::kMatmul:
      case Op::kLinear: {
        const Array& A = nodes_[n.in[0]].val;
        const Array& B = nodes_[n.in[1]].val;
        if (needs(n.in[0])) {
          Array& da = acc(n.in[0]);  // g @ B^T
          for (int r = 0; r < A.rows(); ++r)
            for (int k = 0; k < A.cols(); ++k) {
              double s = 0.0;
              for (int c = 0; c < B.cols(); ++c) s += g.at(r, c) * B.at(k, c);
              da.at(r, k) += s;
            }
        }
        if (needs(n.in[1])) {
          Array& db = acc(n.in[1]);  // A^T @ g
          for (int k = 0; k < B.rows(); ++k)
            for (int r = 0; r < A.rows(); ++r) {
              const double a = A.at(r, k);
              if (a == 0.0) continue;
              for (int c = 0; c < B.cols(); ++c) db.at(k, c) += a * g.at(r, c);
            }
        }
        if (n.op == Op::kLinear && n.in.size() == 3 && needs(n.in[2])) {
          Array& dbias = acc(n.in[2]);
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) dbias.at(0, c) += g.at(r, c);
        }
        break;
      }
      case Op::kLayerNorm: {
        const Array& X = nodes_[n.in[0]].val;
        const Array& G = nodes_[n.in[1]].val;
        Array dn = Array::zeros(X.rows(), X.cols());
        for (int r = 0; r < X.rows(); ++r)
          for (int c = 0; c < X.cols(); ++c) dn.at(r, c) = g.at(r, c) * G.at(0, c);
        if (needs(n.in[0])) normalize_backward(X, n.cache, dn, acc(n.in[0]));
        if (needs(n.in[1])) {
          Array& dg = acc(n.in[1]);
          for (int r = 0; r < X.rows(); ++r) {
            const double mean = n.cache.at(r, 0), inv = n.cache.at(r, 1);
            for (int c = 0; c < X.cols(); ++c)
              dg.at(0, c) += g.at(r, c) * (X.at(r, c) - mean) * inv;
          }
        }
        if (needs(n.in[2])) {
          Array& ds = acc(n.in[2]);
          for (int r = 0; r < X.rows(); ++r)
            for (int c = 0; c < X.cols(); ++c) ds.at(0, c) += g.at(r, c);
        }
        break;
      }
      case Op::kAdaptiveModulate: {
        const Array& X = nodes_[n.in[0]].val;
        const Array& S = nodes_[n.in[1]].val;
        Array dn = Array::zeros(X.rows(), X.cols());
        for (int r = 0; r < X.rows(); ++r)
          for (int c = 0; c < X.cols(); ++c)
            dn.at(r, c) = g.at(r, c) * (1.0 + S.at(0, c));
        if (needs(n.in[0])) normalize_backward(X, n.cache, dn, acc(n.in[0]));
        if (needs(n.in[1])) {
          Array& ds = acc(n.in[1]);
          for (int r = 0; r < X.rows(); ++r) {
            const double mean = n.cache.at(r, 0), inv = n.cache.at(r, 1);
            for (int c = 0; c < X.cols(); ++c)
              ds.at(0, c) += g.at(r, c) * (X.at(r, c) - mean) * inv;
          }
        }
        if (needs(n.in[2])) {
          Array& dh = acc(n.in[2]);
          for (int r = 0; r < X.rows(); ++r)
            for (int c = 0; c < X.cols(); ++c) dh.at(0, c) += g.at(r, c);
        }
        break;
      }
      case Op::kAttention: {
        const Array& Q = nodes_[n.in[0]].val;
        const Array& K = nodes_[n.in[1]].val;
        const Array& V = nodes_[n.in[2]].val;
        const int heads = n.i0;
        const int tq = Q.rows(), tk = K.rows();
        const int dh = Q.cols() / heads, dvh = V.cols() / heads;
        const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
        const bool nq = needs(n.in[0]), nk = needs(n.in[1]), nv = needs(n.in[2]);
        if (!nq && !nk && !nv) break;
        Array* dq = nq ? &acc(n.in[0]) : nullptr;
        Array* dk = nk ? &acc(n.in[1]) : nullptr;
        Array* dv = nv ? &acc(n.in[2]) : nullptr;
        std::vector<double> dp(static_cast<std::size_t>(tk));
        for (int h = 0; h < heads; ++h) {
          for (int i = 0; i < tq; ++i) {
            // dP = dO @ V_h^T, then softmax backward to dS
            double dot = 0.0;
            for (int j = 0; j < tk; ++j) {
              double s = 0.0;
              for (int d = 0; d < dvh; ++d)
                s += g.at(i, h * dvh + d) * V.at(j, h * dvh + d);
              dp[j] = s;
              dot += s * n.cache.at(h * tq + i, j);
            }
            for (int j = 0; j < tk; ++j) {
              const double p = n.cache.at(h * tq + i, j);
              const double ds = p * (dp[j] - dot) * sc;
              if (nq)
                for (int d = 0; d < dh; ++d) dq->at(i, h * dh + d) += ds * K.at(j, h * dh + d);
              if (nk)
                for (int d = 0; d < dh; ++d) dk->at(j, h * dh + d) += ds * Q.at(i, h * dh + d);
              if (nv) {
                const double pv = p;
                for (int d = 0; d < dvh; ++d)
                  dv->at(j, h * dvh + d) += pv * g.at(i, h * dvh + d);
              }
            }
          }
        }
        break;
      }
      case Op::kConcatCols: {
        const int ca = n.i0;
        if (needs(n.in[0])) {
          Array& da = acc(n.in[0]);
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < ca; ++c) da.at(r, c) += g.at(r, c);
        }
        if (needs(n.in[1])) {
          Array& db = acc(n.in[1]);
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols() - ca; ++c) db.at(r, c) += g.at(r, ca + c);
        }
        break;
      }
      case Op::kSliceCols: {
        if (needs(n.in[0])) {
          Array& dx = acc(n.in[0]);
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < n.i1; ++c) dx.at(r, n.i0 + c) += g.at(r, c);
        }
        break;
      }
      case Op::kConcatRows: {
        int r0 = 0;
        for (Id p : n.in) {
          const Array& P = nodes_[p].val;
          if (needs(p)) {
            Array& dp2 = acc(p);
            for (int r = 0; r < P.rows(); ++r)
              for (int c = 0; c < g.cols(); ++c) dp2.at(r, c) += g.at(r0 + r, c);
          }
          r0 += P.rows();
        }
        break;
      }
      case Op::kSliceRows: {
        if (needs(n.in[0])) {
          Array& dx = acc(n.in[0]);
          for (int r = 0; r < n.i1; ++r)
            for (int c = 0; c < g.cols(); ++c) dx.at(n.i0 + r, c) += g.at(r, c);
        }
        break;
      }
      case Op::kReshape: {
        if (needs(n.in[0])) {
          Array& dx = acc(n.in[0]);
          for (std::size_t i = 0; i < g.data.size(); ++i) dx.data[i] += g.data[i];
        }
        break;
      }
      case Op::kMeanRows: {
        if (needs(n.in[0])) {
          const Array& X = nodes_[n.in[0]].val;
          Array& dx = acc(n.in[0]);
          const double inv = 1.0 / X.rows();
          for (int r = 0; r < X.rows(); ++r)
            for (int c = 0; c < X.cols(); ++c) dx.at(r, c) += g.at(0, c) * inv;
        }
        break;
      }
      case Op::kSumAll: {
        if (needs(n.in[0])) add_into_broadcast(acc(n.in[0]), g.data[0]);
        break;
      }
      case Op::kMse: {
        const Array& P = nodes_[n.in[0]].val;
        const Array& T = nodes_[n.in[1]].val;
        const double f = 2.0 * g.data[0] / static_cast<double>(P.size());
        if (needs(n.in[0])) {
          Array& dp2 = acc(n.in[0]);
          for (std::size_t i = 0; i < P.data.size(); ++i)
            dp2.data[i] += f * (P.data[i] - T.data[i]);
        }
        if (needs(n.in[1])) {
          Array& dt = acc(n.in[1]);
          for (std::size_t i = 0; i < P.data.size(); ++i)
            dt.data[i] -= f * (P.data[i] - T.data[i]);
        }
        break;
      }
      case Op::kBceWithLogits: {
        const Array& L = nodes_[n.in[0]].val;
        const Array& Y = nodes_[n.in[1]].val;
        const double f = g.data[0] / static_cast<double>(L.size());
        if (needs(n.in[0])) {
          Array& dl = acc(n.in[0]);
          for (std::size_t i = 0; i < L.data.size(); ++i) {
            const double sig = 1.0 / (1.0 + std::exp(-L.data[i]));
            dl.data[i] += f * (sig - Y.data[i]);
          }
        }
        break;
      }
    }
  }

  static void add_into(Array& dst, const Array& src, double f) {
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += f * src.data[i];
  }
  static void add_into_broadcast(Array& dst, double v) {
    for (double& d : dst.data) d += v;
  }

  Node unary_node(Op op, Id x) {
    Node n;
    n.op = op;
    n.in = {check(x)};
    return n;
  }

  template <class F>
  Id map(Op op, Id x, F f) {
    Node n = unary_node(op, x);
    n.val = nodes_[x].val;
    for (double& v : n.val.data) v = f(v);
    return push(std::move(n));
  }

  Id binary(Op op, Id a, Id b) {
    const Array& A = nodes_[check(a)].val;
    const Array& B = nodes_[check(b)].val;
    if (!A.same_shape(B)) {
      throw std::invalid_argument("elementwise op: shape mismatch " + shape_str(A) +
                                  " vs " + shape_str(B));
    }
    Node n;
    n.op = op;
    n.in = {a, b};
    n.val = A;
    for (std::size_t i = 0; i < A.data.size(); ++i) {
      switch (op) {
        case Op::kAdd: n.val.data[i] = A.data[i] + B.data[i]; break;
        case Op::kSub: n.val.data[i] = A.data[i] - B.data[i]; break;
        default: n.val.data[i] = A.data[i] * B.data[i]; break;
      }
    }
    return push(std::move(n));
  }

  Id rowvec(Op op, Id x, Id v) {
    const Array& X = nodes_[check(x)].val;
    const Array& V = nodes_[check(v)].val;
    check_rowvec(X, V, op == Op::kAddRowVec ? "add_rowvec" : "mul_rowvec");
    Node n;
    n.op = op;
    n.in = {x, v};
    n.val = X;
    for (int r = 0; r < X.rows(); ++r)
      for (int c = 0; c < X.cols(); ++c) {
        if (op == Op::kAddRowVec)
          n.val.at(r, c) = X.at(r, c) + V.at(0, c);
        else
          n.val.at(r, c) = X.at(r, c) * V.at(0, c);
      }
    return push(std::move(n));
  }

  static void check_rowvec(const Array& X, const Array& V, const char* what) {
    if (V.rows() != 1 || V.cols() != X.cols()) {
      throw std::invalid_argument(std::string(what) + ": vector " + shape_str(V) +
                                  " does not broadcast over " + shape_str(X));
    }
  }

  Id check(Id id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
      throw std::logic_error("Tape: invalid node id " + std::to_string(id));
    }
    return id;
  }

  Id push(Node&& n) {
    for (Id in : n.in) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
#ifndef NDEBUG
    assert(n.val.finite() && "tape op produced non-finite values");
#endif
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const void*, Id> param_cache_;
};

// Folds a GradMap produced by a shard back into the store (scaled).
inline void accumulate_grads(ParamStore& ps, const GradMap& gm, double factor = 1.0) {
  for (const auto& [name, g] : gm) {
    Array& dst = ps.entry(name).grad;
    for (std::size_t i = 0; i < dst.data.size(); ++i)
      dst.data[i] += factor * g.data[i];
  }
}

}  // namespace chainflow
