#pragma once
// Minimal reverse-mode autodiff over dense row-major tensors of rank <= 3,
// templated on the scalar so the same graph code runs in float (training) and
// double (finite-difference oracles in the tests).
//
// Determinism notes, because they are load-bearing for reproducibility:
//  - gemm kernels use fixed loop orders and fixed-width lane accumulators, so
//    results are bit-stable run to run without -ffast-math,
//  - reductions that feed probabilities or losses (softmax sums, logsumexp,
//    layer-norm moments, loss sums) accumulate in double regardless of R,
//  - every public op checks its output for non-finite values and throws.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "umlab/common.hpp"

namespace umlab::numcore {

struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("negative dim in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); i++) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// ----- tensor ----------------------------------------------------------------

template <class R>
struct Storage {
  std::vector<R> v;       // values
  std::vector<R> g;       // gradient, sized lazily
  bool requires_grad = false;
};

template <class R>
struct Tensor {
  Shape shape;
  std::shared_ptr<Storage<R>> st;
  int node = -1;  // producing tape node, -1 for leaves

  Tensor() = default;

  static Tensor zeros(Shape s, bool requires_grad = false) {
    Tensor t;
    t.shape = std::move(s);
    t.st = std::make_shared<Storage<R>>();
    t.st->v.assign(static_cast<size_t>(shape_numel(t.shape)), R(0));
    t.st->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape s, std::vector<R> vals, bool requires_grad = false) {
    if (static_cast<int64_t>(vals.size()) != shape_numel(s))
      throw std::invalid_argument("Tensor::from: " + std::to_string(vals.size()) +
                                  " values for shape " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.st = std::make_shared<Storage<R>>();
    t.st->v = std::move(vals);
    t.st->requires_grad = requires_grad;
    return t;
  }

  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  int64_t numel() const { return shape_numel(shape); }
  R* data() { return st->v.data(); }
  const R* data() const { return st->v.data(); }
  std::vector<R>& values() { return st->v; }
  const std::vector<R>& values() const { return st->v; }
  bool requires_grad() const { return st && st->requires_grad; }

  // Gradient of a leaf after backward(); sized on demand.
  std::vector<R>& grad() {
    if (st->g.size() != st->v.size()) st->g.assign(st->v.size(), R(0));
    return st->g;
  }
};

// Free view with identical element count; grads flow through untouched because
// gradient buffers are flat.
template <class R>
Tensor<R> reshape(const Tensor<R>& t, Shape s) {
  if (shape_numel(s) != t.numel())
    throw std::invalid_argument("reshape: numel mismatch " + shape_str(t.shape) + " -> " +
                                shape_str(s));
  Tensor<R> out = t;
  out.shape = std::move(s);
  return out;
}

// ----- parameter store --------------------------------------------------------

template <class R>
class ParameterStore {
 public:
  Tensor<R>& add(const std::string& name, Shape shape) {
    if (map_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    order_.push_back(name);
    auto [it, ok] = map_.emplace(name, Tensor<R>::zeros(std::move(shape), true));
    (void)ok;
    return it->second;
  }

  Tensor<R>& get(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw missing_artifact_error("no parameter named " + name);
    return it->second;
  }
  const Tensor<R>& get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw missing_artifact_error("no parameter named " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return map_.count(name) != 0; }
  const std::vector<std::string>& names() const { return order_; }
  size_t count() const { return order_.size(); }

  int64_t total_numel() const {
    int64_t n = 0;
    for (auto& name : order_) n += map_.at(name).numel();
    return n;
  }

  void zero_grads() {
    for (auto& name : order_) {
      auto& t = map_.at(name);
      t.st->g.assign(t.st->v.size(), R(0));
    }
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor<R>> map_;
};

// ----- kernels ----------------------------------------------------------------

namespace detail {

template <class R>
inline constexpr int kLanes = sizeof(R) == 4 ? 32 : 16;

// Fixed-order lane-split dot product: vectorizes without reassociation licence.
template <class R>
inline R lane_dot(const R* __restrict a, const R* __restrict b, int n) {
  constexpr int L = kLanes<R>;
  R acc[L] = {};
  int k = 0;
  for (; k + L <= n; k += L)
    for (int j = 0; j < L; j++) acc[j] += a[k + j] * b[k + j];
  R tail = 0;
  for (; k < n; k++) tail += a[k] * b[k];
  for (int w = L / 2; w > 0; w /= 2)
    for (int j = 0; j < w; j++) acc[j] += acc[j + w];
  return acc[0] + tail;
}

// C[M,N] += A[M,K] . B[K,N]
template <class R>
inline void gemm_nn(const R* __restrict A, const R* __restrict B, R* __restrict C, int M, int K,
                    int N) {
  for (int m = 0; m < M; m++) {
    const R* a = A + static_cast<size_t>(m) * K;
    R* c = C + static_cast<size_t>(m) * N;
    for (int k = 0; k < K; k++) {
      const R av = a[k];
      const R* b = B + static_cast<size_t>(k) * N;
      for (int n = 0; n < N; n++) c[n] += av * b[n];
    }
  }
}

// C[M,N] += A[M,K] . B[N,K]^T
// Dot-product loops stall on the reduction at the K this model uses, so B is
// transposed into scratch and the broadcast-FMA nn loop does the work.
template <class R>
inline void gemm_nt(const R* __restrict A, const R* __restrict B, R* __restrict C, int M, int K,
                    int N) {
  if (M < 4) {  // matvec-ish: the transpose would cost as much as the product
    for (int m = 0; m < M; m++) {
      const R* a = A + static_cast<size_t>(m) * K;
      R* c = C + static_cast<size_t>(m) * N;
      for (int n = 0; n < N; n++) c[n] += lane_dot(a, B + static_cast<size_t>(n) * K, K);
    }
    return;
  }
  static thread_local std::vector<R> scratch;
  scratch.resize(static_cast<size_t>(K) * N);
  for (int n = 0; n < N; n++)
    for (int k = 0; k < K; k++)
      scratch[static_cast<size_t>(k) * N + n] = B[static_cast<size_t>(n) * K + k];
  gemm_nn(A, scratch.data(), C, M, K, N);
}

// C[M,N] += A[K,M]^T . B[K,N]
template <class R>
inline void gemm_tn(const R* __restrict A, const R* __restrict B, R* __restrict C, int K, int M,
                    int N) {
  for (int k = 0; k < K; k++) {
    const R* a = A + static_cast<size_t>(k) * M;
    const R* b = B + static_cast<size_t>(k) * N;
    for (int m = 0; m < M; m++) {
      const R av = a[m];
      R* c = C + static_cast<size_t>(m) * N;
      for (int n = 0; n < N; n++) c[n] += av * b[n];
    }
  }
}

template <class R>
inline void check_finite(const char* op, const std::vector<R>& v) {
  double s = 0;
  for (R x : v) s += static_cast<double>(x);
  if (!std::isfinite(s)) {
    // s can overflow for huge-but-finite data; confirm elementwise before throwing
    for (R x : v)
      if (!std::isfinite(static_cast<double>(x)))
        throw numeric_error(std::string(op) + ": non-finite value produced");
  }
}

// Split a shape into (outer, axis, inner) extents around `axis`.
inline void axis_split(const Shape& s, int axis, int64_t& outer, int64_t& mid, int64_t& inner) {
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for " +
                                shape_str(s));
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; i++) outer *= s[static_cast<size_t>(i)];
  mid = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); i++) inner *= s[i];
}

}  // namespace detail

// ----- tape -------------------------------------------------------------------

template <class R>
class Tape {
 public:
  struct Node {
    int64_t numel = 0;
    Storage<R>* leaf = nullptr;
    std::shared_ptr<Storage<R>> keepalive;
    std::function<void(Tape&, int)> backward;  // (tape, own node id)
  };

  // Node id for `t`, registering it as a leaf on first sight.
  int node_of(const Tensor<R>& t) {
    if (!t.st) throw std::invalid_argument("empty tensor on tape");
    if (t.node >= 0) return t.node;
    auto it = leaf_ids_.find(t.st.get());
    if (it != leaf_ids_.end()) return it->second;
    Node n;
    n.numel = t.numel();
    n.leaf = t.st.get();
    n.keepalive = t.st;
    nodes_.push_back(std::move(n));
    int id = static_cast<int>(nodes_.size()) - 1;
    leaf_ids_.emplace(t.st.get(), id);
    return id;
  }

  int new_node(int64_t numel, std::function<void(Tape&, int)> bwd) {
    Node n;
    n.numel = numel;
    n.backward = std::move(bwd);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Gradient buffer of node `id`, allocated (zeroed) on first touch.
  std::vector<R>& grad_buf(int id) {
    auto& g = grads_[static_cast<size_t>(id)];
    if (g.empty()) g.assign(static_cast<size_t>(nodes_[static_cast<size_t>(id)].numel), R(0));
    return g;
  }

  const std::vector<R>& grad_of(int id) const { return grads_[static_cast<size_t>(id)]; }

  // Reverse sweep from a scalar root. Leaf gradients accumulate into their
  // Storage::g. A tape runs backward at most once.
  void backward(const Tensor<R>& root) {
    if (ran_) throw std::logic_error("backward already ran on this tape");
    if (root.node < 0 || root.node >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("backward root is not a tape output");
    if (root.numel() != 1) throw std::invalid_argument("backward root must be a scalar");
    ran_ = true;
    grads_.assign(nodes_.size(), {});
    grads_[static_cast<size_t>(root.node)] = {R(1)};
    for (int i = root.node; i >= 0; i--) {
      auto& g = grads_[static_cast<size_t>(i)];
      if (g.empty()) continue;
      auto& n = nodes_[static_cast<size_t>(i)];
      if (n.backward) n.backward(*this, i);
      if (n.leaf && n.leaf->requires_grad) {
        auto& dst = n.leaf->g;
        if (dst.size() != n.leaf->v.size()) dst.assign(n.leaf->v.size(), R(0));
        for (size_t k = 0; k < g.size(); k++) dst[k] += g[k];
      }
      if (i != root.node) g.clear();  // free as we go
    }
  }

  // Same, then guarantee every parameter has a (possibly zero) gradient.
  void backward(const Tensor<R>& root, ParameterStore<R>& ps) {
    backward(root);
    for (auto& name : ps.names()) ps.get(name).grad();
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  std::vector<std::vector<R>> grads_;
  std::unordered_map<Storage<R>*, int> leaf_ids_;
  bool ran_ = false;
};

// ----- op helpers ---------------------------------------------------------------

namespace detail {

template <class R>
bool tracked(const Tensor<R>& t) {
  return t.node >= 0 || (t.st && t.st->requires_grad);
}

}  // namespace detail

// ----- elementwise ops ------------------------------------------------------------

template <class R>
Tensor<R> add(Tape<R>& tp, const Tensor<R>& a, const Tensor<R>& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  Tensor<R> out = Tensor<R>::zeros(a.shape);
  const R* pa = a.data();
  const R* pb = b.data();
  R* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; i++) po[i] = pa[i] + pb[i];
  detail::check_finite("add", out.values());
  if (detail::tracked(a) || detail::tracked(b)) {
    int ia = tp.node_of(a), ib = tp.node_of(b);
    out.node = tp.new_node(n, [ia, ib, n, a, b](Tape<R>& t, int self) {
      const auto& go = t.grad_of(self);
      auto& ga = t.grad_buf(ia);
      for (int64_t i = 0; i < n; i++) ga[static_cast<size_t>(i)] += go[static_cast<size_t>(i)];
      auto& gb = t.grad_buf(ib);
      for (int64_t i = 0; i < n; i++) gb[static_cast<size_t>(i)] += go[static_cast<size_t>(i)];
    });
  }
  return out;
}

// x[..., D] + b[D], broadcast over leading dims.
template <class R>
Tensor<R> add_bias(Tape<R>& tp, const Tensor<R>& x, const Tensor<R>& b) {
  if (b.rank() != 1 || x.rank() < 1 || x.dim(x.rank() - 1) != b.dim(0))
    throw std::invalid_argument("add_bias: " + shape_str(x.shape) + " vs " + shape_str(b.shape));
  const int64_t d = b.dim(0);
  const int64_t rows = x.numel() / d;
  Tensor<R> out = Tensor<R>::zeros(x.shape);
  const R* px = x.data();
  const R* pb = b.data();
  R* po = out.data();
  for (int64_t r = 0; r < rows; r++)
    for (int64_t j = 0; j < d; j++) po[r * d + j] = px[r * d + j] + pb[j];
  detail::check_finite("add_bias", out.values());
  if (detail::tracked(x) || detail::tracked(b)) {
    int ix = tp.node_of(x), ib = tp.node_of(b);
    out.node = tp.new_node(x.numel(), [ix, ib, rows, d, x, b](Tape<R>& t, int self) {
      const auto& go = t.grad_of(self);
      auto& gx = t.grad_buf(ix);
      for (size_t i = 0; i < go.size(); i++) gx[i] += go[i];
      auto& gb = t.grad_buf(ib);
      for (int64_t r = 0; r < rows; r++)
        for (int64_t j = 0; j < d; j++)
          gb[static_cast<size_t>(j)] += go[static_cast<size_t>(r * d + j)];
    });
  }
  return out;
}

template <class R>
Tensor<R> mul(Tape<R>& tp, const Tensor<R>& a, const Tensor<R>& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  Tensor<R> out = Tensor<R>::zeros(a.shape);
  const R* pa = a.data();
  const R* pb = b.data();
  R* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; i++) po[i] = pa[i] * pb[i];
  detail::check_finite("mul", out.values());
  if (detail::tracked(a) || detail::tracked(b)) {
    int ia = tp.node_of(a), ib = tp.node_of(b);
    out.node = tp.new_node(n, [ia, ib, a, b, n](Tape<R>& t, int self) {
      const auto& go = t.grad_of(self);
      const R* pa2 = a.data();
      const R* pb2 = b.data();
      auto& ga = t.grad_buf(ia);
      for (int64_t i = 0; i < n; i++)
        ga[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * pb2[i];
      auto& gb = t.grad_buf(ib);
      for (int64_t i = 0; i < n; i++)
        gb[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * pa2[i];
    });
  }
  return out;
}

template <class R>
Tensor<R> scale(Tape<R>& tp, const Tensor<R>& a, R c) {
  Tensor<R> out = Tensor<R>::zeros(a.shape);
  const R* pa = a.data();
  R* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; i++) po[i] = pa[i] * c;
  detail::check_finite("scale", out.values());
  if (detail::tracked(a)) {
    int ia = tp.node_of(a);
    out.node = tp.new_node(n, [ia, c, n](Tape<R>& t, int self) {
      const auto& go = t.grad_of(self);
      auto& ga = t.grad_buf(ia);
      for (int64_t i = 0; i < n; i++) ga[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * c;
    });
  }
  return out;
}

template <class R>
Tensor<R> relu(Tape<R>& tp, const Tensor<R>& a) {
  Tensor<R> out = Tensor<R>::zeros(a.shape);
  const R* pa = a.data();
  R* po = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; i++) po[i] = pa[i] > R(0) ? pa[i] : R(0);
  detail::check_finite("relu", out.values());
  if (detail::tracked(a)) {
    int ia = tp.node_of(a);
    out.node = tp.new_node(n, [ia, a, n](Tape<R>& t, int self) {
      const auto& go = t.grad_of(self);
      const R* pa2 = a.data();
      auto& ga = t.grad_buf(ia);
      for (int64_t i = 0; i < n; i++)
        if (pa2[i] > R(0)) ga[static_cast<size_t>(i)] += go[static_cast<size_t>(i)];
    });
  }
  return out;
}

// Inverted dropout: scales kept activations by 1/(1-rate) at train time so eval
// needs no correction. rate == 0 returns the input unchanged.
template <class R>
Tensor<R> dropout(Tape<R>& tp, const Tensor<R>& x, double rate, Rng& rng) {
  if (rate < 0 || rate >= 1) throw std::invalid_argument("dropout rate must be in [0,1)");
  if (rate == 0) return x;
  const int64_t n = x.numel();
  std::vector<R> mask(static_cast<size_t>(n));
  const R keep_scale = static_cast<R>(1.0 / (1.0 - rate));
  for (int64_t i = 0; i < n; i++)
    mask[static_cast<size_t>(i)] = rng.bernoulli(rate) ? R(0) : keep_scale;
  return mul(tp, x, Tensor<R>::from(x.shape, std::move(mask)));
}

// ----- matmul family ---------------------------------------------------------------

template <class R>
Tensor<R> matmul(Tape<R>& tp, const Tensor<R>& a, const Tensor<R>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor<R> out = Tensor<R>::zeros({M, N});
  detail::gemm_nn(a.data(), b.data(), out.data(), M, K, N);
  detail::check_finite("matmul", out.values());
  if (detail::tracked(a) || detail::tracked(b)) {
    int ia = tp.node_of(a), ib = tp.node_of(b);
    out.node = tp.new_node(out.numel(), [ia, ib, a, b, M, K, N](Tape<R>& t, int self) {
      const auto& go = t.grad_of(self);
      detail::gemm_nt(go.data(), b.data(), t.grad_buf(ia).data(), M, N, K);   // dA = G.B^T
      detail::gemm_tn(a.data(), go.data(), t.grad_buf(ib).data(), M, K, N);   // dB = A^T.G
    });
  }
  return out;
}

// a[M,K] . b[N,K]^T -> [M,N]; used for tied-embedding logits.
template <class R>
Tensor<R> matmul_nt(Tape<R>& tp, const Tensor<R>& a, const Tensor<R>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw std::invalid_argument("matmul_nt: " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int M = a.dim(0), K = a.dim(1), N = b.dim(0);
  Tensor<R> out = Tensor<R>::zeros({M, N});
  detail::gemm_nt(a.data(), b.data(), out.data(), M, K, N);
  detail::check_finite("matmul_nt", out.values());
  if (detail::tracked(a) || detail::tracked(b)) {
    int ia = tp.node_of(a), ib = tp.node_of(b);
    out.node = tp.new_node(out.numel(), [ia, ib, a, b, M, K, N](Tape<R>& t, int self) {
      const auto& go = t.grad_of(self);
      detail::gemm_nn(go.data(), b.data(), t.grad_buf(ia).data(), M, N, K);   // dA = G.B
      detail::gemm_tn(go.data(), a.data(), t.grad_buf(ib).data(), M, N, K);   // dB = G^T.A
    });
  }
  return out;
}

// Batched matmul: a[G,M,K] . b[G,K,N] -> [G,M,N]
template <class R>
Tensor<R> bmm(Tape<R>& tp, const Tensor<R>& a, const Tensor<R>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw std::invalid_argument("bmm: " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int G = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  Tensor<R> out = Tensor<R>::zeros({G, M, N});
  for (int g = 0; g < G; g++)
    detail::gemm_nn(a.data() + static_cast<size_t>(g) * M * K,
                    b.data() + static_cast<size_t>(g) * K * N,
                    out.data() + static_cast<size_t>(g) * M * N, M, K, N);
  detail::check_finite("bmm", out.values());
  if (detail::tracked(a) || detail::tracked(b)) {
    int ia = tp.node_of(a), ib = tp.node_of(b);
    out.node = tp.new_node(out.numel(), [ia, ib, a, b, G, M, K, N](Tape<R>& t, int self) {
      const auto& go = t.grad_of(self);
      auto& ga = t.grad_buf(ia);
      auto& gb = t.grad_buf(ib);
      for (int g = 0; g < G; g++) {
        const R* gsl = go.data() + static_cast<size_t>(g) * M * N;
        detail::gemm_nt(gsl, b.data() + static_cast<size_t>(g) * K * N,
                        ga.data() + static_cast<size_t>(g) * M * K, M, N, K);
        detail::gemm_tn(a.data() + static_cast<size_t>(g) * M * K, gsl,
                        gb.data() + static_cast<size_t>(g) * K * N, M, K, N);
      }
    });
  }
  return out;
}

// Batched a[G,M,K] . b[G,N,K]^T -> [G,M,N]; attention scores.
template <class R>
Tensor<R> bmm_nt(Tape<R>& tp, const Tensor<R>& a, const Tensor<R>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw std::invalid_argument("bmm_nt: " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int G = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(1);
  Tensor<R> out = Tensor<R>::zeros({G, M, N});
  for (int g = 0; g < G; g++)
    detail::gemm_nt(a.data() + static_cast<size_t>(g) * M * K,
                    b.data() + static_cast<size_t>(g) * N * K,
                    out.data() + static_cast<size_t>(g) * M * N, M, K, N);
  detail::check_finite("bmm_nt", out.values());
  if (detail::tracked(a) || detail::tracked(b)) {
    int ia = tp.node_of(a), ib = tp.node_of(b);
    out.node = tp.new_node(out.numel(), [ia, ib, a, b, G, M, K, N](Tape<R>& t, int self) {
      const auto& go = t.grad_of(self);
      auto& ga = t.grad_buf(ia);
      auto& gb = t.grad_buf(ib);
      for (int g = 0; g < G; g++) {
        const R* gsl = go.data() + static_cast<size_t>(g) * M * N;
        detail::gemm_nn(gsl, b.data() + static_cast<size_t>(g) * N * K,
                        ga.data() + static_cast<size_t>(g) * M * K, M, N, K);
        detail::gemm_tn(gsl, a.data() + static_cast<size_t>(g) * M * K,
                        gb.data() + static_cast<size_t>(g) * N * K, M, N, K);
      }
    });
  }
  return out;
}

// ----- layout ops ------------------------------------------------------------------

template <class R>
Tensor<R> transpose(Tape<R>& tp, const Tensor<R>& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: rank-2 only, got " + shape_str(a.shape));
  const int M = a.dim(0), N = a.dim(1);
  Tensor<R> out = Tensor<R>::zeros({N, M});
  const R* pa = a.data();
  R* po = out.data();
  for (int m = 0; m < M; m++)
    for (int n = 0; n < N; n++) po[static_cast<size_t>(n) * M + m] = pa[static_cast<size_t>(m) * N + n];
  if (detail::tracked(a)) {
    int ia = tp.node_of(a);
    out.node = tp.new_node(out.numel(), [ia, M, N](Tape<R>& t, int self) {
      const auto& go = t.grad_of(self);
      auto& ga = t.grad_buf(ia);
      for (int n = 0; n < N; n++)
        for (int m = 0; m < M; m++)
          ga[static_cast<size_t>(m) * N + n] += go[static_cast<size_t>(n) * M + m];
    });
  }
  return out;
}

template <class R>
Tensor<R> concat(Tape<R>& tp, const std::vector<Tensor<R>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts[0].shape;
  int total = 0;
  for (auto& p : parts) {
    if (p.rank() != static_cast<int>(s0.size()))
      throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < p.rank(); i++)
      if (i != axis && p.dim(i) != s0[static_cast<size_t>(i)])
        throw std::invalid_argument("concat: dim mismatch at axis " + std::to_string(i));
    total += p.dim(axis);
  }
  Shape so = s0;
  so[static_cast<size_t>(axis)] = total;
  Tensor<R> out = Tensor<R>::zeros(so);
  int64_t outer, mid_out, inner;
  detail::axis_split(so, axis, outer, mid_out, inner);
  int64_t off = 0;
  for (auto& p : parts) {
    const int64_t mid_p = p.dim(axis);
    const R* src = p.data();
    for (int64_t o = 0; o < outer; o++)
      std::copy(src + o * mid_p * inner, src + (o + 1) * mid_p * inner,
                out.data() + (o * mid_out + off) * inner);
    off += mid_p;
  }
  bool any = false;
  for (auto& p : parts) any = any || detail::tracked(p);
  if (any) {
    std::vector<int> ids;
    std::vector<int64_t> mids;
    for (auto& p : parts) {
      ids.push_back(tp.node_of(p));
      mids.push_back(p.dim(axis));
    }
    auto keep = parts;  // keepalive
    out.node = tp.new_node(out.numel(),
                           [ids, mids, outer, mid_out, inner, keep](Tape<R>& t, int self) {
      const auto& go = t.grad_of(self);
      int64_t off2 = 0;
      for (size_t pi = 0; pi < ids.size(); pi++) {
        auto& gp = t.grad_buf(ids[pi]);
        const int64_t mid_p = mids[pi];
        for (int64_t o = 0; o < outer; o++) {
          const R* src = go.data() + (o * mid_out + off2) * inner;
          R* dst = gp.data() + o * mid_p * inner;
          for (int64_t i = 0; i < mid_p * inner; i++) dst[i] += src[i];
        }
        off2 += mid_p;
      }
    });
  }
  return out;
}

template <class R>
Tensor<R> slice(Tape<R>& tp, const Tensor<R>& a, int axis, int start, int len) {
  int64_t outer, mid, inner;
  detail::axis_split(a.shape, axis, outer, mid, inner);
  if (start < 0 || len < 0 || start + len > mid)
    throw std::invalid_argument("slice: [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of axis extent " +
                                std::to_string(mid));
  Shape so = a.shape;
  so[static_cast<size_t>(axis)] = len;
  Tensor<R> out = Tensor<R>::zeros(so);
  for (int64_t o = 0; o < outer; o++)
    std::copy(a.data() + (o * mid + start) * inner, a.data() + (o * mid + start + len) * inner,
              out.data() + o * len * inner);
  if (detail::tracked(a)) {
    int ia = tp.node_of(a);
    out.node =
        tp.new_node(out.numel(), [ia, outer, mid, inner, start, len, a](Tape<R>& t, int self) {
      const auto& go = t.grad_of(self);
      auto& ga = t.grad_buf(ia);
      for (int64_t o = 0; o < outer; o++) {
        const R* src = go.data() + o * len * inner;
        R* dst = ga.data() + (o * mid + start) * inner;
        for (int64_t i = 0; i < len * inner; i++) dst[i] += src[i];
      }
    });
  }
  return out;
}

// [B,T,D] -> [B*H,T,D/H]: head-major fold used by attention.
template <class R>
Tensor<R> split_heads(Tape<R>& tp, const Tensor<R>& x, int heads) {
  if (x.rank() != 3) throw std::invalid_argument("split_heads: need rank 3, got " + shape_str(x.shape));
  const int B = x.dim(0), T = x.dim(1), D = x.dim(2);
  if (heads <= 0 || D % heads != 0)
    throw std::invalid_argument("split_heads: d_model " + std::to_string(D) +
                                " not divisible by heads " + std::to_string(heads));
  const int dh = D / heads;
  Tensor<R> out = Tensor<R>::zeros({B * heads, T, dh});
  const R* px = x.data();
  R* po = out.data();
  for (int b = 0; b < B; b++)
    for (int t = 0; t < T; t++)
      for (int h = 0; h < heads; h++)
        std::copy(px + (static_cast<size_t>(b) * T + t) * D + static_cast<size_t>(h) * dh,
                  px + (static_cast<size_t>(b) * T + t) * D + static_cast<size_t>(h + 1) * dh,
                  po + ((static_cast<size_t>(b) * heads + h) * T + t) * dh);
  if (detail::tracked(x)) {
    int ix = tp.node_of(x);
    out.node = tp.new_node(out.numel(), [ix, B, T, D, heads, dh, x](Tape<R>& t0, int self) {
      const auto& go = t0.grad_of(self);
      auto& gx = t0.grad_buf(ix);
      for (int b = 0; b < B; b++)
        for (int t = 0; t < T; t++)
          for (int h = 0; h < heads; h++) {
            const R* src = go.data() + ((static_cast<size_t>(b) * heads + h) * T + t) * dh;
            R* dst = gx.data() + (static_cast<size_t>(b) * T + t) * D + static_cast<size_t>(h) * dh;
            for (int k = 0; k < dh; k++) dst[k] += src[k];
          }
    });
  }
  return out;
}

// [B*H,T,dh] -> [B,T,H*dh]: inverse of split_heads.
template <class R>
Tensor<R> merge_heads(Tape<R>& tp, const Tensor<R>& x, int heads) {
  if (x.rank() != 3) throw std::invalid_argument("merge_heads: need rank 3, got " + shape_str(x.shape));
  const int BH = x.dim(0), T = x.dim(1), dh = x.dim(2);
  if (heads <= 0 || BH % heads != 0)
    throw std::invalid_argument("merge_heads: batch*heads " + std::to_string(BH) +
                                " not divisible by heads " + std::to_string(heads));
  const int B = BH / heads, D = heads * dh;
  Tensor<R> out = Tensor<R>::zeros({B, T, D});
  const R* px = x.data();
  R* po = out.data();
  for (int b = 0; b < B; b++)
    for (int h = 0; h < heads; h++)
      for (int t = 0; t < T; t++)
        std::copy(px + ((static_cast<size_t>(b) * heads + h) * T + t) * dh,
                  px + ((static_cast<size_t>(b) * heads + h) * T + t + 1) * dh,
                  po + (static_cast<size_t>(b) * T + t) * D + static_cast<size_t>(h) * dh);
  if (detail::tracked(x)) {
    int ix = tp.node_of(x);
    out.node = tp.new_node(out.numel(), [ix, B, T, D, heads, dh, x](Tape<R>& t0, int self) {
      const auto& go = t0.grad_of(self);
      auto& gx = t0.grad_buf(ix);
      for (int b = 0; b < B; b++)
        for (int h = 0; h < heads; h++)
          for (int t = 0; t < T; t++) {
            const R* src = go.data() + (static_cast<size_t>(b) * T + t) * D + static_cast<size_t>(h) * dh;
            R* dst = gx.data() + ((static_cast<size_t>(b) * heads + h) * T + t) * dh;
            for (int k = 0; k < dh; k++) dst[k] += src[k];
          }
    });
  }
  return out;
}

// ----- reductions / normalizations ----------------------------------------------

// Softmax over the last axis. Row sums accumulate in double.
template <class R>
Tensor<R> softmax_lastdim(Tape<R>& tp, const Tensor<R>& x) {
  if (x.rank() < 1) throw std::invalid_argument("softmax: rank >= 1 required");
  const int64_t K = x.dim(x.rank() - 1);
  if (K == 0) throw std::invalid_argument("softmax: empty rows");
  const int64_t rows = x.numel() / K;
  Tensor<R> out = Tensor<R>::zeros(x.shape);
  const R* px = x.data();
  R* po = out.data();
  for (int64_t r = 0; r < rows; r++) {
    const R* xr = px + r * K;
    R* yr = po + r * K;
    R m = xr[0];
    for (int64_t k = 1; k < K; k++) m = std::max(m, xr[k]);
    double sum = 0;
    for (int64_t k = 0; k < K; k++) {
      const double e = std::exp(static_cast<double>(xr[k]) - static_cast<double>(m));
      yr[k] = static_cast<R>(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int64_t k = 0; k < K; k++) yr[k] = static_cast<R>(static_cast<double>(yr[k]) * inv);
  }
  detail::check_finite("softmax", out.values());
  if (detail::tracked(x)) {
    int ix = tp.node_of(x);
    out.node = tp.new_node(x.numel(), [ix, rows, K, out](Tape<R>& t, int self) {
      const auto& go = t.grad_of(self);
      auto& gx = t.grad_buf(ix);
      const R* y = out.data();
      for (int64_t r = 0; r < rows; r++) {
        double dot = 0;
        for (int64_t k = 0; k < K; k++)
          dot += static_cast<double>(go[static_cast<size_t>(r * K + k)]) *
                 static_cast<double>(y[r * K + k]);
        for (int64_t k = 0; k < K; k++)
          gx[static_cast<size_t>(r * K + k)] +=
              y[r * K + k] * (go[static_cast<size_t>(r * K + k)] - static_cast<R>(dot));
      }
    });
  }
  return out;
}

// Rank-2 alias; the name most call sites read naturally.
template <class R>
Tensor<R> softmax_rows(Tape<R>& tp, const Tensor<R>& x) {
  if (x.rank() != 2) throw std::invalid_argument("softmax_rows: rank-2 only");
  return softmax_lastdim(tp, x);
}

// Layer norm over the last axis with learned gain/bias. Moments in double.
template <class R>
Tensor<R> layer_norm(Tape<R>& tp, const Tensor<R>& x, const Tensor<R>& gain,
                     const Tensor<R>& bias, double eps = 1e-5) {
  const int64_t D = x.rank() >= 1 ? x.dim(x.rank() - 1) : 0;
  if (D == 0) throw std::invalid_argument("layer_norm: zero-width rows");
  if (gain.shape != Shape{static_cast<int>(D)} || bias.shape != Shape{static_cast<int>(D)})
    throw std::invalid_argument("layer_norm: gain/bias must be [" + std::to_string(D) + "]");
  const int64_t rows = x.numel() / D;
  Tensor<R> out = Tensor<R>::zeros(x.shape);
  auto xhat = std::make_shared<std::vector<R>>(static_cast<size_t>(x.numel()));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  const R* px = x.data();
  const R* pg = gain.data();
  const R* pb = bias.data();
  R* po = out.data();
  for (int64_t r = 0; r < rows; r++) {
    const R* xr = px + r * D;
    double mean = 0;
    for (int64_t j = 0; j < D; j++) mean += static_cast<double>(xr[j]);
    mean /= static_cast<double>(D);
    double var = 0;
    for (int64_t j = 0; j < D; j++) {
      const double d = static_cast<double>(xr[j]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(D);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < D; j++) {
      const R xh = static_cast<R>((static_cast<double>(xr[j]) - mean) * is);
      (*xhat)[static_cast<size_t>(r * D + j)] = xh;
      po[r * D + j] = xh * pg[j] + pb[j];
    }
  }
  detail::check_finite("layer_norm", out.values());
  if (detail::tracked(x) || detail::tracked(gain) || detail::tracked(bias)) {
    int ix = tp.node_of(x), ig = tp.node_of(gain), ib = tp.node_of(bias);
    out.node = tp.new_node(
        x.numel(), [ix, ig, ib, rows, D, xhat, inv_std, gain, x, bias](Tape<R>& t, int self) {
      const auto& go = t.grad_of(self);
      auto& gx = t.grad_buf(ix);
      auto& gg = t.grad_buf(ig);
      auto& gb = t.grad_buf(ib);
      const R* pg2 = gain.data();
      for (int64_t r = 0; r < rows; r++) {
        const double is = (*inv_std)[static_cast<size_t>(r)];
        double mean_dy = 0, mean_dyx = 0;
        for (int64_t j = 0; j < D; j++) {
          const double dy = static_cast<double>(go[static_cast<size_t>(r * D + j)]) *
                            static_cast<double>(pg2[j]);
          mean_dy += dy;
          mean_dyx += dy * static_cast<double>((*xhat)[static_cast<size_t>(r * D + j)]);
        }
        mean_dy /= static_cast<double>(D);
        mean_dyx /= static_cast<double>(D);
        for (int64_t j = 0; j < D; j++) {
          const size_t idx = static_cast<size_t>(r * D + j);
          const double dy = static_cast<double>(go[idx]) * static_cast<double>(pg2[j]);
          const double xh = static_cast<double>((*xhat)[idx]);
          gx[idx] += static_cast<R>((dy - mean_dy - xh * mean_dyx) * is);
          gg[static_cast<size_t>(j)] += go[idx] * (*xhat)[idx];
          gb[static_cast<size_t>(j)] += go[idx];
        }
      }
    });
  }
  return out;
}

// Embedding lookup: rows of table[V,D] selected by ids -> [P,D].
template <class R>
Tensor<R> gather_rows(Tape<R>& tp, const Tensor<R>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw std::invalid_argument("gather_rows: table must be rank 2");
  const int V = table.dim(0), D = table.dim(1);
  const int P = static_cast<int>(ids.size());
  Tensor<R> out = Tensor<R>::zeros({P, D});
  for (int p = 0; p < P; p++) {
    const int id = ids[static_cast<size_t>(p)];
    if (id < 0 || id >= V)
      throw std::invalid_argument("gather_rows: id " + std::to_string(id) + " outside vocab " +
                                  std::to_string(V));
    std::copy(table.data() + static_cast<size_t>(id) * D,
              table.data() + static_cast<size_t>(id + 1) * D,
              out.data() + static_cast<size_t>(p) * D);
  }
  if (detail::tracked(table)) {
    int it = tp.node_of(table);
    out.node = tp.new_node(out.numel(), [it, ids, D, table](Tape<R>& t, int self) {
      const auto& go = t.grad_of(self);
      auto& gt = t.grad_buf(it);
      for (size_t p = 0; p < ids.size(); p++) {
        const R* src = go.data() + p * static_cast<size_t>(D);
        R* dst = gt.data() + static_cast<size_t>(ids[p]) * D;
        for (int j = 0; j < D; j++) dst[j] += src[j];
      }
    });
  }
  return out;
}

// Fused log-softmax + NLL with optional uniform label smoothing.
// logits [P,V], targets [P] -> per-position losses [P].
// loss_p = lse_p - (1-s) * logit[t_p] - (s/V) * sum_v logit[v]
template <class R>
Tensor<R> cross_entropy_nll(Tape<R>& tp, const Tensor<R>& logits, const std::vector<int>& targets,
                            double smoothing = 0.0) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy_nll: logits must be [P,V]");
  if (smoothing < 0 || smoothing >= 1)
    throw std::invalid_argument("cross_entropy_nll: smoothing must be in [0,1)");
  const int P = logits.dim(0), V = logits.dim(1);
  if (P == 0) throw std::invalid_argument("cross_entropy_nll: no positions");
  if (static_cast<int>(targets.size()) != P)
    throw std::invalid_argument("cross_entropy_nll: targets size " +
                                std::to_string(targets.size()) + " vs positions " +
                                std::to_string(P));
  auto lse = std::make_shared<std::vector<double>>(static_cast<size_t>(P));
  Tensor<R> out = Tensor<R>::zeros({P});
  const R* pl = logits.data();
  for (int p = 0; p < P; p++) {
    const int t = targets[static_cast<size_t>(p)];
    if (t < 0 || t >= V)
      throw std::invalid_argument("cross_entropy_nll: target " + std::to_string(t) +
                                  " outside vocab " + std::to_string(V));
    const R* row = pl + static_cast<size_t>(p) * V;
    R m = row[0];
    for (int v = 1; v < V; v++) m = std::max(m, row[v]);
    double sum = 0, mean_logit = 0;
    for (int v = 0; v < V; v++) {
      sum += std::exp(static_cast<double>(row[v]) - static_cast<double>(m));
      mean_logit += static_cast<double>(row[v]);
    }
    mean_logit /= V;
    const double l = static_cast<double>(m) + std::log(sum);
    (*lse)[static_cast<size_t>(p)] = l;
    out.data()[p] = static_cast<R>(l - (1.0 - smoothing) * static_cast<double>(row[t]) -
                                   smoothing * mean_logit);
  }
  detail::check_finite("cross_entropy_nll", out.values());
  if (detail::tracked(logits)) {
    int il = tp.node_of(logits);
    out.node = tp.new_node(P, [il, targets, P, V, smoothing, lse, logits](Tape<R>& t0, int self) {
      const auto& go = t0.grad_of(self);
      auto& gl = t0.grad_buf(il);
      const R* pl2 = logits.data();
      const double u = smoothing / V;
      for (int p = 0; p < P; p++) {
        const double gp = static_cast<double>(go[static_cast<size_t>(p)]);
        if (gp == 0) continue;
        const double l = (*lse)[static_cast<size_t>(p)];
        const R* row = pl2 + static_cast<size_t>(p) * V;
        R* gr = gl.data() + static_cast<size_t>(p) * V;
        const int t = targets[static_cast<size_t>(p)];
        for (int v = 0; v < V; v++) {
          const double soft = std::exp(static_cast<double>(row[v]) - l);
          const double q = u + (v == t ? 1.0 - smoothing : 0.0);
          gr[v] += static_cast<R>(gp * (soft - q));
        }
      }
    });
  }
  return out;
}

// Sum all elements to a scalar [1]. Accumulates in double.
template <class R>
Tensor<R> sum(Tape<R>& tp, const Tensor<R>& x) {
  Tensor<R> out = Tensor<R>::zeros({1});
  double s = 0;
  const R* px = x.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; i++) s += static_cast<double>(px[i]);
  out.data()[0] = static_cast<R>(s);
  detail::check_finite("sum", out.values());
  if (detail::tracked(x)) {
    int ix = tp.node_of(x);
    out.node = tp.new_node(1, [ix, n](Tape<R>& t, int self) {
      const R g = t.grad_of(self)[0];
      auto& gx = t.grad_buf(ix);
      for (int64_t i = 0; i < n; i++) gx[static_cast<size_t>(i)] += g;
    });
  }
  return out;
}

}  // namespace umlab::numcore
