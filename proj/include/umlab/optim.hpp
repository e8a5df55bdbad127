#pragma once
// Adam with bias correction, global-norm clipping, and a central-difference
// gradient checker. Optimizer math runs in double and rounds back to R so the
// float and double instantiations follow the same trajectory shape.

#include <cmath>
#include <functional>

#include "umlab/tensor.hpp"

namespace umlab::numcore {

template <class R>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  long step = 0;
  std::vector<std::vector<double>> m, v;  // per parameter, insertion order

  void init(const ParameterStore<R>& ps) {
    m.clear();
    v.clear();
    for (auto& name : ps.names()) {
      const size_t n = ps.get(name).st->v.size();
      m.emplace_back(n, 0.0);
      v.emplace_back(n, 0.0);
    }
    step = 0;
  }
};

// One Adam update over every parameter. Gradients must exist (run backward with
// the store overload first); they are zeroed after the step.
template <class R>
void adam_step(ParameterStore<R>& ps, AdamState<R>& st, double lr) {
  if (st.m.size() != ps.count()) {
    if (st.m.empty())
      st.init(ps);
    else
      throw std::invalid_argument("adam_step: state tracks " + std::to_string(st.m.size()) +
                                  " tensors, store has " + std::to_string(ps.count()));
  }
  st.step += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  size_t pi = 0;
  for (auto& name : ps.names()) {
    auto& t = ps.get(name);
    if (t.st->g.size() != t.st->v.size())
      throw std::invalid_argument("adam_step: parameter " + name + " has no gradient");
    auto& m = st.m[pi];
    auto& v = st.v[pi];
    if (m.size() != t.st->v.size())
      throw std::invalid_argument("adam_step: state size mismatch for " + name);
    R* w = t.st->v.data();
    R* g = t.st->g.data();
    for (size_t i = 0; i < m.size(); i++) {
      const double gi = static_cast<double>(g[i]);
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      w[i] = static_cast<R>(static_cast<double>(w[i]) - lr * mh / (std::sqrt(vh) + st.eps));
      g[i] = R(0);
    }
    pi++;
  }
}

// Scale all gradients so the global L2 norm is at most max_norm.
// Returns the pre-clip norm (double accumulation).
template <class R>
double clip_global_norm(ParameterStore<R>& ps, double max_norm) {
  double ss = 0;
  for (auto& name : ps.names()) {
    auto& t = ps.get(name);
    if (t.st->g.size() != t.st->v.size())
      throw std::invalid_argument("clip_global_norm: parameter " + name + " has no gradient");
    for (R g : t.st->g) ss += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(ss);
  if (max_norm > 0 && norm > max_norm) {
    const R k = static_cast<R>(max_norm / norm);
    for (auto& name : ps.names())
      for (R& g : ps.get(name).st->g) g *= k;
  }
  return norm;
}

// ----- gradient checking -------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0;
  std::string worst_param;
  size_t worst_index = 0;
  double analytic = 0, numeric = 0;
  size_t checked = 0;
};

// f builds a fresh graph on the given tape and returns a scalar loss tensor.
// Analytic grads come from one backward pass; the oracle is a central
// difference f(w+eps) - f(w-eps) / 2eps evaluated in R's own precision, so run
// this on the double instantiation when you need a tight oracle.
// `stride` spot-checks every stride-th coordinate to keep big models tractable.
template <class R>
GradCheckReport grad_check(const std::function<Tensor<R>(Tape<R>&, ParameterStore<R>&)>& f,
                           ParameterStore<R>& ps, double eps, size_t stride = 1) {
  if (eps <= 0) throw std::invalid_argument("grad_check: eps must be positive");
  if (stride == 0) stride = 1;
  ps.zero_grads();
  {
    Tape<R> tape;
    Tensor<R> loss = f(tape, ps);
    tape.backward(loss, ps);
  }
  auto eval = [&]() -> double {
    Tape<R> tape;
    return static_cast<double>(f(tape, ps).data()[0]);
  };
  GradCheckReport rep;
  for (auto& name : ps.names()) {
    auto& t = ps.get(name);
    for (size_t i = 0; i < t.st->v.size(); i += stride) {
      const R keep = t.st->v[i];
      t.st->v[i] = static_cast<R>(static_cast<double>(keep) + eps);
      const double up = eval();
      t.st->v[i] = static_cast<R>(static_cast<double>(keep) - eps);
      const double dn = eval();
      t.st->v[i] = keep;
      const double fd = (up - dn) / (2 * eps);
      const double an = static_cast<double>(t.st->g[i]);
      const double rel =
          std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1.0});
      rep.checked++;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = name;
        rep.worst_index = i;
        rep.analytic = an;
        rep.numeric = fd;
      }
    }
  }
  return rep;
}

}  // namespace umlab::numcore
