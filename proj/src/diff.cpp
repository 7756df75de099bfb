#include "pdelab/diff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "pdelab/errors.hpp"
#include "pdelab/rng.hpp"
#include "pdelab/spectral.hpp"

namespace pdelab::ad {

std::size_t shape_size(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
Tensor<T>::Tensor(std::vector<std::size_t> s, T fill) : shape(std::move(s)), data(shape_size(shape), fill) {}

template <class T>
Tensor<T>::Tensor(std::vector<std::size_t> s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_size(shape))
    throw ShapeError("tensor: " + std::to_string(data.size()) + " values for shape " + shape_string(shape));
}

template <class T>
std::size_t Tensor<T>::rows() const noexcept {
  if (shape.empty()) return 1;
  return shape.back() == 0 ? 0 : data.size() / shape.back();
}

// ---------------------------------------------------------------------------
// Graph

template <class T>
Graph<T>::Graph() {
#ifdef NDEBUG
  check_finite_ = false;
#else
  check_finite_ = true;
#endif
}

template <class T>
Var Graph<T>::leaf(Tensor<T> value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), {}, {}, requires_grad});
  return Var{nodes_.size() - 1};
}

template <class T>
Var Graph<T>::record(Tensor<T> value, std::initializer_list<Var> inputs, Backward backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

template <class T>
Var Graph<T>::record(Tensor<T> value, std::span<const Var> inputs, Backward backward) {
  bool needs = false;
  for (Var v : inputs) {
    if (v.id >= nodes_.size()) throw std::out_of_range("graph: input refers to an unknown node");
    needs = needs || nodes_[v.id].requires_grad;
  }
  if (check_finite_)
    for (const T& x : value.data)
      if (!std::isfinite(x)) throw std::domain_error("graph: operation produced a non-finite value");
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : Backward{}, needs});
  return Var{nodes_.size() - 1};
}

template <class T>
std::vector<T> Graph<T>::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.empty()) return std::vector<T>(n.value.size(), T(0));
  return n.grad;
}

template <class T>
std::span<T> Graph<T>::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

template <class T>
void Graph<T>::zero_grad() {
  for (Node& n : nodes_) n.grad.clear();
}

template <class T>
void Graph<T>::backward(Var root) {
  if (nodes_.at(root.id).value.size() != 1) throw ShapeError("backward: root must be a single value");
  zero_grad();
  trace_.clear();
  grad_buffer(root)[0] = T(1);
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward) continue;
    trace_.push_back(i);
    if (n.grad.empty()) continue;
    n.backward(*this, i);
  }
}

// ---------------------------------------------------------------------------
// Primitives

namespace {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const Mat<T>>;

// Eigen peels vectorised loops to the operands' alignment, so products on
// arbitrary heap pointers round differently from run to run. Products are
// therefore taken on Eigen-owned (maximally aligned) copies.
template <class T>
Mat<T> owned(const T* data, std::size_t rows, std::size_t cols) {
  return CMap<T>(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class T>
void accumulate(T* dst, const Mat<T>& src) {
  const T* s = src.data();
  for (Eigen::Index i = 0; i < src.size(); ++i) dst[i] += s[i];
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <class T>
T sign(T x) {
  return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0));
}

struct Dims3 {
  std::size_t B, D, C;
};

template <class T>
Dims3 dims3(const Graph<T>& g, Var x, const char* op) {
  const auto& s = g.shape(x);
  require(s.size() == 3, std::string(op) + ": expected a [B, D, C] tensor, got " + shape_string(s));
  return {s[0], s[1], s[2]};
}

}  // namespace

template <class T>
Var linear(Graph<T>& g, Var x, Var W, std::optional<Var> b) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& wv = g.value(W);
  require(wv.rank() == 2 && xv.rank() >= 1 && xv.last() == wv.shape[0],
          "linear: input " + shape_string(xv.shape) + " does not match weight " + shape_string(wv.shape));
  const std::size_t R = xv.rows(), Cin = wv.shape[0], Cout = wv.shape[1];
  if (b) require(g.value(*b).shape == std::vector<std::size_t>{Cout}, "linear: bias extent mismatch");

  auto shape = xv.shape;
  shape.back() = Cout;
  Tensor<T> y(shape);
  {
    const Mat<T> prod = owned(xv.data.data(), R, Cin) * owned(wv.data.data(), Cin, Cout);
    std::copy(prod.data(), prod.data() + prod.size(), y.data.begin());
  }
  if (b) {
    const auto& bv = g.value(*b).data;
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < Cout; ++c) y.data[r * Cout + c] += bv[c];
  }

  const std::size_t xi = x.id, wi = W.id, bi = b ? b->id : Var::kNone;
  std::vector<Var> inputs{x, W};
  if (b) inputs.push_back(*b);
  return g.record(std::move(y), inputs, [xi, wi, bi, R, Cin, Cout](Graph<T>& g, std::size_t self) {
    const Mat<T> dY = owned(g.grad_buffer(self).data(), R, Cout);
    if (g.requires_grad(xi))
      accumulate<T>(g.grad_buffer(xi).data(), dY * owned(g.value(wi).data.data(), Cin, Cout).transpose());
    if (g.requires_grad(wi))
      accumulate<T>(g.grad_buffer(wi).data(), owned(g.value(xi).data.data(), R, Cin).transpose() * dY);
    if (bi != Var::kNone && g.requires_grad(bi)) {
      T* db = g.grad_buffer(bi).data();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < Cout; ++c) db[c] += dY(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    }
  });
}

template <class T>
Var layer_normalize(Graph<T>& g, Var x, T eta) {
  const Tensor<T>& xv = g.value(x);
  const std::size_t C = xv.last(), R = xv.rows();
  require(xv.rank() >= 1 && C >= 2, "layer_normalize: need at least two channels");
  Tensor<T> y(xv.shape);
  std::vector<T> inv_std(R);
  for (std::size_t r = 0; r < R; ++r) {
    const T* in = xv.data.data() + r * C;
    T* out = y.data.data() + r * C;
    T m = 0;
    for (std::size_t c = 0; c < C; ++c) m += in[c];
    m /= static_cast<T>(C);
    T v = 0;
    for (std::size_t c = 0; c < C; ++c) v += (in[c] - m) * (in[c] - m);
    v /= static_cast<T>(C);
    const T s = T(1) / std::sqrt(v + eta);
    inv_std[r] = s;
    for (std::size_t c = 0; c < C; ++c) out[c] = (in[c] - m) * s;
  }
  const std::size_t xi = x.id;
  return g.record(std::move(y), {x}, [xi, R, C, inv_std = std::move(inv_std)](Graph<T>& g, std::size_t self) {
    const T* dy = g.grad_buffer(self).data();
    const T* y = g.value(self).data.data();
    T* dx = g.grad_buffer(xi).data();
    for (std::size_t r = 0; r < R; ++r) {
      T mdy = 0, mdyy = 0;
      for (std::size_t c = 0; c < C; ++c) {
        mdy += dy[r * C + c];
        mdyy += dy[r * C + c] * y[r * C + c];
      }
      mdy /= static_cast<T>(C);
      mdyy /= static_cast<T>(C);
      for (std::size_t c = 0; c < C; ++c)
        dx[r * C + c] += inv_std[r] * (dy[r * C + c] - mdy - y[r * C + c] * mdyy);
    }
  });
}

template <class T>
Var gelu(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  Tensor<T> y(xv.shape);
  const T rsqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T v = xv.data[i];
    y.data[i] = v * T(0.5) * (T(1) + std::erf(v * rsqrt2));
  }
  const std::size_t xi = x.id;
  return g.record(std::move(y), {x}, [xi, rsqrt2](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad_buffer(self);
    const auto& xv = g.value(xi).data;
    auto dx = g.grad_buffer(xi);
    const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * rsqrt2;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const T v = xv[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * rsqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      dx[i] += dy[i] * (cdf + v * pdf);
    }
  });
}

template <class T>
Var softmax_lastaxis(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  const std::size_t K = xv.last(), R = xv.rows();
  require(K >= 1, "softmax_lastaxis: empty last axis");
  Tensor<T> y(xv.shape);
  for (std::size_t r = 0; r < R; ++r) {
    const T* in = xv.data.data() + r * K;
    T* out = y.data.data() + r * K;
    const T m = *std::max_element(in, in + K);
    T s = 0;
    for (std::size_t j = 0; j < K; ++j) s += out[j] = std::exp(in[j] - m);
    for (std::size_t j = 0; j < K; ++j) out[j] /= s;
  }
  const std::size_t xi = x.id;
  return g.record(std::move(y), {x}, [xi, R, K](Graph<T>& g, std::size_t self) {
    const T* dy = g.grad_buffer(self).data();
    const T* y = g.value(self).data.data();
    T* dx = g.grad_buffer(xi).data();
    for (std::size_t r = 0; r < R; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < K; ++j) dot += dy[r * K + j] * y[r * K + j];
      for (std::size_t j = 0; j < K; ++j) dx[r * K + j] += y[r * K + j] * (dy[r * K + j] - dot);
    }
  });
}

template <class T>
Var unfold_circular(Graph<T>& g, Var x, int K) {
  const auto [B, D, C] = dims3(g, x, "unfold_circular");
  if (K < 1 || K % 2 == 0) throw ConfigError("unfold_circular: window K must be odd, got " + std::to_string(K));
  if (static_cast<std::size_t>(K) > D)
    throw ConfigError("unfold_circular: window K=" + std::to_string(K) + " exceeds extent D=" + std::to_string(D));
  const std::size_t Kz = static_cast<std::size_t>(K);
  const std::size_t half = Kz / 2;
  const Tensor<T>& xv = g.value(x);
  Tensor<T> y({B, D, Kz, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t j = 0; j < Kz; ++j) {
        const std::size_t src = (d + j + D - half) % D;
        std::copy_n(xv.data.data() + (b * D + src) * C, C, y.data.data() + ((b * D + d) * Kz + j) * C);
      }
  const std::size_t xi = x.id;
  return g.record(std::move(y), {x}, [xi, B = B, D = D, C = C, Kz, half](Graph<T>& g, std::size_t self) {
    const T* dy = g.grad_buffer(self).data();
    T* dx = g.grad_buffer(xi).data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t j = 0; j < Kz; ++j) {
          const std::size_t src = (d + j + D - half) % D;
          const T* from = dy + ((b * D + d) * Kz + j) * C;
          T* to = dx + (b * D + src) * C;
          for (std::size_t c = 0; c < C; ++c) to[c] += from[c];
        }
  });
}

template <class T>
Var dft_modulus(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  require(xv.rank() >= 1 && xv.last() >= 1, "dft_modulus: empty input");
  const std::size_t D = xv.last(), R = xv.rows(), M = D / 2 + 1;
  auto shape = xv.shape;
  shape.back() = M;
  Tensor<T> y(shape);
  std::vector<double> row(D);
  std::vector<spectral::Complex> modes(M);
  for (std::size_t r = 0; r < R; ++r) {
    std::copy_n(xv.data.data() + r * D, D, row.begin());
    spectral::rfft(row, modes);
    for (std::size_t k = 0; k < M; ++k) y.data[r * M + k] = static_cast<T>(std::abs(modes[k]));
  }
  const std::size_t xi = x.id;
  return g.record(std::move(y), {x}, [xi, R, D, M](Graph<T>& g, std::size_t self) {
    const T* dy = g.grad_buffer(self).data();
    const T* xv = g.value(xi).data.data();
    T* dx = g.grad_buffer(xi).data();
    std::vector<double> row(D), back(D);
    std::vector<spectral::Complex> modes(M);
    for (std::size_t r = 0; r < R; ++r) {
      std::copy_n(xv + r * D, D, row.begin());
      spectral::rfft(row, modes);
      // d|X_k|/dx_n = Re(conj(X_k) e^{-i theta_kn}) / |X_k|; the c2r sum counts
      // each interior mode twice, so those coefficients are halved.
      for (std::size_t k = 0; k < M; ++k) {
        const double a = std::abs(modes[k]);
        spectral::Complex c = a > 0.0 ? static_cast<double>(dy[r * M + k]) * modes[k] / a : spectral::Complex{};
        if (k != 0 && 2 * k != D) c *= 0.5;
        modes[k] = c;
      }
      spectral::irfft(modes, back);
      for (std::size_t n = 0; n < D; ++n) dx[r * D + n] += static_cast<T>(back[n]);
    }
  });
}

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
  return axpy(g, a, b, T(1));
}

template <class T>
Var axpy(Graph<T>& g, Var a, Var b, T w) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  require(av.shape == bv.shape, "add: shape mismatch " + shape_string(av.shape) + " vs " + shape_string(bv.shape));
  Tensor<T> y(av.shape);
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = av.data[i] + w * bv.data[i];
  const std::size_t ai = a.id, bi = b.id;
  return g.record(std::move(y), {a, b}, [ai, bi, w](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad_buffer(self);
    if (g.requires_grad(ai)) {
      auto da = g.grad_buffer(ai);
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
    }
    if (g.requires_grad(bi)) {
      auto db = g.grad_buffer(bi);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] += w * dy[i];
    }
  });
}

template <class T>
Var modulate(Graph<T>& g, Var x, Var cond, int scale_slot, int shift_slot) {
  const auto [B, D, C] = dims3(g, x, "modulate");
  const auto& cs = g.shape(cond);
  require(cs.size() == 2 && cs[0] == B && C > 0 && cs[1] % C == 0,
          "modulate: conditioning " + shape_string(cs) + " does not match input " + shape_string(g.shape(x)));
  const int slots = static_cast<int>(cs[1] / C);
  require(scale_slot >= 0 && scale_slot < slots && shift_slot < slots, "modulate: slot out of range");
  const std::size_t G = cs[1];
  const std::size_t so = static_cast<std::size_t>(scale_slot) * C;
  const bool has_shift = shift_slot >= 0;
  const std::size_t to = has_shift ? static_cast<std::size_t>(shift_slot) * C : 0;

  const T* xv = g.value(x).data.data();
  const T* cv = g.value(cond).data.data();
  Tensor<T> y({B, D, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t i = (b * D + d) * C + c;
        y.data[i] = xv[i] * cv[b * G + so + c] + (has_shift ? cv[b * G + to + c] : T(0));
      }
  const std::size_t xi = x.id, ci = cond.id;
  return g.record(std::move(y), {x, cond},
                  [xi, ci, B = B, D = D, C = C, G, so, to, has_shift](Graph<T>& g, std::size_t self) {
                    const T* dy = g.grad_buffer(self).data();
                    const T* cv = g.value(ci).data.data();
                    if (g.requires_grad(xi)) {
                      T* dx = g.grad_buffer(xi).data();
                      for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t d = 0; d < D; ++d)
                          for (std::size_t c = 0; c < C; ++c) {
                            const std::size_t i = (b * D + d) * C + c;
                            dx[i] += dy[i] * cv[b * G + so + c];
                          }
                    }
                    if (g.requires_grad(ci)) {
                      const T* xv = g.value(xi).data.data();
                      T* dc = g.grad_buffer(ci).data();
                      for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t d = 0; d < D; ++d)
                          for (std::size_t c = 0; c < C; ++c) {
                            const std::size_t i = (b * D + d) * C + c;
                            dc[b * G + so + c] += dy[i] * xv[i];
                            if (has_shift) dc[b * G + to + c] += dy[i];
                          }
                    }
                  });
}

template <class T>
Var window_dot(Graph<T>& g, Var q, Var kw, T scale) {
  const auto [B, D, C] = dims3(g, q, "window_dot");
  const auto& ks = g.shape(kw);
  require(ks.size() == 4 && ks[0] == B && ks[1] == D && ks[3] == C,
          "window_dot: windows " + shape_string(ks) + " do not match queries " + shape_string(g.shape(q)));
  const std::size_t K = ks[2];
  const T* qv = g.value(q).data.data();
  const T* kv = g.value(kw).data.data();
  Tensor<T> y({B, D, K});
  for (std::size_t p = 0; p < B * D; ++p)
    for (std::size_t j = 0; j < K; ++j) {
      const T* a = qv + p * C;
      const T* b = kv + (p * K + j) * C;
      T s = 0;
      for (std::size_t c = 0; c < C; ++c) s += a[c] * b[c];
      y.data[p * K + j] = scale * s;
    }
  const std::size_t qi = q.id, ki = kw.id;
  return g.record(std::move(y), {q, kw}, [qi, ki, P = B * D, C = C, K, scale](Graph<T>& g, std::size_t self) {
    const T* dy = g.grad_buffer(self).data();
    const T* qv = g.value(qi).data.data();
    const T* kv = g.value(ki).data.data();
    T* dq = g.requires_grad(qi) ? g.grad_buffer(qi).data() : nullptr;
    T* dk = g.requires_grad(ki) ? g.grad_buffer(ki).data() : nullptr;
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t j = 0; j < K; ++j) {
        const T s = scale * dy[p * K + j];
        const std::size_t w = (p * K + j) * C;
        if (dq)
          for (std::size_t c = 0; c < C; ++c) dq[p * C + c] += s * kv[w + c];
        if (dk)
          for (std::size_t c = 0; c < C; ++c) dk[w + c] += s * qv[p * C + c];
      }
  });
}

template <class T>
Var add_bias_lastaxis(Graph<T>& g, Var x, Var bias) {
  const Tensor<T>& xv = g.value(x);
  const Tensor<T>& bv = g.value(bias);
  const std::size_t K = xv.last(), R = xv.rows();
  require(bv.shape == std::vector<std::size_t>{K},
          "add_bias_lastaxis: bias " + shape_string(bv.shape) + " does not match " + shape_string(xv.shape));
  Tensor<T> y(xv.shape);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < K; ++j) y.data[r * K + j] = xv.data[r * K + j] + bv.data[j];
  const std::size_t xi = x.id, bi = bias.id;
  return g.record(std::move(y), {x, bias}, [xi, bi, R, K](Graph<T>& g, std::size_t self) {
    const T* dy = g.grad_buffer(self).data();
    if (g.requires_grad(xi)) {
      T* dx = g.grad_buffer(xi).data();
      for (std::size_t i = 0; i < R * K; ++i) dx[i] += dy[i];
    }
    if (g.requires_grad(bi)) {
      T* db = g.grad_buffer(bi).data();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t j = 0; j < K; ++j) db[j] += dy[r * K + j];
    }
  });
}

template <class T>
Var window_sum(Graph<T>& g, Var w, Var vw) {
  const auto& ws = g.shape(w);
  const auto& vs = g.shape(vw);
  require(ws.size() == 3 && vs.size() == 4 && vs[0] == ws[0] && vs[1] == ws[1] && vs[2] == ws[2],
          "window_sum: weights " + shape_string(ws) + " do not match windows " + shape_string(vs));
  const std::size_t P = ws[0] * ws[1], K = ws[2], C = vs[3];
  const T* wv = g.value(w).data.data();
  const T* vv = g.value(vw).data.data();
  Tensor<T> y({ws[0], ws[1], C});
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t j = 0; j < K; ++j) {
      const T a = wv[p * K + j];
      const T* v = vv + (p * K + j) * C;
      T* out = y.data.data() + p * C;
      for (std::size_t c = 0; c < C; ++c) out[c] += a * v[c];
    }
  const std::size_t wi = w.id, vi = vw.id;
  return g.record(std::move(y), {w, vw}, [wi, vi, P, K, C](Graph<T>& g, std::size_t self) {
    const T* dy = g.grad_buffer(self).data();
    const T* wv = g.value(wi).data.data();
    const T* vv = g.value(vi).data.data();
    T* dw = g.requires_grad(wi) ? g.grad_buffer(wi).data() : nullptr;
    T* dv = g.requires_grad(vi) ? g.grad_buffer(vi).data() : nullptr;
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t j = 0; j < K; ++j) {
        const std::size_t o = (p * K + j) * C;
        if (dw) {
          T s = 0;
          for (std::size_t c = 0; c < C; ++c) s += dy[p * C + c] * vv[o + c];
          dw[p * K + j] += s;
        }
        if (dv)
          for (std::size_t c = 0; c < C; ++c) dv[o + c] += wv[p * K + j] * dy[p * C + c];
      }
  });
}

template <class T>
Var reparameterize(Graph<T>& g, Var mu, Var log_sigma, const Tensor<T>& eps, T lo, T hi) {
  const Tensor<T>& mv = g.value(mu);
  const Tensor<T>& lv = g.value(log_sigma);
  require(mv.shape == lv.shape && eps.shape == mv.shape, "reparameterize: shape mismatch");
  Tensor<T> y(mv.shape);
  for (std::size_t i = 0; i < y.size(); ++i)
    y.data[i] = mv.data[i] + std::exp(std::clamp(lv.data[i], lo, hi)) * eps.data[i];
  const std::size_t mi = mu.id, li = log_sigma.id;
  return g.record(std::move(y), {mu, log_sigma}, [mi, li, eps, lo, hi](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad_buffer(self);
    if (g.requires_grad(mi)) {
      auto dm = g.grad_buffer(mi);
      for (std::size_t i = 0; i < dy.size(); ++i) dm[i] += dy[i];
    }
    if (g.requires_grad(li)) {
      const auto& lv = g.value(li).data;
      auto dl = g.grad_buffer(li);
      for (std::size_t i = 0; i < dy.size(); ++i)
        if (lv[i] > lo && lv[i] < hi) dl[i] += dy[i] * eps.data[i] * std::exp(lv[i]);
    }
  });
}

template <class T>
Var reshape(Graph<T>& g, Var x, std::vector<std::size_t> shape) {
  const Tensor<T>& xv = g.value(x);
  require(shape_size(shape) == xv.size(), "reshape: " + shape_string(xv.shape) + " -> " + shape_string(shape));
  Tensor<T> y(std::move(shape), xv.data);
  const std::size_t xi = x.id;
  return g.record(std::move(y), {x}, [xi](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad_buffer(self);
    auto dx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
}

template <class T>
Var mse(Graph<T>& g, Var pred, Var truth) {
  const Tensor<T>& p = g.value(pred);
  const Tensor<T>& t = g.value(truth);
  require(p.shape == t.shape && p.size() > 0, "mse: shape mismatch");
  T s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p.data[i] - t.data[i]) * (p.data[i] - t.data[i]);
  const T n = static_cast<T>(p.size());
  const std::size_t pi = pred.id, ti = truth.id;
  return g.record(Tensor<T>({1}, {s / n}), {pred, truth}, [pi, ti, n](Graph<T>& g, std::size_t self) {
    const T gy = g.grad_buffer(self)[0] * T(2) / n;
    const auto& p = g.value(pi).data;
    const auto& t = g.value(ti).data;
    if (g.requires_grad(pi)) {
      auto d = g.grad_buffer(pi);
      for (std::size_t i = 0; i < p.size(); ++i) d[i] += gy * (p[i] - t[i]);
    }
    if (g.requires_grad(ti)) {
      auto d = g.grad_buffer(ti);
      for (std::size_t i = 0; i < p.size(); ++i) d[i] -= gy * (p[i] - t[i]);
    }
  });
}

template <class T>
Var mae(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  require(av.shape == bv.shape && av.size() > 0, "mae: shape mismatch");
  T s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av.data[i] - bv.data[i]);
  const T n = static_cast<T>(av.size());
  const std::size_t ai = a.id, bi = b.id;
  return g.record(Tensor<T>({1}, {s / n}), {a, b}, [ai, bi, n](Graph<T>& g, std::size_t self) {
    const T gy = g.grad_buffer(self)[0] / n;
    const auto& av = g.value(ai).data;
    const auto& bv = g.value(bi).data;
    if (g.requires_grad(ai)) {
      auto d = g.grad_buffer(ai);
      for (std::size_t i = 0; i < av.size(); ++i) d[i] += gy * sign(av[i] - bv[i]);
    }
    if (g.requires_grad(bi)) {
      auto d = g.grad_buffer(bi);
      for (std::size_t i = 0; i < av.size(); ++i) d[i] -= gy * sign(av[i] - bv[i]);
    }
  });
}

template <class T>
Var crps(Graph<T>& g, Var truth, std::span<const Var> members) {
  require(!members.empty(), "crps: need at least one ensemble member");
  const Tensor<T>& tv = g.value(truth);
  require(tv.size() > 0, "crps: empty truth");
  for (Var m : members) require(g.shape(m) == tv.shape, "crps: member shape differs from truth");
  const std::size_t M = members.size(), P = tv.size();
  const T m = static_cast<T>(M);

  std::vector<const T*> xs(M);
  for (std::size_t i = 0; i < M; ++i) xs[i] = g.value(members[i]).data.data();
  T total = 0;
  for (std::size_t p = 0; p < P; ++p) {
    const T y = tv.data[p];
    T skill = 0, spread = 0;
    for (std::size_t i = 0; i < M; ++i) {
      skill += std::abs(y - xs[i][p]);
      for (std::size_t j = 0; j < M; ++j) spread += std::abs(xs[i][p] - xs[j][p]);
    }
    total += skill / m - spread / (T(2) * m * m);
  }

  std::vector<std::size_t> ids(M);
  for (std::size_t i = 0; i < M; ++i) ids[i] = members[i].id;
  std::vector<Var> inputs(members.begin(), members.end());
  inputs.push_back(truth);
  const std::size_t ti = truth.id;
  return g.record(Tensor<T>({1}, {total / static_cast<T>(P)}), inputs,
                  [ti, ids, P, m](Graph<T>& g, std::size_t self) {
                    const T gy = g.grad_buffer(self)[0] / static_cast<T>(P);
                    const std::size_t M = ids.size();
                    const auto& tv = g.value(ti).data;
                    std::vector<const T*> xs(M);
                    for (std::size_t i = 0; i < M; ++i) xs[i] = g.value(ids[i]).data.data();
                    for (std::size_t i = 0; i < M; ++i) {
                      if (!g.requires_grad(ids[i])) continue;
                      auto d = g.grad_buffer(ids[i]);
                      for (std::size_t p = 0; p < P; ++p) {
                        T s = 0;
                        for (std::size_t j = 0; j < M; ++j) s += sign(xs[i][p] - xs[j][p]);
                        d[p] += gy * (sign(xs[i][p] - tv[p]) / m - s / (m * m));
                      }
                    }
                    if (g.requires_grad(ti)) {
                      auto d = g.grad_buffer(ti);
                      for (std::size_t p = 0; p < P; ++p) {
                        T s = 0;
                        for (std::size_t i = 0; i < M; ++i) s += sign(tv[p] - xs[i][p]);
                        d[p] += gy * s / m;
                      }
                    }
                  });
}

template <class T>
Var weighted_sum(Graph<T>& g, Var x, const Tensor<T>& w) {
  const Tensor<T>& xv = g.value(x);
  require(w.size() == xv.size(), "weighted_sum: weight count mismatch");
  T s = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += w.data[i] * xv.data[i];
  const std::size_t xi = x.id;
  return g.record(Tensor<T>({1}, {s}), {x}, [xi, w](Graph<T>& g, std::size_t self) {
    const T gy = g.grad_buffer(self)[0];
    auto dx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gy * w.data[i];
  });
}

template <class T>
Var mean(Graph<T>& g, Var x) {
  const Tensor<T>& xv = g.value(x);
  require(xv.size() > 0, "mean: empty input");
  T s = 0;
  for (T v : xv.data) s += v;
  const T n = static_cast<T>(xv.size());
  const std::size_t xi = x.id;
  return g.record(Tensor<T>({1}, {s / n}), {x}, [xi, n](Graph<T>& g, std::size_t self) {
    const T gy = g.grad_buffer(self)[0] / n;
    for (T& d : g.grad_buffer(xi)) d += gy;
  });
}

#define PDELAB_AD_INSTANTIATE(T)                                                                  \
  template struct Tensor<T>;                                                                      \
  template class Graph<T>;                                                                        \
  template Var linear<T>(Graph<T>&, Var, Var, std::optional<Var>);                                \
  template Var layer_normalize<T>(Graph<T>&, Var, T);                                             \
  template Var gelu<T>(Graph<T>&, Var);                                                           \
  template Var softmax_lastaxis<T>(Graph<T>&, Var);                                               \
  template Var unfold_circular<T>(Graph<T>&, Var, int);                                           \
  template Var dft_modulus<T>(Graph<T>&, Var);                                                    \
  template Var add<T>(Graph<T>&, Var, Var);                                                       \
  template Var axpy<T>(Graph<T>&, Var, Var, T);                                                   \
  template Var modulate<T>(Graph<T>&, Var, Var, int, int);                                        \
  template Var window_dot<T>(Graph<T>&, Var, Var, T);                                             \
  template Var add_bias_lastaxis<T>(Graph<T>&, Var, Var);                                         \
  template Var window_sum<T>(Graph<T>&, Var, Var);                                                \
  template Var reparameterize<T>(Graph<T>&, Var, Var, const Tensor<T>&, T, T);                    \
  template Var reshape<T>(Graph<T>&, Var, std::vector<std::size_t>);                              \
  template Var mse<T>(Graph<T>&, Var, Var);                                                       \
  template Var mae<T>(Graph<T>&, Var, Var);                                                       \
  template Var crps<T>(Graph<T>&, Var, std::span<const Var>);                                     \
  template Var weighted_sum<T>(Graph<T>&, Var, const Tensor<T>&);                                 \
  template Var mean<T>(Graph<T>&, Var);

PDELAB_AD_INSTANTIATE(float)
PDELAB_AD_INSTANTIATE(double)

#undef PDELAB_AD_INSTANTIATE

// ---------------------------------------------------------------------------
// Gradient checking

namespace {

double objective(const OpBuilder& op, const std::vector<Tensor<double>>& inputs, const Tensor<double>& w) {
  Graph<double> g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.constant(t));
  const Var y = op(g, vars);
  if (g.value(y).size() != w.size()) throw ShapeError("check_gradients: output size changed between evaluations");
  return g.value(weighted_sum(g, y, w)).data[0];
}

}  // namespace

GradCheckReport check_gradients(const std::string& name, const OpBuilder& op, std::vector<Tensor<double>> inputs,
                                const GradCheckOptions& options) {
  Rng rng = make_rng(options.seed, {0x6763});
  std::uniform_real_distribution<double> uni(-1.0, 1.0);

  Graph<double> g;
  g.set_check_finite(true);
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.parameter(t));
  const Var y = op(g, vars);
  Tensor<double> w(g.shape(y));
  for (double& v : w.data) v = uni(rng);
  g.backward(weighted_sum(g, y, w));

  GradCheckReport report;
  report.op = name;
  report.tolerance = options.tolerance;
  const double h = options.step;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::vector<double> a = g.grad(vars[k]);
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = inputs[k].data[i];
      inputs[k].data[i] = x0 + h;
      const double fp = objective(op, inputs, w);
      inputs[k].data[i] = x0 - h;
      const double fm = objective(op, inputs, w);
      inputs[k].data[i] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double denom = std::max({std::abs(a[i]), std::abs(numeric), options.abs_floor});
      worst = std::max(worst, std::abs(a[i] - numeric) / denom);
    }
    report.max_rel_error.push_back(worst);
    report.worst = std::max(report.worst, worst);
  }
  report.passed = report.worst < options.tolerance;
  return report;
}

GradCheckReport check_gradients(const std::string& name, const OpBuilder& op,
                                const std::vector<std::vector<std::size_t>>& input_shapes,
                                const GradCheckOptions& options) {
  Rng rng = make_rng(options.seed, {0x696e});
  std::uniform_real_distribution<double> uni(-options.scale, options.scale);
  std::vector<Tensor<double>> inputs;
  for (const auto& s : input_shapes) {
    Tensor<double> t(s);
    for (double& v : t.data) v = uni(rng);
    inputs.push_back(std::move(t));
  }
  return check_gradients(name, op, std::move(inputs), options);
}

const std::map<std::string, RegisteredOp>& op_registry() {
  using Shapes = std::vector<std::vector<std::size_t>>;
  using In = std::span<const Var>;
  static const std::map<std::string, RegisteredOp> registry = [] {
    std::map<std::string, RegisteredOp> r;
    r["linear"] = {[](Graph<double>& g, In v) { return linear(g, v[0], v[1]); }, Shapes{{2, 3, 4}, {4, 5}}};
    r["linear_bias"] = {[](Graph<double>& g, In v) { return linear(g, v[0], v[1], v[2]); },
                        Shapes{{2, 3, 4}, {4, 5}, {5}}};
    r["layer_normalize"] = {[](Graph<double>& g, In v) { return layer_normalize(g, v[0]); }, Shapes{{2, 3, 6}}};
    r["gelu"] = {[](Graph<double>& g, In v) { return gelu(g, v[0]); }, Shapes{{3, 5}}};
    r["softmax_lastaxis"] = {[](Graph<double>& g, In v) { return softmax_lastaxis(g, v[0]); }, Shapes{{5, 9}}};
    r["unfold_circular"] = {[](Graph<double>& g, In v) { return unfold_circular(g, v[0], 3); }, Shapes{{2, 5, 3}}};
    r["dft_modulus"] = {[](Graph<double>& g, In v) { return dft_modulus(g, v[0]); }, Shapes{{2, 8}}};
    r["dft_modulus_odd"] = {[](Graph<double>& g, In v) { return dft_modulus(g, v[0]); }, Shapes{{3, 7}}};
    r["add"] = {[](Graph<double>& g, In v) { return add(g, v[0], v[1]); }, Shapes{{2, 3}, {2, 3}}};
    r["axpy"] = {[](Graph<double>& g, In v) { return axpy(g, v[0], v[1], 0.7); }, Shapes{{2, 3}, {2, 3}}};
    r["modulate"] = {[](Graph<double>& g, In v) { return modulate(g, v[0], v[1], 0, 1); },
                     Shapes{{2, 4, 3}, {2, 12}}};
    r["modulate_scale_only"] = {[](Graph<double>& g, In v) { return modulate(g, v[0], v[1], 2, -1); },
                                Shapes{{2, 4, 3}, {2, 9}}};
    r["window_dot"] = {[](Graph<double>& g, In v) { return window_dot(g, v[0], v[1], 1.0 / std::sqrt(3.0)); },
                       Shapes{{2, 4, 3}, {2, 4, 3, 3}}};
    r["add_bias_lastaxis"] = {[](Graph<double>& g, In v) { return add_bias_lastaxis(g, v[0], v[1]); },
                              Shapes{{2, 4, 3}, {3}}};
    r["window_sum"] = {[](Graph<double>& g, In v) { return window_sum(g, v[0], v[1]); },
                       Shapes{{2, 4, 3}, {2, 4, 3, 5}}};
    r["reparameterize"] = {[](Graph<double>& g, In v) {
                             Tensor<double> eps(g.shape(v[0]));
                             Rng rng = make_rng(7, {});
                             std::normal_distribution<double> n(0.0, 1.0);
                             for (double& e : eps.data) e = n(rng);
                             return reparameterize(g, v[0], v[1], eps);
                           },
                           Shapes{{2, 5}, {2, 5}}};
    r["reshape"] = {[](Graph<double>& g, In v) { return reshape(g, v[0], {3, 4}); }, Shapes{{2, 6}}};
    r["mse"] = {[](Graph<double>& g, In v) { return mse(g, v[0], v[1]); }, Shapes{{2, 5}, {2, 5}}};
    r["mae"] = {[](Graph<double>& g, In v) { return mae(g, v[0], v[1]); }, Shapes{{2, 5}, {2, 5}}};
    r["crps"] = {[](Graph<double>& g, In v) { return crps(g, v[0], v.subspan(1)); }, Shapes{{6}, {6}, {6}, {6}}};
    r["mean"] = {[](Graph<double>& g, In v) { return mean(g, v[0]); }, Shapes{{3, 4}}};
    return r;
  }();
  return registry;
}

GradCheckReport check_gradients(const std::string& registered_name, const GradCheckOptions& options) {
  const RegisteredOp& op = op_registry().at(registered_name);
  return check_gradients(registered_name, op.build, op.input_shapes, options);
}

}  // namespace pdelab::ad
