#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pdelab::ad {

/// Dense row-major array. The last axis is contiguous.
template <class T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, T fill = T(0));
  Tensor(std::vector<std::size_t> s, std::vector<T> values);

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t extent(std::size_t axis) const { return shape.at(axis); }
  /// Product of all extents except the last.
  std::size_t rows() const noexcept;
  std::size_t last() const noexcept { return shape.empty() ? 1 : shape.back(); }
};

std::size_t shape_size(const std::vector<std::size_t>& shape);
std::string shape_string(const std::vector<std::size_t>& shape);

/// Handle to a node of a Graph.
struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const noexcept { return id != kNone; }
};

/// Reverse-mode tape. Nodes are appended in execution order and their
/// backward closures run in exactly the reverse order. A node takes part in
/// backward only if one of its inputs requires a gradient.
template <class T>
class Graph {
 public:
  /// Adjoint callback for node `self`; reads grad(self) and accumulates into
  /// the grad buffers of its inputs.
  using Backward = std::function<void(Graph&, std::size_t self)>;

  Graph();

  Var leaf(Tensor<T> value, bool requires_grad = false);
  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }
  Var parameter(Tensor<T> value) { return leaf(std::move(value), true); }

  /// Appends an operation output. Used by every primitive and available for
  /// custom operations.
  Var record(Tensor<T> value, std::initializer_list<Var> inputs, Backward backward);
  Var record(Tensor<T> value, std::span<const Var> inputs, Backward backward);

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  const std::vector<std::size_t>& shape(Var v) const { return nodes_.at(v.id).value.shape; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient of the last backward pass; zeros if the node received none.
  std::vector<T> grad(Var v) const;
  /// Accumulation buffer, allocated zero-filled on first use.
  std::span<T> grad_buffer(Var v);
  std::span<T> grad_buffer(std::size_t id) { return grad_buffer(Var{id}); }
  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Clears all gradients, seeds d(root)/d(root) = 1 and runs the adjoints.
  /// The root must hold a single value.
  void backward(Var root);
  void zero_grad();

  std::size_t node_count() const noexcept { return nodes_.size(); }
  /// Node ids whose adjoints ran in the last backward pass, in run order.
  const std::vector<std::size_t>& last_backward_order() const noexcept { return trace_; }

  /// Reject non-finite outputs of every recorded operation. On by default in
  /// debug builds.
  void set_check_finite(bool on) noexcept { check_finite_ = on; }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    Backward backward;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  std::vector<std::size_t> trace_;
  bool check_finite_;
};

// Primitives. Activations are laid out [batch, position, channel] with the
// channel axis last; window tensors are [batch, position, offset, channel].

/// y = x W (+ b) along the last axis. x: [..., Cin], W: [Cin, Cout], b: [Cout].
template <class T>
Var linear(Graph<T>& g, Var x, Var W, std::optional<Var> b = std::nullopt);

/// Affine-free normalisation over the last axis:
/// (x - mean) / sqrt(var + eta), var the biased variance.
template <class T>
Var layer_normalize(Graph<T>& g, Var x, T eta = T(1e-5));

/// Exact GELU, x * Phi(x).
template <class T>
Var gelu(Graph<T>& g, Var x);

/// Max-shifted softmax over the last axis.
template <class T>
Var softmax_lastaxis(Graph<T>& g, Var x);

/// x: [B, D, C] -> [B, D, K, C] with out[b, d, j, c] = x[b, (d + j - (K-1)/2) mod D, c].
/// Requires odd K <= D.
template <class T>
Var unfold_circular(Graph<T>& g, Var x, int K);

/// Modulus of the unnormalised real DFT along the last axis: [..., D] -> [..., D/2 + 1].
/// The adjoint is defined as zero where the modulus vanishes.
template <class T>
Var dft_modulus(Graph<T>& g, Var x);

template <class T>
Var add(Graph<T>& g, Var a, Var b);

/// a + w * b for same-shape a, b.
template <class T>
Var axpy(Graph<T>& g, Var a, Var b, T w);

/// Per-sample feature-wise modulation. x: [B, D, C], cond: [B, G*C].
/// y[b, d, c] = x[b, d, c] * cond[b, scale_slot*C + c] + cond[b, shift_slot*C + c].
/// A negative shift_slot omits the shift.
template <class T>
Var modulate(Graph<T>& g, Var x, Var cond, int scale_slot, int shift_slot);

/// Attention logits. q: [B, D, C], kw: [B, D, K, C] -> [B, D, K],
/// out[b, d, j] = scale * sum_c q[b, d, c] kw[b, d, j, c].
template <class T>
Var window_dot(Graph<T>& g, Var q, Var kw, T scale);

/// x: [..., K] plus bias[K] broadcast over the leading axes.
template <class T>
Var add_bias_lastaxis(Graph<T>& g, Var x, Var bias);

/// w: [B, D, K], vw: [B, D, K, C] -> [B, D, C], out = sum_j w[., j] vw[., j, .].
template <class T>
Var window_sum(Graph<T>& g, Var w, Var vw);

/// mu + exp(clamp(log_sigma, lo, hi)) * eps, eps fixed. The adjoint with
/// respect to log_sigma is zero where the clamp is active.
template <class T>
Var reparameterize(Graph<T>& g, Var mu, Var log_sigma, const Tensor<T>& eps, T lo = T(-10), T hi = T(5));

/// Same data, new shape of equal size.
template <class T>
Var reshape(Graph<T>& g, Var x, std::vector<std::size_t> shape);

/// mean((pred - truth)^2) -> [1].
template <class T>
Var mse(Graph<T>& g, Var pred, Var truth);

/// mean|a - b| -> [1]. Subgradient 0 at ties.
template <class T>
Var mae(Graph<T>& g, Var a, Var b);

/// Ensemble CRPS averaged over all entries of truth -> [1]:
/// (1/m) sum_i |y - x_i| - (1/(2 m^2)) sum_i sum_j |x_i - x_j|.
template <class T>
Var crps(Graph<T>& g, Var truth, std::span<const Var> members);

/// sum_i w_i x_i -> [1].
template <class T>
Var weighted_sum(Graph<T>& g, Var x, const Tensor<T>& w);

/// Mean of all entries -> [1].
template <class T>
Var mean(Graph<T>& g, Var x);

// Gradient checking (always 64-bit).

using OpBuilder = std::function<Var(Graph<double>&, std::span<const Var>)>;

struct GradCheckReport {
  std::string op;
  /// Per input: max over entries of |analytic - numeric| / max(|analytic|, |numeric|, floor).
  std::vector<double> max_rel_error;
  double worst = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double tolerance = 1e-6;
  double step = 1e-5;
  double abs_floor = 1e-4;
  std::uint64_t seed = 0;
  /// Inputs are drawn uniform in [-scale, scale].
  double scale = 1.0;
};

/// Compares backward against central differences of the scalar objective
/// sum_i w_i op(inputs)_i with random fixed weights w.
GradCheckReport check_gradients(const std::string& name, const OpBuilder& op,
                                const std::vector<std::vector<std::size_t>>& input_shapes,
                                const GradCheckOptions& options = {});

/// Same, with explicit input values.
GradCheckReport check_gradients(const std::string& name, const OpBuilder& op, std::vector<Tensor<double>> inputs,
                                const GradCheckOptions& options = {});

struct RegisteredOp {
  OpBuilder build;
  std::vector<std::vector<std::size_t>> input_shapes;
};

/// Every primitive, wrapped with small representative shapes.
const std::map<std::string, RegisteredOp>& op_registry();

/// Runs a registered op; throws std::out_of_range for an unknown name.
GradCheckReport check_gradients(const std::string& registered_name, const GradCheckOptions& options = {});

}  // namespace pdelab::ad
