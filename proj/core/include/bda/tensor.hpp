#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace bda {

// Extents, channels-first: {C, H, W} for feature maps, {N} for vectors,
// {1} for scalars.
using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
int shape_numel(const Shape& s);

namespace detail {

// One node of the tape. Leaves have no parents; recorded operation results
// keep their inputs alive through `parents` and push gradients to them via
// `backward_rule`. `grad` is scratch owned by backward().
struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(std::span<const double>)> backward_rule;

  bool is_leaf() const { return parents.empty(); }
  bool wants_grad() const { return requires_grad || !parents.empty(); }
};

}  // namespace detail

// Scoped switch that stops operations from recording onto the tape.
// Used for inference and for the finite-difference oracle.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_recording_enabled();

class GradientMap;

// Dense double-precision tensor handle with value semantics over shared
// storage. Copies share the buffer; mutation is reserved to the optimizer
// (values_mut) and happens only between tape lifetimes.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);

  static Tensor from_values(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }
  static Tensor scalar(double v) { return from_values({1}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int size() const;

  std::span<const double> values() const;
  // In-place access; callers must not mutate a tensor that participates in a
  // live tape.
  std::span<double> values_mut();
  double item() const;  // scalar tensors only
  double at(int i) const { return values()[static_cast<std::size_t>(i)]; }

  // Deep copy of the values; detached from any tape, requires_grad off.
  Tensor clone() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;
  bool wants_grad() const;

  // Stable identity used as the key of GradientMap.
  const void* id() const { return impl_.get(); }

  // --- hooks for operation implementations ---------------------------------
  // Builds an operation result. When recording is enabled and any parent
  // wants a gradient, the rule is attached and parents are retained.
  // Every result is checked for NaN/Inf (throws NumericalError).
  static Tensor make_op_result(const char* op_name, Shape shape,
                               std::vector<double> values,
                               std::vector<Tensor> parents,
                               std::function<void(std::span<const double>)> backward_rule);
  // Gradient scratch of this node; valid only while backward() runs the rules.
  std::span<double> grad_buffer() const;

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
  friend GradientMap backward(const Tensor& loss);
};

// Result of one backward() traversal: gradient per requires_grad leaf.
class GradientMap {
 public:
  bool contains(const Tensor& leaf) const { return by_leaf_.count(leaf.id()) != 0; }
  const Tensor& at(const Tensor& leaf) const;
  std::size_t size() const { return by_leaf_.size(); }
  void insert(const void* key, Tensor grad) { by_leaf_.emplace(key, std::move(grad)); }

 private:
  std::unordered_map<const void*, Tensor> by_leaf_;
};

// --- elementwise and structural operations ---------------------------------
// add/mul accept equal shapes or one operand in a broadcast form:
// scalar, spatial gate {1,h,w} against {C,h,w}, channel gate {C,1,1}
// against {C,h,w}. Anything else is rejected with both shapes reported.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

// {C1,h,w} + {C2,h,w} -> {C1+C2,h,w}
Tensor concat_channels(const Tensor& a, const Tensor& b);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
// Per-pixel softmax over the channel axis of a {C,h,w} tensor, C >= 2.
Tensor softmax_channels(const Tensor& x);

Tensor sum(const Tensor& x);  // -> scalar
Tensor reshape(const Tensor& x, Shape shape);

// Reverse traversal from a scalar loss. Gradients are reset at the start of
// every call, so repeated calls on the same tape are identical.
GradientMap backward(const Tensor& loss);

// --- verification oracle ----------------------------------------------------
// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per element. Runs f
// under NoGradGuard; independent of the reverse-mode path it is used to check.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f,
                            const Tensor& x, double step = 1e-5);

// max over elements of |g - ref| / max(1, |g|)
double max_rel_error(const Tensor& analytic, const Tensor& reference);

// Records the smallest |pre-activation| seen by kinked ops (relu) so
// gradcheck harnesses can confirm the finite-difference step never crosses a
// non-differentiable point.
struct KinkMonitor {
  static void enable(bool on);
  static void reset();
  static double min_abs();
};

}  // namespace bda
