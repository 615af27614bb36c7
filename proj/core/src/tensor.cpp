#include "bda/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "bda/errors.hpp"

namespace bda {

namespace {

thread_local bool g_grad_enabled = true;
thread_local bool g_kink_monitor_on = false;
thread_local double g_kink_min_abs = std::numeric_limits<double>::infinity();

void ensure_finite(const char* op_name, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericalError(std::string(op_name) + ": non-finite value in result");
    }
  }
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

int shape_numel(const Shape& s) {
  int n = 1;
  for (int e : s) {
    if (e <= 0) throw std::invalid_argument("non-positive extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_recording_enabled() { return g_grad_enabled; }

void KinkMonitor::enable(bool on) { g_kink_monitor_on = on; }
void KinkMonitor::reset() { g_kink_min_abs = std::numeric_limits<double>::infinity(); }
double KinkMonitor::min_abs() { return g_kink_min_abs; }

Tensor::Tensor(Shape shape, double fill) {
  const int n = shape_numel(shape);
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->values.assign(static_cast<std::size_t>(n), fill);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values) {
  const int n = shape_numel(shape);
  if (static_cast<std::size_t>(n) != values.size()) {
    throw std::invalid_argument("from_values: shape " + shape_str(shape) + " needs " +
                                std::to_string(n) + " values, got " +
                                std::to_string(values.size()));
  }
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->values = std::move(values);
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw std::invalid_argument("use of undefined tensor");
  return impl_->shape;
}

int Tensor::size() const { return static_cast<int>(values().size()); }

std::span<const double> Tensor::values() const {
  if (!impl_) throw std::invalid_argument("use of undefined tensor");
  return impl_->values;
}

std::span<double> Tensor::values_mut() {
  if (!impl_) throw std::invalid_argument("use of undefined tensor");
  return impl_->values;
}

double Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("item: tensor of shape " + shape_str(shape()) + " is not scalar");
  }
  return values()[0];
}

Tensor Tensor::clone() const {
  return from_values(shape(), std::vector<double>(values().begin(), values().end()));
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_) throw std::invalid_argument("use of undefined tensor");
  if (on && !impl_->is_leaf()) {
    throw std::invalid_argument("set_requires_grad: only leaf tensors can be marked");
  }
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return impl_ && impl_->is_leaf(); }
bool Tensor::wants_grad() const { return impl_ && impl_->wants_grad(); }

std::span<double> Tensor::grad_buffer() const {
  if (!impl_) throw std::invalid_argument("use of undefined tensor");
  return impl_->grad;
}

Tensor Tensor::make_op_result(const char* op_name, Shape shape, std::vector<double> values,
                              std::vector<Tensor> parents,
                              std::function<void(std::span<const double>)> backward_rule) {
  const int n = shape_numel(shape);
  if (static_cast<std::size_t>(n) != values.size()) {
    throw std::invalid_argument(std::string(op_name) + ": internal shape/value size mismatch");
  }
  ensure_finite(op_name, values);

  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->values = std::move(values);

  bool record = false;
  if (g_grad_enabled) {
    for (const Tensor& p : parents) {
      if (p.wants_grad()) {
        record = true;
        break;
      }
    }
  }
  if (record) {
    t.impl_->requires_grad = true;
    t.impl_->parents.reserve(parents.size());
    for (const Tensor& p : parents) t.impl_->parents.push_back(p.impl_);
    t.impl_->backward_rule = std::move(backward_rule);
  }
  return t;
}

const Tensor& GradientMap::at(const Tensor& leaf) const {
  auto it = by_leaf_.find(leaf.id());
  if (it == by_leaf_.end()) {
    throw std::invalid_argument("GradientMap: no gradient recorded for this leaf");
  }
  return it->second;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

GradientMap backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a defined scalar tensor");
  }
  auto* root = loss.impl_.get();
  if (root->parents.empty()) {
    throw std::invalid_argument("backward: loss is not the result of recorded operations");
  }

  // Iterative DFS postorder; parents appear before their consumers.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  struct Frame {
    detail::TensorImpl* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  seen.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      detail::TensorImpl* p = f.node->parents[f.next_parent++].get();
      if (p->wants_grad() && seen.insert(p).second) {
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  for (auto* n : order) n->grad.assign(n->values.size(), 0.0);
  root->grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* n = *it;
    if (n->backward_rule) n->backward_rule(n->grad);
  }

  GradientMap out;
  for (auto* n : order) {
    if (n->requires_grad && n->is_leaf()) {
      out.insert(n, Tensor::from_values(n->shape, n->grad));
    }
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
  return out;
}

// ---------------------------------------------------------------------------
// broadcast classification
// ---------------------------------------------------------------------------

namespace {

enum class Bcast { equal, b_scalar, a_scalar, b_spatial, a_spatial, b_channel, a_channel };

bool is_spatial_gate_of(const Shape& small, const Shape& big) {
  return small.size() == 3 && big.size() == 3 && small[0] == 1 && big[0] > 1 &&
         small[1] == big[1] && small[2] == big[2];
}

bool is_channel_gate_of(const Shape& small, const Shape& big) {
  return small.size() == 3 && big.size() == 3 && small[0] == big[0] && small[1] == 1 &&
         small[2] == 1 && (big[1] > 1 || big[2] > 1);
}

Bcast classify(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return Bcast::equal;
  if (shape_numel(b) == 1) return Bcast::b_scalar;
  if (shape_numel(a) == 1) return Bcast::a_scalar;
  if (is_spatial_gate_of(b, a)) return Bcast::b_spatial;
  if (is_spatial_gate_of(a, b)) return Bcast::a_spatial;
  if (is_channel_gate_of(b, a)) return Bcast::b_channel;
  if (is_channel_gate_of(a, b)) return Bcast::a_channel;
  throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a) + " and " +
                              shape_str(b) +
                              " are neither equal nor in a supported broadcast form "
                              "(scalar, {1,h,w} gate, {C,1,1} gate)");
}

// Maps a flat index of the broadcast output onto the small operand.
struct SmallIndex {
  int hw;       // h*w of the big shape
  int w;        // w of the big shape
  bool spatial; // true: {1,h,w}; false: {C,1,1}; scalar handled separately
  int operator()(int i) const { return spatial ? (i % hw) : (i / hw); }
};

}  // namespace

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

namespace {

template <bool IsAdd>
Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b) {
  const Bcast kind = classify(op, a.shape(), b.shape());
  const bool b_small = kind == Bcast::b_scalar || kind == Bcast::b_spatial || kind == Bcast::b_channel;
  const Tensor& big = (kind == Bcast::equal || b_small) ? a : b;
  const Tensor& small = (kind == Bcast::equal || b_small) ? b : a;

  const auto bv = big.values();
  const auto sv = small.values();
  const int n = big.size();
  std::vector<double> out(static_cast<std::size_t>(n));

  const bool scalar = kind == Bcast::a_scalar || kind == Bcast::b_scalar;
  const bool spatial = kind == Bcast::a_spatial || kind == Bcast::b_spatial;
  SmallIndex map{0, 0, spatial};
  if (!scalar && kind != Bcast::equal) {
    map.hw = big.shape()[1] * big.shape()[2];
    map.w = big.shape()[2];
  }

  if (kind == Bcast::equal) {
    for (int i = 0; i < n; ++i) out[i] = IsAdd ? bv[i] + sv[i] : bv[i] * sv[i];
  } else if (scalar) {
    const double s = sv[0];
    for (int i = 0; i < n; ++i) out[i] = IsAdd ? bv[i] + s : bv[i] * s;
  } else {
    for (int i = 0; i < n; ++i) {
      const double s = sv[map(i)];
      out[i] = IsAdd ? bv[i] + s : bv[i] * s;
    }
  }

  Tensor big_t = big;
  Tensor small_t = small;
  auto rule = [big_t, small_t, kind, scalar, map, n](std::span<const double> g) {
    // gradient for the big operand
    if (big_t.wants_grad()) {
      auto gb = big_t.grad_buffer();
      if (IsAdd) {
        for (int i = 0; i < n; ++i) gb[i] += g[i];
      } else if (kind == Bcast::equal) {
        auto sv2 = small_t.values();
        for (int i = 0; i < n; ++i) gb[i] += g[i] * sv2[i];
      } else if (scalar) {
        const double s = small_t.values()[0];
        for (int i = 0; i < n; ++i) gb[i] += g[i] * s;
      } else {
        auto sv2 = small_t.values();
        for (int i = 0; i < n; ++i) gb[i] += g[i] * sv2[map(i)];
      }
    }
    // gradient for the small operand (reduced over replicated positions)
    if (small_t.wants_grad()) {
      auto gs = small_t.grad_buffer();
      if (kind == Bcast::equal) {
        auto bv2 = big_t.values();
        for (int i = 0; i < n; ++i) gs[i] += IsAdd ? g[i] : g[i] * bv2[i];
      } else if (scalar) {
        double acc = 0.0;
        if (IsAdd) {
          for (int i = 0; i < n; ++i) acc += g[i];
        } else {
          auto bv2 = big_t.values();
          for (int i = 0; i < n; ++i) acc += g[i] * bv2[i];
        }
        gs[0] += acc;
      } else {
        auto bv2 = big_t.values();
        for (int i = 0; i < n; ++i) {
          gs[map(i)] += IsAdd ? g[i] : g[i] * bv2[i];
        }
      }
    }
  };
  return Tensor::make_op_result(op, big.shape(), std::move(out), {a, b}, std::move(rule));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise<true>("add", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_elementwise<false>("mul", a, b); }

Tensor scale(const Tensor& a, double s) {
  const auto av = a.values();
  std::vector<double> out(av.begin(), av.end());
  for (double& x : out) x *= s;
  Tensor a_t = a;
  auto rule = [a_t, s](std::span<const double> g) {
    if (!a_t.wants_grad()) return;
    auto ga = a_t.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  };
  return Tensor::make_op_result("scale", a.shape(), std::move(out), {a}, std::move(rule));
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[1] != sb[1] || sa[2] != sb[2]) {
    throw std::invalid_argument("concat_channels: spatial extents differ, " + shape_str(sa) +
                                " vs " + shape_str(sb));
  }
  const int c1 = sa[0], c2 = sb[0], hw = sa[1] * sa[2];
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>((c1 + c2) * hw));
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());

  Tensor a_t = a, b_t = b;
  const int na = c1 * hw;
  auto rule = [a_t, b_t, na](std::span<const double> g) {
    if (a_t.wants_grad()) {
      auto ga = a_t.grad_buffer();
      for (int i = 0; i < na; ++i) ga[i] += g[i];
    }
    if (b_t.wants_grad()) {
      auto gb = b_t.grad_buffer();
      const int nb = static_cast<int>(g.size()) - na;
      for (int i = 0; i < nb; ++i) gb[i] += g[na + i];
    }
  };
  return Tensor::make_op_result("concat_channels", {c1 + c2, sa[1], sa[2]}, std::move(out),
                                {a, b}, std::move(rule));
}

Tensor sigmoid(const Tensor& x) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    if (v >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out[i] = e / (1.0 + e);
    }
  }
  Tensor x_t = x;
  std::vector<double> saved = out;
  auto rule = [x_t, saved](std::span<const double> g) {
    if (!x_t.wants_grad()) return;
    auto gx = x_t.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      gx[i] += g[i] * saved[i] * (1.0 - saved[i]);
    }
  };
  return Tensor::make_op_result("sigmoid", x.shape(), std::move(out), {x}, std::move(rule));
}

Tensor relu(const Tensor& x) {
  const auto xv = x.values();
  if (g_kink_monitor_on) {
    for (double v : xv) g_kink_min_abs = std::min(g_kink_min_abs, std::fabs(v));
  }
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  Tensor x_t = x;
  auto rule = [x_t](std::span<const double> g) {
    if (!x_t.wants_grad()) return;
    auto gx = x_t.grad_buffer();
    auto xv2 = x_t.values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv2[i] > 0.0) gx[i] += g[i];
    }
  };
  return Tensor::make_op_result("relu", x.shape(), std::move(out), {x}, std::move(rule));
}

Tensor softmax_channels(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[0] < 2) {
    throw std::invalid_argument("softmax_channels: need a {C,h,w} tensor with C >= 2, got " +
                                shape_str(s));
  }
  const int c = s[0], hw = s[1] * s[2];
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (int p = 0; p < hw; ++p) {
    double m = xv[p];
    for (int k = 1; k < c; ++k) m = std::max(m, xv[static_cast<std::size_t>(k) * hw + p]);
    double z = 0.0;
    for (int k = 0; k < c; ++k) {
      const std::size_t i = static_cast<std::size_t>(k) * hw + p;
      out[i] = std::exp(xv[i] - m);
      z += out[i];
    }
    for (int k = 0; k < c; ++k) out[static_cast<std::size_t>(k) * hw + p] /= z;
  }
  Tensor x_t = x;
  std::vector<double> saved = out;
  auto rule = [x_t, saved, c, hw](std::span<const double> g) {
    if (!x_t.wants_grad()) return;
    auto gx = x_t.grad_buffer();
    for (int p = 0; p < hw; ++p) {
      double dot = 0.0;
      for (int k = 0; k < c; ++k) {
        const std::size_t i = static_cast<std::size_t>(k) * hw + p;
        dot += g[i] * saved[i];
      }
      for (int k = 0; k < c; ++k) {
        const std::size_t i = static_cast<std::size_t>(k) * hw + p;
        gx[i] += saved[i] * (g[i] - dot);
      }
    }
  };
  return Tensor::make_op_result("softmax_channels", s, std::move(out), {x}, std::move(rule));
}

Tensor sum(const Tensor& x) {
  const auto xv = x.values();
  double acc = 0.0;
  for (double v : xv) acc += v;
  Tensor x_t = x;
  auto rule = [x_t](std::span<const double> g) {
    if (!x_t.wants_grad()) return;
    auto gx = x_t.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
  };
  return Tensor::make_op_result("sum", {1}, {acc}, {x}, std::move(rule));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  }
  Tensor x_t = x;
  auto rule = [x_t](std::span<const double> g) {
    if (!x_t.wants_grad()) return;
    auto gx = x_t.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  };
  std::vector<double> out(x.values().begin(), x.values().end());
  return Tensor::make_op_result("reshape", std::move(shape), std::move(out), {x}, std::move(rule));
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                            double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_diff_gradient: step must be positive");
  NoGradGuard ng;
  Tensor probe = x.clone();
  auto pv = probe.values_mut();
  Tensor g = Tensor::zeros_like(x);
  auto gv = g.values_mut();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double orig = pv[i];
    pv[i] = orig + step;
    const double fp = f(probe);
    pv[i] = orig - step;
    const double fm = f(probe);
    pv[i] = orig;
    gv[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

double max_rel_error(const Tensor& analytic, const Tensor& reference) {
  if (analytic.shape() != reference.shape()) {
    throw std::invalid_argument("max_rel_error: shape mismatch " + shape_str(analytic.shape()) +
                                " vs " + shape_str(reference.shape()));
  }
  const auto a = analytic.values();
  const auto r = reference.values();
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max(1.0, std::fabs(a[i]));
    worst = std::max(worst, std::fabs(a[i] - r[i]) / denom);
  }
  return worst;
}

}  // namespace bda
