#include "bda/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "bda/errors.hpp"

namespace bda {

int conv_output_extent(int in, int k, int stride, int padding) {
  if (in <= 0 || k <= 0 || stride <= 0 || padding < 0) {
    throw std::invalid_argument("conv_output_extent: invalid geometry");
  }
  return (in + 2 * padding - k) / stride + 1;
}

namespace {

// Loop bounds such that iw = ow*stride - padding + kw stays inside [0, in_w).
struct ConvRange {
  int lo, hi;  // valid ow in [lo, hi)
};

ConvRange valid_range(int out_extent, int in_extent, int stride, int padding, int k_off) {
  const int shift = k_off - padding;  // iw = ow*stride + shift
  int lo = 0;
  if (shift < 0) lo = (-shift + stride - 1) / stride;
  // need ow*stride + shift <= in_extent - 1
  const int num = in_extent - 1 - shift;
  int hi = num < 0 ? 0 : std::min(out_extent, num / stride + 1);
  if (lo > hi) lo = hi;
  return {lo, hi};
}

}  // namespace

Tensor conv2d(const Tensor& x, const Conv2dParams& p) {
  const Shape& xs = x.shape();
  const Shape& ks = p.kernel.shape();
  if (xs.size() != 3 || ks.size() != 4 || ks[2] != ks[3]) {
    throw std::invalid_argument("conv2d: expected x {C,h,w} and kernel {outC,inC,k,k}, got " +
                                shape_str(xs) + " and " + shape_str(ks));
  }
  const int in_c = xs[0], in_h = xs[1], in_w = xs[2];
  const int out_c = ks[0], k = ks[2];
  if (ks[1] != in_c) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(in_c) +
                                " channels but kernel expects " + std::to_string(ks[1]));
  }
  if (p.bias.shape() != Shape{out_c}) {
    throw std::invalid_argument("conv2d: bias shape " + shape_str(p.bias.shape()) +
                                " does not match outC " + std::to_string(out_c));
  }
  const int s = p.stride, pad = p.padding;
  const int out_h = conv_output_extent(in_h, k, s, pad);
  const int out_w = conv_output_extent(in_w, k, s, pad);
  if (out_h < 1 || out_w < 1) {
    throw std::invalid_argument("conv2d: degenerate output extent for input " + shape_str(xs) +
                                ", k=" + std::to_string(k) + ", stride=" + std::to_string(s) +
                                ", padding=" + std::to_string(pad));
  }

  const auto xv = x.values();
  const auto kv = p.kernel.values();
  const auto bv = p.bias.values();
  std::vector<double> out(static_cast<std::size_t>(out_c) * out_h * out_w);

  const int in_hw = in_h * in_w;
  const int out_hw = out_h * out_w;
  const int khw = k * k;

  for (int oc = 0; oc < out_c; ++oc) {
    double* o_plane = out.data() + static_cast<std::size_t>(oc) * out_hw;
    std::fill(o_plane, o_plane + out_hw, bv[oc]);
    for (int ic = 0; ic < in_c; ++ic) {
      const double* x_plane = xv.data() + static_cast<std::size_t>(ic) * in_hw;
      const double* k_tile = kv.data() + (static_cast<std::size_t>(oc) * in_c + ic) * khw;
      for (int kh = 0; kh < k; ++kh) {
        const auto rh = valid_range(out_h, in_h, s, pad, kh);
        for (int kw = 0; kw < k; ++kw) {
          const double w = k_tile[kh * k + kw];
          if (w == 0.0) continue;
          const auto rw = valid_range(out_w, in_w, s, pad, kw);
          const int shift = kw - pad;
          for (int oh = rh.lo; oh < rh.hi; ++oh) {
            const int ih = oh * s - pad + kh;
            const double* x_row = x_plane + static_cast<std::size_t>(ih) * in_w;
            double* o_row = o_plane + static_cast<std::size_t>(oh) * out_w;
            for (int ow = rw.lo; ow < rw.hi; ++ow) {
              o_row[ow] += w * x_row[ow * s + shift];
            }
          }
        }
      }
    }
  }

  Tensor x_t = x, k_t = p.kernel, b_t = p.bias;
  auto rule = [x_t, k_t, b_t, in_c, in_h, in_w, out_c, out_h, out_w, k, s,
               pad](std::span<const double> g) {
    const int in_hw = in_h * in_w;
    const int out_hw = out_h * out_w;
    const int khw = k * k;
    const auto xv2 = x_t.values();
    const auto kv2 = k_t.values();

    if (b_t.wants_grad()) {
      auto gb = b_t.grad_buffer();
      for (int oc = 0; oc < out_c; ++oc) {
        const double* g_plane = g.data() + static_cast<std::size_t>(oc) * out_hw;
        double acc = 0.0;
        for (int i = 0; i < out_hw; ++i) acc += g_plane[i];
        gb[oc] += acc;
      }
    }
    if (k_t.wants_grad()) {
      auto gk = k_t.grad_buffer();
      for (int oc = 0; oc < out_c; ++oc) {
        const double* g_plane = g.data() + static_cast<std::size_t>(oc) * out_hw;
        for (int ic = 0; ic < in_c; ++ic) {
          const double* x_plane = xv2.data() + static_cast<std::size_t>(ic) * in_hw;
          double* gk_tile = gk.data() + (static_cast<std::size_t>(oc) * in_c + ic) * khw;
          for (int kh = 0; kh < k; ++kh) {
            const auto rh = valid_range(out_h, in_h, s, pad, kh);
            for (int kw = 0; kw < k; ++kw) {
              const auto rw = valid_range(out_w, in_w, s, pad, kw);
              const int shift = kw - pad;
              double acc = 0.0;
              for (int oh = rh.lo; oh < rh.hi; ++oh) {
                const int ih = oh * s - pad + kh;
                const double* x_row = x_plane + static_cast<std::size_t>(ih) * in_w;
                const double* g_row = g_plane + static_cast<std::size_t>(oh) * out_w;
                for (int ow = rw.lo; ow < rw.hi; ++ow) {
                  acc += g_row[ow] * x_row[ow * s + shift];
                }
              }
              gk_tile[kh * k + kw] += acc;
            }
          }
        }
      }
    }
    if (x_t.wants_grad()) {
      auto gx = x_t.grad_buffer();
      for (int oc = 0; oc < out_c; ++oc) {
        const double* g_plane = g.data() + static_cast<std::size_t>(oc) * out_hw;
        for (int ic = 0; ic < in_c; ++ic) {
          double* gx_plane = gx.data() + static_cast<std::size_t>(ic) * in_hw;
          const double* k_tile = kv2.data() + (static_cast<std::size_t>(oc) * in_c + ic) * khw;
          for (int kh = 0; kh < k; ++kh) {
            const auto rh = valid_range(out_h, in_h, s, pad, kh);
            for (int kw = 0; kw < k; ++kw) {
              const double w = k_tile[kh * k + kw];
              if (w == 0.0) continue;
              const auto rw = valid_range(out_w, in_w, s, pad, kw);
              const int shift = kw - pad;
              for (int oh = rh.lo; oh < rh.hi; ++oh) {
                const int ih = oh * s - pad + kh;
                double* gx_row = gx_plane + static_cast<std::size_t>(ih) * in_w;
                const double* g_row = g_plane + static_cast<std::size_t>(oh) * out_w;
                for (int ow = rw.lo; ow < rw.hi; ++ow) {
                  gx_row[ow * s + shift] += w * g_row[ow];
                }
              }
            }
          }
        }
      }
    }
  };
  return Tensor::make_op_result("conv2d", {out_c, out_h, out_w}, std::move(out),
                                {x, p.kernel, p.bias}, std::move(rule));
}

Tensor global_avg_pool(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() != 3) {
    throw std::invalid_argument("global_avg_pool: expected {C,h,w}, got " + shape_str(s));
  }
  const int c = s[0], hw = s[1] * s[2];
  const auto xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    const double* plane = xv.data() + static_cast<std::size_t>(ch) * hw;
    for (int i = 0; i < hw; ++i) acc += plane[i];
    out[ch] = acc / hw;
  }
  Tensor x_t = x;
  auto rule = [x_t, c, hw](std::span<const double> g) {
    if (!x_t.wants_grad()) return;
    auto gx = x_t.grad_buffer();
    for (int ch = 0; ch < c; ++ch) {
      const double v = g[ch] / hw;
      double* plane = gx.data() + static_cast<std::size_t>(ch) * hw;
      for (int i = 0; i < hw; ++i) plane[i] += v;
    }
  };
  return Tensor::make_op_result("global_avg_pool", {c}, std::move(out), {x}, std::move(rule));
}

Tensor downsample_avg(const Tensor& x, int factor) {
  if (factor != 2 && factor != 4) {
    throw std::invalid_argument("downsample_avg: factor must be 2 or 4");
  }
  const Shape& s = x.shape();
  if (s.size() != 3 || s[1] % factor != 0 || s[2] % factor != 0) {
    throw std::invalid_argument("downsample_avg: extents of " + shape_str(s) +
                                " not divisible by " + std::to_string(factor));
  }
  const int c = s[0], in_h = s[1], in_w = s[2];
  const int out_h = in_h / factor, out_w = in_w / factor;
  const double inv = 1.0 / (factor * factor);
  const auto xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(c) * out_h * out_w);
  for (int ch = 0; ch < c; ++ch) {
    const double* xp = xv.data() + static_cast<std::size_t>(ch) * in_h * in_w;
    double* op = out.data() + static_cast<std::size_t>(ch) * out_h * out_w;
    for (int oh = 0; oh < out_h; ++oh) {
      for (int ow = 0; ow < out_w; ++ow) {
        double acc = 0.0;
        for (int dy = 0; dy < factor; ++dy) {
          const double* row = xp + static_cast<std::size_t>(oh * factor + dy) * in_w + ow * factor;
          for (int dx = 0; dx < factor; ++dx) acc += row[dx];
        }
        op[static_cast<std::size_t>(oh) * out_w + ow] = acc * inv;
      }
    }
  }
  Tensor x_t = x;
  auto rule = [x_t, c, in_h, in_w, out_h, out_w, factor, inv](std::span<const double> g) {
    if (!x_t.wants_grad()) return;
    auto gx = x_t.grad_buffer();
    for (int ch = 0; ch < c; ++ch) {
      double* xp = gx.data() + static_cast<std::size_t>(ch) * in_h * in_w;
      const double* gp = g.data() + static_cast<std::size_t>(ch) * out_h * out_w;
      for (int oh = 0; oh < out_h; ++oh) {
        for (int ow = 0; ow < out_w; ++ow) {
          const double v = gp[static_cast<std::size_t>(oh) * out_w + ow] * inv;
          for (int dy = 0; dy < factor; ++dy) {
            double* row = xp + static_cast<std::size_t>(oh * factor + dy) * in_w + ow * factor;
            for (int dx = 0; dx < factor; ++dx) row[dx] += v;
          }
        }
      }
    }
  };
  return Tensor::make_op_result("downsample_avg", {c, out_h, out_w}, std::move(out), {x},
                                std::move(rule));
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be >= 1");
  const Shape& s = x.shape();
  if (s.size() != 3) {
    throw std::invalid_argument("upsample_nearest: expected {C,h,w}, got " + shape_str(s));
  }
  const int c = s[0], in_h = s[1], in_w = s[2];
  const int out_h = in_h * factor, out_w = in_w * factor;
  const auto xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(c) * out_h * out_w);
  for (int ch = 0; ch < c; ++ch) {
    const double* xp = xv.data() + static_cast<std::size_t>(ch) * in_h * in_w;
    double* op = out.data() + static_cast<std::size_t>(ch) * out_h * out_w;
    for (int oh = 0; oh < out_h; ++oh) {
      const double* x_row = xp + static_cast<std::size_t>(oh / factor) * in_w;
      double* o_row = op + static_cast<std::size_t>(oh) * out_w;
      for (int ow = 0; ow < out_w; ++ow) o_row[ow] = x_row[ow / factor];
    }
  }
  Tensor x_t = x;
  auto rule = [x_t, c, in_h, in_w, out_h, out_w, factor](std::span<const double> g) {
    if (!x_t.wants_grad()) return;
    auto gx = x_t.grad_buffer();
    for (int ch = 0; ch < c; ++ch) {
      double* xp = gx.data() + static_cast<std::size_t>(ch) * in_h * in_w;
      const double* gp = g.data() + static_cast<std::size_t>(ch) * out_h * out_w;
      for (int oh = 0; oh < out_h; ++oh) {
        double* x_row = xp + static_cast<std::size_t>(oh / factor) * in_w;
        const double* g_row = gp + static_cast<std::size_t>(oh) * out_w;
        for (int ow = 0; ow < out_w; ++ow) x_row[ow / factor] += g_row[ow];
      }
    }
  };
  return Tensor::make_op_result("upsample_nearest", {c, out_h, out_w}, std::move(out), {x},
                                std::move(rule));
}

Tensor dense(const Tensor& x, const DenseParams& p) {
  const Shape& xs = x.shape();
  const Shape& ws = p.weight.shape();
  if (xs.size() != 1 || ws.size() != 2 || ws[1] != xs[0]) {
    throw std::invalid_argument("dense: weight " + shape_str(ws) + " incompatible with input " +
                                shape_str(xs));
  }
  const int out_n = ws[0], in_n = ws[1];
  if (p.bias.shape() != Shape{out_n}) {
    throw std::invalid_argument("dense: bias shape " + shape_str(p.bias.shape()) +
                                " does not match output " + std::to_string(out_n));
  }
  const auto xv = x.values();
  const auto wv = p.weight.values();
  const auto bv = p.bias.values();
  std::vector<double> out(static_cast<std::size_t>(out_n));
  for (int i = 0; i < out_n; ++i) {
    double acc = bv[i];
    const double* row = wv.data() + static_cast<std::size_t>(i) * in_n;
    for (int j = 0; j < in_n; ++j) acc += row[j] * xv[j];
    out[i] = acc;
  }
  Tensor x_t = x, w_t = p.weight, b_t = p.bias;
  auto rule = [x_t, w_t, b_t, out_n, in_n](std::span<const double> g) {
    const auto xv2 = x_t.values();
    const auto wv2 = w_t.values();
    if (b_t.wants_grad()) {
      auto gb = b_t.grad_buffer();
      for (int i = 0; i < out_n; ++i) gb[i] += g[i];
    }
    if (w_t.wants_grad()) {
      auto gw = w_t.grad_buffer();
      for (int i = 0; i < out_n; ++i) {
        double* row = gw.data() + static_cast<std::size_t>(i) * in_n;
        for (int j = 0; j < in_n; ++j) row[j] += g[i] * xv2[j];
      }
    }
    if (x_t.wants_grad()) {
      auto gx = x_t.grad_buffer();
      for (int i = 0; i < out_n; ++i) {
        const double* row = wv2.data() + static_cast<std::size_t>(i) * in_n;
        for (int j = 0; j < in_n; ++j) gx[j] += g[i] * row[j];
      }
    }
  };
  return Tensor::make_op_result("dense", {out_n}, std::move(out), {x, p.weight, p.bias},
                                std::move(rule));
}

// One group per channel: statistics over that channel's spatial extent, then
// the per-channel affine. Batch-size independent and local to each channel,
// so a perturbation in one channel never shifts the others.
Tensor group_norm(const Tensor& x, const NormParams& p, double eps) {
  const Shape& s = x.shape();
  if (s.size() != 3) {
    throw std::invalid_argument("group_norm: expected {C,h,w}, got " + shape_str(s));
  }
  const int c = s[0], hw = s[1] * s[2];
  if (p.gamma.shape() != Shape{c} || p.beta.shape() != Shape{c}) {
    throw std::invalid_argument("group_norm: affine parameters do not match channel count " +
                                std::to_string(c));
  }
  const auto xv = x.values();
  std::vector<double> inv_std(static_cast<std::size_t>(c));
  std::vector<double> xhat(xv.size());
  std::vector<double> out(xv.size());
  const auto gv = p.gamma.values();
  const auto bv = p.beta.values();
  for (int ch = 0; ch < c; ++ch) {
    const double* plane = xv.data() + static_cast<std::size_t>(ch) * hw;
    double mean = 0.0;
    for (int i = 0; i < hw; ++i) mean += plane[i];
    mean /= hw;
    double var = 0.0;
    for (int i = 0; i < hw; ++i) {
      const double d = plane[i] - mean;
      var += d * d;
    }
    var /= hw;
    if (!std::isfinite(mean) || !std::isfinite(var)) {
      throw NumericalError("group_norm: non-finite statistics in channel " + std::to_string(ch));
    }
    inv_std[static_cast<std::size_t>(ch)] = 1.0 / std::sqrt(var + eps);
    for (int i = 0; i < hw; ++i) {
      const std::size_t idx = static_cast<std::size_t>(ch) * hw + i;
      xhat[idx] = (plane[i] - mean) * inv_std[static_cast<std::size_t>(ch)];
      out[idx] = gv[ch] * xhat[idx] + bv[ch];
    }
  }

  Tensor x_t = x, g_t = p.gamma, b_t = p.beta;
  auto rule = [x_t, g_t, b_t, xhat = std::move(xhat), inv_std = std::move(inv_std), c,
               hw](std::span<const double> g) {
    if (b_t.wants_grad()) {
      auto gb = b_t.grad_buffer();
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int i = 0; i < hw; ++i) acc += g[static_cast<std::size_t>(ch) * hw + i];
        gb[ch] += acc;
      }
    }
    if (g_t.wants_grad()) {
      auto gg = g_t.grad_buffer();
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int i = 0; i < hw; ++i) {
          const std::size_t idx = static_cast<std::size_t>(ch) * hw + i;
          acc += g[idx] * xhat[idx];
        }
        gg[ch] += acc;
      }
    }
    if (x_t.wants_grad()) {
      auto gx = x_t.grad_buffer();
      const auto gv2 = g_t.values();
      // per channel: h = dL/dxhat; dL/dx = inv_std*(h - mean(h) - xhat*mean(h*xhat))
      for (int ch = 0; ch < c; ++ch) {
        double mean_h = 0.0, mean_hx = 0.0;
        for (int i = 0; i < hw; ++i) {
          const std::size_t idx = static_cast<std::size_t>(ch) * hw + i;
          const double h = g[idx] * gv2[ch];
          mean_h += h;
          mean_hx += h * xhat[idx];
        }
        mean_h /= hw;
        mean_hx /= hw;
        for (int i = 0; i < hw; ++i) {
          const std::size_t idx = static_cast<std::size_t>(ch) * hw + i;
          const double h = g[idx] * gv2[ch];
          gx[idx] += inv_std[static_cast<std::size_t>(ch)] * (h - mean_h - xhat[idx] * mean_hx);
        }
      }
    }
  };
  return Tensor::make_op_result("group_norm", s, std::move(out), {x, p.gamma, p.beta},
                                std::move(rule));
}

Tensor binary_cross_entropy(const Tensor& pred, const Tensor& target, Reduction reduction) {
  const Shape& ps = pred.shape();
  if (ps != target.shape()) {
    throw std::invalid_argument("binary_cross_entropy: shape mismatch " + shape_str(ps) + " vs " +
                                shape_str(target.shape()));
  }
  const auto pv = pred.values();
  const auto tv = target.values();
  const int n = pred.size();
  for (int i = 0; i < n; ++i) {
    if (tv[i] != 0.0 && tv[i] != 1.0) {
      throw std::invalid_argument("binary_cross_entropy: target value " + std::to_string(tv[i]) +
                                  " at index " + std::to_string(i) + " is not in {0,1}");
    }
  }
  const double lo = kProbClampEps, hi = 1.0 - kProbClampEps;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double p = std::clamp(pv[i], lo, hi);
    acc -= tv[i] * std::log(p) + (1.0 - tv[i]) * std::log(1.0 - p);
  }
  const double norm = reduction == Reduction::mean ? 1.0 / n : 1.0;
  Tensor p_t = pred, t_t = target;
  auto rule = [p_t, t_t, n, lo, hi, norm](std::span<const double> g) {
    if (!p_t.wants_grad()) return;
    auto gp = p_t.grad_buffer();
    const auto pv2 = p_t.values();
    const auto tv2 = t_t.values();
    for (int i = 0; i < n; ++i) {
      if (pv2[i] < lo || pv2[i] > hi) continue;  // clamp region: flat
      const double p = pv2[i];
      gp[i] += g[0] * norm * (-(tv2[i] / p) + (1.0 - tv2[i]) / (1.0 - p));
    }
  };
  return Tensor::make_op_result("binary_cross_entropy", {1}, {acc * norm}, {pred, target},
                                std::move(rule));
}

Tensor categorical_cross_entropy(const Tensor& logits, const ClassMap& target) {
  const Shape& s = logits.shape();
  if (s.size() != 3 || s[0] < 2) {
    throw std::invalid_argument("categorical_cross_entropy: logits must be {C,h,w} with C >= 2");
  }
  const int c = s[0], h = s[1], w = s[2];
  if (target.h != h || target.w != w) {
    throw std::invalid_argument("categorical_cross_entropy: target " + std::to_string(target.h) +
                                "x" + std::to_string(target.w) + " vs logits " + shape_str(s));
  }
  const int hw = h * w;
  const auto zv = logits.values();
  for (int p = 0; p < hw; ++p) {
    if (target.v[p] >= c) {
      throw std::invalid_argument("categorical_cross_entropy: class id " +
                                  std::to_string(int(target.v[p])) + " at pixel " +
                                  std::to_string(p) + " out of range [0," + std::to_string(c) +
                                  ")");
    }
  }
  // softmax probabilities are saved for the backward rule
  std::vector<double> probs(static_cast<std::size_t>(c) * hw);
  double acc = 0.0;
  for (int p = 0; p < hw; ++p) {
    double m = zv[p];
    for (int k = 1; k < c; ++k) m = std::max(m, zv[static_cast<std::size_t>(k) * hw + p]);
    double z = 0.0;
    for (int k = 0; k < c; ++k) {
      const std::size_t i = static_cast<std::size_t>(k) * hw + p;
      probs[i] = std::exp(zv[i] - m);
      z += probs[i];
    }
    const double log_z = std::log(z) + m;
    for (int k = 0; k < c; ++k) probs[static_cast<std::size_t>(k) * hw + p] /= z;
    acc += log_z - zv[static_cast<std::size_t>(target.v[p]) * hw + p];
  }
  const double inv_n = 1.0 / hw;
  Tensor z_t = logits;
  auto rule = [z_t, probs = std::move(probs), target, c, hw, inv_n](std::span<const double> g) {
    if (!z_t.wants_grad()) return;
    auto gz = z_t.grad_buffer();
    for (int p = 0; p < hw; ++p) {
      for (int k = 0; k < c; ++k) {
        const std::size_t i = static_cast<std::size_t>(k) * hw + p;
        const double one_hot = (k == target.v[p]) ? 1.0 : 0.0;
        gz[i] += g[0] * inv_n * (probs[i] - one_hot);
      }
    }
  };
  return Tensor::make_op_result("categorical_cross_entropy", {1}, {acc * inv_n}, {logits},
                                std::move(rule));
}

}  // namespace bda
