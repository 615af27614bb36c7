#include "bda/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "bda/cda.hpp"
#include "bda/class_map.hpp"
#include "bda/mff.hpp"
#include "bda/nn_ops.hpp"
#include "bda/rng.hpp"

namespace bda {

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_values(std::move(shape), std::move(v));
}

Tensor rand_kernel(int out_c, int in_c, int k, Rng& rng) {
  const double s = std::sqrt(2.0 / (static_cast<double>(in_c) * k * k));
  std::vector<double> v(static_cast<std::size_t>(out_c) * in_c * k * k);
  for (double& x : v) x = rng.normal() * s;
  return Tensor::from_values({out_c, in_c, k, k}, std::move(v));
}

// flatten to {n,1,1} so outputs of different spatial extents can be joined
Tensor flat(const Tensor& t) { return reshape(t, {t.size(), 1, 1}); }

double project(const Tensor& out, const Tensor& w) {
  const auto ov = out.values();
  const auto wv = w.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < ov.size(); ++i) acc += ov[i] * wv[i];
  return acc;
}

}  // namespace

double run_gradcheck_case(const FdCheckBuilder& make, std::uint64_t seed) {
  FdCheck check = make(seed);
  if (check.has_kinks) {
    for (int tries = 0; tries < 64; ++tries) {
      KinkMonitor::reset();
      KinkMonitor::enable(true);
      {
        NoGradGuard ng;
        check.forward(check.inputs);
      }
      KinkMonitor::enable(false);
      if (KinkMonitor::min_abs() > 10.0 * check.step) break;
      seed = mix_seed(seed, fnv1a("kink-reseed"));
      check = make(seed);
    }
  }

  for (Tensor& t : check.inputs) t.set_requires_grad(true);
  Tensor out = check.forward(check.inputs);

  Rng proj_rng(mix_seed(seed, fnv1a("projection")));
  Tensor w = rand_tensor(out.shape(), proj_rng);

  Tensor loss = sum(mul(out, w));
  const GradientMap grads = backward(loss);

  double worst = 0.0;
  for (std::size_t k = 0; k < check.inputs.size(); ++k) {
    const auto f_scalar = [&](const Tensor& probe) {
      std::vector<Tensor> ins = check.inputs;
      ins[k] = probe;
      return project(check.forward(ins), w);
    };
    const Tensor fd = finite_diff_gradient(f_scalar, check.inputs[k], check.step);
    worst = std::max(worst, max_rel_error(grads.at(check.inputs[k]), fd));
  }
  return worst;
}

std::vector<GradCheckCase> gradcheck_cases() {
  std::vector<GradCheckCase> cases;

  cases.push_back({"conv2d_stride1", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({2, 5, 5}, rng), rand_kernel(3, 2, 3, rng),
                rand_tensor({3}, rng, -0.2, 0.2)};
    c.forward = [](const std::vector<Tensor>& in) {
      return conv2d(in[0], {in[1], in[2], 1, 1});
    };
    return c;
  }});

  cases.push_back({"conv2d_stride2", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({2, 8, 8}, rng), rand_kernel(3, 2, 5, rng),
                rand_tensor({3}, rng, -0.2, 0.2)};
    c.forward = [](const std::vector<Tensor>& in) {
      return conv2d(in[0], {in[1], in[2], 2, 2});
    };
    return c;
  }});

  cases.push_back({"global_avg_pool", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({3, 4, 5}, rng)};
    c.forward = [](const std::vector<Tensor>& in) { return global_avg_pool(in[0]); };
    return c;
  }});

  cases.push_back({"downsample_avg_f2", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({2, 6, 6}, rng)};
    c.forward = [](const std::vector<Tensor>& in) { return downsample_avg(in[0], 2); };
    return c;
  }});

  cases.push_back({"downsample_avg_f4", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({2, 8, 8}, rng)};
    c.forward = [](const std::vector<Tensor>& in) { return downsample_avg(in[0], 4); };
    return c;
  }});

  cases.push_back({"upsample_nearest", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({3, 3, 4}, rng)};
    c.forward = [](const std::vector<Tensor>& in) { return upsample_nearest(in[0], 2); };
    return c;
  }});

  cases.push_back({"dense", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({6}, rng), rand_tensor({4, 6}, rng), rand_tensor({4}, rng)};
    c.forward = [](const std::vector<Tensor>& in) { return dense(in[0], {in[1], in[2]}); };
    return c;
  }});

  cases.push_back({"sigmoid", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({3, 4, 4}, rng, -3.0, 3.0)};
    c.forward = [](const std::vector<Tensor>& in) { return sigmoid(in[0]); };
    return c;
  }});

  cases.push_back({"softmax_channels", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({5, 3, 3}, rng, -2.0, 2.0)};
    c.forward = [](const std::vector<Tensor>& in) { return softmax_channels(in[0]); };
    return c;
  }});

  cases.push_back({"group_norm", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({3, 4, 4}, rng), rand_tensor({3}, rng, 0.6, 1.4),
                rand_tensor({3}, rng, -0.3, 0.3)};
    c.forward = [](const std::vector<Tensor>& in) { return group_norm(in[0], {in[1], in[2]}); };
    return c;
  }});

  cases.push_back({"binary_cross_entropy", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({1, 4, 4}, rng, 0.1, 0.9)};
    std::vector<double> t(16);
    for (double& x : t) x = rng.bernoulli(0.5) ? 1.0 : 0.0;
    Tensor target = Tensor::from_values({1, 4, 4}, std::move(t));
    c.forward = [target](const std::vector<Tensor>& in) {
      return binary_cross_entropy(in[0], target);
    };
    return c;
  }});

  cases.push_back({"categorical_cross_entropy", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({5, 2, 2}, rng, -2.0, 2.0)};
    ClassMap target(2, 2);
    for (auto& x : target.v) x = static_cast<std::uint8_t>(rng.uniform_int(0, 4));
    c.forward = [target](const std::vector<Tensor>& in) {
      return categorical_cross_entropy(in[0], target);
    };
    return c;
  }});

  const auto make_cda_inputs = [](Rng& rng, int e, int h, int w) {
    return std::vector<Tensor>{
        rand_tensor({e, h, w}, rng), rand_tensor({e, h, w}, rng),
        rand_tensor({e, 2 * e}, rng, -0.5, 0.5), rand_tensor({e}, rng, -0.2, 0.2),
        rand_kernel(1, 2 * e, 1, rng), rand_tensor({1}, rng, -0.2, 0.2)};
  };
  const auto cda_weights_of = [](const std::vector<Tensor>& in) {
    CdaWeights w;
    w.channel_reduce = {in[2], in[3]};
    w.spatial_conv = {in[4], in[5], 1, 0};
    return w;
  };

  cases.push_back({"channel_gate", [=](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({3, 4, 4}, rng), rand_tensor({3, 4, 4}, rng),
                rand_tensor({3, 6}, rng, -0.5, 0.5), rand_tensor({3}, rng, -0.2, 0.2)};
    c.forward = [](const std::vector<Tensor>& in) {
      CdaWeights w;
      w.channel_reduce = {in[2], in[3]};
      return channel_gate(in[0], in[1], w);
    };
    return c;
  }});

  cases.push_back({"channel_fuse", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({3, 4, 4}, rng), rand_tensor({3, 4, 4}, rng),
                rand_tensor({3}, rng, 0.1, 0.9)};
    c.forward = [](const std::vector<Tensor>& in) {
      auto [a, b] = channel_fuse(in[0], in[1], in[2]);
      return concat_channels(a, b);
    };
    return c;
  }});

  cases.push_back({"spatial_gate", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({3, 4, 4}, rng), rand_tensor({3, 4, 4}, rng),
                rand_kernel(1, 6, 1, rng), rand_tensor({1}, rng, -0.2, 0.2)};
    c.forward = [](const std::vector<Tensor>& in) {
      CdaWeights w;
      w.spatial_conv = {in[2], in[3], 1, 0};
      return spatial_gate(in[0], in[1], w);
    };
    return c;
  }});

  cases.push_back({"cda_forward", [=](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = make_cda_inputs(rng, 3, 4, 4);
    c.forward = [=](const std::vector<Tensor>& in) {
      CdaOutputs out = cda_forward(in[0], in[1], cda_weights_of(in));
      Tensor joined = concat_channels(flat(out.u_pre_spa), flat(out.u_post_spa));
      joined = concat_channels(joined, flat(out.i_cha));
      return concat_channels(joined, flat(out.i_spa));
    };
    return c;
  }});

  cases.push_back({"se_block_channel", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({3, 4, 4}, rng), rand_tensor({3, 3}, rng, -0.5, 0.5),
                rand_tensor({3}, rng, -0.2, 0.2)};
    c.forward = [](const std::vector<Tensor>& in) {
      SeWeights w;
      w.channel_dense = {in[1], in[2]};
      return se_block(in[0], SeVariant::channel, w);
    };
    return c;
  }});

  cases.push_back({"se_block_spatial", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({3, 4, 4}, rng), rand_kernel(1, 3, 1, rng),
                rand_tensor({1}, rng, -0.2, 0.2)};
    c.forward = [](const std::vector<Tensor>& in) {
      SeWeights w;
      w.spatial_conv = {in[1], in[2], 1, 0};
      return se_block(in[0], SeVariant::spatial, w);
    };
    return c;
  }});

  cases.push_back({"se_block_both", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.inputs = {rand_tensor({3, 4, 4}, rng), rand_tensor({3, 3}, rng, -0.5, 0.5),
                rand_tensor({3}, rng, -0.2, 0.2), rand_kernel(1, 3, 1, rng),
                rand_tensor({1}, rng, -0.2, 0.2)};
    c.forward = [](const std::vector<Tensor>& in) {
      SeWeights w;
      w.channel_dense = {in[1], in[2]};
      w.spatial_conv = {in[3], in[4], 1, 0};
      return se_block(in[0], SeVariant::both, w);
    };
    return c;
  }});

  cases.push_back({"mff_forward", [](std::uint64_t seed) {
    Rng rng(seed);
    const int e0 = 3, e1 = 4;
    FdCheck c;
    c.has_kinks = true;  // stream blocks end in relu
    c.inputs = {
        rand_tensor({3, 8, 8}, rng, 0.0, 1.0),   // 0 image
        rand_tensor({e0, 4, 4}, rng),            // 1 level-1 feature
        rand_tensor({e1, 2, 2}, rng),            // 2 level-2 feature
        rand_kernel(e0, 3, 3, rng),              // 3 stream2 kernel
        rand_tensor({e0}, rng, -0.2, 0.2),       // 4 stream2 bias
        rand_tensor({e0}, rng, 0.6, 1.4),        // 5 stream2 gamma
        rand_tensor({e0}, rng, -0.3, 0.3),       // 6 stream2 beta
        rand_kernel(e0, 2 * e0, 1, rng),         // 7 reduce1 kernel
        rand_tensor({e0}, rng, -0.2, 0.2),       // 8
        rand_tensor({e0}, rng, 0.6, 1.4),        // 9
        rand_tensor({e0}, rng, -0.3, 0.3),       // 10
        rand_kernel(e1, 3, 3, rng),              // 11 stream3 kernel
        rand_tensor({e1}, rng, -0.2, 0.2),       // 12
        rand_tensor({e1}, rng, 0.6, 1.4),        // 13
        rand_tensor({e1}, rng, -0.3, 0.3),       // 14
        rand_kernel(e1, 2 * e1, 1, rng),         // 15 reduce2 kernel
        rand_tensor({e1}, rng, -0.2, 0.2),       // 16
        rand_tensor({e1}, rng, 0.6, 1.4),        // 17
        rand_tensor({e1}, rng, -0.3, 0.3),       // 18
    };
    c.forward = [](const std::vector<Tensor>& in) {
      MffWeights w;
      w.stream2 = {{in[3], in[4], 1, 1}, {in[5], in[6]}};
      w.reduce1 = {{in[7], in[8], 1, 0}, {in[9], in[10]}};
      w.stream3 = {{in[11], in[12], 1, 1}, {in[13], in[14]}};
      w.reduce2 = {{in[15], in[16], 1, 0}, {in[17], in[18]}};
      auto [f1, f2] = mff_forward(in[0], in[1], in[2], w);
      return concat_channels(flat(f1), flat(f2));
    };
    return c;
  }});

  cases.push_back({"encoder_decoder_2level", [](std::uint64_t seed) {
    Rng rng(seed);
    FdCheck c;
    c.has_kinks = true;
    c.inputs = {
        rand_tensor({3, 8, 8}, rng, 0.0, 1.0),  // 0 image
        rand_kernel(4, 3, 5, rng),              // 1 stem kernel
        rand_tensor({4}, rng, -0.2, 0.2),       // 2 stem bias
        rand_tensor({4}, rng, 0.6, 1.4),        // 3 stem gamma
        rand_tensor({4}, rng, -0.3, 0.3),       // 4 stem beta
        rand_kernel(6, 4, 3, rng),              // 5 enc c1 kernel
        rand_tensor({6}, rng, -0.2, 0.2),       // 6
        rand_tensor({6}, rng, 0.6, 1.4),        // 7
        rand_tensor({6}, rng, -0.3, 0.3),       // 8
        rand_kernel(6, 6, 3, rng),              // 9 enc c2 kernel
        rand_tensor({6}, rng, -0.2, 0.2),       // 10
        rand_tensor({6}, rng, 0.6, 1.4),        // 11
        rand_tensor({6}, rng, -0.3, 0.3),       // 12
        rand_kernel(6, 4, 1, rng),              // 13 proj kernel
        rand_tensor({6}, rng, -0.2, 0.2),       // 14
        rand_kernel(5, 10, 3, rng),             // 15 dec kernel
        rand_tensor({5}, rng, -0.2, 0.2),       // 16
        rand_tensor({5}, rng, 0.6, 1.4),        // 17
        rand_tensor({5}, rng, -0.3, 0.3),       // 18
        rand_kernel(2, 5, 3, rng),              // 19 head kernel
        rand_tensor({2}, rng, -0.2, 0.2),       // 20
    };
    c.forward = [](const std::vector<Tensor>& in) {
      Tensor f0 = relu(group_norm(conv2d(in[0], {in[1], in[2], 2, 2}), {in[3], in[4]}));
      Tensor y = relu(group_norm(conv2d(f0, {in[5], in[6], 2, 1}), {in[7], in[8]}));
      y = group_norm(conv2d(y, {in[9], in[10], 1, 1}), {in[11], in[12]});
      Tensor sc = conv2d(f0, {in[13], in[14], 2, 0});
      Tensor f1 = relu(add(y, sc));
      Tensor d = upsample_nearest(f1, 2);
      d = concat_channels(d, f0);
      d = relu(group_norm(conv2d(d, {in[15], in[16], 1, 1}), {in[17], in[18]}));
      d = upsample_nearest(d, 2);
      return conv2d(d, {in[19], in[20], 1, 1});
    };
    return c;
  }});

  return cases;
}

std::vector<GradCheckResult> run_gradient_checks(int seeds_per_case, std::uint64_t base_seed,
                                                 double tolerance) {
  std::vector<GradCheckResult> results;
  const auto cases = gradcheck_cases();
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    GradCheckResult r;
    r.name = cases[ci].name;
    for (int s = 0; s < seeds_per_case; ++s) {
      const std::uint64_t seed =
          mix_seed(mix_seed(base_seed, static_cast<std::uint64_t>(ci)), static_cast<std::uint64_t>(s));
      r.max_rel_err = std::max(r.max_rel_err, run_gradcheck_case(cases[ci].make, seed));
    }
    r.pass = r.max_rel_err < tolerance;
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace bda
