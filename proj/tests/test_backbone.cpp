#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "bda/backbone.hpp"
#include "bda/rng.hpp"

using namespace bda;

namespace {

Tensor rand_image(int c, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(c) * h * w);
  for (double& x : v) x = rng.uniform(0.0, 1.0);
  return Tensor::from_values({c, h, w}, std::move(v));
}

bool same_values(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int i = 0; i < a.size(); ++i) {
    if (a.at(i) != b.at(i)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("build is deterministic in (config, seed)") {
  const auto m1 = build(BackboneConfig::desk(), BranchMode::single, 42);
  const auto m2 = build(BackboneConfig::desk(), BranchMode::single, 42);
  const auto m3 = build(BackboneConfig::desk(), BranchMode::single, 43);
  REQUIRE(m1.params.size() == m2.params.size());
  bool any_diff_from_m3 = false;
  for (const auto& [name, t] : m1.params) {
    CHECK(same_values(t, m2.params.at(name)));
    if (!same_values(t, m3.params.at(name))) any_diff_from_m3 = true;
  }
  CHECK(any_diff_from_m3);
}

TEST_CASE("encoder feature shapes follow the halving schedule") {
  SUBCASE("paper widths on 512x512") {
    const auto shapes = encoder_feature_shapes(BackboneConfig::paper(), 512, 512);
    const std::vector<Shape> expect = {
        {64, 256, 256}, {256, 128, 128}, {512, 64, 64}, {1024, 32, 32}, {2048, 16, 16}};
    CHECK(shapes == expect);
  }
  SUBCASE("desk widths on 64x64") {
    const auto shapes = encoder_feature_shapes(BackboneConfig::desk(), 64, 64);
    const std::vector<Shape> expect = {
        {8, 32, 32}, {16, 16, 16}, {32, 8, 8}, {64, 4, 4}, {128, 2, 2}};
    CHECK(shapes == expect);
  }
  SUBCASE("any extent divisible by 32") {
    for (int e : {32, 96, 160}) {
      const auto shapes = encoder_feature_shapes(BackboneConfig::desk(), e, e);
      for (int i = 0; i < 5; ++i) {
        CHECK(shapes[static_cast<std::size_t>(i)][1] == e >> (i + 1));
      }
    }
  }
  CHECK_THROWS_AS(encoder_feature_shapes(BackboneConfig::desk(), 48, 48), std::invalid_argument);
}

TEST_CASE("desk encoder forward produces the configured shapes") {
  const auto m = build(BackboneConfig::desk(), BranchMode::single, 1);
  const auto feats = forward_encoder(m, rand_image(3, 64, 64, 2));
  REQUIRE(feats.size() == 5);
  const auto expect = encoder_feature_shapes(BackboneConfig::desk(), 64, 64);
  for (int i = 0; i < 5; ++i) CHECK(feats[static_cast<std::size_t>(i)].shape() == expect[static_cast<std::size_t>(i)]);

  SUBCASE("indivisible extents rejected") {
    CHECK_THROWS_AS(forward_encoder(m, rand_image(3, 48, 48, 3)), std::invalid_argument);
  }
  SUBCASE("forward is deterministic, including on all-zero input") {
    const Tensor zero({3, 64, 64});
    const auto a = forward_encoder(m, zero);
    const auto b = forward_encoder(m, zero);
    for (int i = 0; i < 5; ++i) {
      CHECK(same_values(a[static_cast<std::size_t>(i)], b[static_cast<std::size_t>(i)]));
    }
  }
}

TEST_CASE("decoder output shapes") {
  SUBCASE("single mode, desk: 1x64x64") {
    const auto m = build(BackboneConfig::desk(), BranchMode::single, 1);
    const Tensor out = forward_decoder(m, forward_encoder(m, rand_image(3, 64, 64, 4)));
    CHECK(out.shape() == Shape{1, 64, 64});
  }
  SUBCASE("dual mode, desk: 5x64x64") {
    const auto m = build(BackboneConfig::desk(), BranchMode::dual_shared, 1);
    const auto fa = forward_encoder(m, rand_image(3, 64, 64, 5));
    const auto fb = forward_encoder(m, rand_image(3, 64, 64, 6));
    const Tensor out = forward_decoder_dual(m, fa, fb);
    CHECK(out.shape() == Shape{5, 64, 64});
  }
  SUBCASE("dual decode rejected on single-mode models") {
    const auto m = build(BackboneConfig::desk(), BranchMode::single, 1);
    const auto f = forward_encoder(m, rand_image(3, 64, 64, 7));
    CHECK_THROWS_AS(forward_decoder_dual(m, f, f), std::invalid_argument);
  }
}

TEST_CASE("stage-2 decoder widths double the first three levels") {
  const auto paper = BackboneConfig::paper();
  const auto m = build(paper, BranchMode::dual_shared, 9);
  CHECK(m.decoder_width(0) == 1024);
  CHECK(m.decoder_width(1) == 512);
  CHECK(m.decoder_width(2) == 192);
  CHECK(m.decoder_width(3) == 32);
  // head consumes the concatenated pair of dconv4 maps
  CHECK(m.params.at("head.conv.kernel").shape() == Shape{5, 64, 3, 3});

  const auto s1 = build(paper, BranchMode::single, 9);
  CHECK(s1.decoder_width(0) == 512);
  CHECK(s1.params.at("head.conv.kernel").shape() == Shape{1, 32, 3, 3});
}

TEST_CASE("parameter count matches a hand count for the desk config") {
  // stem: 8*3*5*5 + 8 bias + 8 gamma + 8 beta
  const long stem = 600 + 8 + 8 + 8;
  // level l (in -> out): c1 out*in*9 + out + 2*out, c2 out*out*9 + out + 2*out,
  // projection out*in + out
  const long l1 = (16 * 8 * 9 + 16 + 32) + (16 * 16 * 9 + 16 + 32) + (16 * 8 + 16);
  const long l2 = (32 * 16 * 9 + 32 + 64) + (32 * 32 * 9 + 32 + 64) + (32 * 16 + 32);
  const long l3 = (64 * 32 * 9 + 64 + 128) + (64 * 64 * 9 + 64 + 128) + (64 * 32 + 64);
  const long l4 = (128 * 64 * 9 + 128 + 256) + (128 * 128 * 9 + 128 + 256) + (128 * 64 + 128);
  // decoder blocks consume upsampled width + skip width
  const long d0 = 64 * (128 + 64) * 9 + 64 + 128;
  const long d1 = 32 * (64 + 32) * 9 + 32 + 64;
  const long d2 = 16 * (32 + 16) * 9 + 16 + 32;
  const long d3 = 8 * (16 + 8) * 9 + 8 + 16;
  const long head = 1 * 8 * 9 + 1;
  const long expected = stem + l1 + l2 + l3 + l4 + d0 + d1 + d2 + d3 + head;

  CHECK(param_count(BackboneConfig::desk(), BranchMode::single) == expected);
  const auto m = build(BackboneConfig::desk(), BranchMode::single, 3);
  CHECK(m.params.total_values() == expected);

  const auto dual = build(BackboneConfig::desk(), BranchMode::dual_shared, 3);
  CHECK(dual.params.total_values() == param_count(BackboneConfig::desk(), BranchMode::dual_shared));
}

TEST_CASE("transfer_weights") {
  const auto cfg = BackboneConfig::desk();
  auto s1 = build(cfg, BranchMode::single, 100);
  auto s2 = build(cfg, BranchMode::dual_shared, 200);

  const Tensor x = rand_image(3, 64, 64, 11);
  const auto before = forward_encoder(s2, x);
  const int copied = transfer_weights(s1, s2);
  CHECK(copied > 0);

  SUBCASE("pre-branch encoder output equals the stage-1 encoder bitwise") {
    const auto a = forward_encoder(s1, x);
    const auto b = forward_encoder(s2, x);
    for (int i = 0; i < 5; ++i) {
      CHECK(same_values(a[static_cast<std::size_t>(i)], b[static_cast<std::size_t>(i)]));
    }
    bool changed = false;
    for (int i = 0; i < 5; ++i) {
      if (!same_values(before[static_cast<std::size_t>(i)], b[static_cast<std::size_t>(i)])) changed = true;
    }
    CHECK(changed);
  }
  SUBCASE("stage-2 head keeps its 5-channel shape") {
    CHECK(s2.params.at("head.conv.kernel").shape()[0] == 5);
  }
  SUBCASE("transfer is idempotent") {
    auto snapshot = [&] {
      std::vector<double> all;
      for (const auto& [name, t] : s2.params) {
        all.insert(all.end(), t.values().begin(), t.values().end());
      }
      return all;
    };
    const auto once = snapshot();
    transfer_weights(s1, s2);
    CHECK(once == snapshot());
  }
  SUBCASE("no overlap is an error") {
    BackboneConfig other = cfg;
    other.encoder_channels = {9, 17, 33, 65, 129};
    other.decoder_channels = {65, 33, 17, 9};
    other.stage1_out_channels = 2;  // otherwise the {1} head bias still matches
    auto incompatible = build(other, BranchMode::single, 5);
    CHECK_THROWS_AS(transfer_weights(s1, incompatible), std::invalid_argument);
  }
}

TEST_CASE("dual-shared branches are pure functions of their own input") {
  const auto m = build(BackboneConfig::desk(), BranchMode::dual_shared, 77);
  const Tensor x = rand_image(3, 64, 64, 12);
  const Tensor y = rand_image(3, 64, 64, 13);
  const auto fx1 = forward_encoder(m, x);
  (void)forward_encoder(m, y);  // interleave the other branch
  const auto fx2 = forward_encoder(m, x);
  for (int i = 0; i < 5; ++i) {
    CHECK(same_values(fx1[static_cast<std::size_t>(i)], fx2[static_cast<std::size_t>(i)]));
  }
}

TEST_CASE("config validation") {
  BackboneConfig bad = BackboneConfig::desk();
  bad.encoder_channels[2] = 0;
  CHECK_THROWS_AS(build(bad, BranchMode::single, 1), std::invalid_argument);
}
