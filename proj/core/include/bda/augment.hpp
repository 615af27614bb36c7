#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "bda/dataset.hpp"
#include "bda/rng.hpp"

namespace bda {

// Axis-aligned rectangle marking the region taken from the source sample.
// As a mask M over the image, M = 0 inside the rectangle and 1 outside.
struct CutMixMask {
  int top = 0, left = 0, height = 0, width = 0;

  bool contains(int r, int c) const {
    return r >= top && r < top + height && c >= left && c < left + width;
  }
  long area() const { return static_cast<long>(height) * width; }
  double area_ratio(int h, int w) const {
    return static_cast<double>(area()) / (static_cast<double>(h) * w);
  }
};

struct AugmentConfig {
  std::vector<int> difficult_classes = {2, 3};  // minor, major
  double cutmix_probability = 0.5;
  double area_ratio_min = 0.1;
  double area_ratio_max = 0.4;
  std::uint64_t seed = 0;

  void validate() const;
};

// Composes per the mask: inside the rectangle all three planes come from b,
// outside from a.
SamplePair cutmix(const SamplePair& a, const SamplePair& b, const CutMixMask& mask);

struct DifficultSource {
  SamplePair sample;
  CutMixMask mask;  // centered on a difficult-class pixel of `sample`
};

// Picks a sample containing at least one difficult-class pixel (uniformly
// over qualifying samples), optionally crops it to crop_extent around such a
// pixel, and draws the transplant rectangle. Empty when no sample qualifies;
// the caller disables CutMix in that case.
std::optional<DifficultSource> sample_difficult_source(const SampleDataset& dataset,
                                                       const AugmentConfig& config, Rng& rng,
                                                       int crop_extent = 0);

// The shared spatial transform: horizontal flip, vertical flip, then rot_k
// clockwise quarter turns, applied identically to pre, post and label.
SamplePair apply_flip_rotation(const SamplePair& sample, bool hflip, bool vflip, int rot_k);

// Draws the flips and rotation independently. Rotation is skipped for
// non-square inputs.
SamplePair basic_augment(const SamplePair& sample, Rng& rng);

// Seeded random crop (identity when the sample already has the crop extent).
SamplePair random_crop(const SamplePair& sample, int extent, Rng& rng);

}  // namespace bda
