#include "bda/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "bda/errors.hpp"

namespace bda {

void AugmentConfig::validate() const {
  if (cutmix_probability < 0.0 || cutmix_probability > 1.0) {
    throw std::invalid_argument("AugmentConfig: cutmix probability outside [0,1]");
  }
  if (!(area_ratio_min > 0.0 && area_ratio_max < 1.0 && area_ratio_min < area_ratio_max)) {
    throw std::invalid_argument("AugmentConfig: area ratio range must satisfy 0 < min < max < 1");
  }
  for (int c : difficult_classes) {
    if (c < 1 || c > 4) {
      throw std::invalid_argument("AugmentConfig: difficult class ids must be damage levels 1..4");
    }
  }
}

SamplePair cutmix(const SamplePair& a, const SamplePair& b, const CutMixMask& mask) {
  if (a.pre.h != b.pre.h || a.pre.w != b.pre.w) {
    throw std::invalid_argument("cutmix: sample extents differ");
  }
  const int h = a.pre.h, w = a.pre.w;
  if (mask.top < 0 || mask.left < 0 || mask.top + mask.height > h || mask.left + mask.width > w) {
    throw std::invalid_argument("cutmix: rectangle outside the image");
  }
  SamplePair out = a;
  for (int r = mask.top; r < mask.top + mask.height; ++r) {
    for (int c = mask.left; c < mask.left + mask.width; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        out.pre.at(ch, r, c) = b.pre.at(ch, r, c);
        out.post.at(ch, r, c) = b.post.at(ch, r, c);
      }
      out.label.at(r, c) = b.label.at(r, c);
    }
  }
  return out;
}

namespace {

bool is_difficult(std::uint8_t cls, const std::vector<int>& difficult) {
  return std::find(difficult.begin(), difficult.end(), int(cls)) != difficult.end();
}

std::vector<int> difficult_pixels(const ClassMap& label, const std::vector<int>& difficult) {
  std::vector<int> out;
  for (std::size_t i = 0; i < label.v.size(); ++i) {
    if (is_difficult(label.v[i], difficult)) out.push_back(static_cast<int>(i));
  }
  return out;
}

SamplePair crop_at(const SamplePair& s, int top, int left, int extent) {
  SamplePair out;
  out.id = s.id;
  out.pre = Raster8(3, extent, extent);
  out.post = Raster8(3, extent, extent);
  out.label = ClassMap(extent, extent);
  for (int r = 0; r < extent; ++r) {
    for (int c = 0; c < extent; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        out.pre.at(ch, r, c) = s.pre.at(ch, top + r, left + c);
        out.post.at(ch, r, c) = s.post.at(ch, top + r, left + c);
      }
      out.label.at(r, c) = s.label.at(top + r, left + c);
    }
  }
  return out;
}

// Rectangle of the sampled area centered on (cy, cx), shifted to fit inside
// the image so the sampled area (and the contained pixel) are preserved.
CutMixMask draw_rect(int h, int w, int cy, int cx, const AugmentConfig& cfg, Rng& rng) {
  const double ratio = rng.uniform(cfg.area_ratio_min, cfg.area_ratio_max);
  const double aspect = rng.uniform(0.7, 1.4);
  const double area = ratio * h * w;
  int rh = static_cast<int>(std::lround(std::sqrt(area * aspect)));
  rh = std::clamp(rh, 1, h);
  // width chosen so the realized ratio stays inside the configured bounds
  const int w_min = static_cast<int>(std::ceil(cfg.area_ratio_min * h * w / rh));
  const int w_max = static_cast<int>(std::floor(cfg.area_ratio_max * h * w / rh));
  int rw = static_cast<int>(std::lround(area / rh));
  rw = std::clamp(rw, std::max(1, w_min), std::min(w, std::max(1, w_max)));

  CutMixMask m;
  m.height = rh;
  m.width = rw;
  m.top = std::clamp(cy - rh / 2, 0, h - rh);
  m.left = std::clamp(cx - rw / 2, 0, w - rw);
  return m;
}

}  // namespace

std::optional<DifficultSource> sample_difficult_source(const SampleDataset& dataset,
                                                       const AugmentConfig& config, Rng& rng,
                                                       int crop_extent) {
  config.validate();
  std::vector<int> qualifying;
  for (int i = 0; i < dataset.size(); ++i) {
    const ClassMap& label = dataset.sample(i).label;
    for (std::uint8_t cls : label.v) {
      if (is_difficult(cls, config.difficult_classes)) {
        qualifying.push_back(i);
        break;
      }
    }
  }
  if (qualifying.empty()) return std::nullopt;

  const int pick = qualifying[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<int>(qualifying.size()) - 1))];
  SamplePair source = dataset.sample(pick);

  if (crop_extent > 0 && (source.pre.h != crop_extent || source.pre.w != crop_extent)) {
    if (source.pre.h < crop_extent || source.pre.w < crop_extent) {
      throw DataError("sample_difficult_source: sample smaller than crop extent");
    }
    // crop window positioned so a difficult pixel stays inside
    const auto px = difficult_pixels(source.label, config.difficult_classes);
    const int p = px[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(px.size()) - 1))];
    const int cy = p / source.label.w, cx = p % source.label.w;
    const int top = std::clamp(cy - crop_extent / 2, 0, source.pre.h - crop_extent);
    const int left = std::clamp(cx - crop_extent / 2, 0, source.pre.w - crop_extent);
    source = crop_at(source, top, left, crop_extent);
  }

  const auto px = difficult_pixels(source.label, config.difficult_classes);
  // non-empty by construction of the crop window
  const int p = px[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(px.size()) - 1))];
  const int cy = p / source.label.w, cx = p % source.label.w;

  DifficultSource out;
  out.mask = draw_rect(source.label.h, source.label.w, cy, cx, config, rng);
  out.sample = std::move(source);
  return out;
}

namespace {

// (r,c) -> source coordinates after undoing the transform chain
// applied order: horizontal flip, vertical flip, then rot_k * 90 deg cw.
struct CoordMap {
  int h, w;  // output extents (equal to input; rotations require square)
  bool hflip, vflip;
  int rot_k;

  std::pair<int, int> source(int r, int c) const {
    // undo rotation: output = rot90^k(input)
    int rr = r, cc = c;
    for (int i = 0; i < rot_k; ++i) {
      // inverse of one cw rotation: (r,c) <- (c, h-1-r) applied backwards
      const int pr = h - 1 - cc;
      const int pc = rr;
      rr = pr;
      cc = pc;
    }
    if (vflip) rr = h - 1 - rr;
    if (hflip) cc = w - 1 - cc;
    return {rr, cc};
  }
};

}  // namespace

SamplePair apply_flip_rotation(const SamplePair& sample, bool hflip, bool vflip, int rot_k) {
  const int h = sample.pre.h, w = sample.pre.w;
  rot_k = ((rot_k % 4) + 4) % 4;
  if (rot_k != 0 && h != w) {
    throw std::invalid_argument("apply_flip_rotation: rotation requires a square sample");
  }
  if (!hflip && !vflip && rot_k == 0) return sample;

  CoordMap map{h, w, hflip, vflip, rot_k};
  SamplePair out;
  out.id = sample.id;
  out.pre = Raster8(3, h, w);
  out.post = Raster8(3, h, w);
  out.label = ClassMap(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const auto [sr, sc] = map.source(r, c);
      for (int ch = 0; ch < 3; ++ch) {
        out.pre.at(ch, r, c) = sample.pre.at(ch, sr, sc);
        out.post.at(ch, r, c) = sample.post.at(ch, sr, sc);
      }
      out.label.at(r, c) = sample.label.at(sr, sc);
    }
  }
  return out;
}

SamplePair basic_augment(const SamplePair& sample, Rng& rng) {
  const bool hflip = rng.bernoulli(0.5);
  const bool vflip = rng.bernoulli(0.5);
  int rot_k = rng.uniform_int(0, 3);
  if (sample.pre.h != sample.pre.w) rot_k = 0;  // rotation skipped for non-square inputs
  return apply_flip_rotation(sample, hflip, vflip, rot_k);
}

SamplePair random_crop(const SamplePair& sample, int extent, Rng& rng) {
  if (sample.pre.h == extent && sample.pre.w == extent) return sample;
  if (sample.pre.h < extent || sample.pre.w < extent) {
    throw DataError("random_crop: sample " + sample.id + " smaller than crop extent " +
                    std::to_string(extent));
  }
  const int top = rng.uniform_int(0, sample.pre.h - extent);
  const int left = rng.uniform_int(0, sample.pre.w - extent);
  return crop_at(sample, top, left, extent);
}

}  // namespace bda
