#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bda/class_map.hpp"
#include "bda/tensor.hpp"

namespace bda {

// 8-bit raster, planar channels-first storage (converted from/to interleaved
// PPM on disk).
struct Raster8 {
  int channels = 0;
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> v;

  Raster8() = default;
  Raster8(int channels_, int h_, int w_, std::uint8_t fill = 0)
      : channels(channels_), h(h_), w(w_),
        v(static_cast<std::size_t>(channels_) * h_ * w_, fill) {}

  std::uint8_t at(int c, int r, int col) const {
    return v[(static_cast<std::size_t>(c) * h + r) * w + col];
  }
  std::uint8_t& at(int c, int r, int col) {
    return v[(static_cast<std::size_t>(c) * h + r) * w + col];
  }

  bool operator==(const Raster8&) const = default;
};

// Pre/post-disaster RGB pair plus the damage-level label map (classes 0..4).
struct SamplePair {
  Raster8 pre;
  Raster8 post;
  ClassMap label;
  std::string id;
};

void validate_sample(const SamplePair& s);

struct ManifestRecord {
  std::string id;
  std::string pre_path;    // relative to the dataset root
  std::string post_path;
  std::string label_path;
};

// Dataset root layout: <root>/manifest.tsv (id, pre, post, label columns,
// tab-separated) with rasters under <root>/images/.
struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestRecord> records;
  std::string split = "train";
  std::uint64_t seed = 0;

  static DatasetManifest load(const std::filesystem::path& root);
  void save() const;
};

// --- portable pixmap io -----------------------------------------------------
// Binary P6 for RGB rasters, binary P5 for label maps, maxval 255.
Raster8 read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Raster8& img);
ClassMap read_label_pgm(const std::filesystem::path& path, int max_class = 4);
void write_label_pgm(const std::filesystem::path& path, const ClassMap& map);

// All writers create a temp file in the target directory and rename it over
// the destination, so readers never observe partial files.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);

SamplePair load_sample(const DatasetManifest& manifest, const ManifestRecord& record);
// Writes the three planes under <root>/images/ and returns the record.
ManifestRecord save_sample(const std::filesystem::path& root, const SamplePair& sample);

// Eagerly loaded dataset view.
class SampleDataset {
 public:
  explicit SampleDataset(const DatasetManifest& manifest);
  int size() const { return static_cast<int>(samples_.size()); }
  const SamplePair& sample(int i) const { return samples_[static_cast<std::size_t>(i)]; }

 private:
  std::vector<SamplePair> samples_;
};

// --- synthetic scenes ---------------------------------------------------------
// Deterministic rendered scenes: textured background, rectangular rooftops in
// the pre-image, per-level damage re-rendering in the post-image. Damage
// levels share the rooftop base color; they differ in texture statistics
// (speckle variance, partial erasure, rubble), not in mean color.
struct SynthConfig {
  int num_samples = 200;
  int extent = 64;  // divisible by 32
  int buildings_min = 3;
  int buildings_max = 7;
  // share of buildings per damage level C1..C4
  std::array<double, 4> class_mix = {0.7604, 0.0898, 0.0729, 0.0769};
  std::uint64_t seed = 0;
  std::string split = "train";

  void validate() const;
};

DatasetManifest synth_generate(const std::filesystem::path& root, const SynthConfig& config);

// --- tensor conversions -------------------------------------------------------
Tensor to_tensor(const Raster8& img);             // values scaled to [0,1]
Tensor building_mask_tensor(const ClassMap& label);  // {1,h,w}, 1.0 where label > 0

}  // namespace bda
