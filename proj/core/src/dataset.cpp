#include "bda/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "bda/errors.hpp"
#include "bda/rng.hpp"

namespace bda {

namespace fs = std::filesystem;

void validate_sample(const SamplePair& s) {
  if (s.pre.channels != 3 || s.post.channels != 3) {
    throw DataError("sample " + s.id + ": images must have 3 channels");
  }
  if (s.pre.h != s.post.h || s.pre.w != s.post.w || s.pre.h != s.label.h || s.pre.w != s.label.w) {
    throw DataError("sample " + s.id + ": pre/post/label extents differ");
  }
  for (std::size_t i = 0; i < s.label.v.size(); ++i) {
    if (s.label.v[i] >= kNumClasses) {
      throw DataError("sample " + s.id + ": class id " + std::to_string(int(s.label.v[i])) +
                      " at pixel " + std::to_string(i) + " exceeds 4");
    }
  }
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

DatasetManifest DatasetManifest::load(const fs::path& root) {
  const fs::path file = root / "manifest.tsv";
  std::ifstream in(file);
  if (!in) throw DataError("cannot open manifest " + file.string());
  DatasetManifest m;
  m.root = root;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ManifestRecord r;
    if (!std::getline(ls, r.id, '\t') || !std::getline(ls, r.pre_path, '\t') ||
        !std::getline(ls, r.post_path, '\t') || !std::getline(ls, r.label_path, '\t')) {
      throw DataError(file.string() + ":" + std::to_string(line_no) +
                      ": expected 4 tab-separated fields");
    }
    for (const auto& rec : m.records) {
      if (rec.id == r.id) {
        throw DataError(file.string() + ": duplicate sample id " + r.id);
      }
    }
    for (const std::string& p : {r.pre_path, r.post_path, r.label_path}) {
      if (!fs::exists(root / p)) {
        throw DataError(file.string() + ": missing file " + (root / p).string());
      }
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

void DatasetManifest::save() const {
  std::ostringstream os;
  for (const auto& r : records) {
    os << r.id << '\t' << r.pre_path << '\t' << r.post_path << '\t' << r.label_path << '\n';
  }
  fs::create_directories(root);
  atomic_write(root / "manifest.tsv", os.str());
}

// ---------------------------------------------------------------------------
// pnm io
// ---------------------------------------------------------------------------

void atomic_write(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.parent_path() / (path.filename().string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

namespace {

// Reads one PNM header token, skipping whitespace and '#' comments.
std::string pnm_token(std::istream& in, const fs::path& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) continue;
    tok.push_back(static_cast<char>(c));
    while ((c = in.peek()) != EOF && !std::isspace(c) && c != '#') {
      tok.push_back(static_cast<char>(in.get()));
    }
    return tok;
  }
  throw DataError(path.string() + ": truncated header");
}

struct PnmHeader {
  std::string magic;
  int w, h, maxval;
};

PnmHeader read_pnm_header(std::istream& in, const fs::path& path, const char* expect_magic) {
  PnmHeader hd;
  hd.magic = pnm_token(in, path);
  if (hd.magic != expect_magic) {
    throw DataError(path.string() + ": expected " + expect_magic + ", found '" + hd.magic + "'");
  }
  try {
    hd.w = std::stoi(pnm_token(in, path));
    hd.h = std::stoi(pnm_token(in, path));
    hd.maxval = std::stoi(pnm_token(in, path));
  } catch (const std::exception&) {
    throw DataError(path.string() + ": malformed header field");
  }
  if (hd.w <= 0 || hd.h <= 0 || hd.maxval != 255) {
    throw DataError(path.string() + ": unsupported geometry or maxval");
  }
  // single whitespace byte separates header and raster
  in.get();
  return hd;
}

}  // namespace

Raster8 read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  const PnmHeader hd = read_pnm_header(in, path, "P6");
  Raster8 img(3, hd.h, hd.w);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(hd.w) * 3);
  for (int r = 0; r < hd.h; ++r) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!in) throw DataError(path.string() + ": truncated raster at row " + std::to_string(r));
    for (int c = 0; c < hd.w; ++c) {
      for (int ch = 0; ch < 3; ++ch) img.at(ch, r, c) = row[static_cast<std::size_t>(c) * 3 + ch];
    }
  }
  return img;
}

void write_ppm(const fs::path& path, const Raster8& img) {
  if (img.channels != 3) throw DataError("write_ppm: raster must have 3 channels");
  std::string bytes = "P6\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
  bytes.reserve(bytes.size() + static_cast<std::size_t>(img.h) * img.w * 3);
  for (int r = 0; r < img.h; ++r) {
    for (int c = 0; c < img.w; ++c) {
      for (int ch = 0; ch < 3; ++ch) bytes.push_back(static_cast<char>(img.at(ch, r, c)));
    }
  }
  atomic_write(path, bytes);
}

ClassMap read_label_pgm(const fs::path& path, int max_class) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  const PnmHeader hd = read_pnm_header(in, path, "P5");
  ClassMap map(hd.h, hd.w);
  const std::streampos raster_start = in.tellg();
  in.read(reinterpret_cast<char*>(map.v.data()), static_cast<std::streamsize>(map.v.size()));
  if (!in) throw DataError(path.string() + ": truncated raster");
  for (std::size_t i = 0; i < map.v.size(); ++i) {
    if (map.v[i] > max_class) {
      throw DataError(path.string() + ": class value " + std::to_string(int(map.v[i])) +
                      " at byte offset " +
                      std::to_string(static_cast<long>(raster_start) + static_cast<long>(i)) +
                      " exceeds " + std::to_string(max_class));
    }
  }
  return map;
}

void write_label_pgm(const fs::path& path, const ClassMap& map) {
  std::string bytes = "P5\n" + std::to_string(map.w) + " " + std::to_string(map.h) + "\n255\n";
  bytes.append(reinterpret_cast<const char*>(map.v.data()), map.v.size());
  atomic_write(path, bytes);
}

SamplePair load_sample(const DatasetManifest& manifest, const ManifestRecord& record) {
  SamplePair s;
  s.id = record.id;
  s.pre = read_ppm(manifest.root / record.pre_path);
  s.post = read_ppm(manifest.root / record.post_path);
  s.label = read_label_pgm(manifest.root / record.label_path);
  validate_sample(s);
  return s;
}

ManifestRecord save_sample(const fs::path& root, const SamplePair& sample) {
  fs::create_directories(root / "images");
  ManifestRecord r;
  r.id = sample.id;
  r.pre_path = "images/" + sample.id + "_pre.ppm";
  r.post_path = "images/" + sample.id + "_post.ppm";
  r.label_path = "images/" + sample.id + "_label.pgm";
  write_ppm(root / r.pre_path, sample.pre);
  write_ppm(root / r.post_path, sample.post);
  write_label_pgm(root / r.label_path, sample.label);
  return r;
}

SampleDataset::SampleDataset(const DatasetManifest& manifest) {
  samples_.reserve(manifest.records.size());
  for (const auto& r : manifest.records) samples_.push_back(load_sample(manifest, r));
}

// ---------------------------------------------------------------------------
// synthetic scenes
// ---------------------------------------------------------------------------

void SynthConfig::validate() const {
  if (extent < 32 || extent % 32 != 0) {
    throw DataError("synth: extent " + std::to_string(extent) + " must be a positive multiple of 32");
  }
  if (num_samples < 1 || buildings_min < 1 || buildings_max < buildings_min) {
    throw DataError("synth: invalid sample or building counts");
  }
  double total = 0.0;
  for (double p : class_mix) {
    if (p < 0.0) throw DataError("synth: negative class mix entry");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) throw DataError("synth: class mix must sum to 1");
}

namespace {

struct Rect {
  int top, left, height, width;
  bool intersects(const Rect& o, int gap) const {
    return !(left >= o.left + o.width + gap || o.left >= left + width + gap ||
             top >= o.top + o.height + gap || o.top >= top + height + gap);
  }
};

// Coarse value noise: bilinear interpolation over a seeded control grid.
class ValueNoise {
 public:
  ValueNoise(int extent, int cell, Rng& rng) : cell_(cell) {
    grid_n_ = extent / cell + 2;
    grid_.resize(static_cast<std::size_t>(grid_n_) * grid_n_);
    for (double& g : grid_) g = rng.uniform(-1.0, 1.0);
  }
  double operator()(int r, int c) const {
    const double y = static_cast<double>(r) / cell_;
    const double x = static_cast<double>(c) / cell_;
    const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
    const double fy = y - y0, fx = x - x0;
    const auto g = [&](int yy, int xx) { return grid_[static_cast<std::size_t>(yy) * grid_n_ + xx]; };
    return g(y0, x0) * (1 - fy) * (1 - fx) + g(y0 + 1, x0) * fy * (1 - fx) +
           g(y0, x0 + 1) * (1 - fy) * fx + g(y0 + 1, x0 + 1) * fy * fx;
  }

 private:
  int cell_, grid_n_;
  std::vector<double> grid_;
};

std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void paint_background(Raster8& img, const ValueNoise& coarse, Rng& rng,
                      const std::array<double, 3>& base) {
  for (int r = 0; r < img.h; ++r) {
    for (int c = 0; c < img.w; ++c) {
      const double n = coarse(r, c) * 0.06 + rng.uniform(-0.02, 0.02);
      for (int ch = 0; ch < 3; ++ch) img.at(ch, r, c) = to_u8(base[static_cast<std::size_t>(ch)] + n);
    }
  }
}

void paint_roof(Raster8& img, const Rect& rect, Rng& rng, const std::array<double, 3>& color) {
  for (int r = rect.top; r < rect.top + rect.height; ++r) {
    for (int c = rect.left; c < rect.left + rect.width; ++c) {
      const bool rim = r == rect.top || r == rect.top + rect.height - 1 || c == rect.left ||
                       c == rect.left + rect.width - 1;
      const double n = rng.uniform(-0.02, 0.02);
      for (int ch = 0; ch < 3; ++ch) {
        double v = color[static_cast<std::size_t>(ch)] + n;
        if (rim) v *= 0.55;
        img.at(ch, r, c) = to_u8(v);
      }
    }
  }
}

// Damage rendering on the post image. Levels share the rooftop base color and
// differ in texture statistics only.
void render_damage(Raster8& post, const Rect& rect, int level, Rng& rng,
                   const ValueNoise& bg_noise, const std::array<double, 3>& bg_base) {
  switch (level) {
    case 1:
      return;  // no damage: post rooftop identical to pre
    case 2:
      // minor: dense gray speckle over the intact roof, mean preserved
      for (int r = rect.top; r < rect.top + rect.height; ++r) {
        for (int c = rect.left; c < rect.left + rect.width; ++c) {
          if (!rng.bernoulli(0.6)) continue;
          const double d = rng.uniform(-0.32, 0.32);
          for (int ch = 0; ch < 3; ++ch) {
            post.at(ch, r, c) = to_u8(post.at(ch, r, c) / 255.0 + d);
          }
        }
      }
      return;
    case 3: {
      // major: light speckle plus dominant terrain-colored erasure patches
      for (int r = rect.top; r < rect.top + rect.height; ++r) {
        for (int c = rect.left; c < rect.left + rect.width; ++c) {
          if (!rng.bernoulli(0.4)) continue;
          const double d = rng.uniform(-0.3, 0.3);
          for (int ch = 0; ch < 3; ++ch) {
            post.at(ch, r, c) = to_u8(post.at(ch, r, c) / 255.0 + d);
          }
        }
      }
      const int holes = rng.uniform_int(3, 5);
      for (int i = 0; i < holes; ++i) {
        const int hh = std::max(2, rng.uniform_int(rect.height / 3, rect.height / 2));
        const int hw = std::max(2, rng.uniform_int(rect.width / 3, rect.width / 2));
        const int ht = rect.top + rng.uniform_int(0, std::max(0, rect.height - hh));
        const int hl = rect.left + rng.uniform_int(0, std::max(0, rect.width - hw));
        for (int r = ht; r < ht + hh; ++r) {
          for (int c = hl; c < hl + hw; ++c) {
            const double n = bg_noise(r, c) * 0.06 + rng.uniform(-0.02, 0.02);
            for (int ch = 0; ch < 3; ++ch) {
              post.at(ch, r, c) = to_u8(bg_base[static_cast<std::size_t>(ch)] + n);
            }
          }
        }
      }
      return;
    }
    case 4:
      // destroyed: dark desaturated rubble in 2x2 chunks with shadow pockets,
      // rim erased
      for (int r = rect.top; r < rect.top + rect.height; r += 2) {
        for (int c = rect.left; c < rect.left + rect.width; c += 2) {
          const bool shadow = rng.bernoulli(0.25);
          const double g = shadow ? rng.uniform(0.03, 0.1) : rng.uniform(0.12, 0.45);
          for (int dr = 0; dr < 2 && r + dr < rect.top + rect.height; ++dr) {
            for (int dc = 0; dc < 2 && c + dc < rect.left + rect.width; ++dc) {
              const double jitter = rng.uniform(-0.03, 0.03);
              for (int ch = 0; ch < 3; ++ch) {
                post.at(ch, r + dr, c + dc) = to_u8(g + jitter);
              }
            }
          }
        }
      }
      return;
    default:
      throw DataError("render_damage: unexpected level " + std::to_string(level));
  }
}

}  // namespace

DatasetManifest synth_generate(const fs::path& root, const SynthConfig& config) {
  config.validate();
  DatasetManifest manifest;
  manifest.root = root;
  manifest.split = config.split;
  manifest.seed = config.seed;

  const std::uint64_t split_seed = mix_seed(config.seed, fnv1a(config.split));
  // Largest-remainder assignment keeps the realized level mix tight against
  // the configured one.
  std::array<long, 4> level_counts{};
  long buildings_total = 0;

  for (int si = 0; si < config.num_samples; ++si) {
    Rng rng(mix_seed(split_seed, static_cast<std::uint64_t>(si)));
    const int e = config.extent;

    // terrain base colors stay in a narrow green band so a patch pasted from
    // one scene into another does not leave a strong color seam
    const std::array<double, 3> bg_base = {rng.uniform(0.16, 0.24), rng.uniform(0.36, 0.48),
                                           rng.uniform(0.10, 0.18)};
    ValueNoise coarse(e, std::max(4, e / 8), rng);

    SamplePair s;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%04d", si);
    s.id = buf;
    s.pre = Raster8(3, e, e);
    s.label = ClassMap(e, e);
    paint_background(s.pre, coarse, rng, bg_base);

    const int nb = rng.uniform_int(config.buildings_min, config.buildings_max);
    std::vector<Rect> placed;
    const int min_side = std::max(6, e / 6);
    const int max_side = std::max(min_side + 1, e / 3);
    for (int b = 0; b < nb; ++b) {
      Rect rect{};
      bool ok = false;
      for (int attempt = 0; attempt < 40 && !ok; ++attempt) {
        rect.height = rng.uniform_int(min_side, max_side);
        rect.width = rng.uniform_int(min_side, max_side);
        rect.top = rng.uniform_int(1, e - rect.height - 1);
        rect.left = rng.uniform_int(1, e - rect.width - 1);
        ok = true;
        for (const Rect& p : placed) {
          if (rect.intersects(p, 2)) {
            ok = false;
            break;
          }
        }
      }
      if (!ok) continue;
      placed.push_back(rect);

      // deficit-based level pick
      int level = 1;
      double best = -1e18;
      for (int li = 0; li < 4; ++li) {
        const double deficit = config.class_mix[static_cast<std::size_t>(li)] *
                                   (buildings_total + 1) -
                               level_counts[static_cast<std::size_t>(li)];
        if (deficit > best) {
          best = deficit;
          level = li + 1;
        }
      }
      ++level_counts[static_cast<std::size_t>(level - 1)];
      ++buildings_total;

      const double lum = rng.uniform(0.55, 0.8);
      const std::array<double, 3> roof = {lum + rng.uniform(-0.05, 0.05),
                                          lum + rng.uniform(-0.05, 0.05),
                                          lum + rng.uniform(-0.05, 0.05)};
      paint_roof(s.pre, rect, rng, roof);
      for (int r = rect.top; r < rect.top + rect.height; ++r) {
        for (int c = rect.left; c < rect.left + rect.width; ++c) {
          s.label.at(r, c) = static_cast<std::uint8_t>(level);
        }
      }
      // remember for the post pass via label; damage rendered below
    }

    s.post = s.pre;
    // re-walk the placed rectangles; levels recovered from the label map
    for (const Rect& rect : placed) {
      const int level = s.label.at(rect.top, rect.left);
      render_damage(s.post, rect, level, rng, coarse, bg_base);
    }

    validate_sample(s);
    manifest.records.push_back(save_sample(root, s));
  }

  manifest.save();
  return manifest;
}

// ---------------------------------------------------------------------------
// tensor conversions
// ---------------------------------------------------------------------------

Tensor to_tensor(const Raster8& img) {
  std::vector<double> v(img.v.size());
  for (std::size_t i = 0; i < img.v.size(); ++i) v[i] = img.v[i] / 255.0;
  return Tensor::from_values({img.channels, img.h, img.w}, std::move(v));
}

Tensor building_mask_tensor(const ClassMap& label) {
  std::vector<double> v(label.v.size());
  for (std::size_t i = 0; i < label.v.size(); ++i) v[i] = label.v[i] > 0 ? 1.0 : 0.0;
  return Tensor::from_values({1, label.h, label.w}, std::move(v));
}

}  // namespace bda
