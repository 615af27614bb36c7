#pragma once

#include <cstdint>
#include <vector>

namespace bda {

// Per-pixel class ids, row-major. The damage scale is C0..C4
// (background, no damage, minor, major, destroyed); binary masks reuse the
// same container with values {0,1}.
struct ClassMap {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> v;

  ClassMap() = default;
  ClassMap(int h_, int w_, std::uint8_t fill = 0)
      : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, fill) {}

  std::uint8_t at(int r, int c) const { return v[static_cast<std::size_t>(r) * w + c]; }
  std::uint8_t& at(int r, int c) { return v[static_cast<std::size_t>(r) * w + c]; }
  std::size_t size() const { return v.size(); }

  bool operator==(const ClassMap&) const = default;
};

inline constexpr int kNumClasses = 5;
inline constexpr int kBackground = 0;

}  // namespace bda
