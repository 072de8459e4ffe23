#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "maskforge/geometry.hpp"
#include "maskforge/rng.hpp"

namespace testsupport {

namespace fs = std::filesystem;
using maskforge::Point2d;
using maskforge::Polygond;

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("maskforge_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

/// Star-shaped simple polygon around center with radii in [rmin, rmax].
inline Polygond random_star(maskforge::Rng& rng, Point2d center, double rmin, double rmax, int n) {
  std::vector<double> angles;
  for (int i = 0; i < n; ++i) angles.push_back(rng.uniform(0.0, 6.283185307179586));
  std::sort(angles.begin(), angles.end());
  std::vector<Point2d> v;
  for (double a : angles) {
    const double r = rng.uniform(rmin, rmax);
    v.emplace_back(center.x() + r * std::cos(a), center.y() + r * std::sin(a));
  }
  return maskforge::make_polygon(std::move(v));
}

// Winding-number containment; written separately from the library's
// even-odd test so the two can check each other.
inline bool winding_contains(const Polygond& poly, const Point2d& p) {
  int wn = 0;
  const std::size_t n = poly.vertices.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Point2d& a = poly.vertices[i];
    const Point2d& b = poly.vertices[(i + 1) % n];
    const double cross = (b.x() - a.x()) * (p.y() - a.y()) - (p.x() - a.x()) * (b.y() - a.y());
    if (a.y() <= p.y()) {
      if (b.y() > p.y() && cross > 0) ++wn;
    } else if (b.y() <= p.y() && cross < 0) {
      --wn;
    }
  }
  return wn != 0;
}

/// Sub-pixel samples of a polygon: k x k per pixel over the frame.
inline std::vector<char> supersample(const Polygond& poly, int width, int height, int k) {
  std::vector<char> out(static_cast<std::size_t>(width) * height * k * k, 0);
  std::size_t i = 0;
  for (int y = 0; y < height * k; ++y)
    for (int x = 0; x < width * k; ++x, ++i)
      out[i] = winding_contains(poly, Point2d((x + 0.5) / k, (y + 0.5) / k));
  return out;
}

inline double sample_iou(const std::vector<char>& a, const std::vector<char>& b) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

/// Anti-aliased coverage of a polygon as 8-bit alpha (k x k samples per pixel).
inline maskforge::GrayImage coverage_alpha(const Polygond& poly, int width, int height, int k) {
  maskforge::GrayImage out(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      int hits = 0;
      for (int sy = 0; sy < k; ++sy)
        for (int sx = 0; sx < k; ++sx)
          hits += winding_contains(poly, Point2d(x + (sx + 0.5) / k, y + (sy + 0.5) / k));
      out.data[static_cast<std::size_t>(y) * width + x] = maskforge::to_u8(255.0 * hits / (k * k));
    }
  return out;
}

// Brute-force verification metrics.

inline std::size_t count_at_or_below(const std::vector<double>& d, double t) {
  std::size_t n = 0;
  for (double x : d)
    if (x <= t) ++n;
  return n;
}

inline double brute_threshold(const std::vector<double>& diff, double far_target) {
  std::vector<double> s = diff;
  std::sort(s.begin(), s.end());
  std::vector<double> cands{std::nextafter(std::min(0.0, s.front()), -INFINITY), 0.0,
                            std::nextafter(s.back(), INFINITY)};
  for (std::size_t i = 0; i + 1 < s.size(); ++i) cands.push_back((s[i] + s[i + 1]) / 2);
  double best = -INFINITY;
  for (double c : cands)
    if (static_cast<double>(count_at_or_below(diff, c)) / diff.size() <= far_target) best = std::max(best, c);
  return best;
}

}  // namespace testsupport
