#include "maskforge/render.hpp"

#include <algorithm>
#include <cmath>
#include <span>

#include "maskforge/errors.hpp"

namespace maskforge {

std::string to_string(WarpStrategy s) {
  return s == WarpStrategy::piecewise_affine ? "piecewise_affine" : "global_affine";
}

WarpStrategy parse_warp_strategy(const std::string& s) {
  if (s == "piecewise_affine") return WarpStrategy::piecewise_affine;
  if (s == "global_affine") return WarpStrategy::global_affine;
  throw ParseError("unknown warp strategy '" + s + "'");
}

namespace {

const Eigen::Matrix3d& ycc_matrix() {
  static const Eigen::Matrix3d m = (Eigen::Matrix3d() << 0.299, 0.587, 0.114,  //
                                    -0.168736, -0.331264, 0.5,                  //
                                    0.5, -0.418688, -0.081312)
                                       .finished();
  return m;
}

const Eigen::Matrix3d& ycc_inverse() {
  static const Eigen::Matrix3d inv = ycc_matrix().inverse();
  return inv;
}

const Eigen::Vector3d ycc_offset(0.0, 0.5, 0.5);

// Destination triangle plus the map back into template space.
struct TriangleMap {
  std::array<Point2d, 3> dst;
  Affine2d to_src = Affine2d::identity();
};

// Bilinear lookup with alpha-premultiplied weights; pixel centers sit at
// half-integers. Where the neighborhood is fully transparent the straight
// RGB average is kept so later feathering does not pull in black.
void sample(const RgbaImage& src, const Point2d& at, std::span<std::uint8_t, 4> out) {
  const double fx = at.x() - 0.5, fy = at.y() - 0.5;
  const double x0f = std::floor(fx), y0f = std::floor(fy);
  const double tx = fx - x0f, ty = fy - y0f;
  const int x0 = static_cast<int>(x0f), y0 = static_cast<int>(y0f);
  double alpha = 0, inside = 0;
  double premul[3] = {0, 0, 0}, straight[3] = {0, 0, 0};
  const double weights[4] = {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};
  for (int k = 0; k < 4; ++k) {
    const double w = weights[k];
    if (w == 0.0) continue;
    const int x = x0 + (k & 1), y = y0 + (k >> 1);
    if (x < 0 || y < 0 || x >= src.width || y >= src.height) continue;
    const auto px = src.at(x, y);
    const double a = px[3] / 255.0;
    alpha += w * a;
    inside += w;
    for (int c = 0; c < 3; ++c) {
      premul[c] += w * a * px[c];
      straight[c] += w * px[c];
    }
  }
  for (int c = 0; c < 3; ++c) {
    if (alpha > 0)
      out[c] = to_u8(premul[c] / alpha);
    else
      out[c] = inside > 0 ? to_u8(straight[c] / inside) : 0;
  }
  out[3] = to_u8(alpha * 255.0);
}

RgbaImage render_triangles(const RgbaImage& src, std::span<const TriangleMap> tris, Frame frame) {
  RgbaImage out(frame.width, frame.height);
  std::vector<std::uint8_t> written(out.pixel_count(), 0);
  for (const TriangleMap& t : tris) {
    const auto& [a, b, c] = t.dst;
    const double area = orient2d(a, b, c);
    if (area == 0.0) continue;
    const double sign = area > 0 ? 1.0 : -1.0;
    const double eps = 1e-9 * std::abs(area);
    const double xmin = std::min({a.x(), b.x(), c.x()}), xmax = std::max({a.x(), b.x(), c.x()});
    const double ymin = std::min({a.y(), b.y(), c.y()}), ymax = std::max({a.y(), b.y(), c.y()});
    const int x0 = std::max(0, static_cast<int>(std::floor(xmin - 0.5)));
    const int x1 = std::min(frame.width - 1, static_cast<int>(std::ceil(xmax - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::floor(ymin - 0.5)));
    const int y1 = std::min(frame.height - 1, static_cast<int>(std::ceil(ymax - 0.5)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const std::size_t idx = static_cast<std::size_t>(y) * frame.width + x;
        if (written[idx]) continue;
        const Point2d p(x + 0.5, y + 0.5);
        if (sign * orient2d(b, c, p) < -eps || sign * orient2d(c, a, p) < -eps ||
            sign * orient2d(a, b, p) < -eps)
          continue;
        written[idx] = 1;
        sample(src, t.to_src(p), out.at(x, y));
      }
    }
  }
  return out;
}

void require_on_frame(const LandmarkSet& lm, Frame frame) {
  for (const Point2d& p : lm.points)
    if (p.x() >= 0 && p.y() >= 0 && p.x() <= frame.width && p.y() <= frame.height) return;
  throw PlacementError("landmarks for '" + lm.image_id + "' lie entirely outside the frame");
}

std::array<Point2d, 4> raster_corners(const RgbaImage& r) {
  const double w = r.width, h = r.height;
  return {Point2d(0, 0), Point2d(w, 0), Point2d(w, h), Point2d(0, h)};
}

MaskLayer make_layer(const MaskTemplate& mask, RgbaImage raster, WarpStrategy strategy) {
  MaskLayer layer;
  layer.raster = std::move(raster);
  layer.meta.template_id = mask.template_id;
  const auto at = mask.template_id.find('@');
  layer.meta.hsv_signature = at == std::string::npos ? HsvShift::identity().signature()
                                                      : mask.template_id.substr(at + 1);
  layer.meta.strategy = strategy;
  return layer;
}

}  // namespace

Eigen::Vector3d rgb_to_ycbcr(const Eigen::Vector3d& rgb01) { return ycc_matrix() * rgb01 + ycc_offset; }

Eigen::Vector3d ycbcr_to_rgb(const Eigen::Vector3d& ycc) { return ycc_inverse() * (ycc - ycc_offset); }

MaskLayer warp_mask(const MaskTemplate& mask, const LandmarkSet& lm, Frame frame) {
  if (lm.convention != LandmarkConvention::P68)
    throw ValidationError("piecewise warp needs 68-point landmarks");
  validate(lm);
  require_on_frame(lm, frame);

  std::vector<Point2d> src, dst;
  for (const Anchor& a : mask.anchors) {
    if (a.landmark_index < 0 || a.landmark_index >= 68)
      throw ValidationError("anchor landmark_index out of range");
    src.push_back(a.template_point);
    dst.push_back(lm.points[a.landmark_index]);
  }
  const std::size_t anchor_count = src.size();
  const Affine2d outer = fit_affine(src, dst);
  for (const Point2d& corner : raster_corners(mask.raster)) {
    bool duplicate = false;
    for (std::size_t i = 0; i < anchor_count; ++i) duplicate = duplicate || src[i] == corner;
    if (duplicate) continue;
    src.push_back(corner);
    dst.push_back(outer(corner));
  }

  const TriangleMeshd mesh = delaunay(src);
  std::vector<TriangleMap> maps;
  maps.reserve(mesh.triangles.size());
  const double scale = std::max(mask.raster.width, mask.raster.height);
  for (const auto& tri : mesh.triangles) {
    const std::array<Point2d, 3> s{src[tri[0]], src[tri[1]], src[tri[2]]};
    const std::array<Point2d, 3> d{dst[tri[0]], dst[tri[1]], dst[tri[2]]};
    const double src_area = orient2d(s[0], s[1], s[2]);
    const double dst_area = orient2d(d[0], d[1], d[2]);
    if (src_area <= 1e-12 * scale * scale) continue;
    if (!(dst_area > 0.0))
      throw DegeneracyError("piecewise warp folds over for '" + lm.image_id + "'");
    maps.push_back({d, triangle_affine(d, s)});
  }

  MaskLayer layer = make_layer(mask, render_triangles(mask.raster, maps, frame),
                               WarpStrategy::piecewise_affine);
  layer.meta.source_image_id = lm.image_id;

  double worst = 0.0;
  for (std::size_t i = 0; i < anchor_count; ++i) {
    for (const auto& tri : mesh.triangles) {
      if (tri[0] != static_cast<int>(i) && tri[1] != static_cast<int>(i) && tri[2] != static_cast<int>(i))
        continue;
      const Affine2d forward = triangle_affine({src[tri[0]], src[tri[1]], src[tri[2]]},
                                               {dst[tri[0]], dst[tri[1]], dst[tri[2]]});
      worst = std::max(worst, (forward(src[i]) - dst[i]).norm());
      break;
    }
  }
  layer.meta.max_anchor_error_px = worst;
  return layer;
}

MaskLayer warp_mask_affine(const MaskTemplate& mask, const Affine2d& to_frame, Frame frame) {
  const auto corners = raster_corners(mask.raster);
  std::array<Point2d, 4> mapped;
  for (int k = 0; k < 4; ++k) mapped[k] = to_frame(corners[k]);
  const Affine2d back = to_frame.inverse();
  const std::array<TriangleMap, 2> maps{TriangleMap{{mapped[0], mapped[1], mapped[2]}, back},
                                        TriangleMap{{mapped[0], mapped[2], mapped[3]}, back}};
  return make_layer(mask, render_triangles(mask.raster, maps, frame), WarpStrategy::global_affine);
}

MaskLayer warp_mask_global(const MaskTemplate& mask, const LandmarkSet& lm, Frame frame) {
  validate(lm);
  require_on_frame(lm, frame);
  std::vector<Point2d> src, dst;
  if (lm.convention == LandmarkConvention::P68) {
    for (const Anchor& a : mask.anchors) {
      src.push_back(a.template_point);
      dst.push_back(lm.points.at(static_cast<std::size_t>(a.landmark_index)));
    }
  } else {
    if (!mask.p5_anchors)
      throw DegeneracyError("template '" + mask.template_id + "' has no 5-point anchors");
    src.assign(mask.p5_anchors->begin(), mask.p5_anchors->end());
    dst = lm.points;
  }
  const Affine2d fit = fit_affine(src, dst);
  MaskLayer layer = warp_mask_affine(mask, fit, frame);
  layer.meta.source_image_id = lm.image_id;
  double worst = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) worst = std::max(worst, (fit(src[i]) - dst[i]).norm());
  layer.meta.max_anchor_error_px = worst;
  return layer;
}

ColorStats face_color_stats(const RgbImage& image, const GrayImage& selection) {
  if (!selection.same_size(image.width, image.height))
    throw ShapeError("selection does not match image dimensions");
  // Welford accumulation, fixed pixel order.
  std::size_t n = 0;
  Eigen::Vector3d mean = Eigen::Vector3d::Zero(), m2 = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < image.pixel_count(); ++i) {
    if (!selection.data[i]) continue;
    const Eigen::Vector3d rgb(image.data[i * 3], image.data[i * 3 + 1], image.data[i * 3 + 2]);
    const Eigen::Vector3d v = rgb_to_ycbcr(rgb / 255.0);
    ++n;
    const Eigen::Vector3d delta = v - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta.cwiseProduct(v - mean);
  }
  if (n == 0) throw EmptyRegionError("color statistics requested over an empty region");
  ColorStats stats;
  stats.mean = mean;
  stats.stddev = (m2 / static_cast<double>(n)).cwiseMax(0.0).cwiseSqrt();
  return stats;
}

ColorStats face_color_stats(const RgbImage& image, const Polygond& region) {
  return face_color_stats(image, rasterize(region, {image.width, image.height}));
}

ColorStats mask_color_stats(const MaskLayer& layer) {
  const RgbaImage& r = layer.raster;
  RgbImage rgb(r.width, r.height);
  GrayImage sel(r.width, r.height);
  for (std::size_t i = 0; i < r.pixel_count(); ++i) {
    for (int c = 0; c < 3; ++c) rgb.data[i * 3 + c] = r.data[i * 4 + c];
    sel.data[i] = r.data[i * 4 + 3] > 0;
  }
  return face_color_stats(rgb, sel);
}

GrayImage face_reference_region(const Polygond& region, const MaskLayer& layer, std::uint8_t alpha_cut) {
  GrayImage sel = rasterize(scaled_about_centroid(region, 1.2), layer.frame());
  for (std::size_t i = 0; i < sel.pixel_count(); ++i)
    if (layer.raster.data[i * 4 + 3] > alpha_cut) sel.data[i] = 0;
  return sel;
}

MaskLayer color_match(const MaskLayer& layer, const ColorStats& target, double strength) {
  MaskLayer out = layer;
  strength = std::clamp(strength, 0.0, 1.0);
  if (strength == 0.0) return out;
  ColorStats source;
  try {
    source = mask_color_stats(layer);
  } catch (const EmptyRegionError&) {
    return out;
  }
  Eigen::Vector3d gain;
  for (int k = 0; k < 3; ++k)
    gain[k] = source.stddev[k] > 0 ? target.stddev[k] / source.stddev[k] : 1.0;

  auto& px = out.raster.data;
  for (std::size_t i = 0; i < out.raster.pixel_count(); ++i) {
    if (px[i * 4 + 3] == 0) continue;
    const Eigen::Vector3d rgb(px[i * 4], px[i * 4 + 1], px[i * 4 + 2]);
    const Eigen::Vector3d ycc = rgb_to_ycbcr(rgb / 255.0);
    const Eigen::Vector3d moved = target.mean + (ycc - source.mean).cwiseProduct(gain);
    // The color transform is affine, so the blend can be applied as an RGB delta.
    const Eigen::Vector3d result = rgb + 255.0 * (ycc_inverse() * (strength * (moved - ycc)));
    for (int c = 0; c < 3; ++c) px[i * 4 + c] = to_u8(result[c]);
  }
  return out;
}

MaskLayer feather_alpha(const MaskLayer& layer, double radius_px) {
  MaskLayer out = layer;
  if (!(radius_px > 0.0)) return out;
  const RgbaImage& src = layer.raster;
  const int w = src.width, h = src.height;

  const double reach = 2.0 * radius_px;
  const int k = static_cast<int>(std::floor(reach));
  struct Tap {
    int dx, dy;
    double weight;
  };
  std::vector<Tap> taps;
  double total = 0.0;
  for (int dy = -k; dy <= k; ++dy)
    for (int dx = -k; dx <= k; ++dx) {
      const double d2 = dx * dx + dy * dy;
      if (d2 > reach * reach) continue;
      const double wgt = std::exp(-d2 / (2.0 * radius_px * radius_px));
      taps.push_back({dx, dy, wgt});
      total += wgt;
    }
  for (Tap& t : taps) t.weight /= total;

  PixelBox box{w, h, 0, 0};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (src.at(x, y)[3] > 0) {
        box.x0 = std::min(box.x0, x);
        box.y0 = std::min(box.y0, y);
        box.x1 = std::max(box.x1, x + 1);
        box.y1 = std::max(box.y1, y + 1);
      }
  if (box.empty()) return out;
  box = {std::max(0, box.x0 - k), std::max(0, box.y0 - k), std::min(w, box.x1 + k),
         std::min(h, box.y1 + k)};

  for (int y = box.y0; y < box.y1; ++y)
    for (int x = box.x0; x < box.x1; ++x) {
      double acc = 0.0;
      for (const Tap& t : taps) {
        const int sx = x + t.dx, sy = y + t.dy;
        if (sx < 0 || sy < 0 || sx >= w || sy >= h) continue;
        acc += t.weight * src.data[(static_cast<std::size_t>(sy) * w + sx) * 4 + 3];
      }
      out.raster.at(x, y)[3] = to_u8(acc);
    }
  return out;
}

double default_feather_radius(const LandmarkSet& lm) {
  return std::max(1.0, 0.01 * inter_ocular_distance(lm));
}

RgbImage composite(const RgbImage& background, const RgbaImage& layer) {
  if (!layer.same_size(background.width, background.height))
    throw ShapeError("layer is " + std::to_string(layer.width) + "x" + std::to_string(layer.height) +
                     ", background is " + std::to_string(background.width) + "x" +
                     std::to_string(background.height));
  RgbImage out = background;
  for (std::size_t i = 0; i < background.pixel_count(); ++i) {
    const unsigned a = layer.data[i * 4 + 3];
    if (a == 0) continue;
    for (int c = 0; c < 3; ++c) {
      const unsigned num = a * layer.data[i * 4 + c] + (255u - a) * background.data[i * 3 + c];
      // round(num / 255); num / 255 is never exactly k + 0.5.
      out.data[i * 3 + c] = static_cast<std::uint8_t>((2u * num + 255u) / 510u);
    }
  }
  return out;
}

}  // namespace maskforge
