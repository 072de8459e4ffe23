#pragma once

#include <Eigen/Dense>

#include <string>

#include "maskforge/geometry.hpp"
#include "maskforge/image.hpp"
#include "maskforge/maskkit.hpp"

namespace maskforge {

enum class WarpStrategy { piecewise_affine, global_affine };

std::string to_string(WarpStrategy s);
WarpStrategy parse_warp_strategy(const std::string& s);

struct MaskLayerMeta {
  std::string template_id;
  std::string hsv_signature;
  WarpStrategy strategy = WarpStrategy::piecewise_affine;
  std::string source_image_id;
  /// Largest distance between a mapped anchor and its target landmark.
  double max_anchor_error_px = 0.0;
};

/// Full-frame RGBA layer: transparent everywhere except the warped mask.
struct MaskLayer {
  RgbaImage raster;
  MaskLayerMeta meta;

  Frame frame() const { return {raster.width, raster.height}; }
};

/// Per-channel mean and population standard deviation in YCbCr (BT.601,
/// full range), all channels on a [0, 1] scale.
struct ColorStats {
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  Eigen::Vector3d stddev = Eigen::Vector3d::Zero();
};

Eigen::Vector3d rgb_to_ycbcr(const Eigen::Vector3d& rgb01);
Eigen::Vector3d ycbcr_to_rgb(const Eigen::Vector3d& ycc);

/// Piecewise-affine warp over a Delaunay triangulation of the template
/// anchors (plus the raster corners, which follow the anchors' least-squares
/// affine). Needs 68-point landmarks. Throws DegeneracyError for collinear
/// anchors or a fold-over, PlacementError when every landmark is off-frame.
MaskLayer warp_mask(const MaskTemplate& mask, const LandmarkSet& lm, Frame frame);

/// Single least-squares affine over the anchor map (68-point) or the
/// template's five keypoint positions (5-point).
MaskLayer warp_mask_global(const MaskTemplate& mask, const LandmarkSet& lm, Frame frame);

/// Renders `mask` through an explicit affine (template -> frame).
MaskLayer warp_mask_affine(const MaskTemplate& mask, const Affine2d& to_frame, Frame frame);

ColorStats face_color_stats(const RgbImage& image, const Polygond& region);

/// Stats over pixels where `selection` is nonzero.
ColorStats face_color_stats(const RgbImage& image, const GrayImage& selection);

/// Stats over the layer's pixels with alpha > 0.
ColorStats mask_color_stats(const MaskLayer& layer);

/// Surrounding context for color matching: the region polygon scaled 1.2x
/// about its centroid, minus the layer footprint (alpha > alpha_cut).
GrayImage face_reference_region(const Polygond& region, const MaskLayer& layer,
                                std::uint8_t alpha_cut = default_alpha_cut);

inline constexpr double default_color_strength = 0.5;

/// Mean/std transfer toward `target`, blended with the original by
/// `strength` (0 = unchanged, 1 = full transfer). Alpha is untouched.
MaskLayer color_match(const MaskLayer& layer, const ColorStats& target,
                      double strength = default_color_strength);

/// Gaussian (sigma = radius) smoothing of the alpha channel, truncated at
/// 2 * radius. RGB is untouched.
MaskLayer feather_alpha(const MaskLayer& layer, double radius_px);

/// 0.01 x inter-ocular distance, at least 1 px.
double default_feather_radius(const LandmarkSet& lm);

/// Alpha-over: round(a * mask + (1 - a) * bg) with a = alpha / 255.
RgbImage composite(const RgbImage& background, const RgbaImage& layer);
inline RgbImage composite(const RgbImage& background, const MaskLayer& layer) {
  return composite(background, layer.raster);
}

}  // namespace maskforge
