#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "maskforge/geometry.hpp"
#include "maskforge/image.hpp"

namespace maskforge {

enum class PoseBucket { frontal, left, right };

std::string to_string(PoseBucket pose);
PoseBucket parse_pose_bucket(const std::string& s);

/// A template pixel position tied to a 68-point landmark index.
struct Anchor {
  Point2d template_point;
  int landmark_index = 0;
};

struct MaskTemplate {
  std::string template_id;
  RgbaImage raster;
  std::vector<Anchor> anchors;
  /// Template positions of the five CelebA keypoints (eyes, nose, mouth
  /// corners); these may fall outside the raster. Needed for 5-point faces.
  std::optional<std::array<Point2d, 5>> p5_anchors;
  PoseBucket pose_bucket = PoseBucket::frontal;
  std::string fabric_tag;
  /// For left/right variants: the frontal template this one replaces.
  std::string variant_of;
};

/// Throws ValidationError when the template breaks an invariant.
void validate(const MaskTemplate& mask);

struct HsvShift {
  double hue_delta = 0.0;  // degrees
  double sat_scale = 1.0;
  double val_scale = 1.0;

  static HsvShift identity() { return {}; }
  bool is_identity() const { return hue_delta == 0.0 && sat_scale == 1.0 && val_scale == 1.0; }
  /// Stable text tag, e.g. "h+120_s1.00_v1.00".
  std::string signature() const;

  friend bool operator==(const HsvShift&, const HsvShift&) = default;
};

void validate(const HsvShift& shift);

/// {+60, +150, -100} degree hue rotations at unit scales.
std::vector<HsvShift> default_color_augments();

struct MaskRegistry {
  std::vector<MaskTemplate> templates;
  std::vector<HsvShift> color_augments;

  /// Templates eligible for random choice (everything that is not a pose variant).
  std::vector<std::size_t> base_indices() const;

  /// Variant of templates[index] for the pose, or templates[index] itself.
  const MaskTemplate& for_pose(std::size_t index, PoseBucket pose) const;
};

void validate(const MaskRegistry& registry);

/// Loads every sidecar descriptor (*.json) under root together with the PNG
/// it references. Throws LoadError for unreadable/missing files or a PNG no
/// sidecar refers to, ValidationError for invariant violations.
MaskRegistry load_registry(const std::filesystem::path& root,
                           std::vector<HsvShift> color_augments = default_color_augments());

/// Writes template PNG + sidecar into dir.
void save_template(const MaskTemplate& mask, const std::filesystem::path& dir);

/// Hue rotation and saturation/value scaling of the RGB channels; alpha
/// and geometry are untouched.
MaskTemplate apply_hsv(const MaskTemplate& mask, const HsvShift& shift);

struct Hsv {
  double h = 0;  // [0, 360)
  double s = 0;  // [0, 1]
  double v = 0;  // [0, 1]
};
Hsv rgb_to_hsv(std::uint8_t r, std::uint8_t g, std::uint8_t b);
std::array<std::uint8_t, 3> hsv_to_rgb(const Hsv& hsv);

struct MaskPick {
  std::size_t template_index = 0;
  HsvShift shift;
};

/// Deterministic uniform choice over base templates x (identity + augments),
/// keyed by (seed, image_index).
MaskPick pick_mask(const MaskRegistry& registry, std::uint64_t seed, std::uint64_t image_index);

}  // namespace maskforge
