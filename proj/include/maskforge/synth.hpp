#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "maskforge/geometry.hpp"
#include "maskforge/image.hpp"
#include "maskforge/maskkit.hpp"

namespace maskforge::synth {

/// Parametric head pose for procedurally generated faces.
struct FacePose {
  double roll_deg = 0.0;  // in-plane rotation
  double yaw = 0.0;       // out-of-plane rotation (radians) of the depth model
  double iod_px = 50.0;   // frontal inter-ocular distance
  Point2d eye_mid{96.0, 80.0};
};

inline constexpr Frame default_face_frame{192, 192};

/// Mean 68-point layout in face units: eye midpoint at the origin, y down,
/// inter-ocular distance 1, z toward the camera.
const std::array<Eigen::Vector3d, 68>& canonical_face();

/// Projects the canonical face through the pose (orthographic).
LandmarkSet face_landmarks(const FacePose& pose, const std::string& image_id, Frame frame);

/// Flat-shaded face drawing (skin, eyes, brows, lips) over a gradient
/// background with mild noise.
RgbImage render_face(const LandmarkSet& lm, Frame frame, std::uint64_t seed);

struct SyntheticFace {
  FacePose pose;
  LandmarkSet landmarks;
  RgbImage image;
};

/// The index-th face of a corpus that cycles through 7 rolls in
/// [-30, 30] deg, 5 yaws in [-0.3, 0.3] and 3 scales, with small seeded
/// jitter of position.
SyntheticFace make_face(std::size_t index, std::uint64_t seed, Frame frame = default_face_frame);

/// Template raster coordinates of a canonical face point.
Point2d template_point(const Point2d& face_units);

/// The nine shipped mask templates (surgical, cloth prints, FFP2-style).
std::vector<MaskTemplate> make_mask_templates();

struct CorpusFiles {
  std::filesystem::path manifest;
  std::filesystem::path landmarks;
};

/// Writes images/<id>.png, landmarks.json (dlib68_json) and manifest.json.
CorpusFiles write_corpus(const std::filesystem::path& dir, std::size_t count, std::uint64_t seed,
                         Frame frame = default_face_frame);

}  // namespace maskforge::synth
