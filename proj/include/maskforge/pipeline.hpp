#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskforge/geometry.hpp"
#include "maskforge/maskkit.hpp"
#include "maskforge/render.hpp"

namespace maskforge {

enum class Split { train, test, none };

struct CorpusEntry {
  std::string image_id;
  std::filesystem::path image_path;
  /// Landmark file, optionally suffixed with "#record_id". Files ending in
  /// .json are dlib68_json, .txt are celeba5_txt.
  std::string landmark_ref;
  std::string identity_label;
  Split split = Split::none;
};

struct CorpusManifest {
  std::vector<CorpusEntry> entries;
  /// Relative paths in entries resolve against this directory.
  std::filesystem::path base_dir;
};

/// Checks image_id uniqueness. Landmark references are resolved per entry
/// during a run; an unresolvable one fails that entry only.
void validate(const CorpusManifest& manifest);
CorpusManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const CorpusManifest& manifest, const std::filesystem::path& path);

struct QaConfig {
  double iou_threshold = 0.5;
  std::uint8_t alpha_cut = default_alpha_cut;
  bool allow_fallback = true;
  double color_strength = default_color_strength;

  /// 0.3 as used for CelebA-style 5-point data.
  static QaConfig celeba_preset() { return {0.3}; }
  /// 0.5 as used for CASIA-WebFace-style data.
  static QaConfig casia_preset() { return {0.5}; }
};

void validate(const QaConfig& qa);

enum class PlacementStatus { ok, ok_fallback, failed };
enum class FailureReason {
  no_landmarks,
  degenerate_geometry,
  iou_below_threshold,
  wrong_face_suspected,
  mask_partial,
  io_error,
};

inline constexpr std::array<FailureReason, 6> all_failure_reasons{
    FailureReason::no_landmarks,         FailureReason::degenerate_geometry,
    FailureReason::iou_below_threshold,  FailureReason::wrong_face_suspected,
    FailureReason::mask_partial,         FailureReason::io_error};

std::string to_string(PlacementStatus s);
std::string to_string(FailureReason r);
PlacementStatus parse_placement_status(const std::string& s);
FailureReason parse_failure_reason(const std::string& s);

struct PlacementRecord {
  std::string image_id;
  PlacementStatus status = PlacementStatus::failed;
  std::optional<WarpStrategy> strategy;
  double iou = 0.0;
  std::optional<FailureReason> failure_reason;
  std::string layer_path;  // relative to the output directory
  std::string template_id;
  double max_anchor_error_px = 0.0;
};

nlohmann::json to_json(const PlacementRecord& r);
PlacementRecord record_from_json(const nlohmann::json& j);

struct BatchReport {
  std::size_t total = 0;
  std::size_t generated = 0;
  std::size_t ok = 0;
  std::size_t fallback_count = 0;
  std::size_t failed = 0;
  double generation_rate = 0.0;  // generated / total
  double fallback_rate = 0.0;    // fallback_count / generated
  double failure_rate = 0.0;     // failed / total
  std::map<FailureReason, std::size_t> failure_histogram;
  std::optional<std::uint64_t> seed;
  std::optional<QaConfig> config;
};

/// Includes the reference coverage figures from the published corpora as
/// annotations only.
nlohmann::json to_json(const BatchReport& report);

BatchReport qa_report(std::span<const PlacementRecord> records);

struct PlacementResult {
  PlacementRecord record;
  std::optional<MaskLayer> layer;
};

/// One entry of the batch, in memory: pick, warp, color-match, feather, gate
/// and fall back to the global affine when the piecewise result fails.
PlacementResult place_mask(const RgbImage& image, const LandmarkSet& lm,
                           const MaskRegistry& registry, const QaConfig& qa, std::uint64_t seed);

struct EnhanceOptions {
  unsigned jobs = 1;
};

/// Writes out_dir/layers/<id>.mask.png, out_dir/records.ndjson and
/// out_dir/report.json. Per-entry failures are recorded and the run goes on;
/// an unwritable out_dir throws IoError.
BatchReport enhance_corpus(const CorpusManifest& manifest, const MaskRegistry& registry,
                           const QaConfig& qa, std::uint64_t seed,
                           const std::filesystem::path& out_dir, EnhanceOptions options = {});

struct OverlayResult {
  std::size_t composited = 0;
  std::size_t skipped = 0;
};

/// Composites layers_dir/<id>.mask.png over each entry's image into
/// out_dir/<id>.png. Missing layers are skipped with a warning on stderr.
OverlayResult overlay_corpus(const CorpusManifest& manifest,
                             const std::filesystem::path& layers_dir,
                             const std::filesystem::path& out_dir);

std::vector<PlacementRecord> read_records(const std::filesystem::path& ndjson);

/// Seeded sample of generated image ids for manual failure inspection.
std::vector<std::string> sample_for_annotation(std::span<const PlacementRecord> records,
                                               double fraction, std::uint64_t seed);

std::string layer_file_name(const std::string& image_id);

}  // namespace maskforge
