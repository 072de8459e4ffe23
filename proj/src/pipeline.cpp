#include "maskforge/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <thread>

#include "maskforge/errors.hpp"
#include "maskforge/image_io.hpp"
#include "maskforge/rng.hpp"

namespace maskforge {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::none: return "none";
  }
  return "none";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  if (s.empty() || s == "none") return Split::none;
  throw ParseError("unknown split '" + s + "'");
}

fs::path resolve(const fs::path& base, const fs::path& p) {
  return p.is_absolute() || base.empty() ? p : base / p;
}

}  // namespace

std::string to_string(PlacementStatus s) {
  switch (s) {
    case PlacementStatus::ok: return "ok";
    case PlacementStatus::ok_fallback: return "ok_fallback";
    case PlacementStatus::failed: return "failed";
  }
  return "failed";
}

std::string to_string(FailureReason r) {
  switch (r) {
    case FailureReason::no_landmarks: return "no_landmarks";
    case FailureReason::degenerate_geometry: return "degenerate_geometry";
    case FailureReason::iou_below_threshold: return "iou_below_threshold";
    case FailureReason::wrong_face_suspected: return "wrong_face_suspected";
    case FailureReason::mask_partial: return "mask_partial";
    case FailureReason::io_error: return "io_error";
  }
  return "io_error";
}

PlacementStatus parse_placement_status(const std::string& s) {
  for (auto st : {PlacementStatus::ok, PlacementStatus::ok_fallback, PlacementStatus::failed})
    if (to_string(st) == s) return st;
  throw ParseError("unknown placement status '" + s + "'");
}

FailureReason parse_failure_reason(const std::string& s) {
  for (auto r : all_failure_reasons)
    if (to_string(r) == s) return r;
  throw ParseError("unknown failure reason '" + s + "'");
}

void validate(const CorpusManifest& manifest) {
  std::set<std::string> ids;
  for (const CorpusEntry& e : manifest.entries) {
    if (e.image_id.empty()) throw ValidationError("manifest entry without image_id");
    if (!ids.insert(e.image_id).second)
      throw ValidationError("duplicate image_id '" + e.image_id + "' in manifest");
  }
}

CorpusManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  CorpusManifest m;
  m.base_dir = path.parent_path();
  try {
    const json doc = json::parse(in);
    for (const json& e : doc.at("entries")) {
      CorpusEntry entry;
      entry.image_id = e.at("image_id").get<std::string>();
      entry.image_path = e.at("image_path").get<std::string>();
      entry.landmark_ref = e.value("landmark_ref", "");
      entry.identity_label = e.value("identity_label", "");
      entry.split = parse_split(e.value("split", "none"));
      m.entries.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw ParseError("manifest " + path.string() + ": " + e.what());
  }
  validate(m);
  return m;
}

void save_manifest(const CorpusManifest& manifest, const fs::path& path) {
  json entries = json::array();
  for (const CorpusEntry& e : manifest.entries) {
    json j = {{"image_id", e.image_id},
              {"image_path", e.image_path.generic_string()},
              {"landmark_ref", e.landmark_ref},
              {"split", to_string(e.split)}};
    if (!e.identity_label.empty()) j["identity_label"] = e.identity_label;
    entries.push_back(std::move(j));
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << json{{"entries", entries}}.dump(2) << '\n';
}

void validate(const QaConfig& qa) {
  if (!(qa.iou_threshold >= 0.0 && qa.iou_threshold <= 1.0))
    throw ValidationError("iou_threshold must lie in [0, 1]");
  if (!(qa.color_strength >= 0.0 && qa.color_strength <= 1.0))
    throw ValidationError("color_strength must lie in [0, 1]");
}

json to_json(const PlacementRecord& r) {
  json j = {{"image_id", r.image_id}, {"status", to_string(r.status)}, {"iou", r.iou}};
  j["strategy"] = r.strategy ? json(to_string(*r.strategy)) : json(nullptr);
  j["failure_reason"] = r.failure_reason ? json(to_string(*r.failure_reason)) : json(nullptr);
  j["layer_path"] = r.layer_path.empty() ? json(nullptr) : json(r.layer_path);
  j["template_id"] = r.template_id;
  j["max_anchor_error_px"] = r.max_anchor_error_px;
  return j;
}

PlacementRecord record_from_json(const json& j) {
  PlacementRecord r;
  try {
    r.image_id = j.at("image_id").get<std::string>();
    r.status = parse_placement_status(j.at("status").get<std::string>());
    r.iou = j.value("iou", 0.0);
    if (j.contains("strategy") && !j["strategy"].is_null())
      r.strategy = parse_warp_strategy(j["strategy"].get<std::string>());
    if (j.contains("failure_reason") && !j["failure_reason"].is_null())
      r.failure_reason = parse_failure_reason(j["failure_reason"].get<std::string>());
    if (j.contains("layer_path") && !j["layer_path"].is_null())
      r.layer_path = j["layer_path"].get<std::string>();
    r.template_id = j.value("template_id", "");
    r.max_anchor_error_px = j.value("max_anchor_error_px", 0.0);
  } catch (const json::exception& e) {
    throw ParseError(std::string("placement record: ") + e.what());
  }
  return r;
}

json to_json(const BatchReport& report) {
  json hist = json::object();
  for (FailureReason r : all_failure_reasons) {
    const auto it = report.failure_histogram.find(r);
    hist[to_string(r)] = it == report.failure_histogram.end() ? 0 : it->second;
  }
  json j = {{"total", report.total},
            {"generated", report.generated},
            {"ok", report.ok},
            {"fallback_count", report.fallback_count},
            {"failed", report.failed},
            {"generation_rate", report.generation_rate},
            {"fallback_rate", report.fallback_rate},
            {"failure_rate", report.failure_rate},
            {"failure_histogram", hist}};
  j["seed"] = report.seed ? json(*report.seed) : json(nullptr);
  if (report.config)
    j["config"] = {{"iou_threshold", report.config->iou_threshold},
                   {"alpha_cut", report.config->alpha_cut},
                   {"allow_fallback", report.config->allow_fallback},
                   {"color_strength", report.config->color_strength}};
  else
    j["config"] = nullptr;
  // Published corpus-level figures, for side-by-side reading only.
  j["reference"] = {
      {"celeba_masks", {{"coverage", 0.968}, {"fallback_share", 0.054}, {"iou_threshold", 0.3}}},
      {"casia_webface_masks", {{"coverage", 0.90}, {"fallback_share", 0.115}, {"iou_threshold", 0.5}}}};
  return j;
}

BatchReport qa_report(std::span<const PlacementRecord> records) {
  BatchReport rep;
  for (FailureReason r : all_failure_reasons) rep.failure_histogram[r] = 0;
  rep.total = records.size();
  for (const PlacementRecord& r : records) {
    switch (r.status) {
      case PlacementStatus::ok: ++rep.ok; break;
      case PlacementStatus::ok_fallback: ++rep.fallback_count; break;
      case PlacementStatus::failed:
        ++rep.failed;
        ++rep.failure_histogram[r.failure_reason.value_or(FailureReason::io_error)];
        break;
    }
  }
  rep.generated = rep.ok + rep.fallback_count;
  if (rep.total > 0) {
    rep.generation_rate = static_cast<double>(rep.generated) / static_cast<double>(rep.total);
    rep.failure_rate = static_cast<double>(rep.failed) / static_cast<double>(rep.total);
  }
  if (rep.generated > 0)
    rep.fallback_rate = static_cast<double>(rep.fallback_count) / static_cast<double>(rep.generated);
  return rep;
}

namespace {

PoseBucket estimate_pose(const LandmarkSet& lm) {
  const auto eyes = eye_centers(lm);
  const double iod = (eyes[1] - eyes[0]).norm();
  const Point2d nose = lm.convention == LandmarkConvention::P68 ? lm.points[30] : lm.points[p5::nose];
  const Point2d axis = (eyes[1] - eyes[0]) / iod;
  const double offset = (nose - 0.5 * (eyes[0] + eyes[1])).dot(axis) / iod;
  if (offset > 0.12) return PoseBucket::right;
  if (offset < -0.12) return PoseBucket::left;
  return PoseBucket::frontal;
}

struct Attempt {
  MaskLayer layer;
  double iou = 0.0;
};

Attempt attempt(WarpStrategy strategy, const MaskTemplate& mask, const RgbImage& image,
                const LandmarkSet& lm, const Polygond& region, const QaConfig& qa) {
  const Frame frame{image.width, image.height};
  MaskLayer layer = strategy == WarpStrategy::piecewise_affine ? warp_mask(mask, lm, frame)
                                                               : warp_mask_global(mask, lm, frame);
  const GrayImage context = face_reference_region(region, layer, qa.alpha_cut);
  if (std::any_of(context.data.begin(), context.data.end(), [](std::uint8_t v) { return v != 0; }))
    layer = color_match(layer, face_color_stats(image, context), qa.color_strength);
  layer = feather_alpha(layer, default_feather_radius(lm));
  const double iou = raster_footprint_iou(alpha_plane(layer.raster), region, frame, qa.alpha_cut);
  return {std::move(layer), iou};
}

}  // namespace

PlacementResult place_mask(const RgbImage& image, const LandmarkSet& lm, const MaskRegistry& registry,
                           const QaConfig& qa, std::uint64_t seed) {
  PlacementResult result;
  PlacementRecord& rec = result.record;
  rec.image_id = lm.image_id;
  auto fail = [&](FailureReason why) {
    rec.status = PlacementStatus::failed;
    rec.failure_reason = why;
    result.layer.reset();
    return result;
  };

  const Frame frame{image.width, image.height};
  Polygond region;
  try {
    validate(lm);
    region = mask_region_polygon(lm);
  } catch (const DegeneracyError&) {
    return fail(FailureReason::degenerate_geometry);
  } catch (const FormatError&) {
    return fail(FailureReason::no_landmarks);
  }
  if (static_cast<double>(raster_area(region, frame)) < 0.5 * std::abs(signed_area(region)))
    return fail(FailureReason::mask_partial);

  const MaskPick pick = pick_mask(registry, seed, hash_string(lm.image_id));
  const MaskTemplate mask = apply_hsv(registry.for_pose(pick.template_index, estimate_pose(lm)), pick.shift);
  rec.template_id = mask.template_id;

  const bool has68 = lm.convention == LandmarkConvention::P68;
  const WarpStrategy primary = has68 ? WarpStrategy::piecewise_affine : WarpStrategy::global_affine;
  const bool can_fall_back = has68 && qa.allow_fallback;

  auto run = [&](WarpStrategy s) -> std::optional<Attempt> {
    try {
      return attempt(s, mask, image, lm, region, qa);
    } catch (const DegeneracyError&) {
      return std::nullopt;
    }
  };

  std::optional<Attempt> first;
  try {
    first = run(primary);
  } catch (const PlacementError&) {
    return fail(FailureReason::mask_partial);
  }
  if (first) {
    rec.strategy = primary;
    rec.iou = first->iou;
    rec.max_anchor_error_px = first->layer.meta.max_anchor_error_px;
    if (first->iou >= qa.iou_threshold) {
      rec.status = PlacementStatus::ok;
      result.layer = std::move(first->layer);
      return result;
    }
  }
  if (!can_fall_back)
    return fail(first ? FailureReason::iou_below_threshold : FailureReason::degenerate_geometry);

  std::optional<Attempt> second = run(WarpStrategy::global_affine);
  if (!second) return fail(FailureReason::degenerate_geometry);
  rec.strategy = WarpStrategy::global_affine;
  rec.iou = second->iou;
  rec.max_anchor_error_px = second->layer.meta.max_anchor_error_px;
  if (second->iou < qa.iou_threshold) return fail(FailureReason::iou_below_threshold);
  rec.status = PlacementStatus::ok_fallback;
  result.layer = std::move(second->layer);
  return result;
}

std::string layer_file_name(const std::string& image_id) { return image_id + ".mask.png"; }

namespace {

struct ResolvedLandmarks {
  std::optional<LandmarkSet> landmarks;
  FailureReason failure = FailureReason::no_landmarks;
};

class LandmarkCache {
 public:
  ResolvedLandmarks resolve(const CorpusManifest& m, const CorpusEntry& e) {
    ResolvedLandmarks out;
    if (e.landmark_ref.empty()) return out;
    std::string file = e.landmark_ref, record = e.image_id;
    if (const auto hash = file.find('#'); hash != std::string::npos) {
      record = file.substr(hash + 1);
      file = file.substr(0, hash);
    }
    const fs::path path = maskforge::resolve(m.base_dir, file);
    const std::vector<LandmarkSet>* sets = load(path);
    if (!sets) return out;
    std::vector<const LandmarkSet*> hits;
    for (const LandmarkSet& lm : *sets)
      if (lm.image_id == record || fs::path(lm.image_id).stem().string() == record) hits.push_back(&lm);
    if (hits.empty() && sets->size() == 1 && e.landmark_ref.find('#') == std::string::npos)
      hits.push_back(&sets->front());
    if (hits.size() > 1) {
      out.failure = FailureReason::wrong_face_suspected;
      return out;
    }
    if (hits.size() == 1) {
      out.landmarks = *hits.front();
      out.landmarks->image_id = e.image_id;
    }
    return out;
  }

 private:
  const std::vector<LandmarkSet>* load(const fs::path& path) {
    const std::string key = path.string();
    if (auto it = cache_.find(key); it != cache_.end()) return it->second ? &*it->second : nullptr;
    std::optional<std::vector<LandmarkSet>> sets;
    std::ifstream in(path);
    if (in) {
      try {
        sets = parse_landmarks(in, path.extension() == ".txt" ? LandmarkFormat::celeba5_txt
                                                              : LandmarkFormat::dlib68_json);
      } catch (const Error& e) {
        std::cerr << "warning: " << e.what() << '\n';
      }
    }
    auto& slot = cache_[key] = std::move(sets);
    return slot ? &*slot : nullptr;
  }

  std::map<std::string, std::optional<std::vector<LandmarkSet>>> cache_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace

BatchReport enhance_corpus(const CorpusManifest& manifest, const MaskRegistry& registry, const QaConfig& qa,
                           std::uint64_t seed, const fs::path& out_dir, EnhanceOptions options) {
  validate(manifest);
  validate(qa);
  validate(registry);
  std::error_code ec;
  fs::create_directories(out_dir / "layers", ec);
  if (ec || !fs::is_directory(out_dir / "layers"))
    throw IoError("cannot create output directory " + out_dir.string());

  const std::size_t n = manifest.entries.size();
  std::vector<ResolvedLandmarks> resolved(n);
  {
    LandmarkCache cache;
    for (std::size_t i = 0; i < n; ++i) resolved[i] = cache.resolve(manifest, manifest.entries[i]);
  }

  std::ofstream records_out(out_dir / "records.ndjson", std::ios::binary | std::ios::trunc);
  if (!records_out) throw IoError("cannot write " + (out_dir / "records.ndjson").string());

  std::vector<std::optional<PlacementRecord>> slots(n);
  std::mutex mu;
  std::condition_variable ready;
  std::atomic<std::size_t> next{0};

  auto process = [&](std::size_t i) {
    const CorpusEntry& e = manifest.entries[i];
    PlacementRecord rec;
    rec.image_id = e.image_id;
    rec.status = PlacementStatus::failed;
    if (!resolved[i].landmarks) {
      rec.failure_reason = resolved[i].failure;
      return rec;
    }
    RgbImage image;
    try {
      image = read_rgb(resolve(manifest.base_dir, e.image_path));
    } catch (const Error& err) {
      std::cerr << "warning: '" << e.image_id << "': " << err.what() << '\n';
      rec.failure_reason = FailureReason::io_error;
      return rec;
    }
    PlacementResult placed;
    try {
      placed = place_mask(image, *resolved[i].landmarks, registry, qa, seed);
    } catch (const Error& err) {
      std::cerr << "warning: '" << e.image_id << "': " << err.what() << '\n';
      rec.failure_reason = FailureReason::degenerate_geometry;
      return rec;
    }
    if (placed.layer) {
      const std::string rel = "layers/" + layer_file_name(e.image_id);
      try {
        write_png(out_dir / rel, placed.layer->raster);
        placed.record.layer_path = rel;
      } catch (const IoError&) {
        placed.record.status = PlacementStatus::failed;
        placed.record.failure_reason = FailureReason::io_error;
      }
    }
    return placed.record;
  };

  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      PlacementRecord rec = process(i);
      {
        std::lock_guard lock(mu);
        slots[i] = std::move(rec);
      }
      ready.notify_all();
    }
  };

  std::vector<std::jthread> pool;
  const unsigned jobs = std::max(1u, options.jobs);
  for (unsigned t = 0; t < jobs; ++t) pool.emplace_back(worker);

  // Single writer: records leave in manifest order regardless of worker timing.
  std::vector<PlacementRecord> records;
  records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::unique_lock lock(mu);
    ready.wait(lock, [&] { return slots[i].has_value(); });
    records.push_back(std::move(*slots[i]));
    lock.unlock();
    records_out << to_json(records.back()).dump() << '\n';
  }
  pool.clear();
  records_out.close();
  if (!records_out) throw IoError("failed writing records.ndjson");

  BatchReport report = qa_report(records);
  report.seed = seed;
  report.config = qa;
  write_text(out_dir / "report.json", to_json(report).dump(2) + "\n");
  return report;
}

OverlayResult overlay_corpus(const CorpusManifest& manifest, const fs::path& layers_dir,
                             const fs::path& out_dir) {
  validate(manifest);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create output directory " + out_dir.string());
  OverlayResult result;
  for (const CorpusEntry& e : manifest.entries) {
    const fs::path layer_path = layers_dir / layer_file_name(e.image_id);
    if (!fs::exists(layer_path)) {
      std::cerr << "warning: no mask layer for '" << e.image_id << "', skipped\n";
      ++result.skipped;
      continue;
    }
    try {
      const RgbImage background = read_rgb(resolve(manifest.base_dir, e.image_path));
      const RgbaImage layer = read_rgba(layer_path);
      write_png(out_dir / (e.image_id + ".png"), composite(background, layer));
      ++result.composited;
    } catch (const Error& err) {
      std::cerr << "warning: '" << e.image_id << "': " << err.what() << ", skipped\n";
      ++result.skipped;
    }
  }
  return result;
}

std::vector<PlacementRecord> read_records(const fs::path& ndjson) {
  std::ifstream in(ndjson);
  if (!in) throw IoError("cannot read " + ndjson.string());
  std::vector<PlacementRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw ParseError(ndjson.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::string> sample_for_annotation(std::span<const PlacementRecord> records, double fraction,
                                               std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const PlacementRecord& r : records)
    if (r.status != PlacementStatus::failed) ids.push_back(r.image_id);
  const std::size_t want = std::min(
      ids.size(), static_cast<std::size_t>(std::ceil(std::clamp(fraction, 0.0, 1.0) * ids.size())));
  Rng rng(seed);
  for (std::size_t i = 0; i < want; ++i) std::swap(ids[i], ids[i + rng.below(ids.size() - i)]);
  ids.resize(want);
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace maskforge
