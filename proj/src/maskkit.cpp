#include "maskforge/maskkit.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "maskforge/errors.hpp"
#include "maskforge/image_io.hpp"
#include "maskforge/rng.hpp"

namespace maskforge {
namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(PoseBucket pose) {
  switch (pose) {
    case PoseBucket::frontal: return "frontal";
    case PoseBucket::left: return "left";
    case PoseBucket::right: return "right";
  }
  return "frontal";
}

PoseBucket parse_pose_bucket(const std::string& s) {
  if (s.empty() || s == "frontal") return PoseBucket::frontal;
  if (s == "left") return PoseBucket::left;
  if (s == "right") return PoseBucket::right;
  throw ValidationError("unknown pose_bucket '" + s + "'");
}

void validate(const MaskTemplate& mask) {
  const std::string who = "template '" + mask.template_id + "'";
  if (mask.template_id.empty()) throw ValidationError("template without template_id");
  if (mask.raster.empty()) throw ValidationError(who + ": empty raster");
  if (mask.anchors.size() < 6)
    throw ValidationError(who + ": needs at least 6 anchors, has " + std::to_string(mask.anchors.size()));
  std::set<int> seen;
  for (const Anchor& a : mask.anchors) {
    if (a.landmark_index < 0 || a.landmark_index >= 68)
      throw ValidationError(who + ": landmark_index " + std::to_string(a.landmark_index) +
                            " outside the 68-point range");
    if (!seen.insert(a.landmark_index).second)
      throw ValidationError(who + ": duplicate landmark_index " + std::to_string(a.landmark_index));
    const Point2d& p = a.template_point;
    if (!p.allFinite() || p.x() < 0 || p.y() < 0 || p.x() > mask.raster.width ||
        p.y() > mask.raster.height)
      throw ValidationError(who + ": anchor for landmark " + std::to_string(a.landmark_index) +
                            " lies outside the raster");
  }
  bool any_alpha = false;
  for (std::size_t i = 0; i < mask.raster.pixel_count() && !any_alpha; ++i)
    any_alpha = mask.raster.data[i * 4 + 3] > 0;
  if (!any_alpha) throw ValidationError(who + ": raster is fully transparent");
}

std::string HsvShift::signature() const {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "h%+g_s%.2f_v%.2f", hue_delta, sat_scale, val_scale);
  return buf;
}

void validate(const HsvShift& shift) {
  if (!(shift.hue_delta >= -180.0 && shift.hue_delta <= 180.0))
    throw ValidationError("hue_delta must lie in [-180, 180]");
  for (double s : {shift.sat_scale, shift.val_scale})
    if (!(s > 0.0 && s <= 4.0)) throw ValidationError("HSV scales must lie in (0, 4]");
}

std::vector<HsvShift> default_color_augments() {
  return {{60.0, 1.0, 1.0}, {150.0, 1.0, 1.0}, {-100.0, 1.0, 1.0}};
}

std::vector<std::size_t> MaskRegistry::base_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < templates.size(); ++i)
    if (templates[i].variant_of.empty()) out.push_back(i);
  return out;
}

const MaskTemplate& MaskRegistry::for_pose(std::size_t index, PoseBucket pose) const {
  const MaskTemplate& base = templates.at(index);
  if (pose == PoseBucket::frontal) return base;
  for (const MaskTemplate& t : templates)
    if (t.variant_of == base.template_id && t.pose_bucket == pose) return t;
  return base;
}

void validate(const MaskRegistry& registry) {
  if (registry.templates.empty()) throw ValidationError("registry holds no templates");
  std::set<std::string> ids;
  for (const MaskTemplate& t : registry.templates) {
    validate(t);
    if (!ids.insert(t.template_id).second)
      throw ValidationError("duplicate template_id '" + t.template_id + "'");
  }
  if (registry.base_indices().empty()) throw ValidationError("registry holds only pose variants");
  for (const HsvShift& s : registry.color_augments) validate(s);
}

namespace {

MaskTemplate read_sidecar(const fs::path& sidecar) {
  std::ifstream in(sidecar);
  if (!in) throw LoadError("cannot read sidecar " + sidecar.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw LoadError("sidecar " + sidecar.string() + ": " + e.what());
  }
  MaskTemplate t;
  try {
    t.template_id = doc.at("template_id").get<std::string>();
    t.fabric_tag = doc.value("fabric_tag", "");
    t.pose_bucket = parse_pose_bucket(doc.value("pose_bucket", "frontal"));
    t.variant_of = doc.value("variant_of", "");
    for (const json& a : doc.at("anchors"))
      t.anchors.push_back({Point2d(a.at("x").get<double>(), a.at("y").get<double>()),
                           a.at("landmark_index").get<int>()});
    if (doc.contains("p5_anchors")) {
      const json& p = doc.at("p5_anchors");
      if (!p.is_array() || p.size() != 5)
        throw ValidationError("template '" + t.template_id + "': p5_anchors needs 5 points");
      std::array<Point2d, 5> pts;
      for (std::size_t k = 0; k < 5; ++k) pts[k] = {p[k].at(0).get<double>(), p[k].at(1).get<double>()};
      t.p5_anchors = pts;
    }
    const fs::path raster = sidecar.parent_path() / doc.at("raster_file").get<std::string>();
    if (!fs::exists(raster))
      throw LoadError("template '" + t.template_id + "': raster " + raster.string() + " missing");
    t.raster = read_rgba(raster);
  } catch (const json::exception& e) {
    throw LoadError("sidecar " + sidecar.string() + ": " + e.what());
  } catch (const IoError& e) {
    throw LoadError("template '" + t.template_id + "': " + e.what());
  }
  return t;
}

}  // namespace

MaskRegistry load_registry(const fs::path& root, std::vector<HsvShift> color_augments) {
  if (!fs::is_directory(root)) throw LoadError("mask directory " + root.string() + " does not exist");
  std::vector<fs::path> sidecars, rasters;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension();
    if (ext == ".json") sidecars.push_back(entry.path());
    if (ext == ".png") rasters.push_back(entry.path());
  }
  std::sort(sidecars.begin(), sidecars.end());
  std::sort(rasters.begin(), rasters.end());

  MaskRegistry registry;
  registry.color_augments = std::move(color_augments);
  std::set<fs::path> referenced;
  for (const fs::path& sidecar : sidecars) {
    std::ifstream in(sidecar);
    const json doc = json::parse(in, nullptr, false);
    if (!doc.is_discarded() && doc.is_object() && doc.contains("raster_file"))
      referenced.insert(fs::weakly_canonical(root / doc["raster_file"].get<std::string>()));
    registry.templates.push_back(read_sidecar(sidecar));
  }
  for (const fs::path& raster : rasters)
    if (!referenced.count(fs::weakly_canonical(raster)))
      throw LoadError("template raster " + raster.filename().string() + " has no sidecar");
  if (registry.templates.empty()) throw LoadError("no mask templates in " + root.string());
  validate(registry);
  return registry;
}

void save_template(const MaskTemplate& mask, const fs::path& dir) {
  fs::create_directories(dir);
  const std::string raster_file = mask.template_id + ".png";
  write_png(dir / raster_file, mask.raster);
  json doc;
  doc["template_id"] = mask.template_id;
  doc["raster_file"] = raster_file;
  doc["pose_bucket"] = to_string(mask.pose_bucket);
  doc["fabric_tag"] = mask.fabric_tag;
  if (!mask.variant_of.empty()) doc["variant_of"] = mask.variant_of;
  json anchors = json::array();
  for (const Anchor& a : mask.anchors)
    anchors.push_back({{"x", a.template_point.x()}, {"y", a.template_point.y()},
                       {"landmark_index", a.landmark_index}});
  doc["anchors"] = anchors;
  if (mask.p5_anchors) {
    json p5 = json::array();
    for (const Point2d& p : *mask.p5_anchors) p5.push_back({p.x(), p.y()});
    doc["p5_anchors"] = p5;
  }
  std::ofstream out(dir / (mask.template_id + ".json"));
  if (!out) throw IoError("cannot write sidecar for " + mask.template_id);
  out << doc.dump(2) << '\n';
}

Hsv rgb_to_hsv(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
  const double r = r8 / 255.0, g = g8 / 255.0, b = b8 / 255.0;
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double delta = mx - mn;
  Hsv out;
  out.v = mx;
  out.s = mx > 0 ? delta / mx : 0.0;
  if (delta > 0) {
    if (mx == r)
      out.h = 60.0 * std::fmod((g - b) / delta, 6.0);
    else if (mx == g)
      out.h = 60.0 * ((b - r) / delta + 2.0);
    else
      out.h = 60.0 * ((r - g) / delta + 4.0);
    if (out.h < 0) out.h += 360.0;
  }
  return out;
}

std::array<std::uint8_t, 3> hsv_to_rgb(const Hsv& hsv) {
  double h = std::fmod(hsv.h, 360.0);
  if (h < 0) h += 360.0;
  const double c = hsv.v * hsv.s;
  const double hp = h / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = hsv.v - c;
  return {to_u8((r + m) * 255.0), to_u8((g + m) * 255.0), to_u8((b + m) * 255.0)};
}

MaskTemplate apply_hsv(const MaskTemplate& mask, const HsvShift& shift) {
  MaskTemplate out = mask;
  if (shift.is_identity()) return out;
  out.template_id = mask.template_id + "@" + shift.signature();
  auto& px = out.raster.data;
  for (std::size_t i = 0; i < out.raster.pixel_count(); ++i) {
    Hsv hsv = rgb_to_hsv(px[i * 4], px[i * 4 + 1], px[i * 4 + 2]);
    hsv.h += shift.hue_delta;
    hsv.s = std::clamp(hsv.s * shift.sat_scale, 0.0, 1.0);
    hsv.v = std::clamp(hsv.v * shift.val_scale, 0.0, 1.0);
    const auto rgb = hsv_to_rgb(hsv);
    std::copy(rgb.begin(), rgb.end(), px.begin() + static_cast<std::ptrdiff_t>(i * 4));
  }
  return out;
}

MaskPick pick_mask(const MaskRegistry& registry, std::uint64_t seed, std::uint64_t image_index) {
  const std::vector<std::size_t> bases = registry.base_indices();
  if (bases.empty()) throw ValidationError("pick_mask: registry holds no templates");
  const std::uint64_t colors = registry.color_augments.size() + 1;
  const std::uint64_t choice = bounded(mix_keys(seed, image_index), bases.size() * colors);
  MaskPick pick;
  pick.template_index = bases[choice / colors];
  const std::uint64_t color = choice % colors;
  pick.shift = color == 0 ? HsvShift::identity() : registry.color_augments[color - 1];
  return pick;
}

}  // namespace maskforge
