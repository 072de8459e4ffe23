#include "maskforge/synth.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>

#include "maskforge/errors.hpp"
#include "maskforge/image_io.hpp"
#include "maskforge/pipeline.hpp"
#include "maskforge/rng.hpp"

namespace maskforge::synth {
namespace fs = std::filesystem;
using Eigen::Vector3d;

namespace {

constexpr double pi = std::numbers::pi;

std::array<Vector3d, 68> build_canonical() {
  std::array<Vector3d, 68> f;
  for (int k = 0; k <= 16; ++k) {
    const double a = pi * k / 16.0;
    f[k] = {-1.05 * std::cos(a), 0.1 + 1.45 * std::sin(a), -0.9 + 0.9 * std::sin(a)};
  }
  for (int k = 0; k < 5; ++k) {
    const double x = -0.85 + 0.175 * k;
    const double y = -0.33 - 0.08 * std::sin(pi * (k + 0.5) / 5.0);
    f[17 + k] = {x, y, 0.15};
    f[26 - k] = {-x, y, 0.15};
  }
  const double bridge[4][2] = {{0.0, 0.2}, {0.2, 0.35}, {0.4, 0.5}, {0.6, 0.6}};
  for (int k = 0; k < 4; ++k) f[27 + k] = {0.0, bridge[k][0], bridge[k][1]};
  const double nose_base[5][3] = {{-0.2, 0.7, 0.35}, {-0.1, 0.73, 0.42}, {0.0, 0.75, 0.45},
                                  {0.1, 0.73, 0.42}, {0.2, 0.7, 0.35}};
  for (int k = 0; k < 5; ++k) f[31 + k] = {nose_base[k][0], nose_base[k][1], nose_base[k][2]};
  const double eye[6][2] = {{-0.7, 0.0}, {-0.58, -0.07}, {-0.42, -0.07},
                            {-0.3, 0.0}, {-0.42, 0.06},  {-0.58, 0.06}};
  for (int k = 0; k < 6; ++k) f[36 + k] = {eye[k][0], eye[k][1], 0.05};
  const int mirror_eye[6] = {45, 44, 43, 42, 47, 46};
  for (int k = 0; k < 6; ++k) f[mirror_eye[k]] = {-eye[k][0], eye[k][1], 0.05};
  const double mouth[12][2] = {{-0.4, 1.0},  {-0.25, 0.93}, {-0.1, 0.9},  {0.0, 0.92},
                               {0.1, 0.9},   {0.25, 0.93},  {0.4, 1.0},   {0.25, 1.08},
                               {0.1, 1.12},  {0.0, 1.13},   {-0.1, 1.12}, {-0.25, 1.08}};
  for (int k = 0; k < 12; ++k) f[48 + k] = {mouth[k][0], mouth[k][1], 0.25 - 0.4 * std::abs(mouth[k][0])};
  const double inner[8][2] = {{-0.32, 1.0}, {-0.1, 0.97}, {0.0, 0.97}, {0.1, 0.97},
                              {0.32, 1.0},  {0.1, 1.03},  {0.0, 1.04}, {-0.1, 1.03}};
  for (int k = 0; k < 8; ++k) f[60 + k] = {inner[k][0], inner[k][1], 0.22 - 0.4 * std::abs(inner[k][0])};
  return f;
}

// Head rotation pivot sits behind the face plane.
constexpr double pivot_depth = -0.8;

Point2d project(const Vector3d& p, const FacePose& pose) {
  const double c = std::cos(pose.yaw), s = std::sin(pose.yaw);
  const double x = p.x() * c + (p.z() - pivot_depth) * s;
  const double y = p.y();
  const double roll = pose.roll_deg * pi / 180.0;
  const double cr = std::cos(roll), sr = std::sin(roll);
  return pose.eye_mid + pose.iod_px * Point2d(cr * x - sr * y, sr * x + cr * y);
}

void fill_polygon(RgbImage& img, const std::vector<Point2d>& pts, const std::array<double, 3>& color,
                  double opacity = 1.0) {
  Polygond poly;
  try {
    poly = make_polygon(pts);
  } catch (const DegeneracyError&) {
    return;
  }
  const GrayImage cover = rasterize(poly, {img.width, img.height});
  for (std::size_t i = 0; i < img.pixel_count(); ++i)
    if (cover.data[i])
      for (int c = 0; c < 3; ++c)
        img.data[i * 3 + c] = to_u8(opacity * color[c] + (1 - opacity) * img.data[i * 3 + c]);
}

std::vector<Point2d> pick(const LandmarkSet& lm, std::initializer_list<int> idx) {
  std::vector<Point2d> out;
  for (int i : idx) out.push_back(lm.points[i]);
  return out;
}

}  // namespace

const std::array<Vector3d, 68>& canonical_face() {
  static const std::array<Vector3d, 68> face = build_canonical();
  return face;
}

LandmarkSet face_landmarks(const FacePose& pose, const std::string& image_id, Frame frame) {
  LandmarkSet lm;
  lm.image_id = image_id;
  lm.convention = LandmarkConvention::P68;
  lm.image_size = {frame.width, frame.height};
  // Keep the eye midpoint where the pose puts it, whatever the yaw.
  const Point2d shift = project(Vector3d::Zero(), pose) - pose.eye_mid;
  for (const Vector3d& p : canonical_face()) lm.points.push_back(project(p, pose) - shift);
  return lm;
}

RgbImage render_face(const LandmarkSet& lm, Frame frame, std::uint64_t seed) {
  Rng rng(seed);
  RgbImage img(frame.width, frame.height);
  const std::array<double, 3> top{rng.uniform(40, 220), rng.uniform(40, 220), rng.uniform(40, 220)};
  const std::array<double, 3> bottom{rng.uniform(40, 220), rng.uniform(40, 220), rng.uniform(40, 220)};
  for (int y = 0; y < frame.height; ++y) {
    const double t = static_cast<double>(y) / std::max(1, frame.height - 1);
    for (int x = 0; x < frame.width; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y)[c] = to_u8((1 - t) * top[c] + t * bottom[c]);
  }

  const double tone = rng.uniform(0.0, 1.0);
  const std::array<double, 3> skin{250 - 130 * tone, 205 - 120 * tone, 175 - 110 * tone};
  const auto eyes = eye_centers(lm);
  const double iod = (eyes[1] - eyes[0]).norm();
  const Point2d down = (lm.points[8] - lm.points[27]).normalized();

  // Face: jaw line closed by an arc over the forehead.
  std::vector<Point2d> face = pick(lm, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
  for (int k = 1; k < 12; ++k) {
    const double a = pi * k / 12.0;
    const Point2d side = lm.points[16] + (lm.points[0] - lm.points[16]) * (0.5 - 0.5 * std::cos(a));
    face.push_back(side - down * (0.95 * iod * std::sin(a)) - down * 0.1 * iod);
  }
  fill_polygon(img, face, skin);
  const std::array<double, 3> dark{0.45 * skin[0], 0.4 * skin[1], 0.4 * skin[2]};
  fill_polygon(img, pick(lm, {17, 18, 19, 20, 21}), dark);
  fill_polygon(img, pick(lm, {22, 23, 24, 25, 26}), dark);
  for (int k = 17; k <= 26; ++k) {
    const Point2d p = lm.points[k];
    fill_polygon(img, {p + Point2d(-0.04, -0.03) * iod, p + Point2d(0.04, -0.03) * iod,
                       p + Point2d(0.04, 0.03) * iod, p + Point2d(-0.04, 0.03) * iod},
                 dark);
  }
  const std::array<double, 3> white{235, 235, 230}, iris{60, 45, 35};
  fill_polygon(img, pick(lm, {36, 37, 38, 39, 40, 41}), white);
  fill_polygon(img, pick(lm, {42, 43, 44, 45, 46, 47}), white);
  for (const Point2d& e : eyes) {
    std::vector<Point2d> dot;
    for (int k = 0; k < 10; ++k)
      dot.push_back(e + 0.055 * iod * Point2d(std::cos(2 * pi * k / 10), std::sin(2 * pi * k / 10)));
    fill_polygon(img, dot, iris);
  }
  fill_polygon(img, pick(lm, {31, 32, 33, 34, 35, 30}), {0.8 * skin[0], 0.7 * skin[1], 0.68 * skin[2]});
  fill_polygon(img, pick(lm, {48, 49, 50, 51, 52, 53, 54, 55, 56, 57, 58, 59}),
               {0.75 * skin[0] + 40, 0.45 * skin[1], 0.45 * skin[2]});
  fill_polygon(img, pick(lm, {60, 61, 62, 63, 64, 65, 66, 67}), {90, 30, 35});

  for (auto& v : img.data) v = to_u8(v + rng.uniform(-5.0, 5.0));
  return img;
}

SyntheticFace make_face(std::size_t index, std::uint64_t seed, Frame frame) {
  static constexpr double rolls[7] = {-30, -20, -10, 0, 10, 20, 30};
  static constexpr double yaws[5] = {-0.3, -0.15, 0.0, 0.15, 0.3};
  static constexpr double scales[3] = {36.0, 44.0, 52.0};
  Rng rng(mix_keys(seed, index));
  SyntheticFace face;
  face.pose.roll_deg = rolls[index % 7];
  face.pose.yaw = yaws[(index / 7) % 5];
  face.pose.iod_px = scales[(index / 35) % 3] * (frame.width / 192.0);
  face.pose.eye_mid = {frame.width * 0.5 + rng.uniform(-4, 4), frame.height * 0.40 + rng.uniform(-4, 4)};
  char id[32];
  std::snprintf(id, sizeof(id), "face_%05zu", index);
  face.landmarks = face_landmarks(face.pose, id, frame);
  face.image = render_face(face.landmarks, frame, rng.next());
  return face;
}

// ---------------------------------------------------------------------------
// Mask templates

namespace {

constexpr int template_width = 256;
constexpr int template_height = 240;
constexpr double template_scale = 100.0;
const Point2d template_origin(128.0, 30.0);

Point2d canon(int k) { return canonical_face()[k].head<2>(); }

enum class Cut { surgical, cloth, ffp2 };

// Outline in face units.
std::vector<Point2d> outline(Cut cut) {
  std::vector<Point2d> pts;
  switch (cut) {
    case Cut::surgical: {
      // Follows the jaw, straight pleated top edge under the eyes.
      for (int k = 2; k <= 14; ++k) pts.push_back(canon(k));
      for (int k = 1; k < 6; ++k) {
        const double t = k / 6.0;
        const Point2d a = canon(14), b = canon(28);
        pts.push_back(a + (b - a) * t + Point2d(0, -0.03 * std::sin(pi * t)));
      }
      pts.push_back(canon(28));
      for (int k = 1; k < 6; ++k) {
        const double t = k / 6.0;
        const Point2d a = canon(28), b = canon(2);
        pts.push_back(a + (b - a) * t + Point2d(0, -0.03 * std::sin(pi * t)));
      }
      break;
    }
    case Cut::cloth: {
      // Rounder: slightly inside the jaw at the bottom, softly arched top.
      const Point2d c = 0.5 * (canon(2) + canon(14));
      for (int k = 2; k <= 14; ++k) pts.push_back(c + (canon(k) - c) * 0.98);
      for (int k = 1; k < 12; ++k) {
        const double t = k / 12.0;
        const Point2d a = canon(14), b = canon(2);
        const double lift = (a.y() - canon(28).y()) * std::pow(std::sin(pi * t), 0.8);
        pts.push_back(a + (b - a) * t - Point2d(0, lift));
      }
      break;
    }
    case Cut::ffp2: {
      // Folded respirator: pointed over the nose bridge, chin panel below the jaw.
      for (int k = 2; k <= 14; ++k) {
        Point2d p = canon(k);
        if (k >= 6 && k <= 10) p.y() += 0.04 * std::cos(pi * (k - 8) / 8.0);
        pts.push_back(p);
      }
      pts.push_back(0.5 * (canon(14) + canon(28)) + Point2d(0.02, -0.02));
      pts.push_back(canon(28) + Point2d(0, -0.04));
      pts.push_back(0.5 * (canon(2) + canon(28)) + Point2d(-0.02, -0.02));
      break;
    }
  }
  return pts;
}

using Texture = std::array<double, 3> (*)(const Point2d& face_units, double noise);

double fabric_noise(int x, int y, std::uint64_t salt) {
  return static_cast<double>(splitmix64(mix_keys(salt, (static_cast<std::uint64_t>(y) << 32) | x)) >> 11) *
             0x1.0p-53 -
         0.5;
}

std::array<double, 3> shade(std::array<double, 3> base, double factor, double noise) {
  for (double& c : base) c = c * factor + 10.0 * noise;
  return base;
}

double pleats(const Point2d& p) {
  // Three horizontal folds.
  const double phase = std::fmod((p.y() - 0.3) / 0.3 + 10.0, 1.0);
  return 0.92 + 0.08 * std::sin(2 * pi * phase);
}

struct Style {
  const char* id;
  const char* fabric;
  Cut cut;
  std::array<double, 3> (*paint)(const Point2d& p, double noise);
};

const Style styles[9] = {
    {"surgical_blue", "surgical, light blue nonwoven", Cut::surgical,
     [](const Point2d& p, double n) { return shade({112, 168, 214}, pleats(p), n); }},
    {"surgical_white", "surgical, white nonwoven", Cut::surgical,
     [](const Point2d& p, double n) { return shade({236, 238, 240}, pleats(p), n); }},
    {"surgical_black", "surgical, black nonwoven", Cut::surgical,
     [](const Point2d& p, double n) { return shade({38, 38, 44}, 2.0 - pleats(p), n); }},
    {"cloth_polka", "cotton print, navy with white dots", Cut::cloth,
     [](const Point2d& p, double n) {
       const double gx = std::fmod(p.x() * 6.0 + 100.0, 1.0) - 0.5;
       const double gy = std::fmod(p.y() * 6.0 + 100.0, 1.0) - 0.5;
       return gx * gx + gy * gy < 0.05 ? shade({240, 240, 235}, 1.0, n) : shade({28, 40, 92}, 1.0, n);
     }},
    {"cloth_stripes", "cotton print, red and white diagonal stripes", Cut::cloth,
     [](const Point2d& p, double n) {
       const double s = std::fmod((p.x() + p.y()) * 5.0 + 100.0, 1.0);
       return s < 0.5 ? shade({196, 36, 48}, 1.0, n) : shade({244, 236, 230}, 1.0, n);
     }},
    {"cloth_plaid", "flannel, green tartan", Cut::cloth,
     [](const Point2d& p, double n) {
       const double a = 0.5 + 0.5 * std::cos(2 * pi * p.x() * 4.0);
       const double b = 0.5 + 0.5 * std::cos(2 * pi * p.y() * 4.0);
       return shade({30 + 90 * a * b, 90 + 60 * (a + b) * 0.5, 50 + 40 * a}, 1.0, n);
     }},
    {"cloth_denim", "denim twill", Cut::cloth,
     [](const Point2d& p, double n) {
       const double twill = 0.9 + 0.1 * std::sin(2 * pi * (p.x() * 18.0 - p.y() * 18.0));
       return shade({54, 82, 128}, twill, 2.5 * n);
     }},
    {"ffp2_white", "FFP2 respirator, white", Cut::ffp2,
     [](const Point2d& p, double n) {
       const double seam = std::abs(p.x()) < 0.012 ? 0.85 : 1.0;
       return shade({242, 242, 238}, seam * (0.96 + 0.04 * std::cos(p.x() * 2.0)), n);
     }},
    {"ffp2_grey", "FFP2 respirator, slate grey", Cut::ffp2,
     [](const Point2d& p, double n) {
       const double seam = std::abs(p.x()) < 0.012 ? 0.8 : 1.0;
       return shade({120, 126, 134}, seam * (0.95 + 0.05 * std::cos(p.x() * 2.0)), n);
     }},
};

MaskTemplate build_template(const Style& style, std::uint64_t salt) {
  std::vector<Point2d> outline_px;
  for (const Point2d& p : outline(style.cut)) outline_px.push_back(template_point(p));
  const Polygond poly = make_polygon(outline_px);

  // 4x4 supersampled coverage for antialiased edges.
  constexpr int ss = 4;
  const Polygond fine = [&] {
    Polygond f = poly;
    for (auto& v : f.vertices) v *= ss;
    return f;
  }();
  const GrayImage cover = rasterize(fine, {template_width * ss, template_height * ss});

  MaskTemplate t;
  t.template_id = style.id;
  t.fabric_tag = style.fabric;
  t.raster = RgbaImage(template_width, template_height);
  for (int y = 0; y < template_height; ++y)
    for (int x = 0; x < template_width; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) hits += cover.at(x * ss + sx, y * ss + sy)[0];
      const Point2d face_units = (Point2d(x + 0.5, y + 0.5) - template_origin) / template_scale;
      // Color is painted everywhere so transparent pixels carry the edge color.
      const auto rgb = style.paint(face_units, fabric_noise(x, y, salt));
      auto px = t.raster.at(x, y);
      for (int c = 0; c < 3; ++c) px[c] = to_u8(rgb[c]);
      px[3] = to_u8(255.0 * hits / (ss * ss));
    }

  for (int k : {2, 5, 8, 11, 14, 28}) t.anchors.push_back({template_point(canon(k)), k});
  const auto& f = canonical_face();
  Point2d le = Point2d::Zero(), re = Point2d::Zero();
  for (int i = 36; i < 42; ++i) le += f[i].head<2>() / 6.0;
  for (int i = 42; i < 48; ++i) re += f[i].head<2>() / 6.0;
  t.p5_anchors = std::array<Point2d, 5>{template_point(le), template_point(re), template_point(canon(30)),
                                        template_point(canon(48)), template_point(canon(54))};
  return t;
}

}  // namespace

Point2d template_point(const Point2d& face_units) { return template_origin + template_scale * face_units; }

std::vector<MaskTemplate> make_mask_templates() {
  std::vector<MaskTemplate> out;
  for (std::size_t i = 0; i < std::size(styles); ++i) out.push_back(build_template(styles[i], 0x5eed0000 + i));
  return out;
}

CorpusFiles write_corpus(const fs::path& dir, std::size_t count, std::uint64_t seed, Frame frame) {
  fs::create_directories(dir / "images");
  nlohmann::json records = nlohmann::json::array();
  CorpusManifest manifest;
  for (std::size_t i = 0; i < count; ++i) {
    const SyntheticFace face = make_face(i, seed, frame);
    const std::string rel = "images/" + face.landmarks.image_id + ".png";
    write_png(dir / rel, face.image);
    nlohmann::json pts = nlohmann::json::array();
    for (const Point2d& p : face.landmarks.points) pts.push_back({p.x(), p.y()});
    records.push_back({{"image_id", face.landmarks.image_id},
                       {"width", frame.width},
                       {"height", frame.height},
                       {"points", pts}});
    manifest.entries.push_back({face.landmarks.image_id, rel, "landmarks.json", "", Split::none});
  }
  CorpusFiles files{dir / "manifest.json", dir / "landmarks.json"};
  std::ofstream out(files.landmarks);
  if (!out) throw IoError("cannot write " + files.landmarks.string());
  out << records.dump() << '\n';
  out.close();
  save_manifest(manifest, files.manifest);
  return files;
}

}  // namespace maskforge::synth
