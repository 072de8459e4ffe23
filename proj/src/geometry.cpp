#include "maskforge/geometry.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <map>
#include <numeric>
#include <sstream>

namespace maskforge {
namespace {

using json = nlohmann::json;

std::vector<LandmarkSet> parse_dlib68_json(std::istream& in) {
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return {};
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("dlib68_json: ") + e.what());
  }
  if (!doc.is_array()) throw ParseError("dlib68_json: top level must be an array of records");

  std::vector<LandmarkSet> out;
  out.reserve(doc.size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const json& rec = doc[i];
    const std::string where = "dlib68_json record " + std::to_string(i);
    LandmarkSet lm;
    lm.convention = LandmarkConvention::P68;
    try {
      lm.image_id = rec.at("image_id").get<std::string>();
      lm.image_size = {rec.at("width").get<int>(), rec.at("height").get<int>()};
      for (const json& pt : rec.at("points")) {
        if (!pt.is_array() || pt.size() != 2) throw ParseError(where + ": point is not [x, y]");
        lm.points.emplace_back(pt[0].get<double>(), pt[1].get<double>());
      }
    } catch (const json::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
    if (lm.points.size() != 68)
      throw FormatError(where + " (" + lm.image_id + "): expected 68 points, got " +
                        std::to_string(lm.points.size()));
    validate(lm);
    out.push_back(std::move(lm));
  }
  return out;
}

bool parse_number(const std::string& token, double& value) {
  const char* first = token.data();
  const char* last = first + token.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  return ec == std::errc() && ptr == last;
}

std::vector<LandmarkSet> parse_celeba5_txt(std::istream& in) {
  std::vector<LandmarkSet> out;
  std::string line;
  std::size_t line_no = 0;
  bool seen_content = false;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::vector<std::string> tokens;
    for (std::string t; ls >> t;) tokens.push_back(t);
    if (tokens.empty()) continue;

    const bool first = !seen_content;
    seen_content = true;
    double scratch = 0;
    if (first && tokens.size() == 1 && parse_number(tokens[0], scratch)) continue;  // record count
    if (tokens[0] == "lefteye_x") continue;                                          // column header

    const std::string where = "celeba5_txt line " + std::to_string(line_no);
    std::vector<double> values;
    for (std::size_t i = 1; i < tokens.size(); ++i) {
      double v = 0;
      if (!parse_number(tokens[i], v))
        throw ParseError(where + ": '" + tokens[i] + "' is not a number");
      values.push_back(v);
    }
    if (values.size() != 10)
      throw FormatError(where + ": expected 10 coordinates, got " + std::to_string(values.size()));
    LandmarkSet lm;
    lm.image_id = tokens[0];
    lm.convention = LandmarkConvention::P5;
    for (std::size_t k = 0; k < 5; ++k) lm.points.emplace_back(values[2 * k], values[2 * k + 1]);
    validate(lm);
    out.push_back(std::move(lm));
  }
  return out;
}

// Calls fn(y, x_begin, x_end) for every run of pixels whose centers fall
// inside the polygon, clipped to the frame.
template <typename Fn>
void for_each_span(const Polygond& poly, Frame frame, Fn&& fn) {
  if (frame.width <= 0 || frame.height <= 0 || poly.vertices.size() < 3) return;
  double ymin = poly.vertices[0].y(), ymax = ymin;
  for (const auto& v : poly.vertices) {
    ymin = std::min(ymin, v.y());
    ymax = std::max(ymax, v.y());
  }
  const int row0 = std::max(0, static_cast<int>(std::floor(ymin - 0.5)));
  const int row1 = std::min(frame.height - 1, static_cast<int>(std::ceil(ymax - 0.5)));
  const std::size_t n = poly.vertices.size();
  std::vector<double> xs;
  xs.reserve(n);
  for (int y = row0; y <= row1; ++y) {
    const double yc = y + 0.5;
    xs.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const Point2d& a = poly.vertices[i];
      const Point2d& b = poly.vertices[(i + 1) % n];
      if ((a.y() <= yc && yc < b.y()) || (b.y() <= yc && yc < a.y()))
        xs.push_back(a.x() + (yc - a.y()) * (b.x() - a.x()) / (b.y() - a.y()));
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      const double lo = std::ceil(xs[k] - 0.5);
      const double hi = std::ceil(xs[k + 1] - 0.5);
      const int x0 = static_cast<int>(std::clamp(lo, 0.0, static_cast<double>(frame.width)));
      const int x1 = static_cast<int>(std::clamp(hi, 0.0, static_cast<double>(frame.width)));
      if (x1 > x0) fn(y, x0, x1);
    }
  }
}

}  // namespace

void validate(const LandmarkSet& lm) {
  if (lm.points.size() != point_count(lm.convention))
    throw FormatError("landmarks for '" + lm.image_id + "': expected " +
                      std::to_string(point_count(lm.convention)) + " points, got " +
                      std::to_string(lm.points.size()));
  for (const auto& p : lm.points)
    if (!p.allFinite()) throw ParseError("landmarks for '" + lm.image_id + "': non-finite point");
}

std::vector<LandmarkSet> parse_landmarks(std::istream& source, LandmarkFormat format) {
  switch (format) {
    case LandmarkFormat::dlib68_json:
      return parse_dlib68_json(source);
    case LandmarkFormat::celeba5_txt:
      return parse_celeba5_txt(source);
  }
  throw ParseError("unknown landmark format");
}

std::array<Point2d, 2> eye_centers(const LandmarkSet& lm) {
  validate(lm);
  if (lm.convention == LandmarkConvention::P5) return {lm.points[p5::left_eye], lm.points[p5::right_eye]};
  Point2d left = Point2d::Zero(), right = Point2d::Zero();
  for (int i = 36; i < 42; ++i) left += lm.points[i];
  for (int i = 42; i < 48; ++i) right += lm.points[i];
  return {left / 6.0, right / 6.0};
}

double inter_ocular_distance(const LandmarkSet& lm) {
  const auto eyes = eye_centers(lm);
  return (eyes[1] - eyes[0]).norm();
}

LandmarkSet to_p5(const LandmarkSet& lm68) {
  if (lm68.convention != LandmarkConvention::P68) return lm68;
  const auto eyes = eye_centers(lm68);
  LandmarkSet out;
  out.image_id = lm68.image_id;
  out.convention = LandmarkConvention::P5;
  out.image_size = lm68.image_size;
  out.points = {eyes[0], eyes[1], lm68.points[30], lm68.points[48], lm68.points[54]};
  return out;
}

Polygond mask_region_polygon(const LandmarkSet& lm) {
  validate(lm);
  const auto eyes = eye_centers(lm);
  const double iod = (eyes[1] - eyes[0]).norm();
  if (!(iod > 1e-9)) throw DegeneracyError("landmarks for '" + lm.image_id + "': coincident eyes");

  if (lm.convention == LandmarkConvention::P68) {
    std::vector<Point2d> verts;
    for (int i = 2; i <= 14; ++i) verts.push_back(lm.points[i]);
    verts.push_back(lm.points[28]);
    return make_polygon(std::move(verts));
  }

  // Face-aligned frame: u along the eye axis, v perpendicular toward the mouth.
  const Point2d u = (eyes[1] - eyes[0]) / iod;
  Point2d v(-u.y(), u.x());
  const Point2d eye_mid = 0.5 * (eyes[0] + eyes[1]);
  const Point2d nose = lm.points[p5::nose];
  const Point2d mouth_mid = 0.5 * (lm.points[p5::left_mouth] + lm.points[p5::right_mouth]);
  if ((mouth_mid - eye_mid).dot(v) < 0) v = -v;

  const Point2d to_eyes = eye_mid - nose;
  const double lift = 0.25 * iod;
  const Point2d top = to_eyes.norm() > 0 ? Point2d(nose + to_eyes.normalized() * lift) : nose;
  const double mouth_drop = (mouth_mid - top).dot(v);
  const double nose_to_mouth = (mouth_mid - nose).dot(v);
  const Point2d bottom = top + v * (mouth_drop + 0.6 * nose_to_mouth);
  const double half_width = 0.9 * iod;
  return make_polygon<double>({top - u * half_width, top + u * half_width,
                               bottom + u * half_width, bottom - u * half_width});
}

Affine2d triangle_affine(const std::array<Point2d, 3>& from, const std::array<Point2d, 3>& to) {
  Eigen::Matrix3d src;
  Eigen::Matrix<double, 2, 3> dst;
  for (int k = 0; k < 3; ++k) {
    src.col(k) << from[k].x(), from[k].y(), 1.0;
    dst.col(k) = to[k];
  }
  if (orient2d(from[0], from[1], from[2]) == 0.0)
    throw DegeneracyError("triangle_affine: source triangle is degenerate");
  return Affine2d::from_matrix(dst * src.inverse());
}

std::pair<Point2d, double> circumcircle(const Point2d& a, const Point2d& b, const Point2d& c) {
  const Point2d ab = b - a, ac = c - a;
  const double d = 2.0 * (ab.x() * ac.y() - ab.y() * ac.x());
  const double ab2 = ab.squaredNorm(), ac2 = ac.squaredNorm();
  const Point2d rel((ac.y() * ab2 - ab.y() * ac2) / d, (ab.x() * ac2 - ac.x() * ab2) / d);
  return {a + rel, rel.norm()};
}

TriangleMeshd delaunay(std::span<const Point2d> points) {
  const int n = static_cast<int>(points.size());
  if (n < 3) throw DegeneracyError("delaunay: need at least 3 points");
  TriangleMeshd mesh;
  mesh.vertices.assign(points.begin(), points.end());
  const auto& P = mesh.vertices;
  for (const auto& p : P)
    if (!p.allFinite()) throw DegeneracyError("delaunay: non-finite point");

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return P[a].x() < P[b].x() || (P[a].x() == P[b].x() && P[a].y() < P[b].y());
  });
  for (int i = 1; i < n; ++i)
    if (P[order[i]] == P[order[i - 1]]) throw DegeneracyError("delaunay: duplicate points");

  double scale = 0;
  for (const auto& p : P) scale = std::max(scale, (p - P[order[0]]).cwiseAbs().maxCoeff());
  const double area_eps = 1e-12 * scale * scale;

  // Sweep: first non-collinear point closes a fan over the collinear prefix.
  int k = 2;
  while (k < n && std::abs(orient2d(P[order[0]], P[order[1]], P[order[k]])) <= area_eps) ++k;
  if (k == n) throw DegeneracyError("delaunay: all points are collinear");

  auto add_ccw = [&](int a, int b, int c) {
    if (orient2d(P[a], P[b], P[c]) < 0) std::swap(b, c);
    mesh.triangles.push_back({a, b, c});
  };
  const int apex = order[k];
  for (int i = 0; i + 1 < k; ++i) add_ccw(order[i], order[i + 1], apex);

  // Hull as a counter-clockwise cycle.
  std::vector<int> hull;
  if (orient2d(P[order[0]], P[order[k - 1]], P[apex]) > 0) {
    for (int i = 0; i < k; ++i) hull.push_back(order[i]);
    hull.push_back(apex);
  } else {
    hull.push_back(apex);
    for (int i = k - 1; i >= 0; --i) hull.push_back(order[i]);
  }

  std::vector<int> rest;
  for (int i = k + 1; i < n; ++i) rest.push_back(order[i]);
  for (int p : rest) {
    const int h = static_cast<int>(hull.size());
    std::vector<bool> visible(h);
    bool any = false;
    for (int i = 0; i < h; ++i) {
      visible[i] = orient2d(P[hull[i]], P[hull[(i + 1) % h]], P[p]) < -area_eps;
      any = any || visible[i];
    }
    if (!any) throw DegeneracyError("delaunay: point inside current hull during sweep");
    // Visible edges are contiguous; locate the run start.
    int start = 0;
    while (!(visible[start] && !visible[(start + h - 1) % h])) start = (start + 1) % h;
    int count = 0;
    while (visible[(start + count) % h]) {
      const int i = (start + count) % h;
      add_ccw(hull[i], p, hull[(i + 1) % h]);
      ++count;
    }
    std::vector<int> next;
    next.reserve(h + 1);
    // Keep hull[start+count .. start] (wrapping), then insert p.
    for (int j = 0; j <= h - count; ++j) next.push_back(hull[(start + count + j) % h]);
    next.push_back(p);
    hull = std::move(next);
  }

  // Lawson flips until every interior edge is locally Delaunay.
  auto in_circle = [&](int a, int b, int c, int d) {
    const auto [center, radius] = circumcircle(P[a], P[b], P[c]);
    return (P[d] - center).norm() < radius * (1.0 - 1e-10);
  };
  bool flipped = true;
  int guard = 0;
  while (flipped && guard++ < 10000) {
    flipped = false;
    std::map<std::pair<int, int>, std::pair<int, int>> edge_owner;  // directed edge -> (tri, opposite)
    for (int t = 0; t < static_cast<int>(mesh.triangles.size()); ++t) {
      const auto& tri = mesh.triangles[t];
      for (int e = 0; e < 3; ++e) edge_owner[{tri[e], tri[(e + 1) % 3]}] = {t, tri[(e + 2) % 3]};
    }
    for (const auto& [edge, owner] : edge_owner) {
      auto twin = edge_owner.find({edge.second, edge.first});
      if (twin == edge_owner.end()) continue;
      const int a = edge.first, b = edge.second, c = owner.second, d = twin->second.second;
      if (in_circle(a, b, c, d)) {
        mesh.triangles[owner.first] = {c, a, d};
        mesh.triangles[twin->second.first] = {c, d, b};
        for (int t : {owner.first, twin->second.first}) {
          auto& tri = mesh.triangles[t];
          if (orient2d(P[tri[0]], P[tri[1]], P[tri[2]]) < 0) std::swap(tri[1], tri[2]);
        }
        flipped = true;
        break;
      }
    }
  }
  return mesh;
}

GrayImage rasterize(const Polygond& poly, Frame frame) {
  GrayImage out(std::max(frame.width, 0), std::max(frame.height, 0));
  for_each_span(poly, frame, [&](int y, int x0, int x1) {
    std::fill_n(out.data.begin() + static_cast<std::ptrdiff_t>(y) * frame.width + x0, x1 - x0, 1);
  });
  return out;
}

std::size_t raster_area(const Polygond& poly, Frame frame) {
  std::size_t area = 0;
  for_each_span(poly, frame, [&](int, int x0, int x1) { area += static_cast<std::size_t>(x1 - x0); });
  return area;
}

double polygon_iou(const Polygond& a, const Polygond& b, Frame frame) {
  const GrayImage ra = rasterize(a, frame);
  const GrayImage rb = rasterize(b, frame);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < ra.data.size(); ++i) {
    inter += ra.data[i] & rb.data[i];
    uni += ra.data[i] | rb.data[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double raster_footprint_iou(const GrayImage& alpha, const Polygond& region, Frame frame,
                            std::uint8_t alpha_cut) {
  if (!alpha.same_size(frame.width, frame.height))
    throw ShapeError("alpha raster is " + std::to_string(alpha.width) + "x" +
                     std::to_string(alpha.height) + ", frame is " + std::to_string(frame.width) +
                     "x" + std::to_string(frame.height));
  const GrayImage r = rasterize(region, frame);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < r.data.size(); ++i) {
    const bool in_alpha = alpha.data[i] > alpha_cut;
    const bool in_region = r.data[i] != 0;
    inter += in_alpha && in_region;
    uni += in_alpha || in_region;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace maskforge
