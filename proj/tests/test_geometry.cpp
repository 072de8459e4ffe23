#include <doctest.h>

#include <sstream>

#include "maskforge/geometry.hpp"
#include "maskforge/synth.hpp"
#include "support.hpp"

using namespace maskforge;
namespace fs = std::filesystem;
using testsupport::random_star;

namespace {

LandmarkSet p5_set(std::initializer_list<Point2d> pts) {
  LandmarkSet lm;
  lm.image_id = "p5";
  lm.convention = LandmarkConvention::P5;
  lm.points.assign(pts.begin(), pts.end());
  return lm;
}

Polygond rect(double x0, double y0, double x1, double y1) {
  return make_polygon<double>({{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}});
}

std::string dlib_record(const std::string& id, int count) {
  std::ostringstream s;
  s << R"({"image_id":")" << id << R"(","width":100,"height":100,"points":[)";
  for (int i = 0; i < count; ++i) s << (i ? "," : "") << "[" << i << "," << 2 * i << "]";
  s << "]}";
  return s.str();
}

}  // namespace

TEST_CASE("celeba row parses into a five point set") {
  std::istringstream in("2\nlefteye_x lefteye_y righteye_x righteye_y nose_x nose_y leftmouth_x leftmouth_y rightmouth_x rightmouth_y\n"
                        "000001.jpg 69 109 106 113 77 142 73 169 108 171\n"
                        "000002.jpg 69 110 107 112 81 135 70 151 108 153\n");
  const auto sets = parse_landmarks(in, LandmarkFormat::celeba5_txt);
  REQUIRE(sets.size() == 2);
  CHECK(sets[0].image_id == "000001.jpg");
  CHECK(sets[0].convention == LandmarkConvention::P5);
  CHECK(sets[0].points.size() == 5);
  CHECK(sets[0].points[0] == Point2d(69, 109));
  CHECK(sets[1].points[4] == Point2d(108, 153));
}

TEST_CASE("empty streams give no records") {
  std::istringstream a(""), b("  \n");
  CHECK(parse_landmarks(a, LandmarkFormat::celeba5_txt).empty());
  CHECK(parse_landmarks(b, LandmarkFormat::dlib68_json).empty());
}

TEST_CASE("landmark parse errors") {
  SUBCASE("67 points is a format error") {
    std::istringstream in("[" + dlib_record("a", 67) + "]");
    CHECK_THROWS_AS(parse_landmarks(in, LandmarkFormat::dlib68_json), FormatError);
  }
  SUBCASE("68 points parse in order") {
    std::istringstream in("[" + dlib_record("a", 68) + "," + dlib_record("b", 68) + "]");
    const auto sets = parse_landmarks(in, LandmarkFormat::dlib68_json);
    REQUIRE(sets.size() == 2);
    CHECK(sets[1].image_id == "b");
    CHECK(sets[0].points[67] == Point2d(67, 134));
    CHECK(sets[0].image_size == Eigen::Vector2i(100, 100));
  }
  SUBCASE("bad json") {
    std::istringstream in("[{");
    CHECK_THROWS_AS(parse_landmarks(in, LandmarkFormat::dlib68_json), ParseError);
  }
  SUBCASE("non-numeric celeba value names the line") {
    std::istringstream in("a.jpg 1 2 3 4 5 6 7 8 9 10\nb.jpg 1 2 x 4 5 6 7 8 9 10\n");
    try {
      parse_landmarks(in, LandmarkFormat::celeba5_txt);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }
  SUBCASE("short celeba row") {
    std::istringstream in("a.jpg 1 2 3 4 5 6 7 8 9\n");
    CHECK_THROWS_AS(parse_landmarks(in, LandmarkFormat::celeba5_txt), FormatError);
  }
}

TEST_CASE("polygon construction") {
  CHECK_THROWS_AS(make_polygon<double>({{0, 0}, {1, 1}}), DegeneracyError);
  CHECK_THROWS_AS(make_polygon<double>({{0, 0}, {1, 1}, {2, 2}}), DegeneracyError);
  const Polygond p = make_polygon<double>({{0, 0}, {0, 0}, {4, 0}, {4, 3}, {0, 0}});
  CHECK(p.vertices.size() == 3);
  CHECK(signed_area(p) == doctest::Approx(6.0));
  CHECK(centroid(rect(0, 0, 4, 2)).isApprox(Point2d(2, 1)));
}

TEST_CASE("mask region polygon, 68 points") {
  const auto face = synth::make_face(0, 1);
  LandmarkSet lm = face.landmarks;
  // Frontal, unrolled face.
  synth::FacePose pose;
  pose.iod_px = 48;
  pose.eye_mid = Point2d(96, 80);
  lm = synth::face_landmarks(pose, "frontal", {192, 192});
  const Polygond poly = mask_region_polygon(lm);
  CHECK(poly.vertices.size() == 14);
  CHECK(contains(poly, lm.points[33]));
  for (int i = 48; i < 68; ++i) CHECK(contains(poly, lm.points[i]));
  CHECK_FALSE(contains(poly, lm.points[36]));
}

TEST_CASE("mask region polygon, 5 points") {
  const LandmarkSet lm = p5_set({{40, 50}, {80, 50}, {60, 70}, {48, 90}, {72, 90}});
  const Polygond poly = mask_region_polygon(lm);
  REQUIRE(poly.vertices.size() == 4);
  const Point2d top = 0.5 * (poly.vertices[0] + poly.vertices[1]);
  CHECK(top.x() == doctest::Approx(60));
  CHECK(top.y() == doctest::Approx(60));
  CHECK((poly.vertices[1] - poly.vertices[0]).norm() == doctest::Approx(72));
  CHECK(poly.vertices[2].y() == doctest::Approx(102));
  CHECK(poly.vertices[3].y() == doctest::Approx(102));

  CHECK_THROWS_AS(mask_region_polygon(p5_set({{40, 50}, {40, 50}, {60, 70}, {48, 90}, {72, 90}})),
                  DegeneracyError);
}

TEST_CASE("mask region polygon is translation equivariant") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    synth::FacePose pose;
    pose.roll_deg = rng.uniform(-30, 30);
    pose.yaw = rng.uniform(-0.3, 0.3);
    pose.iod_px = rng.uniform(30, 60);
    pose.eye_mid = Point2d(rng.uniform(60, 130), rng.uniform(60, 100));
    const LandmarkSet lm = synth::face_landmarks(pose, "t", {192, 192});
    const Point2d shift(rng.uniform(-50, 50), rng.uniform(-50, 50));
    for (const LandmarkSet& base : {lm, to_p5(lm)}) {
      LandmarkSet moved = base;
      for (auto& p : moved.points) p += shift;
      const Polygond a = mask_region_polygon(base), b = mask_region_polygon(moved);
      REQUIRE(a.vertices.size() == b.vertices.size());
      for (std::size_t i = 0; i < a.vertices.size(); ++i)
        CHECK((b.vertices[i] - a.vertices[i] - shift).norm() < 1e-9);
    }
  }
}

TEST_CASE("fit_affine exact cases") {
  const std::vector<Point2d> src{{0, 0}, {10, 0}, {0, 10}};
  SUBCASE("identity") {
    const Affine2d a = fit_affine(src, src);
    CHECK(a.matrix().isApprox(Affine2d::identity().matrix()));
  }
  SUBCASE("translation") {
    std::vector<Point2d> dst;
    for (const auto& p : src) dst.push_back(p + Point2d(-5, 2));
    const Affine2d a = fit_affine(src, dst);
    for (std::size_t i = 0; i < src.size(); ++i) CHECK((a(src[i]) - dst[i]).norm() < 1e-9);
  }
  SUBCASE("three random correspondences map within 1e-6") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<Point2d> s, d;
      for (int k = 0; k < 3; ++k) {
        s.emplace_back(rng.uniform(-500, 500), rng.uniform(-500, 500));
        d.emplace_back(rng.uniform(-500, 500), rng.uniform(-500, 500));
      }
      if (std::abs(orient2d(s[0], s[1], s[2])) < 100.0 || std::abs(orient2d(d[0], d[1], d[2])) < 100.0) continue;
      const Affine2d a = fit_affine(s, d);
      for (int k = 0; k < 3; ++k) CHECK((a(s[k]) - d[k]).norm() <= 1e-6);
    }
  }
  SUBCASE("collinear source") {
    CHECK_THROWS_AS(fit_affine({{0, 0}, {1, 1}, {2, 2}, {3, 3}}, {{0, 0}, {1, 0}, {0, 1}, {1, 1}}), DegeneracyError);
  }
  SUBCASE("length mismatch") {
    CHECK_THROWS_AS(fit_affine({{0, 0}, {1, 0}, {0, 1}}, {{0, 0}, {1, 0}}), ShapeError);
  }
}

TEST_CASE("fit_affine beats perturbed affines on noisy data") {
  Rng rng(23);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<Point2d> src, dst;
    Eigen::Matrix<double, 2, 3> truth;
    truth << rng.uniform(0.5, 2), rng.uniform(-0.5, 0.5), rng.uniform(-20, 20), rng.uniform(-0.5, 0.5),
        rng.uniform(0.5, 2), rng.uniform(-20, 20);
    for (int k = 0; k < 6; ++k) {
      src.emplace_back(rng.uniform(0, 200), rng.uniform(0, 200));
      dst.push_back(truth.leftCols<2>() * src.back() + truth.col(2) + Point2d(rng.normal(), rng.normal()));
    }
    const auto residual = [&](const Eigen::Matrix<double, 2, 3>& m) {
      double r = 0;
      for (std::size_t k = 0; k < src.size(); ++k)
        r += (m.leftCols<2>() * src[k] + m.col(2) - dst[k]).squaredNorm();
      return r;
    };
    const Affine2d fit = fit_affine(src, dst);
    const double best = residual(fit.matrix());
    for (int p = 0; p < 20; ++p) {
      Eigen::Matrix<double, 2, 3> m = fit.matrix();
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) m(i, j) += rng.uniform(-1e-3, 1e-3) * (j == 2 ? 100 : 1);
      CHECK(best <= residual(m) + 1e-9);
    }
  }
}

TEST_CASE("affine algebra") {
  Eigen::Matrix<double, 2, 3> m;
  m << 2, 1, 3, -1, 1, 4;
  const Affine2d a = Affine2d::from_matrix(m);
  const Point2d p(1.5, -2);
  CHECK(((a.inverse() * a)(p) - p).norm() < 1e-12);
  CHECK(((a * Affine2d::translation(1, 2))(p) - a(p + Point2d(1, 2))).norm() < 1e-12);
  m << 1, 2, 0, 2, 4, 0;
  CHECK_THROWS_AS(Affine2d::from_matrix(m), DegeneracyError);
}

TEST_CASE("delaunay forced topologies") {
  const auto tri = delaunay({{0, 0}, {1, 0}, {0, 1}});
  CHECK(tri.triangles.size() == 1);
  const auto sq = delaunay({{0, 0}, {1, 0}, {1, 1}, {0, 1}});
  REQUIRE(sq.triangles.size() == 2);
  int shared = 0;
  for (int a : sq.triangles[0])
    for (int b : sq.triangles[1]) shared += a == b;
  CHECK(shared == 2);
  CHECK_THROWS_AS(delaunay({{0, 0}, {1, 1}, {2, 2}, {3, 3}}), DegeneracyError);
  CHECK_THROWS_AS(delaunay({{0, 0}, {1, 0}}), DegeneracyError);
}

namespace {

double hull_area(std::vector<Point2d> pts) {
  std::sort(pts.begin(), pts.end(), [](const Point2d& a, const Point2d& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  std::vector<Point2d> h(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && orient2d(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && orient2d(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  h.resize(k - 1);
  double a = 0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const auto& p = h[i];
    const auto& q = h[(i + 1) % h.size()];
    a += p.x() * q.y() - q.x() * p.y();
  }
  return a / 2;
}

}  // namespace

TEST_CASE("delaunay empty circumcircles and hull tiling on random sets") {
  Rng rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = trial == 0 ? 25 : 3 + static_cast<int>(rng.below(60));
    std::vector<Point2d> pts;
    for (int i = 0; i < n; ++i) {
      // Every fifth trial snaps to a coarse grid to force cocircular points.
      if (trial % 5 == 4)
        pts.emplace_back(std::floor(rng.uniform(0, 8)), std::floor(rng.uniform(0, 8)));
      else
        pts.emplace_back(rng.uniform(0, 100), rng.uniform(0, 100));
    }
    std::sort(pts.begin(), pts.end(), [](const Point2d& a, const Point2d& b) {
      return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
    });
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() < 3) continue;
    const auto mesh = delaunay(pts);
    double area = 0;
    for (const auto& t : mesh.triangles) {
      for (int idx : t) REQUIRE((idx >= 0 && idx < static_cast<int>(pts.size())));
      const double a2 = orient2d(pts[t[0]], pts[t[1]], pts[t[2]]);
      CHECK(a2 > 0);
      area += a2 / 2;
      const auto [c, r] = circumcircle(pts[t[0]], pts[t[1]], pts[t[2]]);
      for (std::size_t i = 0; i < pts.size(); ++i) {
        if (static_cast<int>(i) == t[0] || static_cast<int>(i) == t[1] || static_cast<int>(i) == t[2]) continue;
        CHECK((pts[i] - c).norm() >= r * (1 - 1e-9));
      }
    }
    CHECK(area == doctest::Approx(hull_area(pts)).epsilon(1e-6));
  }
}

TEST_CASE("polygon iou examples") {
  const Frame f{100, 100};
  const Polygond a = rect(0, 0, 10, 10), b = rect(5, 0, 15, 10);
  CHECK(polygon_iou(a, a, f) == 1.0);
  CHECK(polygon_iou(a, rect(50, 50, 60, 60), f) == 0.0);
  CHECK(polygon_iou(a, b, f) == doctest::Approx(1.0 / 3).epsilon(0.02));
  CHECK(polygon_iou(rect(-20, -20, -10, -10), rect(-20, -20, -10, -10), f) == 0.0);
  CHECK(raster_area(a, f) == 100);
  CHECK(raster_area(rect(-5, -5, 5, 5), f) == 25);
}

TEST_CASE("polygon iou symmetric, self-identical and close to a 10x oracle") {
  Rng rng(17);
  const Frame f{64, 64};
  for (int trial = 0; trial < 60; ++trial) {
    const Polygond a = random_star(rng, {rng.uniform(10, 54), rng.uniform(10, 54)}, 6, 24, 3 + rng.below(8));
    const Polygond b = random_star(rng, {rng.uniform(10, 54), rng.uniform(10, 54)}, 6, 24, 3 + rng.below(8));
    CHECK(polygon_iou(a, b, f) == polygon_iou(b, a, f));
    if (raster_area(a, f) > 0) CHECK(polygon_iou(a, a, f) == 1.0);

    // Pixel-center rasterization agrees with the winding-number oracle at 1x.
    const auto fine = testsupport::supersample(a, f.width, f.height, 1);
    const GrayImage r = rasterize(a, f);
    for (std::size_t i = 0; i < fine.size(); ++i) REQUIRE(static_cast<bool>(r.data[i]) == static_cast<bool>(fine[i]));
  }
}

TEST_CASE("raster footprint iou") {
  const Frame f{40, 30};
  const Polygond p = rect(5, 5, 25, 20);
  const GrayImage exact = rasterize(p, f);
  GrayImage alpha(f.width, f.height);
  for (std::size_t i = 0; i < exact.data.size(); ++i) alpha.data[i] = exact.data[i] ? 255 : 0;
  CHECK(raster_footprint_iou(alpha, p, f) == 1.0);
  CHECK(raster_footprint_iou(GrayImage(f.width, f.height), p, f) == 0.0);

  GrayImage half(f.width, f.height);
  for (int y = 5; y < 20; ++y)
    for (int x = 5; x < 15; ++x) half.at(x, y)[0] = 200;
  CHECK(raster_footprint_iou(half, p, f) == doctest::Approx(0.5));

  GrayImage faint = alpha;
  for (auto& v : faint.data) v = v ? 8 : 0;
  CHECK(raster_footprint_iou(faint, p, f) == 0.0);
  CHECK(raster_footprint_iou(faint, p, f, 7) == 1.0);

  CHECK_THROWS_AS(raster_footprint_iou(GrayImage(10, 10), p, f), ShapeError);
}

TEST_CASE("eye centers and reduction to five points") {
  synth::FacePose pose;
  pose.iod_px = 40;
  pose.eye_mid = Point2d(96, 90);
  const LandmarkSet lm = synth::face_landmarks(pose, "f", {192, 192});
  CHECK(inter_ocular_distance(lm) == doctest::Approx(40).epsilon(1e-9));
  const LandmarkSet five = to_p5(lm);
  CHECK(five.convention == LandmarkConvention::P5);
  CHECK(five.points[p5::nose] == lm.points[30]);
  CHECK(inter_ocular_distance(five) == doctest::Approx(40).epsilon(1e-9));
}
