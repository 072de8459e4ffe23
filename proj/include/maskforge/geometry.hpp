#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <span>
#include <string>
#include <vector>

#include "maskforge/errors.hpp"
#include "maskforge/image.hpp"

namespace maskforge {

template <typename Scalar>
using Point2 = Eigen::Matrix<Scalar, 2, 1>;
using Point2d = Point2<double>;

struct Frame {
  int width = 0;
  int height = 0;
};

// ---------------------------------------------------------------------------
// Landmarks

enum class LandmarkConvention { P68, P5 };
enum class LandmarkFormat { dlib68_json, celeba5_txt };

constexpr std::size_t point_count(LandmarkConvention c) {
  return c == LandmarkConvention::P68 ? 68 : 5;
}

/// Facial keypoints of one image in pixel coordinates. Points may lie
/// outside the image (profile faces). image_size is (0, 0) when the source
/// format does not carry it.
struct LandmarkSet {
  std::string image_id;
  LandmarkConvention convention = LandmarkConvention::P68;
  std::vector<Point2d> points;
  Eigen::Vector2i image_size = Eigen::Vector2i::Zero();
};

/// Throws FormatError on a count mismatch, ParseError on non-finite points.
void validate(const LandmarkSet& lm);

/// One LandmarkSet per record, in stream order.
std::vector<LandmarkSet> parse_landmarks(std::istream& source, LandmarkFormat format);

/// Index layout of the 5-point convention (CelebA column order).
namespace p5 {
inline constexpr int left_eye = 0, right_eye = 1, nose = 2, left_mouth = 3, right_mouth = 4;
}

/// Eye centers: P68 averages 36..41 and 42..47; P5 uses the eye keypoints.
std::array<Point2d, 2> eye_centers(const LandmarkSet& lm);
double inter_ocular_distance(const LandmarkSet& lm);

/// Reduces a 68-point set to the 5-point convention.
LandmarkSet to_p5(const LandmarkSet& lm68);

// ---------------------------------------------------------------------------
// Polygon

/// Simple polygon, implicitly closed.
template <typename Scalar>
struct Polygon {
  std::vector<Point2<Scalar>> vertices;
};
using Polygond = Polygon<double>;

template <typename Scalar>
Scalar signed_area(const Polygon<Scalar>& poly) {
  Scalar acc(0);
  const std::size_t n = poly.vertices.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = poly.vertices[i];
    const auto& q = poly.vertices[(i + 1) % n];
    acc += p.x() * q.y() - q.x() * p.y();
  }
  return acc / Scalar(2);
}

/// Drops consecutive duplicates (including the wrap-around) and checks the
/// polygon invariants.
template <typename Scalar>
Polygon<Scalar> make_polygon(std::vector<Point2<Scalar>> vertices) {
  Polygon<Scalar> poly;
  for (const auto& v : vertices) {
    if (!v.allFinite()) throw DegeneracyError("polygon vertex is not finite");
    if (poly.vertices.empty() || poly.vertices.back() != v) poly.vertices.push_back(v);
  }
  while (poly.vertices.size() > 1 && poly.vertices.front() == poly.vertices.back())
    poly.vertices.pop_back();
  if (poly.vertices.size() < 3) throw DegeneracyError("polygon needs at least 3 distinct vertices");
  if (signed_area(poly) == Scalar(0)) throw DegeneracyError("polygon has zero area");
  return poly;
}

/// Area centroid.
template <typename Scalar>
Point2<Scalar> centroid(const Polygon<Scalar>& poly) {
  Point2<Scalar> c = Point2<Scalar>::Zero();
  const std::size_t n = poly.vertices.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = poly.vertices[i];
    const auto& q = poly.vertices[(i + 1) % n];
    const Scalar cross = p.x() * q.y() - q.x() * p.y();
    c += (p + q) * cross;
  }
  return c / (Scalar(6) * signed_area(poly));
}

/// Even-odd containment test.
template <typename Scalar>
bool contains(const Polygon<Scalar>& poly, const Point2<Scalar>& pt) {
  bool inside = false;
  const std::size_t n = poly.vertices.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const auto& a = poly.vertices[i];
    const auto& b = poly.vertices[j];
    if ((a.y() > pt.y()) != (b.y() > pt.y())) {
      const Scalar x = a.x() + (pt.y() - a.y()) * (b.x() - a.x()) / (b.y() - a.y());
      if (pt.x() < x) inside = !inside;
    }
  }
  return inside;
}

/// Scales the polygon about its area centroid.
template <typename Scalar>
Polygon<Scalar> scaled_about_centroid(const Polygon<Scalar>& poly, Scalar factor) {
  const Point2<Scalar> c = centroid(poly);
  Polygon<Scalar> out = poly;
  for (auto& v : out.vertices) v = c + (v - c) * factor;
  return out;
}

/// Region the mask should cover. P68: jaw landmarks 2..14 then the nose
/// bridge (28). P5: quadrilateral built from the eye axis, nose and mouth.
Polygond mask_region_polygon(const LandmarkSet& lm);

// ---------------------------------------------------------------------------
// Affine maps

template <typename Scalar>
class AffineTransform {
 public:
  using Matrix = Eigen::Matrix<Scalar, 2, 3>;

  static AffineTransform identity() {
    Matrix m = Matrix::Zero();
    m(0, 0) = m(1, 1) = Scalar(1);
    return AffineTransform(m);
  }

  /// Throws DegeneracyError when the linear part is singular.
  static AffineTransform from_matrix(const Matrix& m) {
    if (!m.allFinite()) throw DegeneracyError("affine coefficients are not finite");
    if (m.template leftCols<2>().determinant() == Scalar(0))
      throw DegeneracyError("affine transform is not invertible");
    return AffineTransform(m);
  }

  static AffineTransform translation(Scalar tx, Scalar ty) {
    Matrix m = identity().matrix();
    m(0, 2) = tx;
    m(1, 2) = ty;
    return AffineTransform(m);
  }

  Point2<Scalar> operator()(const Point2<Scalar>& p) const {
    return m_.template leftCols<2>() * p + m_.col(2);
  }

  Scalar determinant() const { return m_.template leftCols<2>().determinant(); }

  AffineTransform inverse() const {
    Matrix inv;
    const Eigen::Matrix<Scalar, 2, 2> lin = m_.template leftCols<2>().inverse();
    inv.template leftCols<2>() = lin;
    inv.col(2) = -lin * m_.col(2);
    return AffineTransform(inv);
  }

  /// (a * b)(p) == a(b(p))
  friend AffineTransform operator*(const AffineTransform& a, const AffineTransform& b) {
    Matrix m;
    m.template leftCols<2>() = a.m_.template leftCols<2>() * b.m_.template leftCols<2>();
    m.col(2) = a.m_.template leftCols<2>() * b.m_.col(2) + a.m_.col(2);
    return AffineTransform(m);
  }

  const Matrix& matrix() const { return m_; }

 private:
  explicit AffineTransform(const Matrix& m) : m_(m) {}
  Matrix m_;
};
using Affine2d = AffineTransform<double>;

/// Least-squares affine taking src onto dst; exact for three non-collinear
/// pairs. Throws DegeneracyError when src is collinear (rank < 3).
template <typename Scalar>
AffineTransform<Scalar> fit_affine(std::span<const Point2<Scalar>> src,
                                   std::span<const Point2<Scalar>> dst) {
  if (src.size() != dst.size()) throw ShapeError("fit_affine: point lists differ in length");
  if (src.size() < 3) throw DegeneracyError("fit_affine: need at least 3 point pairs");
  const Eigen::Index n = static_cast<Eigen::Index>(src.size());

  // Center and scale for conditioning; undone after the solve.
  Point2<Scalar> mean = Point2<Scalar>::Zero();
  for (const auto& p : src) mean += p;
  mean /= Scalar(n);
  Scalar spread(0);
  for (const auto& p : src) spread = std::max(spread, (p - mean).cwiseAbs().maxCoeff());
  if (spread == Scalar(0)) throw DegeneracyError("fit_affine: source points coincide");

  Eigen::Matrix<Scalar, Eigen::Dynamic, 3> design(n, 3);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 2> rhs(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Point2<Scalar> q = (src[i] - mean) / spread;
    design.row(i) << q.x(), q.y(), Scalar(1);
    rhs.row(i) = dst[i].transpose();
  }
  Eigen::ColPivHouseholderQR<Eigen::Matrix<Scalar, Eigen::Dynamic, 3>> qr(design);
  qr.setThreshold(Scalar(1e-10));
  if (qr.rank() < 3) throw DegeneracyError("fit_affine: source points are collinear");
  const Eigen::Matrix<Scalar, 3, 2> sol = qr.solve(rhs);

  typename AffineTransform<Scalar>::Matrix m;
  m.template leftCols<2>() = sol.template topRows<2>().transpose() / spread;
  m.col(2) = sol.row(2).transpose() - m.template leftCols<2>() * mean;
  return AffineTransform<Scalar>::from_matrix(m);
}

inline Affine2d fit_affine(const std::vector<Point2d>& src, const std::vector<Point2d>& dst) {
  return fit_affine<double>(std::span<const Point2d>(src), std::span<const Point2d>(dst));
}

/// Exact affine taking triangle (a0, a1, a2) onto (b0, b1, b2).
Affine2d triangle_affine(const std::array<Point2d, 3>& from, const std::array<Point2d, 3>& to);

// ---------------------------------------------------------------------------
// Triangulation

template <typename Scalar>
struct TriangleMesh {
  std::vector<Point2<Scalar>> vertices;
  std::vector<std::array<int, 3>> triangles;  // counter-clockwise in y-up terms
};
using TriangleMeshd = TriangleMesh<double>;

template <typename Scalar>
Scalar orient2d(const Point2<Scalar>& a, const Point2<Scalar>& b, const Point2<Scalar>& c) {
  return (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
}

/// Delaunay triangulation of the convex hull of `points`. Throws
/// DegeneracyError for fewer than 3 points, duplicates, or all-collinear
/// input.
TriangleMeshd delaunay(std::span<const Point2d> points);
inline TriangleMeshd delaunay(const std::vector<Point2d>& points) {
  return delaunay(std::span<const Point2d>(points));
}

/// Circumcircle of a triangle as (center, radius).
std::pair<Point2d, double> circumcircle(const Point2d& a, const Point2d& b, const Point2d& c);

// ---------------------------------------------------------------------------
// Rasterization and IoU

/// Pixels whose centers lie inside the polygon (even-odd), clipped to the
/// frame. Values are 0 or 1.
GrayImage rasterize(const Polygond& poly, Frame frame);

/// Number of pixels rasterize() would set.
std::size_t raster_area(const Polygond& poly, Frame frame);

/// Rasterized intersection over union at 1 px resolution; 0 on empty union.
double polygon_iou(const Polygond& a, const Polygond& b, Frame frame);

inline constexpr std::uint8_t default_alpha_cut = 8;

/// IoU between {alpha > alpha_cut} and the rasterized region. Throws
/// ShapeError when the raster does not match the frame.
double raster_footprint_iou(const GrayImage& alpha, const Polygond& region, Frame frame,
                            std::uint8_t alpha_cut = default_alpha_cut);

}  // namespace maskforge
