// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "maskforge/errors.hpp"
#include "maskforge/image_io.hpp"
#include "maskforge/maskkit.hpp"
#include "maskforge/pipeline.hpp"
#include "maskforge/render.hpp"
#include "maskforge/rng.hpp"
#include "maskforge/studysvc.hpp"
#include "maskforge/synth.hpp"
#include "maskforge/verifybench.hpp"
#include "support.hpp"

using namespace maskforge;
namespace fs = std::filesystem;
using testsupport::TempDir;

namespace {

// Tolerances.
constexpr double tally_tol_pp = 0.01;
constexpr double tally_budget_s = 1.0;
constexpr double iou_tol = 0.02;
constexpr double iou_budget_s = 10.0;
constexpr double min_throughput = 50.0;
constexpr double ratio_tol = 1e-12;
constexpr double shuffled_tol = 0.05;
constexpr double anchor_tol_px = 0.5;
constexpr double exact_affine_tol_px = 1e-6;
constexpr double fold_tol = 1e-12;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

/// Collects failures for one criterion.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && failures_.size() < 5) failures_.push_back(what);
    failed_ = failed_ || !ok;
  }
  bool failed() const { return failed_; }
  std::string summary() const {
    std::string s;
    for (const auto& f : failures_) s += (s.empty() ? "" : "; ") + f;
    return s;
  }

 private:
  bool failed_ = false;
  std::vector<std::string> failures_;
};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c, d);
  return buf;
}

// ---------------------------------------------------------------------------
// Published study tallies

Outcome published_study_tally() {
  struct Study {
    const char* against;
    std::vector<std::pair<int, int>> rows;
    double percent_ours;
  };
  const std::vector<Study> studies{
      {"method_1", {{200, 0}, {196, 4}, {197, 3}, {191, 9}, {189, 11}, {191, 9}}, 97.00},
      {"method_2", {{137, 66}, {191, 9}, {190, 10}, {177, 23}, {177, 23}, {182, 18}}, 87.83},
      {"method_3", {{194, 6}, {199, 1}, {200, 0}, {197, 3}, {192, 8}, {200, 0}}, 98.50},
  };
  TempDir dir("acc_tally");
  Check check;
  std::string detail;
  const auto t0 = Clock::now();
  for (const Study& s : studies) {
    const fs::path csv = dir / (std::string(s.against) + ".csv");
    {
      std::ofstream out(csv);
      out << "annotator,ours," << s.against << "\n";
      for (std::size_t i = 0; i < s.rows.size(); ++i)
        out << "person_" << i + 1 << "," << s.rows[i].first << "," << s.rows[i].second << "\n";
    }
    const TallyTable t = tally_counts(read_tally_csv(csv), 200, "ours", s.against);
    const double a = t.overall_percent_a.value_or(NAN), b = t.overall_percent_b.value_or(NAN);
    check.expect(std::abs(a - s.percent_ours) <= tally_tol_pp, std::string(s.against) + fmt(" ours %.4f", a));
    check.expect(std::abs(b - (100 - s.percent_ours)) <= tally_tol_pp,
                 std::string(s.against) + fmt(" other %.4f", b));
    detail += std::string(detail.empty() ? "" : ", ") + s.against + fmt(" %.2f/%.2f", a, b);
  }
  const double elapsed = seconds_since(t0);
  check.expect(elapsed < tally_budget_s, fmt("took %.3f s", elapsed));
  return {!check.failed(), detail + fmt(" in %.4f s", elapsed) + (check.failed() ? " | " + check.summary() : "")};
}

// ---------------------------------------------------------------------------
// IoU gate fidelity

/// Nonzero-winding fill of a polygon on a k x k subsample grid by scanlines.
std::vector<char> scan_fill(const Polygond& poly, int width, int height, int k) {
  const int W = width * k, H = height * k;
  std::vector<char> grid(static_cast<std::size_t>(W) * H, 0);
  const auto& v = poly.vertices;
  std::vector<std::pair<double, int>> hits;
  for (int row = 0; row < H; ++row) {
    const double y = (row + 0.5) / k;
    hits.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const Point2d& a = v[i];
      const Point2d& b = v[(i + 1) % v.size()];
      if ((a.y() <= y) == (b.y() <= y)) continue;
      const double x = a.x() + (y - a.y()) * (b.x() - a.x()) / (b.y() - a.y());
      hits.emplace_back(x, b.y() > a.y() ? 1 : -1);
    }
    std::sort(hits.begin(), hits.end());
    int winding = 0;
    for (std::size_t j = 0; j + 1 < hits.size(); ++j) {
      winding += hits[j].second;
      if (winding == 0) continue;
      const int c0 = std::max(0, static_cast<int>(std::ceil(hits[j].first * k - 0.5)));
      const int c1 = std::min(W, static_cast<int>(std::ceil(hits[j + 1].first * k - 0.5)));
      for (int c = c0; c < c1; ++c) grid[static_cast<std::size_t>(row) * W + c] = 1;
    }
  }
  return grid;
}

GrayImage coverage_from_grid(const std::vector<char>& grid, int width, int height, int k) {
  GrayImage out(width, height);
  const int W = width * k;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      int n = 0;
      for (int sy = 0; sy < k; ++sy)
        for (int sx = 0; sx < k; ++sx) n += grid[static_cast<std::size_t>(y * k + sy) * W + x * k + sx];
      out.data[static_cast<std::size_t>(y) * width + x] = to_u8(255.0 * n / (k * k));
    }
  return out;
}

Polygond transformed(const Polygond& p, double scale, double angle, Point2d shift) {
  Point2d c(0, 0);
  for (const Point2d& q : p.vertices) c += q;
  c /= static_cast<double>(p.vertices.size());
  const double cs = std::cos(angle), sn = std::sin(angle);
  std::vector<Point2d> out;
  for (const Point2d& q : p.vertices) {
    const Point2d d = q - c;
    out.emplace_back(c.x() + shift.x() + scale * (cs * d.x() - sn * d.y()),
                     c.y() + shift.y() + scale * (sn * d.x() + cs * d.y()));
  }
  return make_polygon(std::move(out));
}

Outcome iou_gate() {
  constexpr int size = 256, k = 10, cases = 50;
  const Frame frame{size, size};
  Rng rng(2024);
  Check check;
  double worst = 0, library_time = 0;
  int decisions = 0, borderline = 0;
  double lo = 1, hi = 0;
  for (int i = 0; i < cases; ++i) {
    const Point2d center(rng.uniform(110, 146), rng.uniform(110, 146));
    const Polygond mask = testsupport::random_star(rng, center, 50, 100, 8 + static_cast<int>(rng.below(10)));
    Polygond region;
    if (i % 2 == 0) {
      const double reach = 80.0 * i / cases;
      const double jitter = 0.3 * i / cases + 0.02;
      region = transformed(mask, rng.uniform(1 - jitter, 1 + jitter), rng.uniform(-2 * jitter, 2 * jitter),
                           Point2d(rng.uniform(-reach, reach), rng.uniform(-reach, reach)));
    } else {
      const Point2d c2 = center + Point2d(rng.uniform(-60, 60), rng.uniform(-60, 60));
      region = testsupport::random_star(rng, c2, 45, 105, 8 + static_cast<int>(rng.below(10)));
    }
    const auto mask_grid = scan_fill(mask, size, size, k);
    const auto region_grid = scan_fill(region, size, size, k);
    const double oracle = testsupport::sample_iou(mask_grid, region_grid);
    const GrayImage alpha = coverage_from_grid(mask_grid, size, size, k);

    const auto t0 = Clock::now();
    const double got = raster_footprint_iou(alpha, region, frame);
    library_time += seconds_since(t0);

    lo = std::min(lo, oracle);
    hi = std::max(hi, oracle);
    worst = std::max(worst, std::abs(got - oracle));
    check.expect(std::abs(got - oracle) <= iou_tol, fmt("case %g: %.4f vs oracle %.4f", i, got, oracle));
    for (double tau : {0.3, 0.5}) {
      if (std::abs(oracle - tau) <= iou_tol) {
        ++borderline;
        continue;
      }
      ++decisions;
      check.expect((got >= tau) == (oracle >= tau), fmt("case %g: gate at %.1f disagrees", i, tau));
    }
  }
  check.expect(library_time < iou_budget_s, fmt("took %.3f s", library_time));
  return {!check.failed(),
          fmt("50 pairs, oracle IoU in [%.2f, %.2f], max |error| %.4f", lo, hi, worst) +
              fmt(", %g gate decisions match (%g borderline skipped), %.3f s", decisions, borderline,
                  library_time) +
              (check.failed() ? " | " + check.summary() : "")};
}

// ---------------------------------------------------------------------------
// Corpus run and warp exactness

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), a));
  std::size_t count_b = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) count_b += e.is_regular_file();
  if (count_b != files.size()) {
    why = "file counts differ";
    return false;
  }
  for (const fs::path& rel : files) {
    if (slurp(a / rel) != slurp(b / rel)) {
      why = rel.string() + " differs";
      return false;
    }
  }
  return true;
}

constexpr std::size_t corpus_size = 1000;
constexpr std::uint64_t corpus_seed = 7;

Outcome corpus_run(std::vector<PlacementRecord>& records_out) {
  Check check;
  TempDir dir("acc_corpus");
  const auto files = synth::write_corpus(dir / "corpus", corpus_size, corpus_seed);
  const CorpusManifest manifest = load_manifest(files.manifest);
  const MaskRegistry registry = load_registry(fs::path(MASKFORGE_DATA_DIR) / "masks");
  check.expect(registry.templates.size() == 9, fmt("registry has %g templates", registry.templates.size()));

  const QaConfig qa = QaConfig::casia_preset();
  const auto t0 = Clock::now();
  const BatchReport first = enhance_corpus(manifest, registry, qa, 11, dir / "run1");
  const double elapsed = seconds_since(t0);
  const BatchReport second = enhance_corpus(manifest, registry, qa, 11, dir / "run2");

  const double throughput = corpus_size / elapsed;
  check.expect(first.total == corpus_size, fmt("total %g", first.total));
  check.expect(first.generated == corpus_size, fmt("generated %g", first.generated));
  check.expect(first.failed == 0, fmt("%g failures", first.failed));
  std::string why;
  const bool identical = same_tree(dir / "run1", dir / "run2", why);
  check.expect(identical, "rerun differs: " + why);
  check.expect(second.generated == first.generated, "rerun report differs");
  check.expect(throughput >= min_throughput, fmt("%.1f images/s", throughput));

  records_out = read_records(dir / "run1" / "records.ndjson");
  return {!check.failed(),
          fmt("%g/%g generated (%g fallback), %g failed", first.generated, first.total, first.fallback_count,
              first.failed) +
              ", rerun byte-identical: " + (identical ? "yes" : "no") + fmt(", %.1f images/s", throughput) + (check.failed() ? " | " + check.summary() : "")};
}

/// Template sharing the anchors of `base` whose alpha is a Gaussian blob at
/// each anchor.
MaskTemplate blob_template(const MaskTemplate& base, double sigma) {
  MaskTemplate t = base;
  t.template_id = base.template_id + "_blobs";
  for (int y = 0; y < t.raster.height; ++y)
    for (int x = 0; x < t.raster.width; ++x) {
      double a = 0;
      for (const Anchor& an : t.anchors) {
        const Point2d d = Point2d(x + 0.5, y + 0.5) - an.template_point;
        a += std::exp(-d.squaredNorm() / (2 * sigma * sigma));
      }
      auto px = t.raster.at(x, y);
      px[0] = px[1] = px[2] = 200;
      px[3] = to_u8(255.0 * std::min(1.0, a));
    }
  return t;
}

Outcome warp_exactness(const std::vector<PlacementRecord>& records) {
  Check check;
  double worst_meta = 0, worst_raster = 0, worst_exact = 0;
  std::size_t piecewise = 0;
  for (const PlacementRecord& r : records) {
    if (r.strategy != WarpStrategy::piecewise_affine) continue;
    ++piecewise;
    worst_meta = std::max(worst_meta, r.max_anchor_error_px);
    check.expect(r.max_anchor_error_px <= anchor_tol_px, r.image_id + fmt(" anchor error %.4f", r.max_anchor_error_px));
  }
  check.expect(piecewise == records.size(), fmt("%g of %g records used the piecewise warp", piecewise, records.size()));

  // Raster check: blob centroids of the warped layer sit on the landmarks.
  // A blob spanning several triangles is sheared unevenly, which moves its
  // centroid in proportion to its width; two widths cancel that term.
  const MaskRegistry registry = load_registry(fs::path(MASKFORGE_DATA_DIR) / "masks");
  constexpr double sigma = 2.0;
  std::vector<std::array<MaskTemplate, 2>> blobs;
  for (std::size_t i : registry.base_indices())
    blobs.push_back({blob_template(registry.templates[i], sigma), blob_template(registry.templates[i], 2 * sigma)});
  auto centroid = [](const RgbaImage& r, const Point2d& target, double window) -> std::optional<Point2d> {
    double mass = 0;
    Point2d sum(0, 0);
    for (int y = std::max(0, int(target.y() - window)); y < std::min(r.height, int(target.y() + window) + 1); ++y)
      for (int x = std::max(0, int(target.x() - window)); x < std::min(r.width, int(target.x() + window) + 1); ++x) {
        const Point2d c(x + 0.5, y + 0.5);
        if ((c - target).norm() > window) continue;
        const double a = r.at(x, y)[3];
        mass += a;
        sum += a * c;
      }
    if (mass == 0) return std::nullopt;
    return Point2d(sum / mass);
  };
  for (std::size_t i = 0; i < corpus_size; ++i) {
    const synth::SyntheticFace face = synth::make_face(i, corpus_seed);
    const auto& [narrow, wide] = blobs[i % blobs.size()];
    const MaskLayer narrow_layer = warp_mask(narrow, face.landmarks, synth::default_face_frame);
    const MaskLayer wide_layer = warp_mask(wide, face.landmarks, synth::default_face_frame);
    std::vector<Point2d> src, dst;
    for (const Anchor& a : narrow.anchors) {
      src.push_back(a.template_point);
      dst.push_back(face.landmarks.points[a.landmark_index]);
    }
    const Affine2d fit = fit_affine(src, dst);
    const double scale = std::sqrt(std::abs(fit.matrix().leftCols<2>().determinant()));
    for (const Point2d& target : dst) {
      const auto c1 = centroid(narrow_layer.raster, target, 4 * sigma * scale);
      const auto c2 = centroid(wide_layer.raster, target, 8 * sigma * scale);
      if (!c1 || !c2) {
        check.expect(false, face.landmarks.image_id + ": blob missing");
        continue;
      }
      const double err = (2.0 * *c1 - *c2 - target).norm();
      worst_raster = std::max(worst_raster, err);
      check.expect(err <= anchor_tol_px, face.landmarks.image_id + fmt(" blob offset %.3f px", err));
    }
  }

  // Global affine through exactly three correspondences.
  Rng rng(99);
  const MaskTemplate& base = registry.templates[registry.base_indices().front()];
  for (int trial = 0; trial < 1000; ++trial) {
    MaskTemplate three = base;
    three.anchors.assign(base.anchors.begin(), base.anchors.begin() + 3);
    LandmarkSet lm = synth::make_face(trial, 5).landmarks;
    for (const Anchor& a : three.anchors)
      lm.points[a.landmark_index] += Point2d(rng.uniform(-8, 8), rng.uniform(-8, 8));
    const MaskLayer layer = warp_mask_global(three, lm, synth::default_face_frame);
    worst_exact = std::max(worst_exact, layer.meta.max_anchor_error_px);
    // Independent solve: 6 unknowns from 3 point pairs.
    Eigen::Matrix<double, 6, 6> A = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> b;
    for (int j = 0; j < 3; ++j) {
      const Point2d s = three.anchors[j].template_point, d = lm.points[three.anchors[j].landmark_index];
      A.row(2 * j) << s.x(), s.y(), 1, 0, 0, 0;
      A.row(2 * j + 1) << 0, 0, 0, s.x(), s.y(), 1;
      b(2 * j) = d.x();
      b(2 * j + 1) = d.y();
    }
    const Eigen::Matrix<double, 6, 1> m = A.fullPivLu().solve(b);
    const std::vector<Point2d> src{three.anchors[0].template_point, three.anchors[1].template_point,
                                   three.anchors[2].template_point};
    std::vector<Point2d> dst;
    for (const Anchor& a : three.anchors) dst.push_back(lm.points[a.landmark_index]);
    const Affine2d fit = fit_affine(src, dst);
    for (const Point2d& probe : {Point2d(0, 0), Point2d(200, 0), Point2d(0, 200)}) {
      const Point2d expect(m(0) * probe.x() + m(1) * probe.y() + m(2), m(3) * probe.x() + m(4) * probe.y() + m(5));
      worst_exact = std::max(worst_exact, (fit(probe) - expect).norm());
    }
  }
  check.expect(worst_exact <= exact_affine_tol_px, fmt("3-point affine error %.3g", worst_exact));
  return {!check.failed(),
          fmt("max anchor error %.2g px over %g piecewise warps, max blob-centroid offset %.3f px, ", worst_meta,
              piecewise, worst_raster) +
              fmt("3-point global affine error %.2g px", worst_exact) +
              (check.failed() ? " | " + check.summary() : "")};
}

// ---------------------------------------------------------------------------
// Compositing

Outcome compositing() {
  Rng rng(31);
  Check check;
  std::size_t pixels = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int w = 1 + static_cast<int>(rng.below(48)), h = 1 + static_cast<int>(rng.below(48));
    RgbImage bg(w, h);
    RgbaImage layer(w, h);
    for (auto& v : bg.data) v = static_cast<std::uint8_t>(rng.below(256));
    for (auto& v : layer.data) v = static_cast<std::uint8_t>(rng.below(256));
    pixels += static_cast<std::size_t>(w) * h;

    auto with_alpha = [&](auto alpha_of) {
      RgbaImage l = layer;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) l.at(x, y)[3] = alpha_of(x, y);
      return l;
    };
    const RgbImage clear = composite(bg, with_alpha([](int, int) { return std::uint8_t(0); }));
    check.expect(clear.data == bg.data, fmt("trial %g: transparent layer changed the image", trial));

    const RgbaImage opaque = with_alpha([](int, int) { return std::uint8_t(255); });
    const RgbImage covered = composite(bg, opaque);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          check.expect(covered.at(x, y)[c] == opaque.at(x, y)[c], fmt("trial %g: opaque pixel differs", trial));

    const RgbaImage half = with_alpha([](int, int) { return std::uint8_t(128); });
    const RgbImage blended = composite(bg, half);
    const double a = 128.0 / 255.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) {
          const long expect = std::lround(a * half.at(x, y)[c] + (1 - a) * bg.at(x, y)[c]);
          check.expect(blended.at(x, y)[c] == expect, fmt("trial %g: blend %g vs %g", trial, blended.at(x, y)[c], expect));
        }
  }
  return {!check.failed(), fmt("1000 raster pairs (%g pixels): transparent, opaque and alpha 128 exact", pixels) +
                               (check.failed() ? " | " + check.summary() : "")};
}

// ---------------------------------------------------------------------------
// Verification metrics

EmbeddingTable clustered_table(std::size_t identities, std::size_t per_identity, int dim, double spread,
                               std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> ids, labels;
  EmbeddingMatrix m(static_cast<Eigen::Index>(identities * per_identity), dim);
  Eigen::Index row = 0;
  for (std::size_t c = 0; c < identities; ++c) {
    Eigen::VectorXd center(dim);
    for (int k = 0; k < dim; ++k) center[k] = rng.normal();
    for (std::size_t j = 0; j < per_identity; ++j, ++row) {
      for (int k = 0; k < dim; ++k) m(row, k) = center[k] + spread * rng.normal();
      ids.push_back("img_" + std::to_string(c) + "_" + std::to_string(j));
      labels.push_back("id_" + std::to_string(c));
    }
  }
  return make_embedding_table(ids, labels, m);
}

struct BruteFold {
  double threshold;
  double accuracy;
  double val;
};

/// Reference cross-validation written from the protocol alone.
std::vector<BruteFold> brute_folds(const std::vector<double>& d, const std::vector<std::uint8_t>& same,
                                   const FoldPlan& plan, double far) {
  std::vector<BruteFold> out;
  for (int f = 0; f < plan.folds; ++f) {
    std::vector<double> calib;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (plan.fold_of[i] != f && !same[i]) calib.push_back(d[i]);
    const double t = testsupport::brute_threshold(calib, far);
    std::size_t n = 0, correct = 0, pos = 0, ta = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (plan.fold_of[i] != f) continue;
      ++n;
      const bool accept = d[i] <= t;
      correct += accept == static_cast<bool>(same[i]);
      if (same[i]) {
        ++pos;
        ta += accept;
      }
    }
    out.push_back({t, double(correct) / n, pos ? double(ta) / pos : 0.0});
  }
  return out;
}

Outcome verification() {
  Check check;
  const EmbeddingTable table = clustered_table(500, 10, 16, 0.9, 17);
  const PairSet pairs = generate_pairs(table, 5, 23);
  check.expect(pairs.pairs.size() == 5000, fmt("%g pairs", pairs.pairs.size()));
  const auto same = same_flags(pairs);
  const auto d = pair_distances(table, pairs);
  std::vector<double> diff, pos;
  for (std::size_t i = 0; i < d.size(); ++i) (same[i] ? pos : diff).push_back(d[i]);

  // Distances recomputed by hand.
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto a = table.vectors.row(table.row_of(pairs.pairs[i].id_a));
    const auto b = table.vectors.row(table.row_of(pairs.pairs[i].id_b));
    double s = 0;
    for (Eigen::Index k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    check.expect(std::abs(s - d[i]) <= ratio_tol * std::max(1.0, s), fmt("distance %g", i));
  }

  // Sweep: counts exact, ratios within tolerance, FAR monotone.
  const double dmax = *std::max_element(d.begin(), d.end());
  double prev_far = -1;
  for (int s = 0; s < 1000; ++s) {
    const double t = dmax * 1.05 * s / 999.0 - 0.01;
    const std::size_t fa = accepted_count(diff, t), ta = accepted_count(pos, t);
    check.expect(fa == testsupport::count_at_or_below(diff, t), fmt("FA count at %g", t));
    check.expect(ta == testsupport::count_at_or_below(pos, t), fmt("TA count at %g", t));
    const double far = far_at(diff, t);
    check.expect(std::abs(far - double(testsupport::count_at_or_below(diff, t)) / diff.size()) <= ratio_tol,
                 fmt("FAR at %g", t));
    check.expect(far >= prev_far, fmt("FAR decreases at %g", t));
    prev_far = far;
  }

  // Calibrated thresholds and fold metrics.
  const FoldPlan plan = make_folds(pairs, 10, 29);
  std::size_t folds_checked = 0;
  for (double far : {0.001, 0.01, 0.1, 0.5}) {
    check.expect(calibrate_threshold(diff, far) == testsupport::brute_threshold(diff, far), fmt("threshold at far %g", far));
    const VerificationReport rep = evaluate(table, pairs, plan, far);
    const auto ref = brute_folds(d, same, plan, far);
    for (int f = 0; f < plan.folds; ++f, ++folds_checked) {
      check.expect(rep.folds[f].threshold == ref[f].threshold, fmt("far %g fold %g threshold", far, f));
      check.expect(std::abs(rep.folds[f].accuracy - ref[f].accuracy) <= ratio_tol, fmt("far %g fold %g accuracy", far, f));
      check.expect(std::abs(rep.folds[f].validation_rate - ref[f].val) <= ratio_tol, fmt("far %g fold %g VAL", far, f));
    }
  }

  // Planted separation: each identity is a scaled basis vector.
  double planted = 0;
  {
    std::vector<std::string> ids, labels;
    const int n_id = 200, per = 6;
    EmbeddingMatrix m = EmbeddingMatrix::Zero(n_id * per, n_id);
    for (int c = 0; c < n_id; ++c)
      for (int j = 0; j < per; ++j) {
        m(c * per + j, c) = 3.0;
        ids.push_back("p" + std::to_string(c) + "_" + std::to_string(j));
        labels.push_back("id" + std::to_string(c));
      }
    const EmbeddingTable t = make_embedding_table(ids, labels, m);
    const PairSet p = generate_pairs(t, 10, 3);
    planted = evaluate(t, p, make_folds(p, 10, 3), 0.001).mean_accuracy;
    check.expect(planted == 1.0, fmt("planted accuracy %.6f", planted));
  }

  // Shuffled labels: distances carry no identity information.
  double shuffled = 0;
  {
    const EmbeddingTable base = clustered_table(500, 10, 16, 0.9, 41);
    std::vector<std::string> labels = base.identities;
    Rng rng(43);
    for (std::size_t i = labels.size() - 1; i > 0; --i) std::swap(labels[i], labels[rng.below(i + 1)]);
    const EmbeddingTable t = make_embedding_table(base.image_ids, labels, base.vectors);
    const PairSet p = generate_pairs(t, 5, 47);
    shuffled = evaluate(t, p, make_folds(p, 10, 53), 0.5).mean_accuracy;
    check.expect(std::abs(shuffled - 0.5) <= shuffled_tol, fmt("shuffled accuracy %.4f", shuffled));
  }

  // Leakage: poisoning a held-out fold leaves its calibration untouched.
  const VerificationReport clean = evaluate_distances(d, same, plan, 0.01);
  for (int f = 0; f < plan.folds; ++f) {
    std::vector<double> poisoned = d;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (plan.fold_of[i] == f) poisoned[i] = same[i] ? 1e9 : -1e9;
    const VerificationReport dirty = evaluate_distances(poisoned, same, plan, 0.01);
    check.expect(dirty.folds[f].threshold == clean.folds[f].threshold, fmt("fold %g calibration leaked", f));
    check.expect(dirty.folds[f].far_on_calibration == clean.folds[f].far_on_calibration, fmt("fold %g FAR leaked", f));
  }

  return {!check.failed(),
          fmt("5000 pairs, 1000-point sweep exact and monotone, %g fold results match, planted %.3f, ", folds_checked,
              planted) +
              fmt("shuffled %.3f at FAR 0.5, poisoned folds leave calibration unchanged", shuffled) +
              (check.failed() ? " | " + check.summary() : "")};
}

// ---------------------------------------------------------------------------
// Fold protocol

Outcome fold_protocol() {
  Check check;
  const EmbeddingTable table = clustered_table(400, 8, 12, 0.8, 61);
  const PairSet pairs = generate_pairs(table, 3, 67);
  const std::size_t n = std::min<std::size_t>(2000, pairs.pairs.size());
  PairSet subset;
  subset.pairs.assign(pairs.pairs.begin(), pairs.pairs.begin() + static_cast<long>(n));
  check.expect(n == 2000, fmt("%g pairs", n));
  const auto same = same_flags(subset);
  const auto d = pair_distances(table, subset);
  double worst = 0;
  int max_spread = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const FoldPlan plan = make_folds(subset, 10, seed);
    check.expect(plan.fold_of.size() == n, "plan size");
    std::vector<int> pos(10, 0), neg(10, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const int f = plan.fold_of[i];
      check.expect(f >= 0 && f < 10, fmt("pair %g has fold %g", i, f));
      if (f < 0 || f >= 10) continue;
      (same[i] ? pos : neg)[f]++;
    }
    check.expect(std::accumulate(pos.begin(), pos.end(), 0) + std::accumulate(neg.begin(), neg.end(), 0) == int(n),
                 "folds do not partition the pairs");
    for (const auto* counts : {&pos, &neg}) {
      const int spread = *std::max_element(counts->begin(), counts->end()) - *std::min_element(counts->begin(), counts->end());
      max_spread = std::max(max_spread, spread);
      check.expect(spread <= 1, fmt("seed %g stratification spread %g", seed, spread));
    }

    const VerificationReport rep = evaluate_distances(d, same, plan, 0.01);
    double mean = 0, mean_val = 0;
    for (const FoldResult& r : rep.folds) {
      mean += r.accuracy / 10;
      mean_val += r.validation_rate / 10;
    }
    double var = 0, var_val = 0;
    for (const FoldResult& r : rep.folds) {
      var += (r.accuracy - mean) * (r.accuracy - mean) / 10;
      var_val += (r.validation_rate - mean_val) * (r.validation_rate - mean_val) / 10;
    }
    for (double e : {rep.mean_accuracy - mean, rep.std_accuracy - std::sqrt(var), rep.mean_validation_rate - mean_val,
                     rep.std_validation_rate - std::sqrt(var_val)}) {
      worst = std::max(worst, std::abs(e));
      check.expect(std::abs(e) <= fold_tol, fmt("seed %g summary off by %.3g", seed, e));
    }
  }
  return {!check.failed(), fmt("20 plans over %g pairs partition exactly, max stratification spread %g, ", n, max_spread) +
                               fmt("mean/std recompute within %.2g", worst) +
                               (check.failed() ? " | " + check.summary() : "")};
}

Outcome guarded(const std::function<Outcome()>& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    return {false, std::string("exception: ") + e.what()};
  }
}

}  // namespace

int main() {
  std::vector<PlacementRecord> records;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"published_study_tally", published_study_tally},
      {"iou_gate_fidelity", iou_gate},
      {"synthetic_corpus_run", [&] { return corpus_run(records); }},
      {"compositing_exactness", compositing},
      {"verification_oracle", verification},
      {"warp_anchor_exactness", [&] { return warp_exactness(records); }},
      {"fold_protocol", fold_protocol},
  };
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    const auto t0 = Clock::now();
    const Outcome o = guarded(run);
    failures += !o.pass;
    std::printf("%s %s: %s [%.2f s]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
