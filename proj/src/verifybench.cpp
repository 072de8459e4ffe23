#include "maskforge/verifybench.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "maskforge/errors.hpp"
#include "maskforge/rng.hpp"

namespace maskforge {
namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "embedding I/O assumes a little-endian host");

namespace {
constexpr char binary_magic[4] = {'M', 'F', 'E', 'B'};
constexpr std::uint32_t binary_version = 1;
constexpr std::size_t label_width = 64;
}  // namespace

Eigen::Index EmbeddingTable::row_of(const std::string& image_id) const {
  const auto it = index.find(image_id);
  if (it == index.end()) throw LookupError("unknown image id '" + image_id + "'");
  return it->second;
}

EmbeddingTable make_embedding_table(std::vector<std::string> image_ids, std::vector<std::string> identities,
                                    EmbeddingMatrix vectors) {
  if (image_ids.size() != identities.size() || static_cast<Eigen::Index>(image_ids.size()) != vectors.rows())
    throw ShapeError("embedding table: ids, identities and vectors differ in count");
  if (!vectors.allFinite()) throw ValidationError("embedding table: non-finite entries");
  EmbeddingTable t;
  t.image_ids = std::move(image_ids);
  t.identities = std::move(identities);
  t.vectors = std::move(vectors);
  for (std::size_t i = 0; i < t.image_ids.size(); ++i)
    if (!t.index.emplace(t.image_ids[i], static_cast<Eigen::Index>(i)).second)
      throw ValidationError("embedding table: duplicate image id '" + t.image_ids[i] + "'");
  return t;
}

EmbeddingTable read_embeddings_binary(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  char magic[4];
  std::uint32_t header[3];
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!in || std::memcmp(magic, binary_magic, 4) != 0) throw ParseError(path.string() + ": bad header");
  if (header[0] != binary_version)
    throw ParseError(path.string() + ": unsupported version " + std::to_string(header[0]));
  const std::uint32_t dim = header[1], count = header[2];
  std::vector<std::string> ids(count), identities(count);
  EmbeddingMatrix vectors(count, dim);
  std::vector<char> label(label_width);
  std::vector<float> row(dim);
  for (std::uint32_t r = 0; r < count; ++r) {
    in.read(label.data(), label_width);
    ids[r].assign(label.data(), strnlen(label.data(), label_width));
    in.read(label.data(), label_width);
    identities[r].assign(label.data(), strnlen(label.data(), label_width));
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(dim * sizeof(float)));
    if (!in) throw ParseError(path.string() + ": truncated at record " + std::to_string(r));
    for (std::uint32_t k = 0; k < dim; ++k) vectors(r, k) = row[k];
  }
  return make_embedding_table(std::move(ids), std::move(identities), std::move(vectors));
}

void write_embeddings_binary(const EmbeddingTable& table, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  const std::uint32_t header[3] = {binary_version, static_cast<std::uint32_t>(table.dim()),
                                   static_cast<std::uint32_t>(table.size())};
  out.write(binary_magic, 4);
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  std::vector<char> label(label_width);
  for (std::size_t r = 0; r < table.size(); ++r) {
    for (const std::string* s : {&table.image_ids[r], &table.identities[r]}) {
      if (s->size() > label_width) throw ValidationError("label longer than 64 bytes: '" + *s + "'");
      std::fill(label.begin(), label.end(), '\0');
      std::copy(s->begin(), s->end(), label.begin());
      out.write(label.data(), label_width);
    }
    for (Eigen::Index k = 0; k < table.dim(); ++k) {
      const float v = static_cast<float>(table.vectors(static_cast<Eigen::Index>(r), k));
      out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
  }
  if (!out) throw IoError("short write to " + path.string());
}

EmbeddingTable read_embeddings_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::string> ids, identities;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("id,", 0) == 0) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() < 3) throw ParseError(path.string() + " line " + std::to_string(line_no) + ": too few columns");
    std::vector<double> v;
    for (std::size_t k = 2; k < cells.size(); ++k) {
      char* end = nullptr;
      const double x = std::strtod(cells[k].c_str(), &end);
      if (end == cells[k].c_str() || *end != '\0')
        throw ParseError(path.string() + " line " + std::to_string(line_no) + ": bad value '" + cells[k] + "'");
      v.push_back(x);
    }
    if (!rows.empty() && v.size() != rows.front().size())
      throw FormatError(path.string() + " line " + std::to_string(line_no) + ": dimension mismatch");
    ids.push_back(cells[0]);
    identities.push_back(cells[1]);
    rows.push_back(std::move(v));
  }
  EmbeddingMatrix m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t k = 0; k < rows[r].size(); ++k) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = rows[r][k];
  return make_embedding_table(std::move(ids), std::move(identities), std::move(m));
}

void write_embeddings_csv(const EmbeddingTable& table, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "id,identity";
  for (Eigen::Index k = 0; k < table.dim(); ++k) out << ",v" << k;
  out << '\n';
  char buf[32];
  for (std::size_t r = 0; r < table.size(); ++r) {
    out << table.image_ids[r] << ',' << table.identities[r];
    for (Eigen::Index k = 0; k < table.dim(); ++k) {
      std::snprintf(buf, sizeof(buf), "%.17g", table.vectors(static_cast<Eigen::Index>(r), k));
      out << ',' << buf;
    }
    out << '\n';
  }
}

EmbeddingTable read_embeddings(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() == 4 && std::memcmp(magic, binary_magic, 4) == 0) return read_embeddings_binary(path);
  return read_embeddings_csv(path);
}

std::size_t PairSet::same_count() const {
  return static_cast<std::size_t>(std::count_if(pairs.begin(), pairs.end(), [](const Pair& p) { return p.same; }));
}

void validate(const PairSet& pairs, const EmbeddingTable& table) {
  for (const Pair& p : pairs.pairs) {
    if (p.id_a == p.id_b) throw ValidationError("pair of image '" + p.id_a + "' with itself");
    const Eigen::Index a = table.row_of(p.id_a), b = table.row_of(p.id_b);
    if ((table.identities[a] == table.identities[b]) != p.same)
      throw ValidationError("pair (" + p.id_a + ", " + p.id_b + ") label disagrees with identities");
  }
}

PairSet generate_pairs(const EmbeddingTable& table, std::size_t pairs_per_class, std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> by_identity;
  for (std::size_t i = 0; i < table.size(); ++i) by_identity[table.identities[i]].push_back(i);
  if (by_identity.size() < 2) throw InfeasibleError("pair generation needs at least 2 identities");
  bool any_multi = false;
  for (const auto& [label, rows] : by_identity) any_multi = any_multi || rows.size() >= 2;
  if (!any_multi) throw InfeasibleError("pair generation needs an identity with at least 2 images");

  Rng rng(seed);
  PairSet out;
  for (const auto& [label, rows] : by_identity) {
    std::vector<std::pair<std::size_t, std::size_t>> all;
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = i + 1; j < rows.size(); ++j) all.emplace_back(rows[i], rows[j]);
    const std::size_t take = std::min(pairs_per_class, all.size());
    for (std::size_t k = 0; k < take; ++k) {
      std::swap(all[k], all[k + rng.below(all.size() - k)]);
      out.pairs.push_back({table.image_ids[all[k].first], table.image_ids[all[k].second], true});
    }
  }

  const std::size_t want = out.pairs.size();
  std::size_t available = 0;
  {
    std::size_t n = table.size(), sq = 0;
    for (const auto& [label, rows] : by_identity) sq += rows.size() * rows.size();
    available = (n * n - sq) / 2;
  }
  std::vector<std::pair<std::size_t, std::size_t>> diff;
  if (want >= available) {
    for (std::size_t i = 0; i < table.size(); ++i)
      for (std::size_t j = i + 1; j < table.size(); ++j)
        if (table.identities[i] != table.identities[j]) diff.emplace_back(i, j);
  } else {
    std::set<std::pair<std::size_t, std::size_t>> seen;
    while (diff.size() < want) {
      const std::size_t a = rng.below(table.size());
      std::size_t b = rng.below(table.size());
      while (table.identities[b] == table.identities[a]) b = rng.below(table.size());
      const auto key = std::minmax(a, b);
      if (seen.insert(key).second) diff.emplace_back(key.first, key.second);
    }
  }
  for (const auto& [a, b] : diff) out.pairs.push_back({table.image_ids[a], table.image_ids[b], false});
  return out;
}

PairSet load_pairs(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  PairSet out;
  try {
    const json doc = json::parse(in);
    const json& arr = doc.is_array() ? doc : doc.at("pairs");
    for (const json& p : arr)
      out.pairs.push_back({p.at("id_a").get<std::string>(), p.at("id_b").get<std::string>(), p.at("same").get<bool>()});
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return out;
}

void save_pairs(const PairSet& pairs, const fs::path& path) {
  json arr = json::array();
  for (const Pair& p : pairs.pairs) arr.push_back({{"id_a", p.id_a}, {"id_b", p.id_b}, {"same", p.same}});
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << json{{"pairs", arr}}.dump(1) << '\n';
}

std::vector<double> pair_distances(const EmbeddingTable& table, const PairSet& pairs) {
  std::vector<double> out;
  out.reserve(pairs.pairs.size());
  for (const Pair& p : pairs.pairs)
    out.push_back(squared_l2(table.vectors.row(table.row_of(p.id_a)), table.vectors.row(table.row_of(p.id_b))));
  return out;
}

std::size_t accepted_count(std::span<const double> distances, double d) {
  return static_cast<std::size_t>(std::count_if(distances.begin(), distances.end(), [d](double x) { return x <= d; }));
}

double far_at(std::span<const double> diff_distances, double d) {
  if (diff_distances.empty()) throw UndefinedRateError("FAR is undefined without different-identity pairs");
  return static_cast<double>(accepted_count(diff_distances, d)) / static_cast<double>(diff_distances.size());
}

double calibrate_threshold(std::span<const double> diff_distances, double far_target) {
  if (diff_distances.empty()) throw UndefinedRateError("calibration needs different-identity pairs");
  std::vector<double> sorted(diff_distances.begin(), diff_distances.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());

  std::vector<double> candidates;
  candidates.reserve(sorted.size() + 3);
  candidates.push_back(std::nextafter(std::min(0.0, sorted.front()), -std::numeric_limits<double>::infinity()));
  candidates.push_back(0.0);
  for (std::size_t i = 1; i < sorted.size(); ++i) candidates.push_back(0.5 * (sorted[i - 1] + sorted[i]));
  candidates.push_back(std::nextafter(sorted.back(), std::numeric_limits<double>::infinity()));
  std::sort(candidates.begin(), candidates.end());

  double best = candidates.front();
  for (double c : candidates) {
    const auto accepted = std::upper_bound(sorted.begin(), sorted.end(), c) - sorted.begin();
    if (static_cast<double>(accepted) / n <= far_target) best = c;
  }
  return best;
}

std::vector<std::uint8_t> same_flags(const PairSet& pairs) {
  std::vector<std::uint8_t> out;
  out.reserve(pairs.pairs.size());
  for (const Pair& p : pairs.pairs) out.push_back(p.same ? 1 : 0);
  return out;
}

FoldPlan make_folds(std::span<const std::uint8_t> same, int folds, std::uint64_t seed) {
  if (folds < 2) throw PlanError("need at least 2 folds");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < same.size(); ++i) (same[i] ? pos : neg).push_back(i);
  Rng rng(seed);
  for (auto* group : {&pos, &neg})
    for (std::size_t i = group->size(); i > 1; --i) std::swap((*group)[i - 1], (*group)[rng.below(i)]);
  FoldPlan plan;
  plan.folds = folds;
  plan.fold_of.assign(same.size(), 0);
  // Deal round-robin; the second group continues where the first stopped so
  // fold sizes also stay within one of each other.
  std::size_t slot = 0;
  for (auto* group : {&pos, &neg})
    for (std::size_t i : *group) plan.fold_of[i] = static_cast<int>(slot++ % static_cast<std::size_t>(folds));
  return plan;
}

FoldPlan make_folds(const PairSet& pairs, int folds, std::uint64_t seed) {
  const auto flags = same_flags(pairs);
  return make_folds(std::span<const std::uint8_t>(flags), folds, seed);
}

void validate(const FoldPlan& plan, std::size_t pair_count) {
  if (plan.folds < 2) throw PlanError("need at least 2 folds");
  if (plan.fold_of.size() != pair_count) throw PlanError("fold plan does not cover every pair");
  std::vector<std::size_t> sizes(static_cast<std::size_t>(plan.folds), 0);
  for (int f : plan.fold_of) {
    if (f < 0 || f >= plan.folds) throw PlanError("fold id " + std::to_string(f) + " out of range");
    ++sizes[static_cast<std::size_t>(f)];
  }
  for (std::size_t f = 0; f < sizes.size(); ++f)
    if (sizes[f] == 0) throw PlanError("fold " + std::to_string(f) + " has no pairs");
}

VerificationReport evaluate_distances(std::span<const double> distances, std::span<const std::uint8_t> same,
                                      const FoldPlan& plan, double far_target) {
  if (distances.size() != same.size()) throw ShapeError("distances and labels differ in length");
  validate(plan, distances.size());
  VerificationReport rep;
  rep.far_target = far_target;
  std::vector<double> calib;
  for (int f = 0; f < plan.folds; ++f) {
    calib.clear();
    for (std::size_t i = 0; i < distances.size(); ++i)
      if (plan.fold_of[i] != f && !same[i]) calib.push_back(distances[i]);
    if (calib.empty()) throw PlanError("fold " + std::to_string(f) + ": no different pairs to calibrate on");
    FoldResult r;
    r.threshold = calibrate_threshold(calib, far_target);
    r.far_on_calibration = far_at(calib, r.threshold);
    std::size_t correct = 0, same_total = 0, true_accepts = 0;
    for (std::size_t i = 0; i < distances.size(); ++i) {
      if (plan.fold_of[i] != f) continue;
      ++r.pairs;
      const bool accept = distances[i] <= r.threshold;
      if (same[i]) {
        ++same_total;
        true_accepts += accept;
      }
      correct += (accept == static_cast<bool>(same[i]));
    }
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.pairs);
    r.validation_rate = same_total ? static_cast<double>(true_accepts) / static_cast<double>(same_total) : 0.0;
    rep.folds.push_back(r);
  }
  const double k = static_cast<double>(rep.folds.size());
  for (const FoldResult& r : rep.folds) {
    rep.mean_accuracy += r.accuracy;
    rep.mean_validation_rate += r.validation_rate;
  }
  rep.mean_accuracy /= k;
  rep.mean_validation_rate /= k;
  double var_acc = 0, var_val = 0;
  for (const FoldResult& r : rep.folds) {
    var_acc += (r.accuracy - rep.mean_accuracy) * (r.accuracy - rep.mean_accuracy);
    var_val += (r.validation_rate - rep.mean_validation_rate) * (r.validation_rate - rep.mean_validation_rate);
  }
  rep.std_accuracy = std::sqrt(var_acc / k);
  rep.std_validation_rate = std::sqrt(var_val / k);
  return rep;
}

VerificationReport evaluate(const EmbeddingTable& table, const PairSet& pairs, const FoldPlan& plan,
                            double far_target) {
  const std::vector<double> d = pair_distances(table, pairs);
  const std::vector<std::uint8_t> s = same_flags(pairs);
  return evaluate_distances(d, s, plan, far_target);
}

std::string percent_cell(double mean, double stddev) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f%% ± %.2f%%", 100.0 * mean, 100.0 * stddev);
  return buf;
}

json to_json(const VerificationReport& report) {
  json folds = json::array();
  for (std::size_t f = 0; f < report.folds.size(); ++f) {
    const FoldResult& r = report.folds[f];
    folds.push_back({{"fold", f},
                     {"threshold", r.threshold},
                     {"accuracy", r.accuracy},
                     {"far_on_calibration", r.far_on_calibration},
                     {"validation_rate", r.validation_rate},
                     {"pairs", r.pairs}});
  }
  char far_label[32];
  std::snprintf(far_label, sizeof(far_label), "accuracy@FAR=%g", report.far_target);
  return {{"far_target", report.far_target},
          {"folds", folds},
          {"mean_accuracy", report.mean_accuracy},
          {"std_accuracy", report.std_accuracy},
          {"mean_validation_rate", report.mean_validation_rate},
          {"std_validation_rate", report.std_validation_rate},
          {"std_kind", "population"},
          {"metric", far_label},
          {"accuracy_cell", percent_cell(report.mean_accuracy, report.std_accuracy)},
          {"validation_rate_cell", percent_cell(report.mean_validation_rate, report.std_validation_rate)}};
}

}  // namespace maskforge
