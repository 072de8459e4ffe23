#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace maskforge {

using EmbeddingMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One embedding per row, with its image id and identity label.
struct EmbeddingTable {
  std::vector<std::string> image_ids;
  std::vector<std::string> identities;
  EmbeddingMatrix vectors;

  Eigen::Index dim() const { return vectors.cols(); }
  std::size_t size() const { return image_ids.size(); }
  /// Throws LookupError for unknown ids.
  Eigen::Index row_of(const std::string& image_id) const;

  std::unordered_map<std::string, Eigen::Index> index;
};

/// Validates (unique ids, matching lengths, finite entries) and indexes.
EmbeddingTable make_embedding_table(std::vector<std::string> image_ids,
                                    std::vector<std::string> identities, EmbeddingMatrix vectors);

/// Binary layout: "MFEB", u32 version (1), u32 dim, u32 count, then per
/// record a 64-byte NUL-padded id, a 64-byte NUL-padded identity and dim
/// little-endian float32 values.
EmbeddingTable read_embeddings_binary(const std::filesystem::path& path);
void write_embeddings_binary(const EmbeddingTable& table, const std::filesystem::path& path);

/// Rows "id,identity,v0,...,v{dim-1}"; a first line starting with "id," is a header.
EmbeddingTable read_embeddings_csv(const std::filesystem::path& path);
void write_embeddings_csv(const EmbeddingTable& table, const std::filesystem::path& path);

/// Binary when the file starts with the magic, CSV otherwise.
EmbeddingTable read_embeddings(const std::filesystem::path& path);

struct Pair {
  std::string id_a;
  std::string id_b;
  bool same = false;

  friend bool operator==(const Pair&, const Pair&) = default;
};

struct PairSet {
  std::vector<Pair> pairs;

  std::size_t same_count() const;
  std::size_t diff_count() const { return pairs.size() - same_count(); }
};

void validate(const PairSet& pairs, const EmbeddingTable& table);

/// Up to pairs_per_class same-identity pairs per identity (without
/// replacement) plus as many different-identity pairs. Throws
/// InfeasibleError when no identity has two images or only one identity exists.
PairSet generate_pairs(const EmbeddingTable& table, std::size_t pairs_per_class, std::uint64_t seed);

PairSet load_pairs(const std::filesystem::path& path);
void save_pairs(const PairSet& pairs, const std::filesystem::path& path);

template <typename A, typename B>
double squared_l2(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  return (a - b).squaredNorm();
}

/// Squared L2 distance per pair, in pair order.
std::vector<double> pair_distances(const EmbeddingTable& table, const PairSet& pairs);

/// Fraction of different-identity distances <= d. Throws UndefinedRateError
/// on an empty set.
double far_at(std::span<const double> diff_distances, double d);

/// Number of distances <= d (true accepts for same pairs, false accepts for
/// different pairs).
std::size_t accepted_count(std::span<const double> distances, double d);

/// Largest candidate threshold with FAR <= far_target. Candidates are a
/// point below every distance, midpoints of consecutive sorted distances,
/// 0, and a point just above the maximum.
double calibrate_threshold(std::span<const double> diff_distances, double far_target);

struct FoldPlan {
  int folds = 10;
  std::vector<int> fold_of;  // pair index -> fold id
};

/// Seeded plan stratified by the same/different label.
FoldPlan make_folds(const PairSet& pairs, int folds, std::uint64_t seed);
FoldPlan make_folds(std::span<const std::uint8_t> same, int folds, std::uint64_t seed);

/// Throws PlanError unless the plan partitions the pairs into non-empty folds.
void validate(const FoldPlan& plan, std::size_t pair_count);

struct FoldResult {
  double threshold = 0.0;
  double accuracy = 0.0;
  double far_on_calibration = 0.0;
  double validation_rate = 0.0;  // TA / |P_same| on the held-out fold
  std::size_t pairs = 0;
};

struct VerificationReport {
  std::vector<FoldResult> folds;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;  // population
  double mean_validation_rate = 0.0;
  double std_validation_rate = 0.0;
  double far_target = 0.0;
};

/// Thresholds come from the other folds' different pairs; fold f's own
/// distances never enter its calibration.
VerificationReport evaluate_distances(std::span<const double> distances,
                                      std::span<const std::uint8_t> same, const FoldPlan& plan,
                                      double far_target);

VerificationReport evaluate(const EmbeddingTable& table, const PairSet& pairs,
                            const FoldPlan& plan, double far_target);

/// "93.58% ± 0.82%"
std::string percent_cell(double mean, double stddev);

nlohmann::json to_json(const VerificationReport& report);

std::vector<std::uint8_t> same_flags(const PairSet& pairs);

}  // namespace maskforge
