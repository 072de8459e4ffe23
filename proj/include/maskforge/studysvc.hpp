#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace maskforge {

struct StudyPair {
  std::string pair_id;  // "p0001", ...
  std::string image_id;
  std::filesystem::path image_a_path;
  std::filesystem::path image_b_path;
};

struct StudyManifest {
  std::string study_id;
  std::string method_a;
  std::string method_b;
  std::vector<StudyPair> pairs;
  std::uint64_t seed = 0;
  std::size_t pairs_count = 200;

  /// Throws LookupError.
  const StudyPair& pair(const std::string& pair_id) const;
  /// Position of pair_id in presentation order, or nullopt.
  std::optional<std::size_t> position(const std::string& pair_id) const;
};

void validate(const StudyManifest& manifest);

/// Seeded sample of n image ids present in both directories (matched by
/// file stem; png/jpg/jpeg). Throws InfeasibleError when fewer exist.
StudyManifest make_study(const std::filesystem::path& dir_a, const std::filesystem::path& dir_b,
                         const std::string& label_a, const std::string& label_b, std::size_t n,
                         std::uint64_t seed);

/// Image paths are stored relative to the manifest's directory when possible.
void save_study(const StudyManifest& manifest, const std::filesystem::path& path);
StudyManifest load_study(const std::filesystem::path& path);

enum class Side { left, right };

std::string to_string(Side side);
Side parse_side(const std::string& s);

/// True when method_a is shown on the left for this annotator and pair.
bool a_on_left(std::uint64_t seed, const std::string& annotator_id, const std::string& pair_id);

struct VoteRecord {
  std::string study_id;
  std::string annotator_id;
  std::string pair_id;
  std::string shown_left;
  std::string shown_right;
  Side choice = Side::left;
  std::string resolved_method;
  std::string timestamp;
};

/// Fills in the side assignment and resolved method. Throws LookupError for
/// an unknown pair.
VoteRecord make_vote(const StudyManifest& manifest, const std::string& annotator_id,
                     const std::string& pair_id, Side choice, std::string timestamp);

/// Throws ValidationError when resolved_method disagrees with the choice.
void validate(const VoteRecord& vote);

nlohmann::json to_json(const VoteRecord& vote);
VoteRecord vote_from_json(const nlohmann::json& j);

std::string utc_timestamp();

/// Append-only newline-delimited vote file. Every append is flushed and
/// fsync'd before returning. Thread-safe.
class VoteStore {
 public:
  VoteStore(std::filesystem::path path, bool allow_revote);
  ~VoteStore();
  VoteStore(const VoteStore&) = delete;
  VoteStore& operator=(const VoteStore&) = delete;

  /// Throws ConflictError on a repeated (annotator, pair) unless revotes are
  /// allowed, in which case the later record wins.
  void append(const VoteRecord& vote);

  /// Effective votes, one per (annotator, pair), in first-vote order.
  std::vector<VoteRecord> votes() const;
  std::set<std::string> answered(const std::string& annotator_id) const;
  /// Lines in the file, including superseded revotes.
  std::size_t record_count() const;
  bool allow_revote() const { return allow_revote_; }

 private:
  struct State;
  std::unique_ptr<State> state_;
  bool allow_revote_;
};

/// Reads a vote file without opening it for writing.
std::vector<VoteRecord> read_votes(const std::filesystem::path& path);

struct AnnotatorTally {
  std::string annotator_id;
  std::size_t votes_a = 0;
  std::size_t votes_b = 0;
};

struct TallyTable {
  std::string method_a;
  std::string method_b;
  std::size_t pairs_count = 200;
  std::vector<AnnotatorTally> rows;
  /// Empty when no votes exist.
  std::optional<double> overall_percent_a;
  std::optional<double> overall_percent_b;

  std::size_t total_votes() const;
};

/// Percentages are taken over each annotator's answered pairs, with a row
/// total above pairs_count counted as pairs_count.
TallyTable tally_counts(std::span<const AnnotatorTally> rows, std::size_t pairs_count,
                        std::string method_a = "a", std::string method_b = "b");

/// Throws IntegrityError for votes of another study, unknown pairs, labels
/// outside the study, or side records that contradict the assignment.
TallyTable tally(std::span<const VoteRecord> votes, const StudyManifest& manifest);

nlohmann::json to_json(const TallyTable& table);

/// Rows "annotator,votes_a,votes_b" with an optional header line.
std::vector<AnnotatorTally> read_tally_csv(const std::filesystem::path& path);

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 0;  // 0 picks a free port
  bool allow_revote = false;
  std::optional<std::filesystem::path> ui_dir;
};

/// HTTP front end over a manifest and a vote store.
///   GET  /api/study
///   GET  /api/next?annotator=ID
///   POST /api/vote {annotator, pair_id, choice}
///   GET  /api/results
///   GET  /img/<left|right>/<pair_id>?annotator=ID
/// Annotators move forward only: a vote for any pair other than their next
/// unanswered one is a 409, as is a repeat without revotes enabled.
class StudyServer {
 public:
  StudyServer(StudyManifest manifest, std::filesystem::path votes_path, ServerOptions options);
  ~StudyServer();
  StudyServer(const StudyServer&) = delete;
  StudyServer& operator=(const StudyServer&) = delete;

  /// Binds and starts serving on a background thread; returns the port.
  /// Throws IoError when the address cannot be bound.
  int start();
  /// Blocks until stop() is called.
  void wait();
  void stop();
  int port() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace maskforge
