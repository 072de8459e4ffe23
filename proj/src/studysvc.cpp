#include "maskforge/studysvc.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "maskforge/errors.hpp"
#include "maskforge/rng.hpp"

namespace maskforge {
namespace fs = std::filesystem;
using json = nlohmann::json;

const StudyPair& StudyManifest::pair(const std::string& pair_id) const {
  const auto pos = position(pair_id);
  if (!pos) throw LookupError("unknown pair '" + pair_id + "'");
  return pairs[*pos];
}

std::optional<std::size_t> StudyManifest::position(const std::string& pair_id) const {
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (pairs[i].pair_id == pair_id) return i;
  return std::nullopt;
}

void validate(const StudyManifest& m) {
  if (m.method_a.empty() || m.method_b.empty()) throw ValidationError("study labels must be non-empty");
  if (m.method_a == m.method_b) throw ValidationError("study labels must differ");
  if (m.pairs.empty()) throw ValidationError("study has no pairs");
  if (m.pairs.size() > m.pairs_count)
    throw ValidationError("study lists more pairs than pairs_count");
  std::set<std::string> seen;
  for (const StudyPair& p : m.pairs)
    if (!seen.insert(p.pair_id).second) throw ValidationError("duplicate pair id '" + p.pair_id + "'");
}

namespace {

std::map<std::string, fs::path> images_by_stem(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") out.emplace(e.path().stem().string(), e.path());
  }
  return out;
}

}  // namespace

StudyManifest make_study(const fs::path& dir_a, const fs::path& dir_b, const std::string& label_a,
                         const std::string& label_b, std::size_t n, std::uint64_t seed) {
  const auto a = images_by_stem(dir_a);
  const auto b = images_by_stem(dir_b);
  std::vector<std::string> common;
  for (const auto& [id, path] : a)
    if (b.count(id)) common.push_back(id);
  if (common.size() < n || n == 0)
    throw InfeasibleError("study needs " + std::to_string(n) + " common image ids; " + dir_a.string() + " has " +
                          std::to_string(a.size()) + ", " + dir_b.string() + " has " + std::to_string(b.size()) +
                          ", common " + std::to_string(common.size()));
  Rng rng(seed);
  for (std::size_t k = 0; k < n; ++k) std::swap(common[k], common[k + rng.below(common.size() - k)]);

  StudyManifest m;
  m.method_a = label_a;
  m.method_b = label_b;
  m.seed = seed;
  m.pairs_count = n;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(
                                                 mix_keys(seed, hash_string(label_a + "\n" + label_b))));
  m.study_id = std::string("study-") + buf;
  for (std::size_t k = 0; k < n; ++k) {
    std::snprintf(buf, sizeof(buf), "p%04zu", k + 1);
    m.pairs.push_back({buf, common[k], a.at(common[k]), b.at(common[k])});
  }
  validate(m);
  return m;
}

void save_study(const StudyManifest& m, const fs::path& path) {
  const fs::path base = fs::absolute(path).parent_path();
  json pairs = json::array();
  for (const StudyPair& p : m.pairs)
    pairs.push_back({{"pair_id", p.pair_id},
                     {"image_id", p.image_id},
                     {"image_a_path", fs::absolute(p.image_a_path).lexically_proximate(base).generic_string()},
                     {"image_b_path", fs::absolute(p.image_b_path).lexically_proximate(base).generic_string()}});
  const json doc{{"study_id", m.study_id}, {"method_a", m.method_a}, {"method_b", m.method_b},
                 {"seed", m.seed},         {"pairs_count", m.pairs_count}, {"pairs", pairs}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(1) << '\n';
}

StudyManifest load_study(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  const fs::path base = fs::absolute(path).parent_path();
  StudyManifest m;
  try {
    const json doc = json::parse(in);
    m.study_id = doc.at("study_id").get<std::string>();
    m.method_a = doc.at("method_a").get<std::string>();
    m.method_b = doc.at("method_b").get<std::string>();
    m.seed = doc.at("seed").get<std::uint64_t>();
    m.pairs_count = doc.value("pairs_count", std::size_t{200});
    for (const json& p : doc.at("pairs")) {
      fs::path pa = p.at("image_a_path").get<std::string>(), pb = p.at("image_b_path").get<std::string>();
      m.pairs.push_back({p.at("pair_id").get<std::string>(), p.value("image_id", std::string{}),
                         pa.is_absolute() ? pa : base / pa, pb.is_absolute() ? pb : base / pb});
    }
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  validate(m);
  return m;
}

std::string to_string(Side side) { return side == Side::left ? "left" : "right"; }

Side parse_side(const std::string& s) {
  if (s == "left") return Side::left;
  if (s == "right") return Side::right;
  throw ParseError("choice must be 'left' or 'right', got '" + s + "'");
}

bool a_on_left(std::uint64_t seed, const std::string& annotator_id, const std::string& pair_id) {
  return (mix_keys(mix_keys(seed, hash_string(annotator_id)), hash_string(pair_id)) >> 63) == 0;
}

VoteRecord make_vote(const StudyManifest& m, const std::string& annotator_id, const std::string& pair_id,
                     Side choice, std::string timestamp) {
  m.pair(pair_id);
  VoteRecord v;
  v.study_id = m.study_id;
  v.annotator_id = annotator_id;
  v.pair_id = pair_id;
  const bool left_a = a_on_left(m.seed, annotator_id, pair_id);
  v.shown_left = left_a ? m.method_a : m.method_b;
  v.shown_right = left_a ? m.method_b : m.method_a;
  v.choice = choice;
  v.resolved_method = choice == Side::left ? v.shown_left : v.shown_right;
  v.timestamp = std::move(timestamp);
  return v;
}

void validate(const VoteRecord& v) {
  if (v.annotator_id.empty()) throw ValidationError("vote without annotator id");
  if (v.shown_left == v.shown_right) throw ValidationError("vote shows the same method on both sides");
  const std::string& expected = v.choice == Side::left ? v.shown_left : v.shown_right;
  if (v.resolved_method != expected)
    throw ValidationError("vote " + v.annotator_id + "/" + v.pair_id + ": resolved method disagrees with choice");
}

json to_json(const VoteRecord& v) {
  return {{"study_id", v.study_id},       {"annotator_id", v.annotator_id},
          {"pair_id", v.pair_id},         {"shown_left", v.shown_left},
          {"shown_right", v.shown_right}, {"choice", to_string(v.choice)},
          {"resolved_method", v.resolved_method}, {"timestamp", v.timestamp}};
}

VoteRecord vote_from_json(const json& j) {
  VoteRecord v;
  try {
    v.study_id = j.at("study_id").get<std::string>();
    v.annotator_id = j.at("annotator_id").get<std::string>();
    v.pair_id = j.at("pair_id").get<std::string>();
    v.shown_left = j.at("shown_left").get<std::string>();
    v.shown_right = j.at("shown_right").get<std::string>();
    v.choice = parse_side(j.at("choice").get<std::string>());
    v.resolved_method = j.at("resolved_method").get<std::string>();
    v.timestamp = j.value("timestamp", std::string{});
  } catch (const json::exception& e) {
    throw ParseError(std::string("vote record: ") + e.what());
  }
  return v;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof(out), "%s.%03lldZ", buf, static_cast<long long>(ms));
  return out;
}

std::vector<VoteRecord> read_votes(const fs::path& path) {
  std::vector<VoteRecord> out;
  std::ifstream in(path);
  if (!in) {
    if (!fs::exists(path)) return out;
    throw IoError("cannot read " + path.string());
  }
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(vote_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError(path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

namespace {
std::string vote_key(const std::string& annotator, const std::string& pair) { return annotator + '\x1f' + pair; }
}  // namespace

struct VoteStore::State {
  fs::path path;
  int fd = -1;
  mutable std::mutex mu;
  std::vector<VoteRecord> effective;
  std::unordered_map<std::string, std::size_t> slot;
  std::map<std::string, std::set<std::string>> by_annotator;
  std::size_t lines = 0;

  void absorb(const VoteRecord& v) {
    const std::string key = vote_key(v.annotator_id, v.pair_id);
    const auto it = slot.find(key);
    if (it != slot.end()) {
      effective[it->second] = v;
    } else {
      slot.emplace(key, effective.size());
      effective.push_back(v);
      by_annotator[v.annotator_id].insert(v.pair_id);
    }
    ++lines;
  }
};

VoteStore::VoteStore(fs::path path, bool allow_revote) : state_(std::make_unique<State>()), allow_revote_(allow_revote) {
  state_->path = std::move(path);
  for (const VoteRecord& v : read_votes(state_->path)) state_->absorb(v);
  state_->fd = ::open(state_->path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (state_->fd < 0) throw IoError("cannot open vote store " + state_->path.string());
}

VoteStore::~VoteStore() {
  if (state_ && state_->fd >= 0) ::close(state_->fd);
}

void VoteStore::append(const VoteRecord& vote) {
  validate(vote);
  const std::string line = to_json(vote).dump() + "\n";
  std::lock_guard lock(state_->mu);
  if (!allow_revote_ && state_->slot.count(vote_key(vote.annotator_id, vote.pair_id)))
    throw ConflictError("annotator '" + vote.annotator_id + "' already voted on " + vote.pair_id);
  std::size_t written = 0;
  while (written < line.size()) {
    const ssize_t n = ::write(state_->fd, line.data() + written, line.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("write to vote store failed");
    }
    written += static_cast<std::size_t>(n);
  }
  if (::fsync(state_->fd) != 0) throw IoError("fsync of vote store failed");
  state_->absorb(vote);
}

std::vector<VoteRecord> VoteStore::votes() const {
  std::lock_guard lock(state_->mu);
  return state_->effective;
}

std::set<std::string> VoteStore::answered(const std::string& annotator_id) const {
  std::lock_guard lock(state_->mu);
  const auto it = state_->by_annotator.find(annotator_id);
  return it == state_->by_annotator.end() ? std::set<std::string>{} : it->second;
}

std::size_t VoteStore::record_count() const {
  std::lock_guard lock(state_->mu);
  return state_->lines;
}

std::size_t TallyTable::total_votes() const {
  std::size_t n = 0;
  for (const AnnotatorTally& r : rows) n += r.votes_a + r.votes_b;
  return n;
}

TallyTable tally_counts(std::span<const AnnotatorTally> rows, std::size_t pairs_count, std::string method_a,
                        std::string method_b) {
  if (pairs_count == 0) throw ValidationError("pairs_count must be positive");
  TallyTable t;
  t.method_a = std::move(method_a);
  t.method_b = std::move(method_b);
  t.pairs_count = pairs_count;
  t.rows.assign(rows.begin(), rows.end());
  std::size_t sum_a = 0, answered = 0;
  for (const AnnotatorTally& r : rows) {
    if (r.votes_a > pairs_count || r.votes_b > pairs_count)
      throw ValidationError("annotator '" + r.annotator_id + "' has more votes for one method than pairs");
    sum_a += r.votes_a;
    answered += std::min(r.votes_a + r.votes_b, pairs_count);
  }
  if (answered > 0) {
    t.overall_percent_a = 100.0 * static_cast<double>(sum_a) / static_cast<double>(answered);
    t.overall_percent_b = 100.0 - *t.overall_percent_a;
  }
  return t;
}

TallyTable tally(std::span<const VoteRecord> votes, const StudyManifest& m) {
  std::map<std::string, AnnotatorTally> rows;
  std::set<std::string> seen;
  for (const VoteRecord& v : votes) {
    if (v.study_id != m.study_id) throw IntegrityError("vote belongs to study '" + v.study_id + "'");
    if (!m.position(v.pair_id)) throw IntegrityError("vote references unknown pair '" + v.pair_id + "'");
    if (!seen.insert(vote_key(v.annotator_id, v.pair_id)).second)
      throw IntegrityError("repeated vote " + v.annotator_id + "/" + v.pair_id);
    const bool left_a = a_on_left(m.seed, v.annotator_id, v.pair_id);
    if (v.shown_left != (left_a ? m.method_a : m.method_b) || v.shown_right != (left_a ? m.method_b : m.method_a))
      throw IntegrityError("vote " + v.annotator_id + "/" + v.pair_id + " contradicts the side assignment");
    try {
      validate(v);
    } catch (const ValidationError& e) {
      throw IntegrityError(e.what());
    }
    AnnotatorTally& row = rows[v.annotator_id];
    row.annotator_id = v.annotator_id;
    (v.resolved_method == m.method_a ? row.votes_a : row.votes_b)++;
  }
  std::vector<AnnotatorTally> ordered;
  for (auto& [id, row] : rows) ordered.push_back(row);
  return tally_counts(ordered, m.pairs_count, m.method_a, m.method_b);
}

json to_json(const TallyTable& t) {
  json rows = json::array();
  for (const AnnotatorTally& r : t.rows)
    rows.push_back({{"annotator_id", r.annotator_id}, {"votes_for_a", r.votes_a}, {"votes_for_b", r.votes_b}});
  json out{{"method_a", t.method_a},
           {"method_b", t.method_b},
           {"pairs_count", t.pairs_count},
           {"annotators", rows},
           {"total_votes", t.total_votes()}};
  out["overall_percent_a"] = t.overall_percent_a ? json(*t.overall_percent_a) : json(nullptr);
  out["overall_percent_b"] = t.overall_percent_b ? json(*t.overall_percent_b) : json(nullptr);
  return out;
}

std::vector<AnnotatorTally> read_tally_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<AnnotatorTally> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 3) throw ParseError(path.string() + " line " + std::to_string(line_no) + ": expected 3 columns");
    try {
      std::size_t used_a = 0, used_b = 0;
      const unsigned long a = std::stoul(cells[1], &used_a), b = std::stoul(cells[2], &used_b);
      if (used_a != cells[1].size() || used_b != cells[2].size()) throw std::invalid_argument("trailing");
      rows.push_back({cells[0], a, b});
    } catch (const std::logic_error&) {
      if (line_no == 1 && rows.empty()) continue;
      throw ParseError(path.string() + " line " + std::to_string(line_no) + ": bad count");
    }
  }
  return rows;
}

namespace {

std::string url_encode(const std::string& s) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(hex[c >> 4]);
      out.push_back(hex[c & 15]);
    }
  }
  return out;
}

std::string content_type_for(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return "image/png";
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  return "application/octet-stream";
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, json{{"error", message}});
}

}  // namespace

struct StudyServer::Impl {
  StudyManifest manifest;
  VoteStore store;
  ServerOptions options;
  httplib::Server http;
  std::thread thread;
  int port = -1;
  std::mutex vote_mu;

  Impl(StudyManifest m, fs::path votes, ServerOptions opts)
      : manifest(std::move(m)), store(std::move(votes), opts.allow_revote), options(std::move(opts)) {
    validate(manifest);
    routes();
  }

  std::optional<std::size_t> next_index(const std::string& annotator) const {
    const auto done = store.answered(annotator);
    for (std::size_t i = 0; i < manifest.pairs.size(); ++i)
      if (!done.count(manifest.pairs[i].pair_id)) return i;
    return std::nullopt;
  }

  void routes() {
    http.Get("/api/study", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200,
                json{{"study_id", manifest.study_id},
                     {"total", manifest.pairs.size()},
                     {"pairs_count", manifest.pairs_count},
                     {"allow_revote", store.allow_revote()}});
    });

    http.Get("/api/next", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string annotator = req.get_param_value("annotator");
      if (annotator.empty()) return send_error(res, 400, "missing annotator");
      const auto idx = next_index(annotator);
      if (!idx) return send_json(res, 200, json{{"done", true}, {"total", manifest.pairs.size()}});
      const std::string& pid = manifest.pairs[*idx].pair_id;
      const std::string q = "?annotator=" + url_encode(annotator);
      send_json(res, 200,
                json{{"done", false},
                     {"pair_id", pid},
                     {"left_url", "/img/left/" + pid + q},
                     {"right_url", "/img/right/" + pid + q},
                     {"index", *idx + 1},
                     {"total", manifest.pairs.size()}});
    });

    http.Post("/api/vote", [this](const httplib::Request& req, httplib::Response& res) {
      std::string annotator, pair_id;
      Side choice;
      try {
        const json body = json::parse(req.body);
        annotator = body.at("annotator").get<std::string>();
        pair_id = body.at("pair_id").get<std::string>();
        choice = parse_side(body.at("choice").get<std::string>());
      } catch (const std::exception& e) {
        return send_error(res, 400, e.what());
      }
      if (annotator.empty()) return send_error(res, 400, "missing annotator");
      const auto pos = manifest.position(pair_id);
      if (!pos) return send_error(res, 404, "unknown pair '" + pair_id + "'");
      std::lock_guard lock(vote_mu);
      const auto done = store.answered(annotator);
      const bool repeat = done.count(pair_id) > 0;
      if (repeat && !store.allow_revote()) return send_error(res, 409, "already voted on " + pair_id);
      if (!repeat && next_index(annotator) != pos) return send_error(res, 409, pair_id + " is not the next pair");
      try {
        store.append(make_vote(manifest, annotator, pair_id, choice, utc_timestamp()));
      } catch (const ConflictError& e) {
        return send_error(res, 409, e.what());
      } catch (const std::exception& e) {
        return send_error(res, 500, e.what());
      }
      const auto next = next_index(annotator);
      send_json(res, 200, json{{"ok", true}, {"done", !next.has_value()}});
    });

    http.Get("/api/results", [this](const httplib::Request&, httplib::Response& res) {
      try {
        const auto votes = store.votes();
        send_json(res, 200, to_json(tally(votes, manifest)));
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      }
    });

    http.Get(R"(/img/(left|right)/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string annotator = req.get_param_value("annotator");
      if (annotator.empty()) return send_error(res, 400, "missing annotator");
      const Side side = parse_side(req.matches[1]);
      const auto pos = manifest.position(req.matches[2]);
      if (!pos) return send_error(res, 404, "unknown pair");
      const StudyPair& p = manifest.pairs[*pos];
      const bool left_a = a_on_left(manifest.seed, annotator, p.pair_id);
      const fs::path& file = (side == Side::left) == left_a ? p.image_a_path : p.image_b_path;
      std::ifstream in(file, std::ios::binary);
      if (!in) return send_error(res, 404, "image missing");
      std::ostringstream bytes;
      bytes << in.rdbuf();
      res.status = 200;
      res.set_header("Cache-Control", "no-store");
      res.set_content(bytes.str(), content_type_for(file));
    });

    if (options.ui_dir && !http.set_mount_point("/", options.ui_dir->string()))
      throw IoError("cannot serve UI directory " + options.ui_dir->string());
  }
};

StudyServer::StudyServer(StudyManifest manifest, fs::path votes_path, ServerOptions options)
    : impl_(std::make_unique<Impl>(std::move(manifest), std::move(votes_path), std::move(options))) {}

StudyServer::~StudyServer() { stop(); }

int StudyServer::start() {
  if (impl_->thread.joinable()) return impl_->port;
  const auto& o = impl_->options;
  impl_->port = o.port == 0 ? impl_->http.bind_to_any_port(o.host) : (impl_->http.bind_to_port(o.host, o.port) ? o.port : -1);
  if (impl_->port < 0) throw IoError("cannot bind " + o.host + ":" + std::to_string(o.port));
  impl_->thread = std::thread([this] { impl_->http.listen_after_bind(); });
  impl_->http.wait_until_ready();
  return impl_->port;
}

void StudyServer::wait() {
  if (impl_->thread.joinable()) impl_->thread.join();
}

void StudyServer::stop() {
  if (!impl_) return;
  impl_->http.stop();
  wait();
}

int StudyServer::port() const { return impl_->port; }

}  // namespace maskforge
