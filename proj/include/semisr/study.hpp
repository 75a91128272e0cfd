#ifndef SEMISR_STUDY_HPP
#define SEMISR_STUDY_HPP

// Blinded rating study: bundle export and the session / rating-store logic
// behind the HTTP service (see study_server.hpp).
//
// Bundle layout:
//   study.json           images, items (opaque item and method ids), seed
//   references/<id>.png  HR references
//   items/<id>.png       one super-resolved candidate per item
//   .method_key.json     opaque method id -> method label (mode 0600,
//                        never read by the service)

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semisr/datasets.hpp"
#include "semisr/errors.hpp"
#include "semisr/imaging.hpp"
#include "semisr/metrics.hpp"

// Last: <resolv.h>, pulled in by httplib, defines a `_res` macro that breaks Eigen.
#include <httplib.h>

namespace semisr {

inline constexpr const char* kStudyFormat = "semisr-study";
inline constexpr int kStudyVersion = 1;
inline constexpr const char* kMethodKeyFile = ".method_key.json";

struct StudyImage {
  std::string image_id;
  std::string reference;  // relative to the bundle root
};

struct StudyItem {
  std::string item_id;
  std::string image_id;
  std::string method_id;
  std::string candidate;  // relative to the bundle root
};

struct StudyBundle {
  uint64_t seed = 0;
  std::vector<StudyImage> images;
  std::vector<StudyItem> items;  // grouped by image, methods in shuffled order
  std::filesystem::path root;

  static StudyBundle load(const std::filesystem::path& dir) {
    std::ifstream in(dir / "study.json");
    if (!in) throw IoError("'" + dir.string() + "' has no study.json");
    StudyBundle b;
    b.root = dir;
    try {
      auto j = nlohmann::json::parse(in);
      if (j.at("format") != kStudyFormat || j.at("version") != kStudyVersion)
        throw FormatError("'" + (dir / "study.json").string() + "' is not a version " + std::to_string(kStudyVersion) +
                          " study manifest");
      b.seed = j.at("seed").get<uint64_t>();
      for (const auto& im : j.at("images")) b.images.push_back({im.at("image_id"), im.at("reference")});
      for (const auto& it : j.at("items"))
        b.items.push_back({it.at("item_id"), it.at("image_id"), it.at("method_id"), it.at("candidate")});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("invalid study manifest in '" + dir.string() + "': " + e.what());
    }
    if (b.items.empty()) throw FormatError("study in '" + dir.string() + "' has no items");
    return b;
  }

  void save(const std::filesystem::path& dir) const {
    nlohmann::ordered_json j = {{"format", kStudyFormat}, {"version", kStudyVersion}, {"seed", seed}};
    j["images"] = nlohmann::json::array();
    for (const auto& im : images) j["images"].push_back({{"image_id", im.image_id}, {"reference", im.reference}});
    j["items"] = nlohmann::json::array();
    for (const auto& it : items)
      j["items"].push_back(
          {{"item_id", it.item_id}, {"image_id", it.image_id}, {"method_id", it.method_id}, {"candidate", it.candidate}});
    std::ofstream out(dir / "study.json");
    if (!out) throw IoError("cannot write '" + (dir / "study.json").string() + "'");
    out << j.dump(2) << "\n";
  }

  const StudyImage& image(const std::string& id) const {
    for (const auto& im : images)
      if (im.image_id == id) return im;
    throw FormatError("study item refers to unknown image '" + id + "'");
  }
};

/// A method under study: a label (kept only in the key file) and a renderer
/// mapping an LR image to its super-resolved output.
struct StudyMethod {
  std::string label;
  std::function<ImageTensor(const ImageTensor&)> render;
};

struct StudyExportOptions {
  uint64_t seed = 0;
  size_t n_images = 10;
  int hr_size = 256;
  int scale = 4;
};

namespace detail {

inline std::string hex_token(std::mt19937_64& gen, int digits) {
  static const char* hex = "0123456789abcdef";
  std::string s;
  uint64_t v = gen();
  for (int i = 0; i < digits; ++i, v >>= 4) s += hex[v & 15];
  return s;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[40];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof out, "%s.%03lldZ", buf, static_cast<long long>(ms));
  return out;
}

}  // namespace detail

/// Renders every method on the first `n_images` test pairs and writes a
/// blinded bundle. Ids and presentation order depend only on the seed.
inline StudyBundle export_study(const std::vector<StudyMethod>& methods, const std::vector<PairedEntry>& test,
                                const std::filesystem::path& out_dir, const StudyExportOptions& opt = {}) {
  if (methods.empty()) throw ConfigError("a study needs at least one method");
  if (test.empty()) throw EmptySetError("a study needs at least one test image");
  std::set<std::string> labels;
  for (const auto& m : methods)
    if (!labels.insert(m.label).second) throw ConfigError("duplicate method label '" + m.label + "'");

  std::filesystem::create_directories(out_dir / "references");
  std::filesystem::create_directories(out_dir / "items");
  std::mt19937_64 gen(opt.seed);

  StudyBundle b;
  b.seed = opt.seed;
  b.root = out_dir;
  std::vector<std::string> method_ids;
  std::set<std::string> used;
  for (size_t i = 0; i < methods.size(); ++i) {
    std::string id;
    do id = "m-" + detail::hex_token(gen, 8); while (!used.insert(id).second);
    method_ids.push_back(id);
  }

  nlohmann::ordered_json key = {{"seed", opt.seed}, {"methods", nlohmann::ordered_json::object()},
                                {"images", nlohmann::ordered_json::object()}};
  for (size_t i = 0; i < methods.size(); ++i) key["methods"][method_ids[i]] = methods[i].label;

  const size_t n = opt.n_images == 0 ? test.size() : std::min(opt.n_images, test.size());
  for (size_t k = 0; k < n; ++k) {
    char image_id[32];
    std::snprintf(image_id, sizeof image_id, "img-%03zu", k);
    const auto lr = load_lr(test[k].lr, opt.hr_size, opt.scale);
    const auto hr = load_hr(test[k].hr, opt.hr_size);
    const std::string reference = std::string("references/") + image_id + ".png";
    save_png(hr, out_dir / reference);
    b.images.push_back({image_id, reference});
    key["images"][image_id] = test[k].hr;

    std::vector<size_t> order(methods.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    detail::portable_shuffle(order, gen);
    for (size_t mi : order) {
      std::string item_id;
      do item_id = "it-" + detail::hex_token(gen, 10); while (!used.insert(item_id).second);
      auto sr = methods[mi].render(lr);
      if (sr.height() != hr.height() || sr.width() != hr.width())
        throw ShapeError("method '" + methods[mi].label + "' produced " + std::to_string(sr.height()) + "x" +
                         std::to_string(sr.width()) + " for a " + std::to_string(hr.height()) + "x" +
                         std::to_string(hr.width()) + " reference");
      const std::string candidate = "items/" + item_id + ".png";
      save_png(sr, out_dir / candidate);
      b.items.push_back({item_id, image_id, method_ids[mi], candidate});
    }
  }
  b.save(out_dir);

  const auto key_path = out_dir / kMethodKeyFile;
  {
    std::ofstream out(key_path);
    if (!out) throw IoError("cannot write '" + key_path.string() + "'");
    out << key.dump(2) << "\n";
  }
  std::filesystem::permissions(key_path, std::filesystem::perms::owner_read | std::filesystem::perms::owner_write,
                               std::filesystem::perm_options::replace);
  return b;
}

// ---------------------------------------------------------------------------
// Append-only rating store

/// Line-delimited RatingRecord log. `append` returns only after the record
/// has reached the disk.
class RatingStore {
 public:
  explicit RatingStore(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    repair_tail();
    if (std::filesystem::exists(path_) && std::filesystem::file_size(path_) > 0) records_ = read_ratings(path_);
    fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError("cannot open rating log '" + path_.string() + "'");
  }
  ~RatingStore() {
    if (fd_ >= 0) ::close(fd_);
  }
  RatingStore(const RatingStore&) = delete;
  RatingStore& operator=(const RatingStore&) = delete;

  void append(const RatingRecord& r) {
    nlohmann::json j = r;
    const std::string line = j.dump() + "\n";
    size_t written = 0;
    while (written < line.size()) {
      const auto n = ::write(fd_, line.data() + written, line.size() - written);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw IoError("writing rating log '" + path_.string() + "' failed");
      }
      written += static_cast<size_t>(n);
    }
    if (::fsync(fd_) != 0) throw IoError("syncing rating log '" + path_.string() + "' failed");
    records_.push_back(r);
  }

  const std::vector<RatingRecord>& records() const { return records_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  /// Drops a partially written final line left by a crash mid-append.
  void repair_tail() {
    if (!std::filesystem::exists(path_)) return;
    std::ifstream in(path_, std::ios::binary);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (data.empty() || data.back() == '\n') return;
    const auto last = data.rfind('\n');
    std::filesystem::resize_file(path_, last == std::string::npos ? 0 : last + 1);
  }

  std::filesystem::path path_;
  int fd_ = -1;
  std::vector<RatingRecord> records_;
};

// ---------------------------------------------------------------------------
// Sessions

/// Status code and JSON body of one service call; mirrors the HTTP layer.
struct StudyResponse {
  int status = 200;
  nlohmann::json body;
};

class StudyService {
 public:
  StudyService(StudyBundle bundle, const std::filesystem::path& store_path)
      : bundle_(std::move(bundle)), store_(store_path) {
    for (size_t i = 0; i < bundle_.items.size(); ++i) item_index_[bundle_.items[i].item_id] = i;
    for (const auto& r : store_.records()) {
      auto it = item_index_.find(r.item_id);
      if (it == item_index_.end() || bundle_.items[it->second].method_id != r.method_id)
        throw FormatError("rating log '" + store_.path().string() + "' does not belong to this study (item '" +
                          r.item_id + "')");
      auto& s = session_for(r.rater_id);
      if (s.session_id != r.session_id)
        throw FormatError("rating log '" + store_.path().string() + "' has a foreign session id '" + r.session_id + "'");
      s.rated.insert(it->second);
    }
  }

  /// The item permutation of a rater: seeded by the study seed salted with
  /// the rater id.
  std::vector<size_t> item_order(const std::string& rater_id) const {
    std::vector<size_t> order(bundle_.items.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 gen(bundle_.seed ^ detail::fnv1a(rater_id));
    detail::portable_shuffle(order, gen);
    return order;
  }

  std::string session_id_for(const std::string& rater_id) const {
    char buf[24];
    std::snprintf(buf, sizeof buf, "s-%016llx",
                  static_cast<unsigned long long>(detail::fnv1a(rater_id, detail::fnv1a(std::to_string(bundle_.seed)))));
    return buf;
  }

  StudyResponse health() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return {200, {{"status", "ok"}, {"items", bundle_.items.size()}, {"ratings", store_.records().size()}}};
  }

  /// Creates or resumes the session of `rater_id`.
  StudyResponse open_session(const std::string& rater_id) {
    if (!valid_rater_id(rater_id))
      return error(422, "validation", "rater id must be 1-64 characters of [A-Za-z0-9_.-]");
    std::lock_guard<std::mutex> lock(mutex_);
    auto& s = session_for(rater_id);
    return {200, progress(s)};
  }

  StudyResponse next_item(const std::string& session_id) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto* s = find_session(session_id);
    if (!s) return error(404, "not_found", "unknown session '" + session_id + "'");
    auto body = progress(*s);
    if (s->rated.size() == s->order.size()) return {200, body};
    const size_t position = s->rated.size();
    const size_t idx = s->order[position];
    const auto& item = bundle_.items[idx];
    if (!s->served.count(idx)) s->served[idx] = detail::utc_timestamp();
    body["item_id"] = item.item_id;
    body["position"] = position;
    body["reference"] = data_url(bundle_.image(item.image_id).reference);
    body["candidate"] = data_url(item.candidate);
    return {200, body};
  }

  /// Body: {"item_id": ..., "score": 1..5}.
  StudyResponse submit(const std::string& session_id, const nlohmann::json& body) {
    if (!body.is_object() || !body.contains("item_id") || !body["item_id"].is_string() || !body.contains("score"))
      return error(400, "format", "body must be an object with item_id and score");
    const auto& score = body["score"];
    if (!score.is_number_integer() || score.get<int64_t>() < 1 || score.get<int64_t>() > 5)
      return error(422, "validation", "score must be an integer in 1..5, got " + score.dump());
    const auto item_id = body["item_id"].get<std::string>();

    std::lock_guard<std::mutex> lock(mutex_);
    auto* s = find_session(session_id);
    if (!s) return error(404, "not_found", "unknown session '" + session_id + "'");
    auto it = item_index_.find(item_id);
    if (it == item_index_.end()) return error(404, "not_found", "unknown item '" + item_id + "'");
    const size_t idx = it->second;
    if (s->rated.count(idx)) return error(409, "conflict", "item '" + item_id + "' was already rated in this session");
    const size_t position = s->rated.size();
    if (s->order[position] != idx) return error(409, "conflict", "item '" + item_id + "' is not the current item");

    const auto& item = bundle_.items[idx];
    RatingRecord r;
    r.rater_id = s->rater_id;
    r.image_id = item.image_id;
    r.method_id = item.method_id;
    r.score = static_cast<int>(score.get<int64_t>());
    r.presented_at = s->served.count(idx) ? s->served[idx] : detail::utc_timestamp();
    r.item_id = item.item_id;
    r.session_id = s->session_id;
    r.order = static_cast<int>(position);
    try {
      store_.append(r);
    } catch (const Error& e) {
      return error(500, e.kind(), e.what());
    }
    s->rated.insert(idx);
    s->served.erase(idx);
    auto out = progress(*s);
    out["accepted"] = true;
    return {200, out};
  }

  std::vector<RatingRecord> records() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return store_.records();
  }

  const StudyBundle& bundle() const { return bundle_; }

 private:
  struct Session {
    std::string session_id;
    std::string rater_id;
    std::vector<size_t> order;
    std::set<size_t> rated;
    std::map<size_t, std::string> served;
  };

  static bool valid_rater_id(const std::string& id) {
    if (id.empty() || id.size() > 64) return false;
    for (unsigned char c : id)
      if (!(std::isalnum(c) || c == '_' || c == '.' || c == '-')) return false;
    return true;
  }

  static StudyResponse error(int status, const std::string& kind, const std::string& message) {
    return {status, {{"error", kind}, {"message", message}}};
  }

  Session& session_for(const std::string& rater_id) {
    const auto id = session_id_for(rater_id);
    auto it = sessions_.find(id);
    if (it != sessions_.end()) return it->second;
    Session s{id, rater_id, item_order(rater_id), {}, {}};
    return sessions_.emplace(id, std::move(s)).first->second;
  }

  Session* find_session(const std::string& id) {
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : &it->second;
  }

  nlohmann::json progress(const Session& s) const {
    return {{"session_id", s.session_id},
            {"rater_id", s.rater_id},
            {"done", s.rated.size()},
            {"total", s.order.size()},
            {"complete", s.rated.size() == s.order.size()}};
  }

  std::string data_url(const std::string& relative) {
    auto it = encoded_.find(relative);
    if (it != encoded_.end()) return it->second;
    std::ifstream in(bundle_.root / relative, std::ios::binary);
    if (!in) throw IoError("study image '" + (bundle_.root / relative).string() + "' is missing");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto url = "data:image/png;base64," + httplib::detail::base64_encode(bytes);
    encoded_.emplace(relative, url);
    return url;
  }

  StudyBundle bundle_;
  RatingStore store_;
  std::map<std::string, size_t> item_index_;
  std::map<std::string, Session> sessions_;
  std::map<std::string, std::string> encoded_;
  mutable std::mutex mutex_;
};

}  // namespace semisr

#endif  // SEMISR_STUDY_HPP
