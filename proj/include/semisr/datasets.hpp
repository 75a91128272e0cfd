#ifndef SEMISR_DATASETS_HPP
#define SEMISR_DATASETS_HPP

// Paired / unpaired / test splits over an image directory and the mixed
// minibatch sampler used by semi-supervised training.
//
// Directory convention: `<root>/hr/*.png` with an optional `<root>/lr/*.png`
// holding LR counterparts under the same file names. Without an `lr/`
// directory the LR side is synthesized with `degrade` and written to a cache
// directory, so unpaired records never point at an HR file.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "semisr/errors.hpp"
#include "semisr/imaging.hpp"

namespace semisr {

inline constexpr const char* kManifestFormat = "semisr-split-manifest";
inline constexpr int kManifestVersion = 1;

struct PairedEntry {
  std::string lr;
  std::string hr;
  bool operator==(const PairedEntry&) const = default;
};

struct SplitManifest {
  std::vector<PairedEntry> paired;
  std::vector<std::string> unpaired;  // LR paths only
  std::vector<PairedEntry> test;
  uint64_t seed = 0;
  int scale = 4;
  int hr_size = 256;

  bool operator==(const SplitManifest&) const = default;
};

struct SplitOptions {
  size_t n_paired = 500;
  std::optional<size_t> n_unpaired;  // default: everything left after test and paired
  size_t n_test = 0;
  uint64_t seed = 0;
  int hr_size = 256;
  DegradationSpec degradation;
  std::filesystem::path lr_dir;     // optional explicit LR directory
  std::filesystem::path cache_dir;  // where synthesized LR images go
};

namespace detail {

/// Fisher-Yates with an explicit unbiased bounded draw, so permutations are
/// identical across standard library implementations.
template <class T>
void portable_shuffle(std::vector<T>& v, std::mt19937_64& gen) {
  for (size_t i = v.size(); i > 1; --i) {
    const uint64_t bound = i;
    const uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % bound;
    uint64_t r;
    do r = gen(); while (r >= limit);
    std::swap(v[i - 1], v[r % bound]);
  }
}

inline std::filesystem::path resolve_hr_dir(const std::filesystem::path& root) {
  if (std::filesystem::is_directory(root / "hr")) return root / "hr";
  return root;
}

}  // namespace detail

/// Loads an HR image prepared for training: center-cropped and resized to hr_size.
inline ImageTensor load_hr(const std::string& path, int hr_size, int channels = 0) {
  auto img = center_crop_resize(load_image(path), hr_size);
  if (channels == 3 && img.channels() == 1) img = ImageTensor{img.data.expand({-1, -1, 3}).contiguous(), img.range};
  if (channels == 1 && img.channels() == 3) img = ImageTensor{img.data.mean(2, true).contiguous(), img.range};
  return img;
}

/// Loads an LR image at hr_size / scale (resized if the file has another size).
inline ImageTensor load_lr(const std::string& path, int hr_size, int scale, int channels = 0) {
  return load_hr(path, hr_size / scale, channels);
}

/// Builds the split. Test images are reserved first, then paired, then unpaired.
inline SplitManifest build_split(const std::filesystem::path& root, const SplitOptions& opt) {
  opt.degradation.validate();
  if (opt.hr_size % opt.degradation.scale != 0)
    throw ConfigError("hr_size " + std::to_string(opt.hr_size) + " is not divisible by scale " +
                      std::to_string(opt.degradation.scale));
  const auto hr_dir = detail::resolve_hr_dir(root);
  auto files = list_images(hr_dir);
  const size_t wanted_fixed = opt.n_test + opt.n_paired;
  const size_t wanted = wanted_fixed + opt.n_unpaired.value_or(0);
  if (files.size() < wanted || files.empty())
    throw CapacityError("'" + hr_dir.string() + "' holds " + std::to_string(files.size()) + " usable images, " +
                        std::to_string(std::max<size_t>(wanted, 1)) + " requested (" + std::to_string(opt.n_test) +
                        " test + " + std::to_string(opt.n_paired) + " paired + " +
                        (opt.n_unpaired ? std::to_string(*opt.n_unpaired) : std::string("0")) + " unpaired)");

  std::mt19937_64 gen(opt.seed);
  detail::portable_shuffle(files, gen);

  std::filesystem::path lr_dir = opt.lr_dir;
  if (lr_dir.empty() && std::filesystem::is_directory(hr_dir.parent_path() / "lr") && hr_dir.filename() == "hr")
    lr_dir = hr_dir.parent_path() / "lr";

  auto lr_for = [&](const std::filesystem::path& hr) -> std::string {
    if (!lr_dir.empty()) {
      auto p = lr_dir / hr.filename();
      if (!std::filesystem::is_regular_file(p)) throw IoError("missing LR counterpart '" + p.string() + "'");
      return p.string();
    }
    if (opt.cache_dir.empty()) throw ConfigError("no LR directory and no cache directory for synthesized LR images");
    auto name = hr.filename().string();
    if (hr.extension() != ".png") name += ".png";
    auto out = opt.cache_dir / name;
    auto lr = degrade(load_hr(hr.string(), opt.hr_size), opt.degradation);
    save_png(lr, out);
    return out.string();
  };

  SplitManifest m;
  m.seed = opt.seed;
  m.scale = opt.degradation.scale;
  m.hr_size = opt.hr_size;
  const size_t n_unpaired = opt.n_unpaired.value_or(files.size() - wanted_fixed);
  size_t i = 0;
  for (; i < opt.n_test; ++i) m.test.push_back({lr_for(files[i]), files[i].string()});
  for (; i < opt.n_test + opt.n_paired; ++i) m.paired.push_back({lr_for(files[i]), files[i].string()});
  for (; i < wanted_fixed + n_unpaired; ++i) m.unpaired.push_back(lr_for(files[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Manifest persistence: a header line followed by one record per line.

inline std::string serialize_manifest(const SplitManifest& m) {
  std::ostringstream out;
  nlohmann::ordered_json header = {{"format", kManifestFormat},
                                   {"version", kManifestVersion},
                                   {"seed", m.seed},
                                   {"scale", m.scale},
                                   {"hr_size", m.hr_size},
                                   {"counts",
                                    {{"paired", m.paired.size()}, {"unpaired", m.unpaired.size()}, {"test", m.test.size()}}}};
  out << header.dump() << "\n";
  for (const auto& p : m.paired) out << nlohmann::ordered_json{{"split", "paired"}, {"lr", p.lr}, {"hr", p.hr}}.dump() << "\n";
  for (const auto& u : m.unpaired) out << nlohmann::ordered_json{{"split", "unpaired"}, {"lr", u}}.dump() << "\n";
  for (const auto& t : m.test) out << nlohmann::ordered_json{{"split", "test"}, {"lr", t.lr}, {"hr", t.hr}}.dump() << "\n";
  return out.str();
}

inline SplitManifest parse_manifest(std::istream& in, const std::string& name = "manifest") {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(name + " is empty");
  SplitManifest m;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
    if (header.at("format") != kManifestFormat) throw FormatError(name + " is not a split manifest");
    if (header.at("version").get<int>() != kManifestVersion) throw FormatError(name + " has an unsupported version");
    m.seed = header.at("seed").get<uint64_t>();
    m.scale = header.at("scale").get<int>();
    m.hr_size = header.at("hr_size").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(name + " header: " + e.what());
  }
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      const auto split = j.at("split").get<std::string>();
      if (split == "paired") {
        m.paired.push_back({j.at("lr").get<std::string>(), j.at("hr").get<std::string>()});
      } else if (split == "test") {
        m.test.push_back({j.at("lr").get<std::string>(), j.at("hr").get<std::string>()});
      } else if (split == "unpaired") {
        if (j.contains("hr")) throw FormatError(name + " line " + std::to_string(lineno) + ": unpaired record carries an HR path");
        m.unpaired.push_back(j.at("lr").get<std::string>());
      } else {
        throw FormatError(name + " line " + std::to_string(lineno) + ": unknown split '" + split + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(name + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  const auto& counts = header.at("counts");
  if (counts.at("paired").get<size_t>() != m.paired.size() || counts.at("unpaired").get<size_t>() != m.unpaired.size() ||
      counts.at("test").get<size_t>() != m.test.size())
    throw FormatError(name + ": record counts do not match the header");
  return m;
}

inline void save_manifest(const SplitManifest& m, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
  out << serialize_manifest(m);
  if (!out) throw IoError("failed writing manifest '" + path.string() + "'");
}

inline SplitManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest '" + path.string() + "'");
  return parse_manifest(in, "'" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Mixed minibatches

/// (N, C, H, W) tensors; `unpaired_lr` is undefined when no unpaired items
/// were requested.
struct SampleBatch {
  torch::Tensor paired_lr;
  torch::Tensor paired_hr;
  torch::Tensor unpaired_lr;

  int64_t n_paired() const { return paired_lr.defined() ? paired_lr.size(0) : 0; }
  int64_t n_unpaired() const { return unpaired_lr.defined() ? unpaired_lr.size(0) : 0; }
};

/// Per-step composition; the default is 16 images split 1:1.
struct BatchSpec {
  int n_sup = 8;
  int n_unsup = 8;

  bool operator==(const BatchSpec&) const = default;
};

struct LoaderOptions {
  int channels = 3;
  int workers = 1;

  bool operator==(const LoaderOptions&) const = default;
};

/// Draws paired and unpaired items without replacement within an epoch,
/// reshuffling each component independently when it is exhausted. Which
/// items form a batch depends only on the seed; worker threads only decode,
/// so the batch sequence is the same for every worker count.
class BatchSampler {
 public:
  BatchSampler(SplitManifest manifest, BatchSpec spec, uint64_t seed, LoaderOptions opt = {})
      : manifest_(std::move(manifest)), spec_(spec), opt_(opt), gen_(seed) {
    if (spec.n_sup < 0 || spec.n_unsup < 0) throw ConfigError("batch counts must be non-negative");
    if (spec.n_sup == 0 && spec.n_unsup == 0) throw ConfigError("batch must request at least one item");
    if (spec.n_sup > 0 && manifest_.paired.empty()) throw ConfigError("paired items requested but the manifest has none");
    if (spec.n_unsup > 0 && manifest_.unpaired.empty())
      throw ConfigError("unpaired items requested (n_unsup = " + std::to_string(spec.n_unsup) +
                        ") but the manifest has no unpaired images");
    if (opt_.workers < 1) opt_.workers = 1;
  }

  SampleBatch next() {
    const auto paired_idx = draw(paired_order_, paired_pos_, manifest_.paired.size(), spec_.n_sup);
    const auto unpaired_idx = draw(unpaired_order_, unpaired_pos_, manifest_.unpaired.size(), spec_.n_unsup);
    last_paired_ = paired_idx;

    std::vector<std::string> paths;
    std::vector<bool> is_hr;
    for (auto i : paired_idx) {
      paths.push_back(manifest_.paired[i].lr), is_hr.push_back(false);
      paths.push_back(manifest_.paired[i].hr), is_hr.push_back(true);
    }
    for (auto i : unpaired_idx) paths.push_back(manifest_.unpaired[i]), is_hr.push_back(false);
    auto images = load_all(paths, is_hr);

    SampleBatch b;
    size_t k = 0;
    if (!paired_idx.empty()) {
      std::vector<ImageTensor> lr, hr;
      for (size_t n = 0; n < paired_idx.size(); ++n) {
        lr.push_back(images[k++]);
        hr.push_back(images[k++]);
      }
      b.paired_lr = to_batch(lr);
      b.paired_hr = to_batch(hr);
      if (b.paired_hr.size(2) != manifest_.scale * b.paired_lr.size(2) ||
          b.paired_hr.size(3) != manifest_.scale * b.paired_lr.size(3))
        throw ShapeError("paired HR is not scale x LR");
    }
    if (!unpaired_idx.empty()) {
      std::vector<ImageTensor> u(images.begin() + static_cast<std::ptrdiff_t>(k), images.end());
      b.unpaired_lr = to_batch(u);
    }
    return b;
  }

  /// Paired manifest indices used by the most recent batch.
  const std::vector<size_t>& last_paired_indices() const { return last_paired_; }

  std::string save_state() const {
    std::ostringstream rng;
    rng << gen_;
    nlohmann::json j = {{"rng", rng.str()},
                        {"paired_order", paired_order_},
                        {"paired_pos", paired_pos_},
                        {"unpaired_order", unpaired_order_},
                        {"unpaired_pos", unpaired_pos_}};
    return j.dump();
  }

  void load_state(const std::string& s) {
    try {
      auto j = nlohmann::json::parse(s);
      std::istringstream rng(j.at("rng").get<std::string>());
      rng >> gen_;
      paired_order_ = j.at("paired_order").get<std::vector<size_t>>();
      paired_pos_ = j.at("paired_pos").get<size_t>();
      unpaired_order_ = j.at("unpaired_order").get<std::vector<size_t>>();
      unpaired_pos_ = j.at("unpaired_pos").get<size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("invalid sampler state: ") + e.what());
    }
  }

  const SplitManifest& manifest() const { return manifest_; }

 private:
  std::vector<size_t> draw(std::vector<size_t>& order, size_t& pos, size_t pool, int count) {
    std::vector<size_t> out;
    for (int n = 0; n < count; ++n) {
      if (pos >= order.size()) {
        order.resize(pool);
        for (size_t i = 0; i < pool; ++i) order[i] = i;
        detail::portable_shuffle(order, gen_);
        pos = 0;
      }
      out.push_back(order[pos++]);
    }
    return out;
  }

  ImageTensor load_one(const std::string& path, bool hr) {
    {
      std::lock_guard<std::mutex> lock(cache_mutex_);
      auto it = cache_.find(path);
      if (it != cache_.end()) return it->second;
    }
    auto img = hr ? load_hr(path, manifest_.hr_size, opt_.channels)
                  : load_lr(path, manifest_.hr_size, manifest_.scale, opt_.channels);
    std::lock_guard<std::mutex> lock(cache_mutex_);
    cache_.emplace(path, img);
    return img;
  }

  std::vector<ImageTensor> load_all(const std::vector<std::string>& paths, const std::vector<bool>& is_hr) {
    std::vector<ImageTensor> out(paths.size());
    if (opt_.workers == 1) {
      for (size_t i = 0; i < paths.size(); ++i) out[i] = load_one(paths[i], is_hr[i]);
      return out;
    }
    std::vector<std::future<void>> jobs;
    const size_t w = static_cast<size_t>(opt_.workers);
    for (size_t t = 0; t < w; ++t)
      jobs.push_back(std::async(std::launch::async, [&, t] {
        for (size_t i = t; i < paths.size(); i += w) out[i] = load_one(paths[i], is_hr[i]);
      }));
    for (auto& j : jobs) j.get();
    return out;
  }

  SplitManifest manifest_;
  BatchSpec spec_;
  LoaderOptions opt_;
  std::mt19937_64 gen_;
  std::vector<size_t> paired_order_, unpaired_order_;
  size_t paired_pos_ = 0, unpaired_pos_ = 0;
  std::vector<size_t> last_paired_;
  std::mutex cache_mutex_;
  std::map<std::string, ImageTensor> cache_;
};

/// All test pairs of a manifest as (LR, HR) batches; used for validation.
inline std::pair<torch::Tensor, torch::Tensor> load_test_pairs(const SplitManifest& m, int channels = 3, size_t limit = 0) {
  std::vector<ImageTensor> lr, hr;
  for (size_t i = 0; i < m.test.size() && (limit == 0 || i < limit); ++i) {
    lr.push_back(load_lr(m.test[i].lr, m.hr_size, m.scale, channels));
    hr.push_back(load_hr(m.test[i].hr, m.hr_size, channels));
  }
  if (lr.empty()) return {};
  return {to_batch(lr), to_batch(hr)};
}

}  // namespace semisr

#endif  // SEMISR_DATASETS_HPP
