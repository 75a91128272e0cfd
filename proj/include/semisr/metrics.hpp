#ifndef SEMISR_METRICS_HPP
#define SEMISR_METRICS_HPP

// Frechet distance between Gaussian fits of deep features (FID) and mean
// opinion score aggregation over rating records.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <torch/script.h>
#include <torch/torch.h>

#include "semisr/errors.hpp"
#include "semisr/imaging.hpp"
#include "semisr/models.hpp"

namespace semisr {

// ---------------------------------------------------------------------------
// Gaussian statistics and the Frechet distance

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  Eigen::Index dim() const { return mean.size(); }
};

/// Sample mean and unbiased covariance (divisor n - 1) of an n x d feature matrix.
inline GaussianStats gaussian_stats(const Eigen::MatrixXd& features) {
  if (features.rows() < 2)
    throw InsufficientSamples("gaussian_stats needs at least 2 samples, got " + std::to_string(features.rows()));
  GaussianStats s;
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(features.rows() - 1);
  s.cov = 0.5 * (s.cov + s.cov.transpose());
  return s;
}

/// Square root of a symmetric PSD matrix; negative eigenvalues are clipped to 0.
inline Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

/// (Ca Cb)^{1/2} computed through the symmetric product M = Ca^{1/2} Cb Ca^{1/2}:
/// tr((Ca Cb)^{1/2}) = tr(M^{1/2}), and (Ca Cb)^{1/2} = Ca^{1/2} M^{1/2} Ca^{-1/2}.
struct CovarianceProductRoot {
  Eigen::MatrixXd root_a;   // Ca^{1/2}
  Eigen::MatrixXd root_m;   // M^{1/2}

  double trace() const { return root_m.trace(); }

  /// The full (generally non-symmetric) matrix; uses a pseudo-inverse of Ca^{1/2}.
  Eigen::MatrixXd matrix() const {
    const Eigen::MatrixXd inv = root_a.completeOrthogonalDecomposition().pseudoInverse();
    return root_a * root_m * inv;
  }
};

inline CovarianceProductRoot sqrt_covariance_product(const Eigen::MatrixXd& ca, const Eigen::MatrixXd& cb) {
  CovarianceProductRoot r;
  r.root_a = sqrt_psd(ca);
  const Eigen::MatrixXd m = r.root_a * cb * r.root_a;
  r.root_m = sqrt_psd(m);
  return r;
}

/// ||mu_a - mu_b||^2 + tr(Ca + Cb - 2 (Ca Cb)^{1/2}), clipped at 0.
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.dim() != b.dim() || a.cov.rows() != a.dim() || b.cov.rows() != b.dim())
    throw ShapeError("frechet_distance: dimension mismatch (" + std::to_string(a.dim()) + " vs " +
                     std::to_string(b.dim()) + ")");
  if (a.mean == b.mean && a.cov == b.cov) return 0.0;
  const double mean_term = (a.mean - b.mean).squaredNorm();
  // Symmetrize the evaluation order so that d(a, b) == d(b, a) up to rounding.
  const double tr_ab = sqrt_covariance_product(a.cov, b.cov).trace();
  const double tr_ba = sqrt_covariance_product(b.cov, a.cov).trace();
  const double d = mean_term + a.cov.trace() + b.cov.trace() - (tr_ab + tr_ba);
  return std::max(d, 0.0);
}

// ---------------------------------------------------------------------------
// FID over image directories

/// Embedding network used for FID. Either a frozen VGG-family backbone
/// (globally pooled tap features) or a TorchScript module mapping an
/// (N, 3, S, S) unit-range batch to (N, d) features, e.g. an exported
/// Inception pool3 network.
struct FidFeatureSpec {
  std::optional<FeatureExtractorSpec> backbone;
  std::string torchscript;
  int input_size = 299;
  int batch_size = 16;
  double shrinkage = 1e-6;

  static FidFeatureSpec from_backbone(FeatureExtractorSpec spec, int input_size) {
    FidFeatureSpec f;
    f.backbone = spec;
    f.input_size = input_size;
    return f;
  }

  static FidFeatureSpec from_torchscript(std::string path, int input_size = 299) {
    FidFeatureSpec f;
    f.torchscript = std::move(path);
    f.input_size = input_size;
    return f;
  }

  /// Last conv of the tiny backbone, 32 px input: fast enough for CI.
  static FidFeatureSpec ci() {
    auto spec = FeatureExtractorSpec::tiny();
    spec.pool_index = 3;
    spec.conv_index = 2;
    spec.pre_activation = false;
    return from_backbone(spec, 32);
  }
};

class FidFeatureNet {
 public:
  explicit FidFeatureNet(const FidFeatureSpec& spec) : spec_(spec) {
    if (!spec.torchscript.empty()) {
      try {
        script_ = std::make_unique<torch::jit::Module>(torch::jit::load(spec.torchscript));
      } catch (const c10::Error& e) {
        throw IoError("cannot load TorchScript feature network '" + spec.torchscript + "': " + e.what_without_backtrace());
      }
      script_->eval();
    } else if (spec.backbone) {
      backbone_ = FeatureExtractor(*spec.backbone);
    } else {
      throw ConfigError("FID feature network needs a backbone or a TorchScript module");
    }
  }

  /// (N, C, H, W) unit-range images of any size -> (N, d) features.
  torch::Tensor embed(const torch::Tensor& images) {
    torch::NoGradGuard no_grad;
    auto x = replicate_to_rgb(images.to(torch::kFloat32));
    if (x.size(2) != spec_.input_size || x.size(3) != spec_.input_size)
      x = resize_bicubic(x, spec_.input_size, spec_.input_size, true).clamp(0.0, 1.0);
    if (script_) {
      auto out = script_->forward({x}).toTensor();
      return out.reshape({out.size(0), -1});
    }
    return backbone_->pooled(x);
  }

  const FidFeatureSpec& spec() const { return spec_; }

 private:
  FidFeatureSpec spec_;
  FeatureExtractor backbone_{nullptr};
  std::unique_ptr<torch::jit::Module> script_;
};

namespace detail {

inline Eigen::MatrixXd to_eigen(const torch::Tensor& t) {
  auto all = t.to(torch::kFloat64).contiguous();
  Eigen::MatrixXd m(all.size(0), all.size(1));
  auto acc = all.accessor<double, 2>();
  for (int64_t r = 0; r < all.size(0); ++r)
    for (int64_t c = 0; c < all.size(1); ++c) m(r, c) = acc[r][c];
  return m;
}

}  // namespace detail

/// Features of the first `n_max` images (file-name order) of `dir`.
inline Eigen::MatrixXd embed_directory(FidFeatureNet& net, const std::filesystem::path& dir, size_t n_max = 0) {
  auto files = list_images(dir);
  if (files.empty()) throw IoError("'" + dir.string() + "' contains no images");
  if (n_max > 0 && files.size() > n_max) files.resize(n_max);
  std::vector<torch::Tensor> rows;
  const size_t bs = static_cast<size_t>(std::max(1, net.spec().batch_size));
  for (size_t start = 0; start < files.size(); start += bs) {
    std::vector<torch::Tensor> batch;
    for (size_t i = start; i < std::min(files.size(), start + bs); ++i) {
      try {
        auto img = load_image(files[i]);
        auto chw = img.data.permute({2, 0, 1}).unsqueeze(0);
        if (chw.size(2) != net.spec().input_size || chw.size(3) != net.spec().input_size)
          chw = resize_bicubic(chw, net.spec().input_size, net.spec().input_size, true).clamp(0.0, 1.0);
        batch.push_back(replicate_to_rgb(chw)[0]);
      } catch (const Error& e) {
        throw Error(e.kind(), "feature extraction failed for '" + files[i].string() + "': " + e.what());
      }
    }
    try {
      rows.push_back(net.embed(torch::stack(batch)).to(torch::kFloat64).contiguous());
    } catch (const c10::Error& e) {
      throw FormatError("feature extraction failed near '" + files[start].string() + "': " + e.what_without_backtrace());
    }
  }
  return detail::to_eigen(torch::cat(rows));
}

/// Features of an in-memory (N, C, H, W) unit-range batch.
inline Eigen::MatrixXd embed_tensor(FidFeatureNet& net, const torch::Tensor& images) {
  std::vector<torch::Tensor> rows;
  const int64_t bs = std::max(1, net.spec().batch_size);
  for (int64_t start = 0; start < images.size(0); start += bs)
    rows.push_back(net.embed(images.slice(0, start, std::min(images.size(0), start + bs))).to(torch::kFloat64));
  return detail::to_eigen(torch::cat(rows));
}

/// Stats of a feature matrix, with the shrinkage term added when the sample
/// count cannot support a full-rank covariance.
inline GaussianStats fid_stats(const Eigen::MatrixXd& features, double shrinkage, std::ostream* warn = &std::cerr) {
  auto s = gaussian_stats(features);
  if (features.rows() <= features.cols()) {
    if (warn)
      *warn << "warning: FID over " << features.rows() << " samples with " << features.cols()
            << "-d features; covariance is singular, adding " << shrinkage << " * I\n";
    s.cov += shrinkage * Eigen::MatrixXd::Identity(s.cov.rows(), s.cov.cols());
  }
  return s;
}

inline double fid(const std::filesystem::path& real_dir, const std::filesystem::path& fake_dir, FidFeatureNet& net,
                  size_t n_max = 0, std::ostream* warn = &std::cerr) {
  const auto real = fid_stats(embed_directory(net, real_dir, n_max), net.spec().shrinkage, warn);
  const auto fake = fid_stats(embed_directory(net, fake_dir, n_max), net.spec().shrinkage, warn);
  return frechet_distance(real, fake);
}

inline double fid(const torch::Tensor& real, const torch::Tensor& fake, FidFeatureNet& net,
                  std::ostream* warn = &std::cerr) {
  return frechet_distance(fid_stats(embed_tensor(net, real), net.spec().shrinkage, warn),
                          fid_stats(embed_tensor(net, fake), net.spec().shrinkage, warn));
}

// ---------------------------------------------------------------------------
// Ratings and MOS

/// One rater's 1-5 score for one blinded output. `method_id` is the opaque id
/// assigned at study export; `item_id`, `session_id` and `order` record the
/// presentation.
struct RatingRecord {
  std::string rater_id;
  std::string image_id;
  std::string method_id;
  int score = 0;
  std::string presented_at;
  std::string item_id;
  std::string session_id;
  int order = -1;

  void validate() const {
    if (score < 1 || score > 5) throw ValidationError("score must be an integer in 1..5, got " + std::to_string(score));
    if (rater_id.empty() || image_id.empty() || method_id.empty())
      throw ValidationError("rating record needs rater_id, image_id and method_id");
  }
};

inline void to_json(nlohmann::json& j, const RatingRecord& r) {
  j = {{"rater_id", r.rater_id},         {"image_id", r.image_id}, {"method_id", r.method_id},
       {"score", r.score},               {"presented_at", r.presented_at}, {"item_id", r.item_id},
       {"session_id", r.session_id},     {"order", r.order}};
}

inline void from_json(const nlohmann::json& j, RatingRecord& r) {
  r.rater_id = j.at("rater_id").get<std::string>();
  r.image_id = j.at("image_id").get<std::string>();
  r.method_id = j.at("method_id").get<std::string>();
  if (!j.at("score").is_number_integer()) throw ValidationError("score must be an integer");
  r.score = j.at("score").get<int>();
  r.presented_at = j.value("presented_at", "");
  r.item_id = j.value("item_id", "");
  r.session_id = j.value("session_id", "");
  r.order = j.value("order", -1);
  r.validate();
}

/// Reads a line-delimited ratings file. A truncated final line (an
/// interrupted append) is skipped; malformed lines elsewhere are errors.
inline std::vector<RatingRecord> read_ratings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read ratings file '" + path.string() + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  std::vector<RatingRecord> out;
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(lines[i]).get<RatingRecord>());
    } catch (const nlohmann::json::exception& e) {
      if (i + 1 == lines.size()) break;
      throw FormatError("ratings file '" + path.string() + "' line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

struct MosSummary {
  std::string method_id;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (n - 1); 0 for a single score
  size_t count = 0;
};

namespace detail {

inline void check_unique_ratings(const std::vector<RatingRecord>& records) {
  std::set<std::tuple<std::string, std::string, std::string>> seen;
  for (const auto& r : records)
    if (!seen.emplace(r.rater_id, r.image_id, r.method_id).second)
      throw ValidationError("duplicate rating for rater '" + r.rater_id + "', image '" + r.image_id + "', method '" +
                            r.method_id + "'");
}

inline MosSummary summarize(const std::string& method, std::vector<int> scores) {
  // Sorting makes the floating-point sums independent of record order.
  std::sort(scores.begin(), scores.end());
  MosSummary s;
  s.method_id = method;
  s.count = scores.size();
  double sum = 0.0;
  for (int v : scores) sum += v;
  s.mean = sum / static_cast<double>(s.count);
  if (s.count > 1) {
    double ss = 0.0;
    for (int v : scores) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(s.count - 1));
  }
  return s;
}

}  // namespace detail

inline MosSummary mos(const std::vector<RatingRecord>& records, const std::string& method) {
  detail::check_unique_ratings(records);
  std::vector<int> scores;
  for (const auto& r : records)
    if (r.method_id == method) scores.push_back(r.score);
  if (scores.empty()) throw EmptySetError("no ratings recorded for method '" + method + "'");
  return detail::summarize(method, std::move(scores));
}

/// Per-method summaries ordered by method id.
inline std::vector<MosSummary> mos_table(const std::vector<RatingRecord>& records) {
  detail::check_unique_ratings(records);
  std::map<std::string, std::vector<int>> by_method;
  for (const auto& r : records) by_method[r.method_id].push_back(r.score);
  if (by_method.empty()) throw EmptySetError("no ratings recorded");
  std::vector<MosSummary> out;
  for (auto& [method, scores] : by_method) out.push_back(detail::summarize(method, std::move(scores)));
  return out;
}

}  // namespace semisr

#endif  // SEMISR_METRICS_HPP
