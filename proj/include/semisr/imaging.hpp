#ifndef SEMISR_IMAGING_HPP
#define SEMISR_IMAGING_HPP

// Raster I/O, value-range handling and the SR -> LR degradation operator.
//
// Single images are (H, W, C) tensors; batches are (N, C, H, W) tensors in
// the unit range. The degradation operator exists twice with identical math:
// `degrade(ImageTensor, ...)` for data preparation (no autograd) and
// `degrade(torch::Tensor, ...)` which stays inside the autograd graph so the
// consistency loss can push gradients through it into the generator.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "semisr/errors.hpp"

namespace semisr {

enum class ValueRange { unit, symmetric };

inline double range_min(ValueRange r) { return r == ValueRange::unit ? 0.0 : -1.0; }
inline double range_max(ValueRange) { return 1.0; }

inline std::string to_string(ValueRange r) { return r == ValueRange::unit ? "unit" : "symmetric"; }

inline ValueRange parse_value_range(std::string_view s) {
  if (s == "unit") return ValueRange::unit;
  if (s == "symmetric") return ValueRange::symmetric;
  throw ConfigError("unknown value range '" + std::string(s) + "' (expected unit|symmetric)");
}

/// An (H, W, C) image with C in {1, 3}, channel order RGB, values inside `range`.
struct ImageTensor {
  torch::Tensor data;
  ValueRange range = ValueRange::unit;

  int64_t height() const { return data.size(0); }
  int64_t width() const { return data.size(1); }
  int64_t channels() const { return data.size(2); }

  /// Wraps `hwc`, validating shape and clamping into `r`.
  static ImageTensor from(torch::Tensor hwc, ValueRange r = ValueRange::unit) {
    if (hwc.dim() != 3) throw ShapeError("image tensor must be (H, W, C), got " + std::to_string(hwc.dim()) + " dims");
    if (hwc.size(0) < 1 || hwc.size(1) < 1) throw ShapeError("image must be at least 1x1");
    if (hwc.size(2) != 1 && hwc.size(2) != 3)
      throw FormatError("unsupported channel count " + std::to_string(hwc.size(2)) + " (expected 1 or 3)");
    if (!hwc.is_floating_point()) hwc = hwc.to(torch::kFloat32);
    return ImageTensor{hwc.clamp(range_min(r), range_max(r)).contiguous(), r};
  }
};

enum class Kernel { bicubic, average_pool, nearest };

inline std::string to_string(Kernel k) {
  switch (k) {
    case Kernel::bicubic: return "bicubic";
    case Kernel::average_pool: return "average-pool";
    case Kernel::nearest: return "nearest";
  }
  return "?";
}

inline Kernel parse_kernel(std::string_view s) {
  if (s == "bicubic") return Kernel::bicubic;
  if (s == "average-pool" || s == "average_pool") return Kernel::average_pool;
  if (s == "nearest") return Kernel::nearest;
  throw ConfigError("unknown degradation kernel '" + std::string(s) + "'");
}

/// Downsampling part of the degradation model. Blur is identity and noise is
/// zero; this struct is where either would be added.
struct DegradationSpec {
  int scale = 4;
  Kernel kernel = Kernel::bicubic;
  bool antialias = true;

  bool operator==(const DegradationSpec&) const = default;

  void validate() const {
    if (scale < 2) throw ConfigError("degradation scale must be >= 2, got " + std::to_string(scale));
  }
};

// ---------------------------------------------------------------------------
// Raster I/O

/// Decodes a PNG/JPEG (8 or 16 bit) into an RGB or grayscale tensor.
inline ImageTensor load_image(const std::filesystem::path& path, ValueRange range = ValueRange::unit) {
  if (!std::filesystem::is_regular_file(path)) throw IoError("cannot read image '" + path.string() + "': no such file");
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw IoError("cannot decode image '" + path.string() + "'");
  const int ch = raw.channels();
  if (ch != 1 && ch != 3)
    throw FormatError("'" + path.string() + "' has " + std::to_string(ch) + " channels (expected 1 or 3)");
  double max_value = 0.0;
  switch (raw.depth()) {
    case CV_8U: max_value = 255.0; break;
    case CV_16U: max_value = 65535.0; break;
    default: throw FormatError("'" + path.string() + "' has an unsupported bit depth");
  }
  if (ch == 3) cv::cvtColor(raw, raw, cv::COLOR_BGR2RGB);
  cv::Mat f;
  raw.convertTo(f, CV_32F, 1.0 / max_value);
  auto t = torch::from_blob(f.data, {f.rows, f.cols, ch}, torch::kFloat32).clone();
  if (range == ValueRange::symmetric) t = t * 2.0 - 1.0;
  return ImageTensor::from(t, range);
}

/// Writes an 8-bit PNG (values clamped to the image's range first).
inline void save_png(const ImageTensor& img, const std::filesystem::path& path) {
  auto t = img.data.detach().to(torch::kCPU, torch::kFloat32).clamp(range_min(img.range), range_max(img.range));
  if (img.range == ValueRange::symmetric) t = (t + 1.0) * 0.5;
  t = (t * 255.0).round().to(torch::kUInt8).contiguous();
  const int ch = static_cast<int>(img.channels());
  cv::Mat m(static_cast<int>(img.height()), static_cast<int>(img.width()), CV_8UC(ch), t.data_ptr<uint8_t>());
  cv::Mat out = m.clone();
  if (ch == 3) cv::cvtColor(out, out, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), out)) throw IoError("cannot write '" + path.string() + "'");
}

/// Image files (png/jpg/jpeg, any case) directly inside `dir`, sorted by name.
inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("'" + dir.string() + "' is not a directory");
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Batch conversion

/// Stacks equally sized images into an (N, C, H, W) unit-range batch.
inline torch::Tensor to_batch(std::span<const ImageTensor> images) {
  if (images.empty()) throw ShapeError("cannot build a batch from zero images");
  std::vector<torch::Tensor> chw;
  chw.reserve(images.size());
  for (const auto& im : images) {
    if (im.data.sizes() != images.front().data.sizes())
      throw ShapeError("images in a batch must share one shape");
    auto t = im.data;
    if (im.range == ValueRange::symmetric) t = (t + 1.0) * 0.5;
    chw.push_back(t.permute({2, 0, 1}));
  }
  return torch::stack(chw).contiguous();
}

inline ImageTensor from_batch(const torch::Tensor& nchw, int64_t index) {
  return ImageTensor::from(nchw[index].detach().permute({1, 2, 0}).contiguous(), ValueRange::unit);
}

inline void require_nchw(const torch::Tensor& t, std::string_view what) {
  if (t.dim() != 4) throw ShapeError(std::string(what) + " must be an (N, C, H, W) batch");
}

// ---------------------------------------------------------------------------
// Resampling

namespace detail {

/// Keys cubic convolution kernel with a = -0.5.
inline double cubic_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

}  // namespace detail

/// (out_size x in_size) bicubic resampling matrix with half-pixel centres and
/// normalized taps. With `antialias` and out < in, the kernel support is
/// stretched by the reduction factor so every source pixel contributes.
inline torch::Tensor bicubic_matrix(int64_t in_size, int64_t out_size, bool antialias,
                                    torch::Dtype dtype = torch::kFloat64) {
  if (in_size < 1 || out_size < 1) throw ShapeError("resampling sizes must be positive");
  const double scale = static_cast<double>(in_size) / static_cast<double>(out_size);
  const double stretch = (antialias && scale > 1.0) ? scale : 1.0;
  const double support = 2.0 * stretch;
  auto w = torch::zeros({out_size, in_size}, torch::kFloat64);
  auto acc = w.accessor<double, 2>();
  for (int64_t i = 0; i < out_size; ++i) {
    const double center = (static_cast<double>(i) + 0.5) * scale;
    const auto lo = std::max<int64_t>(static_cast<int64_t>(center - support + 0.5), 0);
    const auto hi = std::min<int64_t>(static_cast<int64_t>(center + support + 0.5), in_size);
    double total = 0.0;
    for (int64_t j = lo; j < hi; ++j) {
      const double v = detail::cubic_weight((static_cast<double>(j) - center + 0.5) / stretch);
      acc[i][j] = v;
      total += v;
    }
    if (total != 0.0)
      for (int64_t j = lo; j < hi; ++j) acc[i][j] /= total;
  }
  return w.to(dtype);
}

/// Separable bicubic resize of an (N, C, H, W) batch; differentiable.
inline torch::Tensor resize_bicubic(const torch::Tensor& nchw, int64_t out_h, int64_t out_w, bool antialias = true) {
  require_nchw(nchw, "resize input");
  const auto dt = nchw.scalar_type();
  auto rows = bicubic_matrix(nchw.size(2), out_h, antialias).to(nchw.options().dtype(dt));
  auto cols = bicubic_matrix(nchw.size(3), out_w, antialias).to(nchw.options().dtype(dt));
  return torch::matmul(torch::matmul(rows, nchw), cols.t());
}

/// In-graph degradation F of an (N, C, H, W) batch in the unit range.
inline torch::Tensor degrade(const torch::Tensor& nchw, const DegradationSpec& spec) {
  spec.validate();
  require_nchw(nchw, "degrade input");
  const int64_t h = nchw.size(2), w = nchw.size(3);
  if (h % spec.scale != 0 || w % spec.scale != 0)
    throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by scale " +
                     std::to_string(spec.scale));
  const int64_t oh = h / spec.scale, ow = w / spec.scale;
  torch::Tensor out;
  switch (spec.kernel) {
    case Kernel::bicubic:
      out = resize_bicubic(nchw, oh, ow, spec.antialias);
      break;
    case Kernel::average_pool:
      out = torch::avg_pool2d(nchw, {spec.scale, spec.scale});
      break;
    case Kernel::nearest: {
      // Sample the pixel at the floor-centre of every scale x scale block.
      const int64_t off = spec.scale / 2;
      out = nchw.index({torch::indexing::Slice(), torch::indexing::Slice(),
                        torch::indexing::Slice(off, torch::indexing::None, spec.scale),
                        torch::indexing::Slice(off, torch::indexing::None, spec.scale)});
      break;
    }
  }
  return out.clamp(0.0, 1.0);
}

/// Data-preparation degradation of a single image (no gradient tracking).
inline ImageTensor degrade(const ImageTensor& img, const DegradationSpec& spec) {
  torch::NoGradGuard no_grad;
  auto unit = img.range == ValueRange::symmetric ? (img.data + 1.0) * 0.5 : img.data;
  auto lr = degrade(unit.permute({2, 0, 1}).unsqueeze(0), spec)[0].permute({1, 2, 0});
  if (img.range == ValueRange::symmetric) lr = lr * 2.0 - 1.0;
  return ImageTensor::from(lr.contiguous(), img.range);
}

/// Replicates every pixel into a scale x scale block.
inline torch::Tensor upsample_naive(const torch::Tensor& nchw, int scale) {
  require_nchw(nchw, "upsample input");
  if (scale < 1) throw ShapeError("upsample scale must be >= 1");
  if (scale == 1) return nchw;
  return nchw.repeat_interleave(scale, 2).repeat_interleave(scale, 3);
}

inline ImageTensor upsample_naive(const ImageTensor& img, int scale) {
  if (scale < 1) throw ShapeError("upsample scale must be >= 1");
  return ImageTensor{img.data.repeat_interleave(scale, 0).repeat_interleave(scale, 1).contiguous(), img.range};
}

/// Center-crops to a square and resizes to size x size (area filter when
/// shrinking, cubic when enlarging). Data preparation only.
inline ImageTensor center_crop_resize(const ImageTensor& img, int64_t size) {
  torch::NoGradGuard no_grad;
  const int64_t side = std::min(img.height(), img.width());
  const int64_t top = (img.height() - side) / 2, left = (img.width() - side) / 2;
  auto sq = img.data.slice(0, top, top + side).slice(1, left, left + side).to(torch::kFloat32).contiguous();
  if (side == size) return ImageTensor::from(sq, img.range);
  const int ch = static_cast<int>(img.channels());
  cv::Mat src(static_cast<int>(side), static_cast<int>(side), CV_32FC(ch), sq.data_ptr<float>());
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(static_cast<int>(size), static_cast<int>(size)), 0, 0,
             size < side ? cv::INTER_AREA : cv::INTER_CUBIC);
  auto t = torch::from_blob(dst.data, {size, size, ch}, torch::kFloat32).clone();
  return ImageTensor::from(t, img.range);
}

/// Repeats a single channel to three; three-channel batches pass through.
inline torch::Tensor replicate_to_rgb(const torch::Tensor& nchw) {
  require_nchw(nchw, "channel replication input");
  if (nchw.size(1) == 3) return nchw;
  if (nchw.size(1) == 1) return nchw.expand({-1, 3, -1, -1});
  throw ChannelError("expected 1 or 3 channels, got " + std::to_string(nchw.size(1)));
}

}  // namespace semisr

#endif  // SEMISR_IMAGING_HPP
