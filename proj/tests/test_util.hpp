#ifndef SEMISR_TESTS_TEST_UTIL_HPP
#define SEMISR_TESTS_TEST_UTIL_HPP

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

namespace semisr::testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "semisr") {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(stamp) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

/// Central finite-difference gradient of a scalar function of `x`.
/// Evaluated element by element without autograd.
inline torch::Tensor finite_difference_grad(const std::function<double(const torch::Tensor&)>& f,
                                            const torch::Tensor& x, double step = 1e-6) {
  torch::NoGradGuard no_grad;
  auto base = x.detach().clone().to(torch::kFloat64).contiguous();
  auto grad = torch::zeros_like(base);
  auto flat = base.view({-1});
  auto gflat = grad.view({-1});
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + step;
    const double up = f(base);
    flat[i] = orig - step;
    const double down = f(base);
    flat[i] = orig;
    gflat[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

/// Autograd gradient of a scalar-valued tensor function.
inline torch::Tensor autograd_grad(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                   const torch::Tensor& x) {
  auto v = x.detach().clone().to(torch::kFloat64).set_requires_grad(true);
  auto y = f(v);
  y.backward();
  return v.grad().detach();
}

inline double relative_error(const torch::Tensor& a, const torch::Tensor& b) {
  const double num = (a - b).norm().item<double>();
  const double den = std::max(b.norm().item<double>(), 1e-12);
  return num / den;
}

/// Writes `n` square RGB images of random filled shapes on a smooth
/// background, named shape_00000.png, ... Deterministic in `seed`.
inline void write_shapes(const std::filesystem::path& dir, int n, int size, uint64_t seed) {
  std::filesystem::create_directories(dir);
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<int> colour(0, 255), count(2, 5), kind(0, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    cv::Mat img(size, size, CV_8UC3);
    const cv::Vec3d a(colour(gen), colour(gen), colour(gen)), b(colour(gen), colour(gen), colour(gen));
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double t = 0.5 * (x + y) / std::max(1, size - 1);
        const cv::Vec3d c = a * (1.0 - t) + b * t;
        img.at<cv::Vec3b>(y, x) = cv::Vec3b(cv::saturate_cast<uchar>(c[0]), cv::saturate_cast<uchar>(c[1]),
                                            cv::saturate_cast<uchar>(c[2]));
      }
    for (int k = count(gen); k > 0; --k) {
      const cv::Scalar c(colour(gen), colour(gen), colour(gen));
      const cv::Point p(static_cast<int>(unit(gen) * size), static_cast<int>(unit(gen) * size));
      const int r = std::max(2, static_cast<int>((0.1 + 0.3 * unit(gen)) * size));
      switch (kind(gen)) {
        case 0: cv::circle(img, p, r, c, cv::FILLED, cv::LINE_AA); break;
        case 1: cv::rectangle(img, p, p + cv::Point(r, r * 2 / 3), c, cv::FILLED); break;
        default: cv::line(img, p, cv::Point(size - p.x, p.y + r), c, std::max(1, size / 16), cv::LINE_AA); break;
      }
    }
    char name[32];
    std::snprintf(name, sizeof name, "shape_%05d.png", i);
    cv::imwrite((dir / name).string(), img);
  }
}

}  // namespace semisr::testing

#endif  // SEMISR_TESTS_TEST_UTIL_HPP
