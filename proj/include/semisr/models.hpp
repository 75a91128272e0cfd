#ifndef SEMISR_MODELS_HPP
#define SEMISR_MODELS_HPP

// Generator (RRDB network), discriminator and the frozen perceptual feature
// extractor. All networks consume (N, C, H, W) batches in the unit range.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "semisr/errors.hpp"
#include "semisr/imaging.hpp"

namespace semisr {

// ---------------------------------------------------------------------------
// Generator

struct GeneratorConfig {
  int in_channels = 3;
  int out_channels = 3;
  int n_rrdb_blocks = 23;
  int base_channels = 64;
  int growth_channels = 32;
  int scale = 4;
  double residual_scaling = 0.2;

  bool operator==(const GeneratorConfig&) const = default;

  void validate() const {
    if (scale != 1 && scale != 2 && scale != 4 && scale != 8)
      throw ConfigError("generator scale must be one of 1, 2, 4, 8 (got " + std::to_string(scale) + ")");
    if (n_rrdb_blocks < 0 || base_channels < 1 || growth_channels < 1)
      throw ConfigError("generator block/channel counts must be positive");
    if (!(residual_scaling > 0.0 && residual_scaling <= 1.0))
      throw ConfigError("residual_scaling must lie in (0, 1]");
    if (in_channels != 1 && in_channels != 3) throw ConfigError("generator in_channels must be 1 or 3");
    if (out_channels != 1 && out_channels != 3) throw ConfigError("generator out_channels must be 1 or 3");
  }

  int upsample_stages() const { return static_cast<int>(std::lround(std::log2(scale))); }
};

namespace detail {

inline torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

inline torch::Tensor lrelu(const torch::Tensor& x) { return torch::leaky_relu(x, 0.2); }

/// Kaiming-normal init scaled down, as is customary for deep residual SR nets.
inline void scaled_kaiming_init(torch::nn::Module& m, double scale) {
  torch::NoGradGuard no_grad;
  for (auto& sub : m.modules(/*include_self=*/false)) {
    if (auto* conv = sub->as<torch::nn::Conv2dImpl>()) {
      torch::nn::init::kaiming_normal_(conv->weight, 0.0, torch::kFanIn, torch::kReLU);
      conv->weight.mul_(scale);
      if (conv->options.bias()) conv->bias.zero_();
    }
  }
}

}  // namespace detail

class ResidualDenseBlockImpl : public torch::nn::Module {
 public:
  ResidualDenseBlockImpl(int64_t nf, int64_t gc, double res_scale) : res_scale_(res_scale) {
    for (int64_t i = 0; i < 4; ++i)
      convs_.push_back(register_module("conv" + std::to_string(i + 1), detail::conv3x3(nf + i * gc, gc)));
    convs_.push_back(register_module("conv5", detail::conv3x3(nf + 4 * gc, nf)));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    std::vector<torch::Tensor> feats{x};
    for (size_t i = 0; i + 1 < convs_.size(); ++i) feats.push_back(detail::lrelu(convs_[i]->forward(torch::cat(feats, 1))));
    return convs_.back()->forward(torch::cat(feats, 1)) * res_scale_ + x;
  }

 private:
  std::vector<torch::nn::Conv2d> convs_;
  double res_scale_;
};
TORCH_MODULE(ResidualDenseBlock);

/// Residual-in-residual dense block: three dense blocks and an outer scaled skip.
class RRDBImpl : public torch::nn::Module {
 public:
  RRDBImpl(int64_t nf, int64_t gc, double res_scale) : res_scale_(res_scale) {
    rdb1_ = register_module("rdb1", ResidualDenseBlock(nf, gc, res_scale));
    rdb2_ = register_module("rdb2", ResidualDenseBlock(nf, gc, res_scale));
    rdb3_ = register_module("rdb3", ResidualDenseBlock(nf, gc, res_scale));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    return rdb3_->forward(rdb2_->forward(rdb1_->forward(x))) * res_scale_ + x;
  }

 private:
  ResidualDenseBlock rdb1_{nullptr}, rdb2_{nullptr}, rdb3_{nullptr};
  double res_scale_;
};
TORCH_MODULE(RRDB);

/// RRDB super-resolution generator. Upscaling is nearest-neighbour x2 followed
/// by a convolution, repeated log2(scale) times. Inputs are mapped to [-1, 1]
/// internally and outputs mapped back, so callers stay in the unit range.
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(const GeneratorConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const int64_t nf = cfg.base_channels;
    conv_first_ = register_module("conv_first", detail::conv3x3(cfg.in_channels, nf));
    body_ = register_module("body", torch::nn::Sequential());
    for (int i = 0; i < cfg.n_rrdb_blocks; ++i) body_->push_back(RRDB(nf, cfg.growth_channels, cfg.residual_scaling));
    conv_body_ = register_module("conv_body", detail::conv3x3(nf, nf));
    for (int i = 0; i < cfg.upsample_stages(); ++i)
      up_convs_.push_back(register_module("conv_up" + std::to_string(i + 1), detail::conv3x3(nf, nf)));
    conv_hr_ = register_module("conv_hr", detail::conv3x3(nf, nf));
    conv_last_ = register_module("conv_last", detail::conv3x3(nf, cfg.out_channels));
    detail::scaled_kaiming_init(*this, 0.1);
  }

  torch::Tensor forward(const torch::Tensor& lr) {
    require_nchw(lr, "generator input");
    if (lr.size(1) != cfg_.in_channels)
      throw ChannelError("generator expects " + std::to_string(cfg_.in_channels) + " channels, got " +
                         std::to_string(lr.size(1)));
    auto feat = conv_first_->forward(lr * 2.0 - 1.0);
    auto trunk = body_->is_empty() ? feat : body_->forward(feat);
    feat = feat + conv_body_->forward(trunk);
    namespace F = torch::nn::functional;
    for (auto& conv : up_convs_) {
      feat = F::interpolate(feat, F::InterpolateFuncOptions()
                                      .scale_factor(std::vector<double>{2.0, 2.0})
                                      .mode(torch::kNearest));
      feat = detail::lrelu(conv->forward(feat));
    }
    auto out = conv_last_->forward(detail::lrelu(conv_hr_->forward(feat)));
    return (out + 1.0) * 0.5;
  }

  const GeneratorConfig& config() const { return cfg_; }

 private:
  GeneratorConfig cfg_;
  torch::nn::Conv2d conv_first_{nullptr}, conv_body_{nullptr}, conv_hr_{nullptr}, conv_last_{nullptr};
  torch::nn::Sequential body_{nullptr};
  std::vector<torch::nn::Conv2d> up_convs_;
};
TORCH_MODULE(Generator);

/// Runs G on a list of equally sized images.
inline torch::Tensor generator_forward(Generator& g, std::span<const ImageTensor> lr) {
  return g->forward(to_batch(lr));
}

// ---------------------------------------------------------------------------
// Discriminator

struct DiscriminatorConfig {
  int in_channels = 3;
  int input_size = 256;
  int base_channels = 64;
  int n_downsample_stages = 5;
  int max_channels = 512;
  int dense_units = 100;

  bool operator==(const DiscriminatorConfig&) const = default;

  void validate() const {
    if (n_downsample_stages < 1) throw ConfigError("discriminator needs at least one downsampling stage");
    const int reduction = 1 << n_downsample_stages;
    if (input_size < reduction || input_size % reduction != 0)
      throw ConfigError("discriminator input_size " + std::to_string(input_size) + " must be a multiple of 2^" +
                        std::to_string(n_downsample_stages));
    if (base_channels < 1 || dense_units < 1) throw ConfigError("discriminator widths must be positive");
  }

  int final_spatial() const { return input_size >> n_downsample_stages; }
  int stage_channels(int stage) const { return std::min(base_channels << stage, std::max(max_channels, base_channels)); }
};

/// VGG-style classifier: per stage a stride-1 and a stride-2 convolution, then
/// two dense layers. `forward_logits` is the pre-sigmoid score.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const DiscriminatorConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    features_ = register_module("features", torch::nn::Sequential());
    int64_t prev = cfg.in_channels;
    for (int s = 0; s < cfg.n_downsample_stages; ++s) {
      const int64_t c = cfg.stage_channels(s);
      features_->push_back(detail::conv3x3(prev, c, 1));
      features_->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
      features_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 4).stride(2).padding(1)));
      features_->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)));
      prev = c;
    }
    const int64_t flat = prev * cfg.final_spatial() * cfg.final_spatial();
    dense1_ = register_module("dense1", torch::nn::Linear(flat, cfg.dense_units));
    dense2_ = register_module("dense2", torch::nn::Linear(cfg.dense_units, 1));
  }

  torch::Tensor forward_logits(torch::Tensor img) {
    require_nchw(img, "discriminator input");
    if (img.size(2) != cfg_.input_size || img.size(3) != cfg_.input_size)
      throw ShapeError("discriminator expects " + std::to_string(cfg_.input_size) + "x" +
                       std::to_string(cfg_.input_size) + " inputs, got " + std::to_string(img.size(2)) + "x" +
                       std::to_string(img.size(3)));
    if (cfg_.in_channels == 3 && img.size(1) == 1) img = replicate_to_rgb(img);
    if (img.size(1) != cfg_.in_channels)
      throw ChannelError("discriminator expects " + std::to_string(cfg_.in_channels) + " channels");
    auto h = features_->forward(img * 2.0 - 1.0).flatten(1);
    return dense2_->forward(detail::lrelu(dense1_->forward(h))).view({-1});
  }

  /// Probability that each image is real, strictly inside (0, 1) for finite logits.
  torch::Tensor forward(const torch::Tensor& img) { return torch::sigmoid(forward_logits(img)); }

  const DiscriminatorConfig& config() const { return cfg_; }

 private:
  DiscriminatorConfig cfg_;
  torch::nn::Sequential features_{nullptr};
  torch::nn::Linear dense1_{nullptr}, dense2_{nullptr};
};
TORCH_MODULE(Discriminator);

inline torch::Tensor discriminator_forward(Discriminator& d, const torch::Tensor& img) { return d->forward(img); }

// ---------------------------------------------------------------------------
// Perceptual feature extractor

enum class Backbone { vgg19, vgg_tiny };

inline std::string to_string(Backbone b) { return b == Backbone::vgg19 ? "vgg19-imagenet" : "vgg-tiny"; }

inline Backbone parse_backbone(std::string_view s) {
  if (s == "vgg19-imagenet" || s == "vgg19") return Backbone::vgg19;
  if (s == "vgg-tiny") return Backbone::vgg_tiny;
  throw ConfigError("unknown feature backbone '" + std::string(s) + "'");
}

/// Backbone layer table: convolutions per block (blocks are separated by
/// 2x2 max-pools) and the width of each block.
struct BackboneLayout {
  std::vector<int> convs_per_block;
  std::vector<int> widths;
};

inline BackboneLayout backbone_layout(Backbone b) {
  if (b == Backbone::vgg19) return {{2, 2, 4, 4, 4}, {64, 128, 256, 512, 512}};
  return {{1, 1, 2}, {8, 16, 16}};
}

/// Feature tap phi_{i,j}: the j-th convolution before the i-th max-pool.
struct FeatureExtractorSpec {
  Backbone backbone = Backbone::vgg19;
  int pool_index = 5;  // i
  int conv_index = 4;  // j
  bool pre_activation = true;
  std::string weights;  // torchvision-style state dict; empty means seeded init
  uint64_t init_seed = 0;

  bool operator==(const FeatureExtractorSpec&) const = default;

  void validate() const {
    const auto layout = backbone_layout(backbone);
    if (pool_index < 1 || pool_index > static_cast<int>(layout.convs_per_block.size()))
      throw ConfigError("feature tap pool index " + std::to_string(pool_index) + " does not exist in " +
                        to_string(backbone));
    if (conv_index < 1 || conv_index > layout.convs_per_block[pool_index - 1])
      throw ConfigError("feature tap conv index " + std::to_string(conv_index) + " does not exist before pool " +
                        std::to_string(pool_index) + " in " + to_string(backbone));
  }

  /// Number of 2x2 poolings applied before the tap.
  int reduction() const { return 1 << (pool_index - 1); }
  int tap_channels() const { return backbone_layout(backbone).widths[pool_index - 1]; }

  /// Smallest square input the tap can produce at least one feature pixel for.
  int min_input_size() const { return reduction(); }

  static FeatureExtractorSpec tiny() {
    FeatureExtractorSpec s;
    s.backbone = Backbone::vgg_tiny;
    s.pool_index = 2;
    s.conv_index = 1;
    return s;
  }
};

/// Frozen VGG-family network truncated at the configured tap. Convolutions are
/// registered under torchvision's `features.<index>` numbering so that a
/// state dict exported from torchvision loads directly.
class FeatureExtractorImpl : public torch::nn::Module {
 public:
  explicit FeatureExtractorImpl(const FeatureExtractorSpec& spec) : spec_(spec) {
    spec_.validate();
    const auto layout = backbone_layout(spec.backbone);
    int64_t prev = 3;
    int seq_index = 0;
    for (int block = 0; block < spec.pool_index; ++block) {
      const int n = block + 1 == spec.pool_index ? spec.conv_index : layout.convs_per_block[block];
      for (int c = 0; c < n; ++c) {
        auto conv = detail::conv3x3(prev, layout.widths[block]);
        layers_.push_back({register_module("features_" + std::to_string(seq_index), conv), seq_index});
        seq_index += 2;  // conv + relu
        prev = layout.widths[block];
      }
      // Layers of the last block beyond the tap still advance torchvision's numbering.
      if (block + 1 < spec.pool_index) {
        layers_.back().pool_after = true;
        seq_index += 1;
      }
    }
    mean_ = register_buffer("mean", torch::tensor({0.485, 0.456, 0.406}, torch::kFloat32).view({1, 3, 1, 1}));
    std_ = register_buffer("std", torch::tensor({0.229, 0.224, 0.225}, torch::kFloat32).view({1, 3, 1, 1}));

    if (spec.weights.empty()) {
      seeded_init();
    } else {
      load_state_dict_file(spec.weights);
    }
    for (auto& p : parameters()) p.set_requires_grad(false);
    eval();
  }

  /// (N, 3, H, W) unit-range batch -> tap feature maps (N, C_tap, H/r, W/r).
  torch::Tensor forward(const torch::Tensor& img) {
    require_nchw(img, "feature extractor input");
    if (img.size(1) != 3)
      throw ChannelError("feature extractor needs 3-channel input; replicate single-channel images upstream");
    if (img.size(2) < spec_.min_input_size() || img.size(3) < spec_.min_input_size())
      throw ShapeError("feature tap needs inputs of at least " + std::to_string(spec_.min_input_size()) + "x" +
                       std::to_string(spec_.min_input_size()) + " pixels");
    auto h = (img - mean_.to(img.dtype())) / std_.to(img.dtype());
    for (size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i].conv->forward(h);
      const bool is_tap = i + 1 == layers_.size();
      if (is_tap && spec_.pre_activation) break;
      h = torch::relu(h);
      if (layers_[i].pool_after) h = torch::max_pool2d(h, 2, 2);
    }
    return h;
  }

  /// Global average of the tap features: (N, C_tap). Used as the FID embedding.
  torch::Tensor pooled(const torch::Tensor& img) { return forward(img).mean({2, 3}); }

  const FeatureExtractorSpec& spec() const { return spec_; }

 private:
  struct Layer {
    torch::nn::Conv2d conv;
    int torchvision_index;
    bool pool_after = false;
  };

  void seeded_init() {
    torch::NoGradGuard no_grad;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(spec_.init_seed);
    for (auto& l : layers_) {
      const auto fan_in = static_cast<double>(l.conv->weight.size(1) * 9);
      l.conv->weight.copy_(at::normal(0.0, std::sqrt(2.0 / fan_in), l.conv->weight.sizes(), gen));
      l.conv->bias.zero_();
    }
  }

  void load_state_dict_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read feature extractor weights '" + path + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    c10::IValue loaded;
    try {
      loaded = torch::pickle_load(bytes);
    } catch (const c10::Error& e) {
      loaded = c10::IValue();
    }
    // An OrderedDict (what state_dict() returns) does not survive libtorch's unpickler.
    if (!loaded.isGenericDict())
      throw FormatError("'" + path + "' is not a tensor state dict; save it from Python as torch.save(dict(sd), path)");
    const auto dict = loaded.toGenericDict();
    auto lookup = [&](const std::string& key) -> std::optional<torch::Tensor> {
      for (const auto& prefix : {std::string{}, std::string{"features."}}) {
        auto it = dict.find(prefix + key);
        if (it != dict.end()) return it->value().toTensor();
      }
      return std::nullopt;
    };
    torch::NoGradGuard no_grad;
    for (auto& l : layers_) {
      const auto base = std::to_string(l.torchvision_index);
      auto w = lookup(base + ".weight");
      auto b = lookup(base + ".bias");
      if (!w || !b) throw FormatError("'" + path + "' lacks weights for features." + base);
      if (w->sizes() != l.conv->weight.sizes())
        throw FormatError("'" + path + "' features." + base + " has an unexpected shape");
      l.conv->weight.copy_(*w);
      l.conv->bias.copy_(*b);
    }
  }

  FeatureExtractorSpec spec_;
  std::vector<Layer> layers_;
  torch::Tensor mean_, std_;
};
TORCH_MODULE(FeatureExtractor);

inline torch::Tensor extract_features(FeatureExtractor& phi, const torch::Tensor& img) { return phi->forward(img); }

inline int64_t parameter_count(torch::nn::Module& m) {
  int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

}  // namespace semisr

#endif  // SEMISR_MODELS_HPP
