#ifndef SEMISR_CONFIG_HPP
#define SEMISR_CONFIG_HPP

// Run configuration: one JSON document with the sections
//   data, degradation, model, loss_weights, trainer, fid
// Parsing is strict: unknown keys and wrongly typed values are errors.
// Precedence, lowest first: built-in defaults, config file, `--set a.b=v`
// overrides, dedicated command-line flags.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "semisr/datasets.hpp"
#include "semisr/errors.hpp"
#include "semisr/imaging.hpp"
#include "semisr/losses.hpp"
#include "semisr/metrics.hpp"
#include "semisr/models.hpp"

namespace semisr {

struct DataConfig {
  std::string manifest;
  int channels = 3;
  int workers = 1;
  int val_images = 0;  // 0: the whole test split

  bool operator==(const DataConfig&) const = default;
};

struct ModelConfig {
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  FeatureExtractorSpec perceptual;
  AdversarialMode adversarial = AdversarialMode::standard;

  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  double lr_init = 2e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  int64_t warmup_batches = 500;
  BatchSpec batch;
  int64_t max_batches = 20000;
  uint64_t seed = 0;
  int64_t checkpoint_every = 1000;
  int64_t lr_decay_every = 0;  // 0: constant learning rate
  double lr_decay_gamma = 0.5;
  int64_t eval_every = 1000;  // 0: no validation FID / early stopping
  int patience = 5;
  std::string out_dir = "runs/semisr";

  void validate() const {
    if (!(lr_init > 0.0)) throw ConfigError("trainer.lr_init must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw ConfigError("Adam betas must lie in [0, 1)");
    if (warmup_batches < 0 || max_batches < 0) throw ConfigError("batch counts must be non-negative");
    if (warmup_batches > max_batches)
      throw ConfigError("trainer.warmup_batches (" + std::to_string(warmup_batches) + ") exceeds max_batches (" +
                        std::to_string(max_batches) + ")");
    if (checkpoint_every < 0 || eval_every < 0 || lr_decay_every < 0) throw ConfigError("cadences must be non-negative");
    if (patience < 1) throw ConfigError("trainer.patience must be at least 1");
    if (!(lr_decay_gamma > 0.0)) throw ConfigError("trainer.lr_decay_gamma must be positive");
  }

  bool operator==(const TrainConfig&) const = default;
};

/// Feature network for validation FID and the `fid` command.
struct FidConfig {
  std::string torchscript;  // takes precedence over the backbone when set
  FeatureExtractorSpec backbone = [] {
    FeatureExtractorSpec s;
    s.pre_activation = false;
    return s;
  }();
  int input_size = 224;
  int batch_size = 16;

  FidFeatureSpec feature_spec() const {
    FidFeatureSpec f = torchscript.empty() ? FidFeatureSpec::from_backbone(backbone, input_size)
                                           : FidFeatureSpec::from_torchscript(torchscript, input_size);
    f.batch_size = batch_size;
    return f;
  }

  bool operator==(const FidConfig&) const = default;
};

struct RunConfig {
  DataConfig data;
  DegradationSpec degradation;
  ModelConfig model;
  LossWeights loss_weights;
  TrainConfig trainer;
  FidConfig fid;

  GeneratorConfig generator() const {
    auto g = model.generator;
    g.scale = degradation.scale;
    return g;
  }

  DiscriminatorConfig discriminator() const {
    auto d = model.discriminator;
    d.in_channels = model.generator.out_channels;
    return d;
  }

  void validate() const {
    degradation.validate();
    generator().validate();
    discriminator().validate();
    model.perceptual.validate();
    loss_weights.validate();
    trainer.validate();
    if (data.channels != 1 && data.channels != 3) throw ConfigError("data.channels must be 1 or 3");
    if (data.channels != model.generator.in_channels)
      throw ConfigError("data.channels must equal model.generator.in_channels");
    if (data.workers < 1) throw ConfigError("data.workers must be at least 1");
    if (trainer.batch.n_sup < 1) throw ConfigError("trainer.n_sup must be at least 1 (warmup is supervised)");
    if (trainer.batch.n_unsup < 0) throw ConfigError("trainer.n_unsup must be non-negative");
  }

  bool operator==(const RunConfig&) const = default;
};

// ---------------------------------------------------------------------------
// JSON mapping

namespace detail {

/// Reads keys from one JSON object and rejects any key it was not asked for.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("'" + path_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      const auto& v = j_.at(key);
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>)
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<int64_t>() < 0) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError("'" + path_ + "." + key + "' has the wrong type (got " + j_.at(key).dump() + ")");
    }
  }

  /// Nested object, or an empty one when the key is missing.
  StrictObject child(const char* key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return StrictObject(j_.contains(key) ? j_.at(key) : empty, path_.empty() ? key : path_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown key '" + (path_.empty() ? k : path_ + "." + k) + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline nlohmann::ordered_json feature_spec_json(const FeatureExtractorSpec& s) {
  return {{"backbone", to_string(s.backbone)}, {"pool_index", s.pool_index},      {"conv_index", s.conv_index},
          {"pre_activation", s.pre_activation}, {"weights", s.weights}, {"init_seed", s.init_seed}};
}

inline void read_feature_spec(StrictObject o, FeatureExtractorSpec& s) {
  std::string backbone = to_string(s.backbone);
  o.get("backbone", backbone);
  s.backbone = parse_backbone(backbone);
  o.get("pool_index", s.pool_index);
  o.get("conv_index", s.conv_index);
  o.get("pre_activation", s.pre_activation);
  o.get("weights", s.weights);
  o.get("init_seed", s.init_seed);
  o.finish();
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  const auto& g = c.model.generator;
  const auto& d = c.model.discriminator;
  const auto& t = c.trainer;
  nlohmann::ordered_json j;
  j["data"] = {{"manifest", c.data.manifest},
               {"channels", c.data.channels},
               {"workers", c.data.workers},
               {"val_images", c.data.val_images}};
  j["degradation"] = {{"scale", c.degradation.scale},
                      {"kernel", to_string(c.degradation.kernel)},
                      {"antialias", c.degradation.antialias}};
  j["model"] = {{"generator",
                 {{"in_channels", g.in_channels},
                  {"out_channels", g.out_channels},
                  {"n_rrdb_blocks", g.n_rrdb_blocks},
                  {"base_channels", g.base_channels},
                  {"growth_channels", g.growth_channels},
                  {"residual_scaling", g.residual_scaling}}},
                {"discriminator",
                 {{"input_size", d.input_size},
                  {"base_channels", d.base_channels},
                  {"n_downsample_stages", d.n_downsample_stages},
                  {"max_channels", d.max_channels},
                  {"dense_units", d.dense_units}}},
                {"perceptual", detail::feature_spec_json(c.model.perceptual)},
                {"adversarial", to_string(c.model.adversarial)}};
  j["loss_weights"] = {{"lambda", c.loss_weights.lambda_sup_adv},
                       {"eta", c.loss_weights.eta_sup_l1},
                       {"alpha", c.loss_weights.alpha_cons_percep},
                       {"gamma", c.loss_weights.gamma_unsup_adv},
                       {"beta", c.loss_weights.beta_cons_l1}};
  j["trainer"] = {{"lr_init", t.lr_init},
                  {"adam_beta1", t.adam_beta1},
                  {"adam_beta2", t.adam_beta2},
                  {"warmup_batches", t.warmup_batches},
                  {"n_sup", t.batch.n_sup},
                  {"n_unsup", t.batch.n_unsup},
                  {"max_batches", t.max_batches},
                  {"seed", t.seed},
                  {"checkpoint_every", t.checkpoint_every},
                  {"lr_decay_every", t.lr_decay_every},
                  {"lr_decay_gamma", t.lr_decay_gamma},
                  {"eval_every", t.eval_every},
                  {"patience", t.patience},
                  {"out_dir", t.out_dir}};
  j["fid"] = {{"torchscript", c.fid.torchscript},
              {"backbone", detail::feature_spec_json(c.fid.backbone)},
              {"input_size", c.fid.input_size},
              {"batch_size", c.fid.batch_size}};
  return j;
}

/// Parses a configuration document on top of the defaults. Does not validate
/// cross-field constraints; call `validate()` for that.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::StrictObject root(j, "");

  auto data = root.child("data");
  data.get("manifest", c.data.manifest);
  data.get("channels", c.data.channels);
  data.get("workers", c.data.workers);
  data.get("val_images", c.data.val_images);
  data.finish();

  auto deg = root.child("degradation");
  deg.get("scale", c.degradation.scale);
  std::string kernel = to_string(c.degradation.kernel);
  deg.get("kernel", kernel);
  c.degradation.kernel = parse_kernel(kernel);
  deg.get("antialias", c.degradation.antialias);
  deg.finish();

  auto model = root.child("model");
  auto gen = model.child("generator");
  auto& g = c.model.generator;
  gen.get("in_channels", g.in_channels);
  gen.get("out_channels", g.out_channels);
  gen.get("n_rrdb_blocks", g.n_rrdb_blocks);
  gen.get("base_channels", g.base_channels);
  gen.get("growth_channels", g.growth_channels);
  gen.get("residual_scaling", g.residual_scaling);
  gen.finish();
  g.scale = c.degradation.scale;
  auto dis = model.child("discriminator");
  auto& d = c.model.discriminator;
  dis.get("input_size", d.input_size);
  dis.get("base_channels", d.base_channels);
  dis.get("n_downsample_stages", d.n_downsample_stages);
  dis.get("max_channels", d.max_channels);
  dis.get("dense_units", d.dense_units);
  dis.finish();
  d.in_channels = g.out_channels;
  detail::read_feature_spec(model.child("perceptual"), c.model.perceptual);
  std::string adversarial = to_string(c.model.adversarial);
  model.get("adversarial", adversarial);
  c.model.adversarial = parse_adversarial_mode(adversarial);
  model.finish();

  auto w = root.child("loss_weights");
  w.get("lambda", c.loss_weights.lambda_sup_adv);
  w.get("eta", c.loss_weights.eta_sup_l1);
  w.get("alpha", c.loss_weights.alpha_cons_percep);
  w.get("gamma", c.loss_weights.gamma_unsup_adv);
  w.get("beta", c.loss_weights.beta_cons_l1);
  w.finish();

  auto tr = root.child("trainer");
  auto& t = c.trainer;
  tr.get("lr_init", t.lr_init);
  tr.get("adam_beta1", t.adam_beta1);
  tr.get("adam_beta2", t.adam_beta2);
  tr.get("warmup_batches", t.warmup_batches);
  tr.get("n_sup", t.batch.n_sup);
  tr.get("n_unsup", t.batch.n_unsup);
  tr.get("max_batches", t.max_batches);
  tr.get("seed", t.seed);
  tr.get("checkpoint_every", t.checkpoint_every);
  tr.get("lr_decay_every", t.lr_decay_every);
  tr.get("lr_decay_gamma", t.lr_decay_gamma);
  tr.get("eval_every", t.eval_every);
  tr.get("patience", t.patience);
  tr.get("out_dir", t.out_dir);
  tr.finish();

  auto fid = root.child("fid");
  fid.get("torchscript", c.fid.torchscript);
  detail::read_feature_spec(fid.child("backbone"), c.fid.backbone);
  fid.get("input_size", c.fid.input_size);
  fid.get("batch_size", c.fid.batch_size);
  fid.finish();

  root.finish();
  return c;
}

/// Applies `section.key=value` (dotted path, value parsed as JSON and
/// otherwise taken as a string) to a configuration document.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  nlohmann::json* node = &j;
  std::istringstream parts(path);
  std::string part, next;
  std::getline(parts, part, '.');
  while (std::getline(parts, next, '.')) {
    if (!node->is_object()) *node = nlohmann::json::object();
    node = &(*node)[part];
    part = next;
  }
  if (!node->is_object()) *node = nlohmann::json::object();
  (*node)[part] = value;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  auto j = path.empty() ? nlohmann::json::object() : read_json_file(path);
  for (const auto& o : overrides) apply_override(j, o);
  return run_config_from_json(j);
}

/// Writes the fully resolved configuration next to the run's outputs.
inline void echo_config(const RunConfig& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config echo '" + path.string() + "'");
  out << to_json(c).dump(2) << "\n";
}

}  // namespace semisr

#endif  // SEMISR_CONFIG_HPP
