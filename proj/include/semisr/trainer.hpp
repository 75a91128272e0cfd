#ifndef SEMISR_TRAINER_HPP
#define SEMISR_TRAINER_HPP

// Two-stage training: generator-only L1 warmup, then alternating
// discriminator / generator updates on the full semi-supervised objective.
// Also checkpoints, the fit loop with its logs, and tiled inference.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "semisr/config.hpp"
#include "semisr/datasets.hpp"
#include "semisr/errors.hpp"
#include "semisr/imaging.hpp"
#include "semisr/losses.hpp"
#include "semisr/metrics.hpp"
#include "semisr/models.hpp"

namespace semisr {

inline constexpr const char* kCheckpointFormat = "semisr-checkpoint";
inline constexpr int64_t kCheckpointVersion = 1;

enum class Stage { warmup, adversarial };

inline std::string to_string(Stage s) { return s == Stage::warmup ? "warmup" : "adversarial"; }

inline torch::optim::Adam make_adam(std::vector<torch::Tensor> params, const TrainConfig& t) {
  return torch::optim::Adam(std::move(params),
                            torch::optim::AdamOptions(t.lr_init).betas({t.adam_beta1, t.adam_beta2}));
}

namespace detail {

inline void set_requires_grad(torch::nn::Module& m, bool on) {
  for (auto& p : m.parameters()) p.set_requires_grad(on);
}

inline double scalar(const torch::Tensor& t) { return t.detach().to(torch::kFloat64).item<double>(); }

/// Parts of a configuration that must agree between a checkpoint and the
/// run loading it. Run length, cadences and paths may change on resume.
inline nlohmann::json config_fingerprint(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("fid");
  for (const char* k : {"manifest", "workers", "val_images"}) j["data"].erase(k);
  for (const char* k : {"max_batches", "checkpoint_every", "eval_every", "patience", "out_dir"}) j["trainer"].erase(k);
  return j;
}

inline std::vector<std::string> fingerprint_diff(const nlohmann::json& a, const nlohmann::json& b) {
  std::vector<std::string> out;
  for (const auto& op : nlohmann::json::diff(a, b)) out.push_back(op.at("path").get<std::string>());
  return out;
}

/// Module::load replaces tensors wholesale, so shape drift must be caught here.
inline void load_checked(torch::nn::Module& m, torch::serialize::InputArchive& ar, const std::string& what) {
  std::vector<std::pair<std::string, std::vector<int64_t>>> shapes;
  for (const auto& p : m.named_parameters()) shapes.emplace_back(p.key(), p.value().sizes().vec());
  m.load(ar);
  auto after = m.named_parameters();
  for (const auto& [name, shape] : shapes)
    if (after[name].sizes().vec() != shape) throw CheckpointError(what + " parameter '" + name + "' has a different shape");
}

}  // namespace detail

/// Generator, discriminator, frozen feature extractor, both optimizers and
/// the batch counter. The stage is a function of the counter.
class Trainer {
 public:
  explicit Trainer(RunConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    torch::manual_seed(cfg_.trainer.seed);
    g_ = Generator(cfg_.generator());
    d_ = Discriminator(cfg_.discriminator());
    phi_ = FeatureExtractor(cfg_.model.perceptual);
    opt_g_ = std::make_unique<torch::optim::Adam>(make_adam(g_->parameters(), cfg_.trainer));
    opt_d_ = std::make_unique<torch::optim::Adam>(make_adam(d_->parameters(), cfg_.trainer));
  }

  Trainer(Trainer&&) = default;
  Trainer& operator=(Trainer&&) = default;

  const RunConfig& config() const { return cfg_; }
  int64_t batch_idx() const { return batch_idx_; }
  Stage stage() const { return batch_idx_ < cfg_.trainer.warmup_batches ? Stage::warmup : Stage::adversarial; }
  Generator& generator() { return g_; }
  Discriminator& discriminator() { return d_; }
  FeatureExtractor& feature_extractor() { return phi_; }
  torch::optim::Adam& generator_optimizer() { return *opt_g_; }
  torch::optim::Adam& discriminator_optimizer() { return *opt_d_; }

  /// Where diagnostics of a diverged step are written.
  void set_dump_dir(std::filesystem::path dir) { dump_dir_ = std::move(dir); }

  double current_lr() const {
    const auto& t = cfg_.trainer;
    if (t.lr_decay_every == 0) return t.lr_init;
    return t.lr_init * std::pow(t.lr_decay_gamma, static_cast<double>(batch_idx_ / t.lr_decay_every));
  }

  /// One optimization step on `batch`; returns the scalar value of every term
  /// that took part.
  LossReport step(const SampleBatch& batch) {
    if (batch.n_paired() == 0) throw ConfigError("training steps need paired data");
    const auto& lr = batch.paired_lr;
    const auto& hr = batch.paired_hr;
    set_lr(current_lr());
    g_->train();
    d_->train();
    LossReport r;

    if (stage() == Stage::warmup) {
      auto l1 = l1_pixel(g_->forward(lr), hr);
      r.l1_sup = detail::scalar(l1);
      r.total_g = r.l1_sup;
      guard(r, batch);
      opt_g_->zero_grad();
      l1.backward();
      opt_g_->step();
      ++batch_idx_;
      return r;
    }

    const bool relativistic = cfg_.model.adversarial == AdversarialMode::relativistic;
    const bool unsup = batch.n_unpaired() > 0;
    auto sr = g_->forward(lr);
    torch::Tensor sr_u;
    if (unsup) sr_u = g_->forward(batch.unpaired_lr);

    // Discriminator: real HR against the union of paired and unpaired outputs.
    auto fake = unsup ? torch::cat({sr.detach(), sr_u.detach()}) : sr.detach();
    auto real_logits = d_->forward_logits(hr);
    auto fake_logits = d_->forward_logits(fake);
    auto d_loss = relativistic ? adv_discriminator_relativistic(real_logits, fake_logits)
                               : adv_discriminator_logits(real_logits, fake_logits);
    r.d_loss = detail::scalar(d_loss);
    guard(r, batch);
    opt_d_->zero_grad();
    d_loss.backward();
    opt_d_->step();

    // Generator, scored by the updated discriminator.
    detail::set_requires_grad(*d_, false);
    GeneratorLossTerms t;
    torch::Tensor real_ref;
    if (relativistic) real_ref = d_->forward_logits(hr).detach();
    auto adv = [&](const torch::Tensor& logits) {
      return relativistic ? adv_generator_relativistic(real_ref, logits) : adv_generator_logits(logits);
    };
    t.percep_sup = perceptual(replicate_to_rgb(sr), replicate_to_rgb(hr), phi_);
    t.adv_g_sup = adv(d_->forward_logits(sr));
    t.l1_sup = l1_pixel(sr, hr);
    if (unsup) {
      auto cons = consistency(batch.unpaired_lr, sr_u, cfg_.degradation, phi_);
      t.cons_percep = cons.percep;
      t.adv_g_unsup = adv(d_->forward_logits(sr_u));
      t.cons_l1 = cons.l1;
    }
    auto total = total_generator(t, cfg_.loss_weights);
    r.percep_sup = detail::scalar(t.percep_sup);
    r.adv_g_sup = detail::scalar(t.adv_g_sup);
    r.l1_sup = detail::scalar(t.l1_sup);
    if (unsup) {
      r.cons_percep = detail::scalar(t.cons_percep);
      r.adv_g_unsup = detail::scalar(t.adv_g_unsup);
      r.cons_l1 = detail::scalar(t.cons_l1);
    }
    r.total_g = detail::scalar(total);
    try {
      guard(r, batch);
    } catch (...) {
      detail::set_requires_grad(*d_, true);
      throw;
    }
    opt_g_->zero_grad();
    total.backward();
    opt_g_->step();
    detail::set_requires_grad(*d_, true);
    ++batch_idx_;
    return r;
  }

  /// Writes a checkpoint. `loop_state` is opaque data of the caller (sampler
  /// position, early-stopping bookkeeping) stored alongside.
  void save(const std::filesystem::path& path, const std::string& loop_state = "") const {
    torch::serialize::OutputArchive ar;
    ar.write("format", c10::IValue(std::string(kCheckpointFormat)));
    ar.write("version", c10::IValue(kCheckpointVersion));
    ar.write("config", c10::IValue(to_json(cfg_).dump()));
    ar.write("batch_idx", c10::IValue(batch_idx_));
    ar.write("stage", c10::IValue(to_string(stage())));
    ar.write("loop_state", c10::IValue(loop_state));
    ar.write("torch_rng", at::detail::getDefaultCPUGenerator().get_state(), /*is_buffer=*/true);
    torch::serialize::OutputArchive g, d, og, od;
    g_->save(g);
    d_->save(d);
    opt_g_->save(og);
    opt_d_->save(od);
    ar.write("generator", g);
    ar.write("discriminator", d);
    ar.write("optimizer_g", og);
    ar.write("optimizer_d", od);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    try {
      ar.save_to(tmp.string());
    } catch (const c10::Error& e) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw CheckpointError("cannot write checkpoint '" + path.string() + "': " + e.what_without_backtrace());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw CheckpointError("cannot write checkpoint '" + path.string() + "': " + ec.message());
  }

  /// Restores a checkpoint written by `save` and returns its loop state.
  /// Refuses a checkpoint made under a different model/loss/optimizer
  /// configuration unless `allow_config_mismatch` is set.
  std::string load(const std::filesystem::path& path, bool allow_config_mismatch = false) {
    auto ar = open_checkpoint(path);
    const auto saved = nlohmann::json::parse(read_string(ar, "config", path));
    const auto diff = detail::fingerprint_diff(detail::config_fingerprint(run_config_from_json(saved)),
                                               detail::config_fingerprint(cfg_));
    if (!diff.empty() && !allow_config_mismatch) {
      std::string keys;
      for (const auto& k : diff) keys += (keys.empty() ? "" : ", ") + k;
      throw CheckpointError("checkpoint '" + path.string() + "' was written with a different configuration (" + keys +
                            "); pass the override flag to load it anyway");
    }
    try {
      c10::IValue v;
      ar.read("batch_idx", v);
      const int64_t batch_idx = v.toInt();
      torch::serialize::InputArchive g, d, og, od;
      ar.read("generator", g);
      ar.read("discriminator", d);
      ar.read("optimizer_g", og);
      ar.read("optimizer_d", od);
      detail::load_checked(*g_, g, "generator");
      detail::load_checked(*d_, d, "discriminator");
      opt_g_->load(og);
      opt_d_->load(od);
      torch::Tensor rng;
      ar.read("torch_rng", rng, /*is_buffer=*/true);
      auto gen = at::detail::getDefaultCPUGenerator();
      gen.set_state(rng);
      batch_idx_ = batch_idx;
    } catch (const c10::Error& e) {
      throw CheckpointError("checkpoint '" + path.string() + "' does not fit this model: " + e.what_without_backtrace());
    }
    return read_string(ar, "loop_state", path);
  }

  static torch::serialize::InputArchive open_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::is_regular_file(path)) throw CheckpointError("checkpoint '" + path.string() + "' not found");
    torch::serialize::InputArchive ar;
    try {
      ar.load_from(path.string());
    } catch (const c10::Error& e) {
      throw CheckpointError("cannot read checkpoint '" + path.string() + "': " + e.what_without_backtrace());
    }
    if (read_string(ar, "format", path) != kCheckpointFormat)
      throw CheckpointError("'" + path.string() + "' is not a semisr checkpoint");
    c10::IValue v;
    ar.read("version", v);
    if (v.toInt() != kCheckpointVersion)
      throw CheckpointError("checkpoint '" + path.string() + "' has version " + std::to_string(v.toInt()) +
                            ", expected " + std::to_string(kCheckpointVersion));
    return ar;
  }

  static std::string read_string(torch::serialize::InputArchive& ar, const std::string& key,
                                 const std::filesystem::path& path) {
    c10::IValue v;
    if (!ar.try_read(key, v) || !v.isString())
      throw CheckpointError("checkpoint '" + path.string() + "' lacks '" + key + "'");
    return v.toStringRef();
  }

 private:
  void set_lr(double lr) {
    for (auto* opt : {opt_g_.get(), opt_d_.get()})
      for (auto& group : opt->param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
  }

  /// Aborts the step before any parameter changes if a loss is not finite.
  void guard(const LossReport& r, const SampleBatch& batch) const {
    std::vector<std::string> bad;
    const auto j = to_json(r);
    for (const auto& [k, v] : j.items())
      if (!v.is_null() && !std::isfinite(v.get<double>())) bad.push_back(k);
    if (bad.empty()) return;

    std::string what = "non-finite loss at step " + std::to_string(batch_idx_ + 1) + " (" + to_string(stage()) + "):";
    for (const auto& k : bad) what += " " + k;
    if (!dump_dir_.empty()) {
      try {
        std::filesystem::create_directories(dump_dir_);
        const auto stem = dump_dir_ / ("diverged_step_" + std::to_string(batch_idx_ + 1));
        auto stats = [](const torch::Tensor& t) -> nlohmann::json {
          if (!t.defined()) return nullptr;
          return {{"shape", t.sizes().vec()},
                  {"min", detail::scalar(t.min())},
                  {"max", detail::scalar(t.max())},
                  {"finite", torch::isfinite(t).all().item<bool>()}};
        };
        nlohmann::json dump = {{"step", batch_idx_ + 1},
                               {"stage", to_string(stage())},
                               {"non_finite", bad},
                               {"losses", to_json(r)},
                               {"paired_lr", stats(batch.paired_lr)},
                               {"paired_hr", stats(batch.paired_hr)},
                               {"unpaired_lr", stats(batch.unpaired_lr)}};
        std::ofstream(stem.string() + ".json") << dump.dump(2) << "\n";
        save(stem.string() + ".pt");
        what += "; diagnostics in " + stem.string() + ".json";
      } catch (const std::exception& e) {
        what += std::string("; writing diagnostics failed: ") + e.what();
      }
    }
    throw TrainingDiverged(what);
  }

  RunConfig cfg_;
  Generator g_{nullptr};
  Discriminator d_{nullptr};
  FeatureExtractor phi_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g_, opt_d_;
  int64_t batch_idx_ = 0;
  std::filesystem::path dump_dir_;
};

/// Builds a generator from the configuration stored in a checkpoint and
/// loads its weights.
inline std::pair<Generator, RunConfig> load_generator(const std::filesystem::path& path) {
  auto ar = Trainer::open_checkpoint(path);
  const auto cfg = run_config_from_json(nlohmann::json::parse(Trainer::read_string(ar, "config", path)));
  Generator g(cfg.generator());
  try {
    torch::serialize::InputArchive ga;
    ar.read("generator", ga);
    detail::load_checked(*g, ga, "generator");
  } catch (const c10::Error& e) {
    throw CheckpointError("checkpoint '" + path.string() + "': " + e.what_without_backtrace());
  }
  g->eval();
  return {g, cfg};
}

// ---------------------------------------------------------------------------
// Inference

struct TileOptions {
  int tile = 0;  // LR tile edge in pixels; 0 runs the whole image at once
  int overlap = 8;
};

namespace detail {

inline std::vector<int64_t> tile_starts(int64_t extent, int64_t tile, int64_t overlap) {
  if (tile >= extent) return {0};
  std::vector<int64_t> out;
  const int64_t stride = std::max<int64_t>(1, tile - overlap);
  for (int64_t s = 0;; s += stride) {
    if (s + tile >= extent) {
      out.push_back(extent - tile);
      break;
    }
    out.push_back(s);
  }
  return out;
}

/// Feathering weights along one tile edge: a linear ramp over the overlap.
inline torch::Tensor ramp(int64_t length, int64_t fade) {
  auto x = torch::arange(length, torch::kFloat32) + 0.5;
  if (fade <= 0) return torch::ones({length});
  return torch::minimum(torch::ones({length}), torch::minimum(x, length - x) / static_cast<double>(fade));
}

}  // namespace detail

/// Super-resolves an (N, C, h, w) batch. Large inputs can be processed in
/// overlapping tiles whose outputs are blended with linear feathering.
inline torch::Tensor infer(Generator& g, const torch::Tensor& lr, const TileOptions& tiles = {}) {
  require_nchw(lr, "inference input");
  torch::NoGradGuard no_grad;
  g->eval();
  const int64_t s = g->config().scale;
  const int64_t h = lr.size(2), w = lr.size(3);
  try {
    if (tiles.tile <= 0 || (tiles.tile >= h && tiles.tile >= w)) return g->forward(lr).clamp(0.0, 1.0);
    if (tiles.overlap < 0 || tiles.overlap >= tiles.tile) throw ConfigError("tile overlap must lie in [0, tile)");
    const int64_t th = std::min<int64_t>(tiles.tile, h), tw = std::min<int64_t>(tiles.tile, w);
    auto out = torch::zeros({lr.size(0), g->config().out_channels, h * s, w * s});
    auto weight = torch::zeros({1, 1, h * s, w * s});
    const auto mask = torch::outer(detail::ramp(th * s, tiles.overlap * s), detail::ramp(tw * s, tiles.overlap * s))
                          .view({1, 1, th * s, tw * s});
    for (auto y : detail::tile_starts(h, th, tiles.overlap))
      for (auto x : detail::tile_starts(w, tw, tiles.overlap)) {
        auto sr = g->forward(lr.slice(2, y, y + th).slice(3, x, x + tw));
        using torch::indexing::Slice;
        out.index({Slice(), Slice(), Slice(y * s, (y + th) * s), Slice(x * s, (x + tw) * s)}) += sr * mask;
        weight.index({Slice(), Slice(), Slice(y * s, (y + th) * s), Slice(x * s, (x + tw) * s)}) += mask;
      }
    return (out / weight).clamp(0.0, 1.0);
  } catch (const std::bad_alloc&) {
    throw CapacityError("out of memory super-resolving a " + std::to_string(h) + "x" + std::to_string(w) +
                        " input; enable tiling (e.g. tile = 128)");
  } catch (const c10::Error& e) {
    const std::string msg = e.what_without_backtrace();
    if (msg.find("alloc") != std::string::npos || msg.find("memory") != std::string::npos)
      throw CapacityError("out of memory super-resolving a " + std::to_string(h) + "x" + std::to_string(w) +
                          " input; enable tiling (e.g. tile = 128)");
    throw;
  }
}

inline ImageTensor infer(Generator& g, const ImageTensor& lr, const TileOptions& tiles = {}) {
  auto x = to_batch(std::span<const ImageTensor>(&lr, 1));
  const int64_t in = g->config().in_channels;
  if (x.size(1) == 1 && in == 3) x = replicate_to_rgb(x);
  if (x.size(1) != in)
    throw ChannelError("generator expects " + std::to_string(in) + " channels, image has " +
                       std::to_string(x.size(1)));
  return from_batch(infer(g, x, tiles), 0);
}

/// Mean absolute error of G on held-out pairs.
inline double validation_l1(Generator& g, const torch::Tensor& lr, const torch::Tensor& hr) {
  torch::NoGradGuard no_grad;
  const bool was_training = g->is_training();
  g->eval();
  double total = 0.0;
  const int64_t bs = 8;
  for (int64_t i = 0; i < lr.size(0); i += bs) {
    const int64_t j = std::min(lr.size(0), i + bs);
    total += (g->forward(lr.slice(0, i, j)) - hr.slice(0, i, j)).abs().sum().item<double>();
  }
  g->train(was_training);
  return total / static_cast<double>(hr.numel());
}

// ---------------------------------------------------------------------------
// Fit loop

struct FitOptions {
  std::filesystem::path out_dir;  // empty: the configured trainer.out_dir
  std::filesystem::path resume;
  bool allow_config_mismatch = false;
  std::filesystem::path rescue_dir;  // empty: <tmp>/semisr-rescue
  std::function<void(int64_t step, Stage stage, const LossReport&)> on_step;
  std::ostream* warn = &std::cerr;
};

struct FitResult {
  Trainer state;
  LossReport last;
  bool early_stopped = false;
  std::optional<double> best_fid;
  std::filesystem::path final_checkpoint;
};

/// Output layout under the run directory.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path loss_log() const { return root / "loss_log.jsonl"; }
  std::filesystem::path eval_log() const { return root / "eval_log.jsonl"; }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path checkpoint(int64_t step) const {
    char name[32];
    std::snprintf(name, sizeof name, "step_%08lld.pt", static_cast<long long>(step));
    return checkpoints() / name;
  }
  std::filesystem::path last() const { return checkpoints() / "last.pt"; }
  std::filesystem::path final_checkpoint() const { return checkpoints() / "final.pt"; }
  std::filesystem::path best() const { return checkpoints() / "best.pt"; }
};

inline nlohmann::ordered_json loss_record(int64_t step, Stage stage, const LossReport& r) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["stage"] = to_string(stage);
  const auto terms = to_json(r);
  for (const char* k : {"l1_sup", "percep_sup", "adv_g_sup", "adv_g_unsup", "cons_l1", "cons_percep", "total_g", "d_loss"})
    j[k] = terms.at(k);
  return j;
}

namespace detail {

/// Keeps only loss-log records up to and including `step`.
inline void truncate_log(const std::filesystem::path& path, int64_t step) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      if (nlohmann::json::parse(line).at("step").get<int64_t>() <= step) kept += line + "\n";
    } catch (const nlohmann::json::exception&) {
      break;  // torn last line
    }
  }
  in.close();
  std::ofstream(path, std::ios::trunc) << kept;
}

}  // namespace detail

/// Trains until trainer.max_batches (or an early stop on validation FID),
/// writing the config echo, loss log, periodic and final checkpoints.
inline FitResult fit(const RunConfig& cfg, const SplitManifest& manifest, const FitOptions& opt = {}) {
  cfg.validate();
  if (manifest.scale != cfg.degradation.scale)
    throw ConfigError("manifest scale " + std::to_string(manifest.scale) + " differs from degradation.scale " +
                      std::to_string(cfg.degradation.scale));
  if (manifest.hr_size != cfg.model.discriminator.input_size)
    throw ConfigError("discriminator input_size " + std::to_string(cfg.model.discriminator.input_size) +
                      " must equal the HR patch size " + std::to_string(manifest.hr_size));

  const RunPaths paths{opt.out_dir.empty() ? std::filesystem::path(cfg.trainer.out_dir) : opt.out_dir};
  std::filesystem::create_directories(paths.checkpoints());
  echo_config(cfg, paths.config());

  Trainer trainer(cfg);
  trainer.set_dump_dir(paths.root);
  BatchSampler sampler(manifest, cfg.trainer.batch, cfg.trainer.seed, LoaderOptions{cfg.data.channels, cfg.data.workers});

  std::optional<double> best_fid;
  int bad_evals = 0;
  if (!opt.resume.empty()) {
    const auto loop = nlohmann::json::parse(trainer.load(opt.resume, opt.allow_config_mismatch));
    sampler.load_state(loop.at("sampler").get<std::string>());
    if (!loop.at("best_fid").is_null()) best_fid = loop.at("best_fid").get<double>();
    bad_evals = loop.at("bad_evals").get<int>();
    detail::truncate_log(paths.loss_log(), trainer.batch_idx());
    detail::truncate_log(paths.eval_log(), trainer.batch_idx());
  } else {
    std::ofstream(paths.loss_log(), std::ios::trunc);
    std::ofstream(paths.eval_log(), std::ios::trunc);
  }

  auto loop_state = [&] {
    return nlohmann::json{{"sampler", sampler.save_state()},
                          {"best_fid", best_fid ? nlohmann::json(*best_fid) : nlohmann::json(nullptr)},
                          {"bad_evals", bad_evals}}
        .dump();
  };
  auto checkpoint = [&](const std::filesystem::path& path) {
    try {
      trainer.save(path, loop_state());
    } catch (const std::exception& e) {
      const auto rescue = (opt.rescue_dir.empty() ? std::filesystem::temp_directory_path() / "semisr-rescue" : opt.rescue_dir) /
                          ("step_" + std::to_string(trainer.batch_idx()) + ".pt");
      std::string where = "not saved";
      try {
        trainer.save(rescue, loop_state());
        where = "state preserved in '" + rescue.string() + "'";
      } catch (const std::exception&) {
      }
      throw CheckpointError(std::string(e.what()) + "; " + where);
    }
  };

  // Validation data for FID-based early stopping.
  torch::Tensor val_lr, val_hr;
  std::unique_ptr<FidFeatureNet> fid_net;
  const bool evaluate = cfg.trainer.eval_every > 0 && !manifest.test.empty();
  if (evaluate) {
    std::tie(val_lr, val_hr) = load_test_pairs(manifest, cfg.data.channels, static_cast<size_t>(cfg.data.val_images));
    fid_net = std::make_unique<FidFeatureNet>(cfg.fid.feature_spec());
  }

  std::ofstream loss_log(paths.loss_log(), std::ios::app);
  std::ofstream eval_log(paths.eval_log(), std::ios::app);
  LossReport last;
  bool early_stopped = false;
  while (trainer.batch_idx() < cfg.trainer.max_batches) {
    const Stage stage = trainer.stage();
    last = trainer.step(sampler.next());
    const int64_t step = trainer.batch_idx();
    loss_log << loss_record(step, stage, last).dump() << "\n" << std::flush;
    if (opt.on_step) opt.on_step(step, stage, last);

    if (evaluate && step % cfg.trainer.eval_every == 0) {
      auto sr = infer(trainer.generator(), val_lr);
      trainer.generator()->train();
      const double val_fid = fid(val_hr, sr, *fid_net, nullptr);
      const double val_l1 = (sr - val_hr).abs().mean().item<double>();
      eval_log << nlohmann::ordered_json{{"step", step}, {"val_fid", val_fid}, {"val_l1", val_l1}}.dump() << "\n"
               << std::flush;
      if (!best_fid || val_fid < *best_fid) {
        best_fid = val_fid;
        bad_evals = 0;
        checkpoint(paths.best());
      } else if (++bad_evals >= cfg.trainer.patience) {
        early_stopped = true;
      }
    }
    if (cfg.trainer.checkpoint_every > 0 && step % cfg.trainer.checkpoint_every == 0) {
      checkpoint(paths.checkpoint(step));
      checkpoint(paths.last());
    }
    if (early_stopped) break;
  }
  checkpoint(paths.final_checkpoint());
  checkpoint(paths.last());
  return FitResult{std::move(trainer), last, early_stopped, best_fid, paths.final_checkpoint()};
}

}  // namespace semisr

#endif  // SEMISR_TRAINER_HPP
