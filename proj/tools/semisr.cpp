// semisr: command-line front end.
//
// Every command writes exactly one JSON record to stdout (the result, or an
// error record with a nonzero exit code); human-readable summaries and
// progress go to stderr.

#include <csignal>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "semisr/config.hpp"
#include "semisr/datasets.hpp"
#include "semisr/errors.hpp"
#include "semisr/imaging.hpp"
#include "semisr/metrics.hpp"
#include "semisr/study.hpp"
#include "semisr/trainer.hpp"
#include "semisr/study_server.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace semisr;

namespace {

void emit(ordered_json record) {
  std::cout << record.dump() << std::endl;
}

std::string fixed3(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(3) << v;
  return s.str();
}

ordered_json losses_json(const LossReport& r) {
  ordered_json j;
  const auto all = to_json(r);
  for (const char* k : {"l1_sup", "percep_sup", "adv_g_sup", "adv_g_unsup", "cons_l1", "cons_percep", "total_g", "d_loss"})
    j[k] = all.at(k);
  return j;
}

/// A file, a run directory (its checkpoints/last.pt), or last/best/final
/// inside `run_dir`.
fs::path resolve_checkpoint(const std::string& arg, const fs::path& run_dir = "runs/semisr") {
  fs::path p(arg);
  if (!fs::exists(p) && (arg == "last" || arg == "best" || arg == "final"))
    p = RunPaths{run_dir}.checkpoints() / (arg + ".pt");
  if (fs::is_directory(p)) p = RunPaths{p}.last();
  if (!fs::is_regular_file(p)) throw CheckpointError("checkpoint '" + arg + "' not found");
  return p;
}

// --- split -----------------------------------------------------------------

struct SplitArgs {
  std::string hr, lr, out = "split.jsonl", cache, kernel = "bicubic";
  size_t paired = 500, test = 238;
  std::optional<size_t> unpaired;
  uint64_t seed = 0;
  int hr_size = 256, scale = 4;
};

ordered_json run_split(const SplitArgs& a) {
  SplitOptions opt;
  opt.n_paired = a.paired;
  opt.n_unpaired = a.unpaired;
  opt.n_test = a.test;
  opt.seed = a.seed;
  opt.hr_size = a.hr_size;
  opt.degradation.scale = a.scale;
  opt.degradation.kernel = parse_kernel(a.kernel);
  opt.lr_dir = a.lr;
  const fs::path out(a.out);
  opt.cache_dir = a.cache.empty() ? (out.has_parent_path() ? out.parent_path() : fs::path(".")) / "lr_synth" : fs::path(a.cache);
  const auto m = build_split(a.hr, opt);
  save_manifest(m, out);
  std::cerr << "split      images\n"
            << "paired     " << m.paired.size() << "\n"
            << "unpaired   " << m.unpaired.size() << "\n"
            << "test       " << m.test.size() << "\n";
  return {{"manifest", out.string()},
          {"seed", m.seed},
          {"counts", {{"paired", m.paired.size()}, {"unpaired", m.unpaired.size()}, {"test", m.test.size()}}}};
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config, resume, out, manifest;
  std::vector<std::string> overrides;
  std::optional<int64_t> max_batches;
  std::optional<uint64_t> seed;
  bool allow_mismatch = false;
  int64_t progress_every = 100;
};

ordered_json run_train(const TrainArgs& a) {
  auto cfg = load_run_config(a.config, a.overrides);
  if (!a.out.empty()) cfg.trainer.out_dir = a.out;
  if (!a.manifest.empty()) cfg.data.manifest = a.manifest;
  if (a.max_batches) cfg.trainer.max_batches = *a.max_batches;
  if (a.seed) cfg.trainer.seed = *a.seed;
  cfg.validate();
  if (cfg.data.manifest.empty()) throw ConfigError("no split manifest given (data.manifest or --manifest)");
  const auto manifest = load_manifest(cfg.data.manifest);
  std::cerr << "training with seed " << cfg.trainer.seed << " into " << cfg.trainer.out_dir << "\n";

  FitOptions opt;
  opt.resume = a.resume.empty() ? fs::path() : resolve_checkpoint(a.resume);
  opt.allow_config_mismatch = a.allow_mismatch;
  opt.on_step = [&](int64_t step, Stage stage, const LossReport& r) {
    if (a.progress_every > 0 && step % a.progress_every == 0)
      std::cerr << "step " << step << " [" << to_string(stage) << "] total_g " << r.total_g.value_or(0.0) << "\n";
  };
  auto result = fit(cfg, manifest, opt);
  ordered_json j = {{"out_dir", cfg.trainer.out_dir},
                    {"seed", cfg.trainer.seed},
                    {"batches", result.state.batch_idx()},
                    {"stage", to_string(result.state.stage())},
                    {"final_checkpoint", result.final_checkpoint.string()},
                    {"early_stopped", result.early_stopped},
                    {"final_losses", losses_json(result.last)}};
  j["best_val_fid"] = result.best_fid ? ordered_json(*result.best_fid) : ordered_json(nullptr);
  return j;
}

// --- infer -----------------------------------------------------------------

struct InferArgs {
  std::string ckpt, run = "runs/semisr", in, out;
  int tile = 0, overlap = 8;
};

ordered_json run_infer(const InferArgs& a) {
  auto [g, cfg] = load_generator(resolve_checkpoint(a.ckpt, a.run));
  const TileOptions tiles{a.tile, a.overlap};
  std::vector<std::pair<fs::path, fs::path>> jobs;
  if (fs::is_directory(a.in)) {
    fs::create_directories(a.out);
    for (const auto& f : list_images(a.in)) jobs.emplace_back(f, fs::path(a.out) / (f.stem().string() + ".png"));
  } else {
    jobs.emplace_back(a.in, a.out);
  }
  ordered_json outputs = ordered_json::array();
  for (const auto& [src, dst] : jobs) {
    auto sr = infer(g, load_image(src), tiles);
    save_png(sr, dst);
    outputs.push_back({{"input", src.string()}, {"output", dst.string()}, {"height", sr.height()}, {"width", sr.width()}});
  }
  std::cerr << "wrote " << outputs.size() << " image(s) at x" << cfg.degradation.scale << "\n";
  return {{"scale", cfg.degradation.scale}, {"outputs", outputs}};
}

// --- fid -------------------------------------------------------------------

struct FidArgs {
  std::string real, fake, config, backbone, weights, torchscript;
  std::vector<std::string> overrides;
  std::optional<int> input_size;
  size_t n_max = 0;
};

ordered_json run_fid(const FidArgs& a) {
  auto fc = load_run_config(a.config, a.overrides).fid;
  if (!a.backbone.empty()) {
    if (parse_backbone(a.backbone) == Backbone::vgg_tiny) {
      const auto ci = FidFeatureSpec::ci();
      fc.backbone = *ci.backbone;
      fc.input_size = ci.input_size;
    } else {
      fc.backbone = FidConfig{}.backbone;
    }
  }
  if (!a.weights.empty()) fc.backbone.weights = a.weights;
  if (!a.torchscript.empty()) fc.torchscript = a.torchscript;
  if (a.input_size) fc.input_size = *a.input_size;
  FidFeatureNet net(fc.feature_spec());
  const double value = fid(a.real, a.fake, net, a.n_max, &std::cerr);
  std::cerr << "FID " << value << "\n";
  return {{"fid", value},
          {"real", a.real},
          {"fake", a.fake},
          {"feature_network", fc.torchscript.empty() ? to_string(fc.backbone.backbone) : fc.torchscript}};
}

// --- mos -------------------------------------------------------------------

struct MosArgs {
  std::string ratings, key;
  bool by_method = true;
};

ordered_json run_mos(const MosArgs& a) {
  const auto records = read_ratings(a.ratings);
  std::map<std::string, std::string> labels;
  if (!a.key.empty()) {
    std::ifstream in(a.key);
    if (!in) throw IoError("cannot read method key '" + a.key + "'");
    const auto key = nlohmann::json::parse(in, nullptr, false);
    if (!key.is_object() || !key.contains("methods")) throw FormatError("'" + a.key + "' is not a method key file");
    for (const auto& [id, label] : key.at("methods").items()) labels[id] = label.get<std::string>();
  }
  ordered_json rows = ordered_json::array();
  std::ostringstream table;
  table << std::left << std::setw(24) << "method" << std::right << std::setw(8) << "MOS" << std::setw(8) << "sd"
        << std::setw(7) << "n" << "\n";
  auto add = [&](const MosSummary& s, const std::string& name) {
    table << std::left << std::setw(24) << name << std::right << std::setw(8) << fixed3(s.mean) << std::setw(8)
          << fixed3(s.stddev) << std::setw(7) << s.count << "\n";
    ordered_json row = {{"method_id", s.method_id}, {"mos", fixed3(s.mean)}, {"mean", s.mean},
                        {"stddev", s.stddev},       {"count", s.count}};
    if (labels.count(s.method_id)) row["label"] = labels[s.method_id];
    rows.push_back(row);
  };
  if (a.by_method) {
    for (const auto& s : mos_table(records)) add(s, labels.count(s.method_id) ? labels[s.method_id] : s.method_id);
  } else {
    semisr::detail::check_unique_ratings(records);
    std::vector<int> scores;
    for (const auto& r : records) scores.push_back(r.score);
    add(semisr::detail::summarize("all", scores), "all");
  }
  std::cerr << table.str();
  return {{"ratings", a.ratings}, {"records", records.size()}, {"table", rows}};
}

// --- export-study ----------------------------------------------------------

struct ExportArgs {
  std::vector<std::string> ckpts, baselines;
  std::string manifest, out;
  size_t images = 10;
  uint64_t seed = 0;
  int tile = 0;
};

ordered_json run_export(const ExportArgs& a) {
  const auto manifest = load_manifest(a.manifest);
  std::vector<StudyMethod> methods;
  for (const auto& spec : a.ckpts) {
    // label=path or just path
    const auto eq = spec.find('=');
    const std::string label = eq == std::string::npos ? fs::path(spec).parent_path().parent_path().filename().string() +
                                                            "/" + fs::path(spec).stem().string()
                                                      : spec.substr(0, eq);
    const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
    auto [g, cfg] = load_generator(resolve_checkpoint(path));
    if (cfg.degradation.scale != manifest.scale)
      throw ConfigError("checkpoint '" + path + "' is x" + std::to_string(cfg.degradation.scale) + ", manifest is x" +
                        std::to_string(manifest.scale));
    const int tile = a.tile;
    methods.push_back({label, [g = g, tile](const ImageTensor& lr) mutable { return infer(g, lr, {tile, 8}); }});
  }
  for (const auto& b : a.baselines) {
    if (b != "bicubic") throw ConfigError("unknown baseline '" + b + "' (available: bicubic)");
    const int s = manifest.scale;
    methods.push_back({"bicubic", [s](const ImageTensor& lr) {
                         auto x = to_batch(std::span<const ImageTensor>(&lr, 1));
                         return from_batch(resize_bicubic(x, x.size(2) * s, x.size(3) * s, false).clamp(0, 1), 0);
                       }});
  }
  StudyExportOptions opt;
  opt.seed = a.seed;
  opt.n_images = a.images;
  opt.hr_size = manifest.hr_size;
  opt.scale = manifest.scale;
  const auto bundle = export_study(methods, manifest.test, a.out, opt);
  std::cerr << "study: " << methods.size() << " method(s) x " << bundle.images.size() << " image(s) = "
            << bundle.items.size() << " items\n";
  return {{"bundle", a.out},
          {"seed", a.seed},
          {"methods", methods.size()},
          {"images", bundle.images.size()},
          {"items", bundle.items.size()},
          {"key_file", (fs::path(a.out) / kMethodKeyFile).string()}};
}

// --- serve-study -----------------------------------------------------------

struct ServeArgs {
  std::string bundle, ratings, ui, host = "127.0.0.1";
  int port = 8080;
};

int run_serve(const ServeArgs& a) {
  auto bundle = StudyBundle::load(a.bundle);
  StudyService service(bundle, a.ratings.empty() ? fs::path(a.bundle) / "ratings.jsonl" : fs::path(a.ratings));
  StudyServer server(service, a.ui);

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  const int port = server.bind(a.host, a.port);
  server.start();
  emit({{"ok", true},
        {"command", "serve-study"},
        {"host", a.host},
        {"port", port},
        {"items", bundle.items.size()},
        {"ratings", service.records().size()}});
  int sig = 0;
  sigwait(&signals, &sig);
  server.stop();
  std::cerr << "stopped after signal " << sig << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised single-image super-resolution"};
  app.require_subcommand(1);
  std::string command;

  SplitArgs split;
  auto* c_split = app.add_subcommand("split", "Build a paired/unpaired/test split manifest");
  c_split->add_option("--hr", split.hr, "HR image directory (or a root containing hr/ and lr/)")->required();
  c_split->add_option("--lr", split.lr, "LR directory with the same file names (default: synthesize)");
  c_split->add_option("--paired", split.paired, "Number of paired images")->capture_default_str();
  c_split->add_option("--unpaired", split.unpaired, "Number of unpaired images (default: all remaining)");
  c_split->add_option("--test", split.test, "Images reserved for testing")->capture_default_str();
  c_split->add_option("--seed", split.seed, "Shuffle seed")->capture_default_str();
  c_split->add_option("--hr-size", split.hr_size, "HR patch edge")->capture_default_str();
  c_split->add_option("--scale", split.scale, "Downscaling factor")->capture_default_str();
  c_split->add_option("--kernel", split.kernel, "bicubic, average-pool or nearest")->capture_default_str();
  c_split->add_option("--out", split.out, "Manifest path")->capture_default_str();
  c_split->add_option("--cache", split.cache, "Where synthesized LR images go (default: <out dir>/lr_synth)");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train a generator");
  c_train->add_option("--config", train.config, "JSON run configuration");
  c_train->add_option("--set", train.overrides, "Override a config value: section.key=value (repeatable)");
  c_train->add_option("--resume", train.resume, "Checkpoint file or run directory to resume from");
  c_train->add_option("--out", train.out, "Run directory (trainer.out_dir)");
  c_train->add_option("--manifest", train.manifest, "Split manifest (data.manifest)");
  c_train->add_option("--max-batches", train.max_batches, "trainer.max_batches");
  c_train->add_option("--seed", train.seed, "trainer.seed");
  c_train->add_flag("--allow-config-mismatch", train.allow_mismatch, "Resume from a checkpoint with a different config");
  c_train->add_option("--progress-every", train.progress_every, "Report progress every N batches (0: never)")
      ->capture_default_str();

  TrainArgs shown;
  auto* c_config = app.add_subcommand("config", "Print the resolved run configuration");
  c_config->add_option("--config", shown.config, "JSON run configuration");
  c_config->add_option("--set", shown.overrides, "Override a config value: section.key=value (repeatable)");

  InferArgs inf;
  auto* c_infer = app.add_subcommand("infer", "Super-resolve an image or a directory");
  c_infer->add_option("--ckpt", inf.ckpt, "Checkpoint file, run directory, or last/best/final in --run")->required();
  c_infer->add_option("--run", inf.run, "Run directory for last/best/final")->capture_default_str();
  c_infer->add_option("--in", inf.in, "LR image or directory")->required();
  c_infer->add_option("--out", inf.out, "Output PNG or directory")->required();
  c_infer->add_option("--tile", inf.tile, "LR tile edge (0: whole image)")->capture_default_str();
  c_infer->add_option("--overlap", inf.overlap, "Tile overlap in LR pixels")->capture_default_str();

  FidArgs fid_args;
  auto* c_fid = app.add_subcommand("fid", "Frechet distance between two image directories");
  c_fid->add_option("--real", fid_args.real, "Reference images")->required();
  c_fid->add_option("--fake", fid_args.fake, "Generated images")->required();
  c_fid->add_option("--config", fid_args.config, "Run configuration whose fid section is used");
  c_fid->add_option("--set", fid_args.overrides, "Override a config value (repeatable)");
  c_fid->add_option("--backbone", fid_args.backbone, "vgg19-imagenet or vgg-tiny");
  c_fid->add_option("--weights", fid_args.weights, "Backbone state dict");
  c_fid->add_option("--torchscript", fid_args.torchscript, "TorchScript feature network, e.g. Inception pool3");
  c_fid->add_option("--input-size", fid_args.input_size, "Network input edge");
  c_fid->add_option("--n-max", fid_args.n_max, "Use at most N images per set (0: all)")->capture_default_str();

  MosArgs mos_args;
  auto* c_mos = app.add_subcommand("mos", "Mean opinion scores from a ratings log");
  c_mos->add_option("--ratings", mos_args.ratings, "Ratings file (line-delimited JSON)")->required();
  c_mos->add_flag("--by-method,!--pooled", mos_args.by_method, "One row per method (default) or a pooled row");
  c_mos->add_option("--key", mos_args.key, "Study method key file, to show method labels");

  ExportArgs exp;
  auto* c_export = app.add_subcommand("export-study", "Render a blinded rating-study bundle");
  c_export->add_option("--ckpt", exp.ckpts, "Checkpoint per method, optionally label=path (repeatable)");
  c_export->add_option("--baseline", exp.baselines, "Built-in method: bicubic (repeatable)");
  c_export->add_option("--manifest", exp.manifest, "Split manifest whose test images are used")->required();
  c_export->add_option("--out", exp.out, "Bundle directory")->required();
  c_export->add_option("--images", exp.images, "Number of test images")->capture_default_str();
  c_export->add_option("--seed", exp.seed, "Seed for ids and presentation order")->capture_default_str();
  c_export->add_option("--tile", exp.tile, "Inference tile edge (0: whole image)")->capture_default_str();

  ServeArgs serve;
  auto* c_serve = app.add_subcommand("serve-study", "Serve a study bundle to the rating UI");
  c_serve->add_option("--bundle", serve.bundle, "Bundle directory from export-study")->required();
  c_serve->add_option("--ratings", serve.ratings, "Ratings log (default: <bundle>/ratings.jsonl)");
  c_serve->add_option("--ui", serve.ui, "Static UI directory");
  c_serve->add_option("--host", serve.host, "Bind address")->capture_default_str();
  c_serve->add_option("--port", serve.port, "Port (0: any free port)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << e.what() << "\n";
    emit({{"ok", false}, {"command", nullptr}, {"error", {{"kind", "usage"}, {"message", e.what()}}}});
    return 2;
  }

  const auto* sub = app.get_subcommands().front();
  command = sub->get_name();
  try {
    ordered_json result;
    if (sub == c_split) result = run_split(split);
    else if (sub == c_train) result = run_train(train);
    else if (sub == c_config) {
      auto cfg = load_run_config(shown.config, shown.overrides);
      cfg.validate();
      std::cerr << to_json(cfg).dump(2) << "\n";
      result = {{"config", to_json(cfg)}};
    } else if (sub == c_infer) result = run_infer(inf);
    else if (sub == c_fid) result = run_fid(fid_args);
    else if (sub == c_mos) result = run_mos(mos_args);
    else if (sub == c_export) {
      if (exp.ckpts.empty() && exp.baselines.empty()) throw ConfigError("export-study needs at least one --ckpt or --baseline");
      result = run_export(exp);
    } else if (sub == c_serve) return run_serve(serve);
    ordered_json record = {{"ok", true}, {"command", command}};
    record.update(result);
    emit(record);
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    emit({{"ok", false}, {"command", command}, {"error", {{"kind", e.kind()}, {"message", e.what()}}}});
    return e.kind() == "config" ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    emit({{"ok", false}, {"command", command}, {"error", {{"kind", "internal"}, {"message", e.what()}}}});
    return 1;
  }
}
