// Command-line front end: dataset synthesis, training runs and benchmark suites.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "spadapt/benchmark.hpp"

namespace fs = std::filesystem;
using namespace spadapt;

namespace {

// Flags mirroring ExperimentConfig; only flags given on the command line
// override the --config file (or the defaults).
struct Overrides {
  std::string config_file;
  std::optional<std::string> name, adaptor, adaptor_init, pool, dtype, pretrained, dataset_path;
  std::optional<std::uint64_t> seed, data_seed, expand_seed;
  std::optional<double> lr, decay, multiplier, alpha;
  std::optional<std::size_t> epochs, batch_size, views, pool_block, k, classes, per_class,
      test_per_class, image_size, class_offset, scratch_multiplier;
  std::vector<std::size_t> milestones, widths;
  std::vector<std::string> transforms;
  bool diversity = false, freeze = false, no_hflip = false, rotations = false, no_scale = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "experiment config (JSON)")->check(CLI::ExistingFile);
    app->add_option("--name", name);
    app->add_option("--seed", seed, "run seed");
    app->add_option("--lr", lr, "base learning rate");
    app->add_option("--epochs", epochs);
    app->add_option("--batch-size", batch_size);
    app->add_option("--milestones", milestones, "epochs at which the lr decays")->delimiter(',');
    app->add_option("--decay", decay, "lr factor at each milestone");
    app->add_option("--adaptor", adaptor, "identity|linear|subset|multilayer|inflate|manual_merge");
    app->add_option("--adaptor-init", adaptor_init, "random|pca|autoencoder");
    app->add_option("--adaptor-lr-multiplier", multiplier);
    app->add_option("--views", views);
    app->add_option("--pool", pool, "max|mean");
    app->add_option("--pool-block", pool_block, "backbone block whose output is pooled");
    app->add_flag("--diversity", diversity, "add the view diversity regularizer");
    app->add_option("--alpha", alpha, "diversity regularizer weight");
    app->add_flag("--no-scale-views", no_scale, "keep lr/epochs when using several views");
    app->add_option("--scratch-epoch-multiplier", scratch_multiplier);
    app->add_flag("--freeze-backbone", freeze, "train only the head and the adaptor");
    app->add_flag("--no-hflip", no_hflip);
    app->add_flag("--rotations", rotations, "random 90 degree rotations");
    app->add_option("--widths", widths, "backbone block widths")->delimiter(',');
    app->add_option("--dtype", dtype, "f32|f64");
    app->add_option("--pretrained", pretrained, "checkpoint for finetune");
    app->add_option("--dataset", dataset_path, "dataset directory written by synth");
    app->add_option("--data-seed", data_seed, "toy dataset seed");
    app->add_option("--classes", classes);
    app->add_option("--per-class", per_class);
    app->add_option("--test-per-class", test_per_class);
    app->add_option("--image-size", image_size);
    app->add_option("--class-offset", class_offset, "first toy class id");
    app->add_option("--k", k, "expand to k channels (0 keeps RGB)");
    app->add_option("--expand-seed", expand_seed);
    app->add_option("--transform", transforms, "permute:a,b,c | grayscale | lowres[:f]")
        ->delimiter(';');
  }

  ExperimentConfig build(RunMode mode) const {
    ExperimentConfig c = config_file.empty() ? ExperimentConfig{} : ExperimentConfig::load(config_file);
    c.mode = mode;
    if (name) c.name = *name;
    if (seed) c.seed = *seed;
    if (lr) c.optimizer.lr = *lr;
    if (epochs) c.optimizer.epochs = *epochs;
    if (batch_size) c.optimizer.batch_size = *batch_size;
    if (!milestones.empty()) c.optimizer.milestones = milestones;
    if (decay) c.optimizer.decay = *decay;
    if (adaptor) c.adaptor.kind = parse_adaptor_kind(*adaptor);
    if (adaptor_init) c.adaptor.init = parse_adaptor_init(*adaptor_init);
    if (multiplier) c.adaptor_lr_multiplier = *multiplier;
    if (views) c.num_views = *views;
    if (pool) c.pool = parse_view_pool(*pool);
    if (pool_block) c.pool_block = *pool_block;
    if (diversity) c.diversity = true;
    if (alpha) c.diversity_cfg.alpha = *alpha;
    if (no_scale) c.scale_views = false;
    if (scratch_multiplier) c.scratch_epoch_multiplier = *scratch_multiplier;
    if (freeze) c.freeze_backbone = true;
    if (no_hflip) c.hflip = false;
    if (rotations) c.rotations = true;
    if (!widths.empty()) c.widths = widths;
    if (dtype) c.dtype = *dtype == "f64" ? DType::f64 : DType::f32;
    if (pretrained) c.pretrained = *pretrained;
    if (dataset_path) c.dataset.path = *dataset_path;
    if (data_seed) c.dataset.toy.seed = *data_seed;
    if (classes) c.dataset.toy.classes = *classes;
    if (per_class) c.dataset.toy.per_class = *per_class;
    if (test_per_class) c.dataset.toy.test_per_class = *test_per_class;
    if (image_size) c.dataset.toy.image_size = *image_size;
    if (class_offset) c.dataset.toy.class_offset = *class_offset;
    if (k) c.dataset.expand_k = *k;
    if (expand_seed) c.dataset.expand_seed = *expand_seed;
    if (!transforms.empty()) c.dataset.transforms = transforms;
    if (dtype && *dtype != "f32" && *dtype != "f64") throw std::invalid_argument("unknown dtype " + *dtype);
    c.validate();
    return c;
  }
};

void print_epoch(std::size_t epoch, const MetricsRecord& r) {
  std::fprintf(stderr, "epoch %3zu  loss %.4f  acc %6.2f%%  %.1fs\n", epoch + 1, r.train_loss.back(),
               r.test_accuracy.back(), r.epoch_seconds.back());
}

void progress(const std::string& msg) { std::fprintf(stderr, "%s\n", msg.c_str()); }

void write_run(const fs::path& out_dir, const MetricsRecord& rec) {
  fs::create_directories(out_dir);
  save_json(out_dir / "metrics.json", rec.to_json());
  std::printf("config %s  final accuracy %.2f%%  (%.1fs)\n", rec.config_hash.c_str(),
              rec.final_accuracy, rec.wall_seconds);
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"spectral adaptors: fine-tune color-pretrained CNNs on k-channel images"};
  app.require_subcommand(1);
  fs::path out_dir = "out";

  auto* synth = app.add_subcommand("synth", "generate a toy dataset (optionally expanded) on disk");
  Overrides synth_o;
  synth_o.attach(synth);
  synth->add_option("--out-dir", out_dir)->required();

  Overrides pre_o, ft_o, sc_o;
  auto* pre = app.add_subcommand("pretrain", "train the 3-channel toy backbone");
  pre_o.attach(pre);
  pre->add_option("--out-dir", out_dir);
  auto* ft = app.add_subcommand("finetune", "fine-tune a pretrained backbone through adaptors");
  ft_o.attach(ft);
  ft->add_option("--out-dir", out_dir);
  auto* sc = app.add_subcommand("scratch", "train a k-channel network from scratch");
  sc_o.attach(sc);
  sc->add_option("--out-dir", out_dir);

  fs::path suite_file;
  auto* bench = app.add_subcommand("bench", "run (or resume) a benchmark suite");
  bench->add_option("--suite", suite_file, "suite config (JSON)")->required()->check(CLI::ExistingFile);
  bench->add_option("--out-dir", out_dir);

  Overrides deg_o;
  fs::path deg_pretrain;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  auto* deg = app.add_subcommand("degrade", "channel permutation and degradation study");
  deg_o.attach(deg);
  deg->add_option("--pretrain-config", deg_pretrain, "config that produces the shared backbone")
      ->check(CLI::ExistingFile);
  deg->add_option("--seeds", seeds)->delimiter(',');
  deg->add_option("--out-dir", out_dir);

  bool degradation_view = false;
  auto* rep = app.add_subcommand("report", "rebuild tables from a results directory");
  rep->add_option("--out-dir", out_dir)->required();
  rep->add_flag("--degradation", degradation_view, "emit the permutation/degradation tables");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      const auto cfg = synth_o.build(RunMode::finetune);
      if (!cfg.dataset.path.empty()) throw std::invalid_argument("synth builds toy data; drop --dataset");
      auto data = resolve_dataset(cfg.dataset);
      write_dataset(out_dir, *data);
      std::printf("wrote %zu train / %zu test images (%zu channels) to %s\n", data->train.size(),
                  data->test.size(), data->channels, out_dir.c_str());
    } else if (pre->parsed()) {
      const auto cfg = pre_o.build(RunMode::pretrain);
      auto res = pretrain(cfg, print_epoch);
      write_run(out_dir, res.metrics);
      save_checkpoint(out_dir / "backbone.ckpt", res.checkpoint);
    } else if (ft->parsed()) {
      const auto cfg = ft_o.build(RunMode::finetune);
      if (cfg.pretrained.empty()) throw std::invalid_argument("finetune needs --pretrained");
      write_run(out_dir, run_experiment(cfg, nullptr, print_epoch));
    } else if (sc->parsed()) {
      const auto cfg = sc_o.build(RunMode::scratch);
      write_run(out_dir, run_experiment(cfg, nullptr, print_epoch));
    } else if (bench->parsed()) {
      const auto suite = SuiteConfig::from_json(load_json(suite_file));
      const auto report = run_benchmark(suite, out_dir, progress);
      std::cout << report.markdown;
      return report.failures.empty() ? 0 : 1;
    } else if (deg->parsed()) {
      auto suite = degradation_suite(deg_o.build(RunMode::finetune), seeds);
      if (!deg_pretrain.empty()) suite.pretrain = ExperimentConfig::load(deg_pretrain);
      if (!suite.pretrain && suite.base.pretrained.empty()) {
        throw std::invalid_argument("degrade needs --pretrained or --pretrain-config");
      }
      const auto report = summarize_degradation(run_benchmark(suite, out_dir, progress));
      std::cout << report.markdown;
      return report.bench.failures.empty() ? 0 : 1;
    } else if (rep->parsed()) {
      auto report = load_report(out_dir);
      const bool ok = report.failures.empty();
      if (degradation_view) {
        std::cout << summarize_degradation(std::move(report)).markdown;
      } else {
        std::cout << report.csv << '\n' << report.markdown;
      }
      return ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
