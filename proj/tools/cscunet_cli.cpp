// cscunet: train, evaluate and run CSC-Unet segmentation models.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>

#include "cscunet/dataset.hpp"
#include "cscunet/errors.hpp"
#include "cscunet/metrics.hpp"
#include "cscunet/selftest.hpp"
#include "cscunet/training.hpp"

namespace fs = std::filesystem;
using namespace cscunet;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct TrainFlags {
  std::string config;
  std::string dataset;
  std::string out;
  std::uint64_t seed = 0;
  std::string variant;
  int encode_unfoldings = 0;
  int decode_unfoldings = 0;
  std::vector<int> widths;
  int classes = 2;
  int in_channels = 3;
  std::string batchnorm;
  int epochs = 200;
  int batch_size = 4;
  double lr0 = 1e-4;
  int lr_halving_period = 50;
  int ignore_index = 255;
  bool no_timing = false;
};

void print_report(const MetricsReport& r) {
  std::printf("pixel_acc  %.4f\nmean_iou   %.4f\nclass_avg  %.4f\n", r.pixel_acc, r.mean_iou,
              r.class_avg);
  for (std::size_t c = 0; c < r.iou.size(); ++c) {
    if (r.iou[c]) {
      std::printf("iou[%zu]     %.4f\n", c, *r.iou[c]);
    } else {
      std::printf("iou[%zu]     absent\n", c);
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CSC-Unet: convolutional sparse coding blocks in U-Net segmentation models"};
  app.require_subcommand(1);

  // train
  TrainFlags tf;
  auto* train = app.add_subcommand("train", "Train a model on a dataset directory");
  train->add_option("--config", tf.config, "key = value configuration file")->check(CLI::ExistingFile);
  train->add_option("--dataset", tf.dataset, "Dataset root (images/, masks/, split.txt)");
  train->add_option("--out", tf.out, "Output directory for checkpoints and runlog.csv");
  train->add_option("--seed", tf.seed, "Random seed");
  train->add_option("--variant", tf.variant, "unet | encode | decode | all")
      ->check(CLI::IsMember({"unet", "encode", "decode", "all"}));
  train->add_option("--encode-unfoldings", tf.encode_unfoldings, "Unfoldings a in encoder blocks");
  train->add_option("--decode-unfoldings", tf.decode_unfoldings, "Unfoldings b in decoder blocks");
  train->add_option("--widths", tf.widths, "Five encoder stage widths")->expected(5);
  train->add_option("--classes", tf.classes, "Number of classes");
  train->add_option("--in-channels", tf.in_channels, "Input channels");
  train->add_option("--batchnorm", tf.batchnorm, "on | off")->check(CLI::IsMember({"on", "off"}));
  train->add_option("--epochs", tf.epochs, "Number of epochs");
  train->add_option("--batch-size", tf.batch_size, "Minibatch size");
  train->add_option("--lr0", tf.lr0, "Initial learning rate");
  train->add_option("--lr-halving-period", tf.lr_halving_period, "Epochs between lr halvings");
  train->add_option("--ignore-index", tf.ignore_index, "Mask value excluded from loss and metrics");
  train->add_flag("--no-timing", tf.no_timing, "Write wall_seconds as 0 (reproducible logs)");

  // eval
  std::string eval_ckpt, eval_dataset, eval_out = ".", eval_split = "test";
  std::optional<int> eval_classes;
  std::optional<int> eval_ignore;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--dataset", eval_dataset, "Dataset root")->required();
  eval->add_option("--split", eval_split, "train | val | test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--classes", eval_classes, "Expected class count");
  eval->add_option("--ignore-index", eval_ignore, "Mask value excluded from metrics");
  eval->add_option("--out", eval_out, "Output directory for metrics.csv");
  eval->add_option("--config", tf.config, "Ignored by eval; accepted for symmetry");
  eval->add_option("--seed", tf.seed, "Ignored by eval; accepted for symmetry");

  // predict
  std::string pred_ckpt, pred_images, pred_out = "predictions";
  auto* predict = app.add_subcommand("predict", "Write palette-colored predictions");
  predict->add_option("--checkpoint", pred_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  predict->add_option("--images", pred_images, "Directory of input PNGs")->required();
  predict->add_option("--out", pred_out, "Output directory");
  predict->add_option("--config", tf.config, "Ignored by predict; accepted for symmetry");
  predict->add_option("--seed", tf.seed, "Ignored by predict; accepted for symmetry");

  // gen-synth
  std::string synth_kind = "cracks", synth_out;
  int synth_n = 300, synth_size = 64;
  std::uint64_t synth_seed = 0;
  std::optional<int> synth_train, synth_val, synth_test;
  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic segmentation dataset");
  gen->add_option("--kind", synth_kind, "cracks | shapes")->check(CLI::IsMember({"cracks", "shapes"}));
  gen->add_option("--n", synth_n, "Number of samples");
  gen->add_option("--size", synth_size, "Image side, a multiple of 16");
  gen->add_option("--seed", synth_seed, "Random seed");
  gen->add_option("--out", synth_out, "Output dataset root")->required();
  gen->add_option("--train", synth_train, "Training samples (default 2/3 of n)");
  gen->add_option("--val", synth_val, "Validation samples (default 1/6 of n)");
  gen->add_option("--test", synth_test, "Test samples (default 1/6 of n)");
  gen->add_option("--config", tf.config, "Ignored by gen-synth; accepted for symmetry");

  // selftest
  auto* selftest = app.add_subcommand("selftest", "Run the mathematical self-test suite");
  selftest->add_option("--config", tf.config, "Ignored by selftest; accepted for symmetry");
  selftest->add_option("--seed", tf.seed, "Ignored by selftest; accepted for symmetry");
  selftest->add_option("--out", tf.out, "Ignored by selftest; accepted for symmetry");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train) {
      TrainConfig cfg;
      if (!tf.config.empty()) apply_config(cfg, read_config_file(tf.config));
      if (train->count("--dataset")) cfg.dataset_root = tf.dataset;
      if (train->count("--out")) cfg.out_dir = tf.out;
      if (train->count("--seed")) cfg.seed = tf.seed;
      if (train->count("--variant")) cfg.spec.variant = parse_variant(tf.variant);
      if (train->count("--encode-unfoldings")) cfg.spec.encode_unfoldings = tf.encode_unfoldings;
      if (train->count("--decode-unfoldings")) cfg.spec.decode_unfoldings = tf.decode_unfoldings;
      if (train->count("--widths")) std::copy_n(tf.widths.begin(), 5, cfg.spec.widths.begin());
      if (train->count("--classes")) cfg.spec.num_classes = tf.classes;
      if (train->count("--in-channels")) cfg.spec.in_channels = tf.in_channels;
      if (train->count("--batchnorm")) cfg.spec.batchnorm = tf.batchnorm == "on";
      if (train->count("--epochs")) cfg.epochs = tf.epochs;
      if (train->count("--batch-size")) cfg.batch_size = tf.batch_size;
      if (train->count("--lr0")) cfg.lr0 = tf.lr0;
      if (train->count("--lr-halving-period")) cfg.lr_halving_period = tf.lr_halving_period;
      if (train->count("--ignore-index")) cfg.ignore_index = tf.ignore_index;
      if (tf.no_timing) cfg.record_wall_time = false;
      if (cfg.dataset_root.empty()) {
        std::cerr << "train: --dataset (or 'dataset' in --config) is required\n";
        return kExitUsage;
      }
      std::cerr << "training " << cfg.spec.display_name() << " on " << cfg.dataset_root
                << " for " << cfg.epochs << " epochs, lr0 " << cfg.initial_lr() << '\n';
      const TrainResult r = cmd_train(cfg, [](const EpochRow& row) {
        std::fprintf(stderr, "epoch %3d  lr %.3g  train %.5f  val %.5f  %.1fs\n", row.epoch,
                     row.lr, row.train_loss, row.val_loss, row.wall_seconds);
      });
      std::cout << "final checkpoint " << r.final_checkpoint.string() << '\n'
                << "best checkpoint  " << r.best_checkpoint.string() << " (epoch "
                << r.best_epoch << ")\n"
                << "run log          " << r.runlog.string() << '\n';
      return 0;
    }
    if (*eval) {
      fs::create_directories(eval_out);
      const fs::path csv = fs::path(eval_out) / "metrics.csv";
      const MetricsReport r = cmd_eval(eval_ckpt, eval_dataset, parse_split(eval_split), csv,
                                       eval_classes, eval_ignore);
      print_report(r);
      std::cout << "metrics written to " << csv.string() << '\n';
      return 0;
    }
    if (*predict) {
      const auto written = cmd_predict(pred_ckpt, pred_images, pred_out);
      std::cout << written.size() << " predictions written to " << pred_out << '\n';
      return 0;
    }
    if (*gen) {
      std::optional<SplitCounts> counts;
      if (synth_train || synth_val || synth_test) {
        const SplitCounts d = SplitCounts::default_for(synth_n);
        counts = SplitCounts{synth_train.value_or(d.train), synth_val.value_or(d.val),
                             synth_test.value_or(d.test)};
        if (!gen->count("--n")) synth_n = counts->train + counts->val + counts->test;
      }
      const SampleSet set = gen_synthetic(parse_synthetic_kind(synth_kind), synth_n, synth_size,
                                          synth_seed, synth_out, counts);
      std::cout << set.records.size() << " samples (" << set.class_count << " classes) written to "
                << synth_out << '\n';
      return 0;
    }
    if (*selftest) {
      const SelfTestReport report =
          run_selftest({}, [](const CheckResult& c) { print_check(std::cout, c); });
      const auto failed = report.failures();
      std::cout << (report.checks.size() - failed.size()) << "/" << report.checks.size()
                << " checks passed\n";
      return failed.empty() ? 0 : kExitFailure;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
