#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cscunet/dataset.hpp"
#include "cscunet/metrics.hpp"
#include "cscunet/unet.hpp"

namespace cscunet {

struct TrainConfig {
  VariantSpec spec;
  int epochs = 200;
  int batch_size = 4;
  /// When unset: 1e-5 for two-class data, 1e-4 otherwise.
  std::optional<double> lr0;
  int lr_halving_period = 50;
  std::uint64_t seed = 0;
  std::filesystem::path dataset_root;
  std::filesystem::path out_dir = ".";
  std::optional<int> ignore_index;
  /// When false the wall_seconds column is written as 0 so that logs of
  /// identical runs compare byte for byte.
  bool record_wall_time = true;

  [[nodiscard]] double initial_lr() const;
  void validate() const;
};

struct EpochRow {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;  // NaN when there is no validation split
  double wall_seconds = 0.0;
};

struct RunLog {
  std::vector<EpochRow> rows;

  static constexpr const char* kHeader = "epoch,lr,train_loss,val_loss,wall_seconds";
  [[nodiscard]] std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

struct TrainResult {
  RunLog log;
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;
  std::filesystem::path runlog;
  int best_epoch = 0;
  double best_loss = 0.0;
};

using EpochCallback = std::function<void(const EpochRow&)>;

/// Seeded per-epoch shuffle, Adam with step-decayed learning rate, NLL on
/// log-softmax logits. Writes final.ckpt, best.ckpt (lowest validation loss,
/// or training loss without a validation split) and runlog.csv into
/// cfg.out_dir.
TrainResult train(const TrainConfig& cfg, const SampleSet& data, const EpochCallback& on_epoch = {});

/// Loads cfg.dataset_root with the spec's class count, then trains.
TrainResult cmd_train(const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Per-epoch permutation of the training indices.
std::vector<std::size_t> epoch_order(std::vector<std::size_t> indices, std::uint64_t seed, int epoch);

/// Eval-mode inference over one split, confusion matrices merged across
/// images.
MetricsReport evaluate(Model& model, const SampleSet& data, Split split, int batch_size = 4);

/// Checkpoint + dataset -> metrics CSV (dataset column: the root's
/// directory name). Throws ConfigError when `class_count` is given and
/// differs from the checkpoint's; masks are validated against the
/// checkpoint's class count either way.
MetricsReport cmd_eval(const std::filesystem::path& checkpoint,
                       const std::filesystem::path& dataset_root, Split split,
                       const std::filesystem::path& out_csv,
                       std::optional<int> class_count = std::nullopt,
                       std::optional<int> ignore_index = std::nullopt);

ClassMap predict_classes(Model& model, const Image& image);

/// One palette-colored PNG per input PNG, same file name. Returns the
/// written paths in lexicographic order.
std::vector<std::filesystem::path> cmd_predict(const std::filesystem::path& checkpoint,
                                               const std::filesystem::path& images_dir,
                                               const std::filesystem::path& out_dir);

// --- configuration files -----------------------------------------------------
//
// One "key = value" per line, '#' starts a comment. Keys: variant,
// encode_unfoldings, decode_unfoldings, widths (comma separated),
// in_channels, num_classes, batchnorm, epochs, batch_size, lr0,
// lr_halving_period, seed, dataset, out, ignore_index.

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);
/// Throws ConfigError on unknown keys or malformed values.
void apply_config(TrainConfig& cfg, const std::map<std::string, std::string>& entries);

}  // namespace cscunet
