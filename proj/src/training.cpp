#include "cscunet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "cscunet/errors.hpp"
#include "cscunet/optim.hpp"

namespace fs = std::filesystem;

namespace cscunet {

double TrainConfig::initial_lr() const {
  if (lr0) return *lr0;
  return spec.num_classes == 2 ? 1e-5 : 1e-4;
}

void TrainConfig::validate() const {
  spec.validate();
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(initial_lr() > 0.0)) throw ConfigError("lr0 must be > 0");
  if (lr_halving_period < 1) throw ConfigError("lr_halving_period must be >= 1");
}

std::string RunLog::to_csv() const {
  std::string out = std::string(kHeader) + "\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.3f\n", r.epoch, r.lr, r.train_loss,
                  r.val_loss, r.wall_seconds);
    out += buf;
  }
  return out;
}

void RunLog::write_csv(const fs::path& path) const {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << to_csv();
  if (!f) throw DataError("failed writing " + path.string());
}

std::vector<std::size_t> epoch_order(std::vector<std::size_t> indices, std::uint64_t seed,
                                     int epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5u};
  std::mt19937_64 rng(seq);
  std::shuffle(indices.begin(), indices.end(), rng);
  return indices;
}

namespace {

struct Batch {
  Tensor<float> images;
  LabelMap labels;
};

Batch make_batch(const SampleSet& data, std::span<const std::size_t> idx) {
  std::vector<const Image*> images;
  std::vector<const ClassMap*> masks;
  for (std::size_t i : idx) {
    images.push_back(&data.records[i].image);
    masks.push_back(&data.records[i].mask);
  }
  return {images_to_tensor(images), masks_to_labels(masks)};
}

// Mean of per-batch mean losses, eval mode, no graph.
double mean_loss(Model& model, const SampleSet& data, const std::vector<std::size_t>& idx,
                 int batch_size) {
  NoGradGuard guard;
  double total = 0.0;
  int batches = 0;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(batch_size));
    const Batch b = make_batch(data, std::span(idx).subspan(start, end - start));
    const Tensor<float> logits = model.forward(b.images, Mode::eval);
    total += log_softmax_nll(logits, b.labels, data.ignore_index).item();
    ++batches;
  }
  return batches > 0 ? total / batches : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const SampleSet& data, const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.class_count != cfg.spec.num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.class_count) + " classes, model " +
                      std::to_string(cfg.spec.num_classes));
  }
  const auto train_idx = data.indices(Split::train);
  const auto val_idx = data.indices(Split::val);
  if (train_idx.empty()) throw DataError("dataset has no training samples");
  for (std::size_t i : train_idx) {
    const Image& img = data.records[i].image;
    if (img.channels != cfg.spec.in_channels) {
      throw ConfigError("sample " + data.records[i].name + " has " +
                        std::to_string(img.channels) + " channels, model expects " +
                        std::to_string(cfg.spec.in_channels));
    }
  }
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw DataError("cannot create " + cfg.out_dir.string() + ": " + ec.message());

  TrainResult result;
  result.final_checkpoint = cfg.out_dir / "final.ckpt";
  result.best_checkpoint = cfg.out_dir / "best.ckpt";
  result.runlog = cfg.out_dir / "runlog.csv";
  result.best_loss = std::numeric_limits<double>::infinity();

  Model model(cfg.spec, cfg.seed);
  std::vector<Tensor<float>> params = model.parameter_tensors();
  AdamState adam;
  const auto start = std::chrono::steady_clock::now();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = step_decay_lr(cfg.initial_lr(), epoch, cfg.lr_halving_period);
    const auto order = epoch_order(train_idx, cfg.seed, epoch);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
      const std::size_t last =
          std::min(order.size(), first + static_cast<std::size_t>(cfg.batch_size));
      const Batch b = make_batch(data, std::span(order).subspan(first, last - first));
      double loss_value = 0.0;
      try {
        model.zero_grad();
        const Tensor<float> loss =
            log_softmax_nll(model.forward(b.images, Mode::train), b.labels, data.ignore_index);
        loss.backward();
        loss_value = loss.item();
        adam_step(params, adam, lr);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError("epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(batches) + ": " + e.what());
      }
      loss_sum += loss_value;
      ++batches;
    }

    EpochRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = loss_sum / batches;
    row.val_loss = val_idx.empty() ? std::numeric_limits<double>::quiet_NaN()
                                   : mean_loss(model, data, val_idx, cfg.batch_size);
    if (cfg.record_wall_time) {
      row.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    const double selection = val_idx.empty() ? row.train_loss : row.val_loss;
    if (selection < result.best_loss) {
      result.best_loss = selection;
      result.best_epoch = epoch;
      save_checkpoint(model, result.best_checkpoint);
    }
    result.log.rows.push_back(row);
    result.log.write_csv(result.runlog);
    if (on_epoch) on_epoch(row);
  }
  save_checkpoint(model, result.final_checkpoint);
  return result;
}

TrainResult cmd_train(const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  const SampleSet data = load_dataset(cfg.dataset_root, cfg.spec.num_classes, cfg.ignore_index);
  return train(cfg, data, on_epoch);
}

MetricsReport evaluate(Model& model, const SampleSet& data, Split split, int batch_size) {
  NoGradGuard guard;
  const auto idx = data.indices(split);
  ConfusionMatrix cm(model.spec().num_classes);
  for (std::size_t first = 0; first < idx.size(); first += batch_size) {
    const std::size_t last = std::min(idx.size(), first + static_cast<std::size_t>(batch_size));
    const Batch b = make_batch(data, std::span(idx).subspan(first, last - first));
    const auto preds = argmax_classes(model.forward(b.images, Mode::eval));
    for (std::size_t k = 0; k < preds.size(); ++k) {
      cm.add(preds[k], data.records[idx[first + k]].mask, data.ignore_index);
    }
  }
  return report_from_confusion(cm);
}

MetricsReport cmd_eval(const fs::path& checkpoint, const fs::path& dataset_root, Split split,
                       const fs::path& out_csv, std::optional<int> class_count,
                       std::optional<int> ignore_index) {
  Model model = load_checkpoint(checkpoint);
  const int classes = model.spec().num_classes;
  if (class_count && *class_count != classes) {
    throw ConfigError("checkpoint predicts " + std::to_string(classes) +
                      " classes, dataset declared with " + std::to_string(*class_count));
  }
  const SampleSet data = load_dataset(dataset_root, classes, ignore_index);
  MetricsReport report = evaluate(model, data, split);
  const fs::path root = fs::weakly_canonical(dataset_root);
  write_metrics_csv(out_csv, model.spec().display_name(), root.filename().string(), report);
  return report;
}

ClassMap predict_classes(Model& model, const Image& image) {
  NoGradGuard guard;
  const Image* batch[] = {&image};
  return argmax_classes(model.forward(images_to_tensor(batch), Mode::eval)).front();
}

std::vector<fs::path> cmd_predict(const fs::path& checkpoint, const fs::path& images_dir,
                                  const fs::path& out_dir) {
  Model model = load_checkpoint(checkpoint);
  if (!fs::is_directory(images_dir)) throw DataError("missing directory " + images_dir.string());
  std::vector<fs::path> inputs;
  for (const auto& entry : fs::directory_iterator(images_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") {
      inputs.push_back(entry.path());
    }
  }
  std::sort(inputs.begin(), inputs.end());
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<fs::path> written;
  for (const auto& in : inputs) {
    const ClassMap pred = predict_classes(model, read_image(in));
    const fs::path out = out_dir / in.filename();
    write_prediction(pred, default_palette(), out);
    written.push_back(out);
  }
  return written;
}

// --- configuration ------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename V>
V parse_number(const std::string& key, const std::string& value) {
  std::istringstream is(value);
  V v{};
  if (!(is >> v) || !is.eof()) {
    throw ConfigError("config: bad value '" + value + "' for " + key);
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "on" || value == "true" || value == "1") return true;
  if (value == "off" || value == "false" || value == "0") return false;
  throw ConfigError("config: bad boolean '" + value + "' for " + key);
}

}  // namespace

std::map<std::string, std::string> read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::map<std::string, std::string> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    entries[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return entries;
}

void apply_config(TrainConfig& cfg, const std::map<std::string, std::string>& entries) {
  for (const auto& [key, value] : entries) {
    if (key == "variant") {
      cfg.spec.variant = parse_variant(value);
    } else if (key == "encode_unfoldings") {
      cfg.spec.encode_unfoldings = parse_number<int>(key, value);
    } else if (key == "decode_unfoldings") {
      cfg.spec.decode_unfoldings = parse_number<int>(key, value);
    } else if (key == "widths") {
      std::istringstream is(value);
      std::string item;
      std::size_t i = 0;
      while (std::getline(is, item, ',')) {
        if (i >= cfg.spec.widths.size()) throw ConfigError("config: widths needs 5 entries");
        cfg.spec.widths[i++] = parse_number<int>(key, trim(item));
      }
      if (i != cfg.spec.widths.size()) throw ConfigError("config: widths needs 5 entries");
    } else if (key == "in_channels") {
      cfg.spec.in_channels = parse_number<int>(key, value);
    } else if (key == "num_classes") {
      cfg.spec.num_classes = parse_number<int>(key, value);
    } else if (key == "batchnorm") {
      cfg.spec.batchnorm = parse_bool(key, value);
    } else if (key == "epochs") {
      cfg.epochs = parse_number<int>(key, value);
    } else if (key == "batch_size") {
      cfg.batch_size = parse_number<int>(key, value);
    } else if (key == "lr0") {
      cfg.lr0 = parse_number<double>(key, value);
    } else if (key == "lr_halving_period") {
      cfg.lr_halving_period = parse_number<int>(key, value);
    } else if (key == "seed") {
      cfg.seed = parse_number<std::uint64_t>(key, value);
    } else if (key == "dataset") {
      cfg.dataset_root = value;
    } else if (key == "out") {
      cfg.out_dir = value;
    } else if (key == "ignore_index") {
      cfg.ignore_index = parse_number<int>(key, value);
    } else {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }
}

}  // namespace cscunet
