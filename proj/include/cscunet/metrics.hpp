#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cscunet/dataset.hpp"

namespace cscunet {

/// Rows are ground truth, columns are predictions.
struct ConfusionMatrix {
  int classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(int class_count = 0)
      : classes(class_count), counts(static_cast<std::size_t>(class_count) * class_count, 0) {}

  std::uint64_t& at(int truth, int pred) {
    return counts[static_cast<std::size_t>(truth) * classes + pred];
  }
  [[nodiscard]] std::uint64_t at(int truth, int pred) const {
    return counts[static_cast<std::size_t>(truth) * classes + pred];
  }
  [[nodiscard]] std::uint64_t total() const;

  /// Tallies one prediction/truth pair. Pixels whose truth equals
  /// ignore_index are skipped. Throws ShapeError on size mismatch and
  /// DataError on out-of-range labels.
  void add(const ClassMap& pred, const ClassMap& truth, std::optional<int> ignore_index);
  void merge(const ConfusionMatrix& other);
};

struct MetricsReport {
  ConfusionMatrix confusion;
  double pixel_acc = 0.0;
  /// Per class; nullopt when the class is absent from both maps.
  std::vector<std::optional<double>> iou;
  /// Mean over classes present in prediction or truth.
  double mean_iou = 0.0;
  /// Mean recall over classes present in the truth.
  double class_avg = 0.0;
};

MetricsReport report_from_confusion(const ConfusionMatrix& confusion);

MetricsReport compute_metrics(const ClassMap& pred, const ClassMap& truth, int class_count,
                              std::optional<int> ignore_index = std::nullopt);

/// "model,dataset,pixel_acc,mean_iou,class_avg,iou_0,...". Absent classes
/// are written as "nan".
std::string metrics_csv_header(int class_count);
std::string metrics_csv_row(const std::string& model, const std::string& dataset,
                            const MetricsReport& report);
void write_metrics_csv(const std::filesystem::path& path, const std::string& model,
                       const std::string& dataset, const MetricsReport& report);

}  // namespace cscunet
