#include "cscunet/metrics.hpp"

#include <cstdio>
#include <fstream>

#include "cscunet/errors.hpp"

namespace cscunet {

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

void ConfusionMatrix::add(const ClassMap& pred, const ClassMap& truth,
                          std::optional<int> ignore_index) {
  if (pred.height != truth.height || pred.width != truth.width ||
      pred.labels.size() != truth.labels.size()) {
    throw ShapeError("metrics: prediction and truth sizes differ");
  }
  for (std::size_t i = 0; i < truth.labels.size(); ++i) {
    const int t = truth.labels[i];
    if (ignore_index && t == *ignore_index) continue;
    const int p = pred.labels[i];
    if (t >= classes || p >= classes) {
      throw DataError("metrics: label " + std::to_string(std::max(t, p)) + " outside " +
                      std::to_string(classes) + " classes");
    }
    ++at(t, p);
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes != classes) throw ShapeError("metrics: class count mismatch in merge");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

MetricsReport report_from_confusion(const ConfusionMatrix& confusion) {
  MetricsReport r{confusion, 0.0, {}, 0.0, 0.0};
  const int k = confusion.classes;
  const std::uint64_t total = confusion.total();
  std::uint64_t correct = 0;
  for (int c = 0; c < k; ++c) correct += confusion.at(c, c);
  r.pixel_acc = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;

  double iou_sum = 0.0;
  int iou_n = 0;
  double recall_sum = 0.0;
  int recall_n = 0;
  for (int c = 0; c < k; ++c) {
    std::uint64_t row = 0;
    std::uint64_t col = 0;
    for (int j = 0; j < k; ++j) {
      row += confusion.at(c, j);
      col += confusion.at(j, c);
    }
    const std::uint64_t tp = confusion.at(c, c);
    const std::uint64_t uni = row + col - tp;
    if (uni == 0) {
      r.iou.emplace_back(std::nullopt);
    } else {
      const double v = static_cast<double>(tp) / static_cast<double>(uni);
      r.iou.emplace_back(v);
      iou_sum += v;
      ++iou_n;
    }
    if (row > 0) {
      recall_sum += static_cast<double>(tp) / static_cast<double>(row);
      ++recall_n;
    }
  }
  r.mean_iou = iou_n > 0 ? iou_sum / iou_n : 0.0;
  r.class_avg = recall_n > 0 ? recall_sum / recall_n : 0.0;
  return r;
}

MetricsReport compute_metrics(const ClassMap& pred, const ClassMap& truth, int class_count,
                              std::optional<int> ignore_index) {
  ConfusionMatrix cm(class_count);
  cm.add(pred, truth, ignore_index);
  return report_from_confusion(cm);
}

std::string metrics_csv_header(int class_count) {
  std::string h = "model,dataset,pixel_acc,mean_iou,class_avg";
  for (int c = 0; c < class_count; ++c) h += ",iou_" + std::to_string(c);
  return h;
}

namespace {
std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}
}  // namespace

std::string metrics_csv_row(const std::string& model, const std::string& dataset,
                            const MetricsReport& report) {
  std::string row = model + "," + dataset + "," + fmt(report.pixel_acc) + "," +
                    fmt(report.mean_iou) + "," + fmt(report.class_avg);
  for (const auto& v : report.iou) row += "," + (v ? fmt(*v) : std::string("nan"));
  return row;
}

void write_metrics_csv(const std::filesystem::path& path, const std::string& model,
                       const std::string& dataset, const MetricsReport& report) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f << metrics_csv_header(report.confusion.classes) << '\n'
    << metrics_csv_row(model, dataset, report) << '\n';
  if (!f) throw DataError("failed writing " + path.string());
}

}  // namespace cscunet
