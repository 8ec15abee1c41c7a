#include "cscunet/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <set>
#include <sstream>

#include "cscunet/errors.hpp"

namespace fs = std::filesystem;

namespace cscunet {

std::string to_string(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
  }
  return "unknown";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + s + "' (expected train, val or test)");
}

std::vector<std::size_t> SampleSet::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == split) out.push_back(i);
  }
  return out;
}

Image read_image(const fs::path& path) {
  const cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("cannot read image " + path.string());
  Image img{bgr.rows, bgr.cols, 3, std::vector<std::uint8_t>(bgr.total() * 3)};
  for (int r = 0; r < bgr.rows; ++r) {
    const auto* row = bgr.ptr<cv::Vec3b>(r);
    for (int c = 0; c < bgr.cols; ++c) {
      const std::size_t k = (static_cast<std::size_t>(r) * bgr.cols + c) * 3;
      img.pixels[k] = row[c][2];
      img.pixels[k + 1] = row[c][1];
      img.pixels[k + 2] = row[c][0];
    }
  }
  return img;
}

ClassMap read_mask(const fs::path& path) {
  const cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw DataError("cannot read mask " + path.string());
  if (m.type() != CV_8UC1) {
    throw DataError("mask " + path.string() + " must be 8-bit single-channel class indices");
  }
  ClassMap mask{m.rows, m.cols, std::vector<std::uint8_t>(m.total())};
  for (int r = 0; r < m.rows; ++r) {
    std::copy_n(m.ptr<std::uint8_t>(r), m.cols, mask.labels.data() + static_cast<std::size_t>(r) * m.cols);
  }
  return mask;
}

void write_image(const Image& image, const fs::path& path) {
  if (image.channels != 3) throw DataError("write_image expects RGB");
  cv::Mat bgr(image.height, image.width, CV_8UC3);
  for (int r = 0; r < image.height; ++r) {
    auto* row = bgr.ptr<cv::Vec3b>(r);
    for (int c = 0; c < image.width; ++c) {
      const std::size_t k = (static_cast<std::size_t>(r) * image.width + c) * 3;
      row[c] = cv::Vec3b(image.pixels[k + 2], image.pixels[k + 1], image.pixels[k]);
    }
  }
  if (!cv::imwrite(path.string(), bgr)) throw DataError("cannot write image " + path.string());
}

void write_mask(const ClassMap& mask, const fs::path& path) {
  cv::Mat m(mask.height, mask.width, CV_8UC1);
  for (int r = 0; r < mask.height; ++r) {
    std::copy_n(mask.labels.data() + static_cast<std::size_t>(r) * mask.width, mask.width,
                m.ptr<std::uint8_t>(r));
  }
  if (!cv::imwrite(path.string(), m)) throw DataError("cannot write mask " + path.string());
}

namespace {

std::map<std::string, fs::path> png_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("missing directory " + dir.string());
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") {
      out.emplace(entry.path().stem().string(), entry.path());
    }
  }
  return out;
}

}  // namespace

SampleSet load_dataset(const fs::path& root, int class_count, std::optional<int> ignore_index) {
  if (class_count < 2) throw DataError("class_count must be at least 2");
  const auto images = png_files(root / "images");
  const auto masks = png_files(root / "masks");
  for (const auto& [name, path] : images) {
    if (!masks.contains(name)) throw DataError("image " + path.string() + " has no mask");
  }
  for (const auto& [name, path] : masks) {
    if (!images.contains(name)) throw DataError("mask " + path.string() + " has no image");
  }

  const fs::path manifest = root / "split.txt";
  std::ifstream in(manifest);
  if (!in) throw DataError("missing split manifest " + manifest.string());
  std::map<std::string, Split> splits;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string name;
    std::string split;
    if (!(ls >> name >> split)) {
      throw DataError(manifest.string() + ":" + std::to_string(line_no) + ": expected 'NAME split'");
    }
    if (!images.contains(name)) {
      throw DataError(manifest.string() + ":" + std::to_string(line_no) + ": unknown sample '" +
                      name + "'");
    }
    splits[name] = parse_split(split);
  }

  SampleSet set;
  set.class_count = class_count;
  set.ignore_index = ignore_index;
  for (const auto& [name, image_path] : images) {
    const auto split = splits.find(name);
    if (split == splits.end()) {
      throw DataError("sample '" + name + "' is not listed in " + manifest.string());
    }
    Record rec;
    rec.name = name;
    rec.split = split->second;
    rec.image = read_image(image_path);
    const fs::path& mask_path = masks.at(name);
    rec.mask = read_mask(mask_path);
    if (rec.mask.height != rec.image.height || rec.mask.width != rec.image.width) {
      throw DataError("mask " + mask_path.string() + " does not match its image size");
    }
    for (std::uint8_t v : rec.mask.labels) {
      if (ignore_index && v == *ignore_index) continue;
      if (v >= class_count) {
        throw DataError("mask " + mask_path.string() + " contains value " + std::to_string(v) +
                        " but class_count is " + std::to_string(class_count));
      }
    }
    set.records.push_back(std::move(rec));
  }
  return set;
}

std::span<const Color> default_palette() {
  static constexpr std::array<Color, 12> kPalette{{
      {0, 0, 0},
      {255, 255, 255},
      {255, 0, 0},
      {0, 255, 0},
      {0, 0, 255},
      {255, 255, 0},
      {255, 0, 255},
      {0, 255, 255},
      {128, 0, 0},
      {0, 128, 0},
      {0, 0, 128},
      {128, 128, 0},
  }};
  return kPalette;
}

Image colorize(const ClassMap& pred, std::span<const Color> palette) {
  Image img{pred.height, pred.width, 3, std::vector<std::uint8_t>(pred.labels.size() * 3)};
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const std::uint8_t c = pred.labels[i];
    if (c >= palette.size()) {
      throw DataError("class " + std::to_string(c) + " has no palette entry (palette size " +
                      std::to_string(palette.size()) + ")");
    }
    std::copy(palette[c].begin(), palette[c].end(), img.pixels.begin() + 3 * i);
  }
  return img;
}

ClassMap decolorize(const Image& image, std::span<const Color> palette) {
  ClassMap out{image.height, image.width, std::vector<std::uint8_t>(image.pixels.size() / 3)};
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    const Color px{image.pixels[3 * i], image.pixels[3 * i + 1], image.pixels[3 * i + 2]};
    const auto it = std::find(palette.begin(), palette.end(), px);
    if (it == palette.end()) throw DataError("pixel color not in palette");
    out.labels[i] = static_cast<std::uint8_t>(it - palette.begin());
  }
  return out;
}

void write_prediction(const ClassMap& pred, std::span<const Color> palette, const fs::path& out) {
  write_image(colorize(pred, palette), out);
}

Tensor<float> images_to_tensor(std::span<const Image* const> images) {
  if (images.empty()) throw ShapeError("images_to_tensor: empty batch");
  const Image& first = *images.front();
  const Shape s{static_cast<int>(images.size()), first.channels, first.height, first.width};
  std::vector<float> data(s.numel());
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    const Image& img = *images[n];
    if (img.height != s.h || img.width != s.w || img.channels != s.c) {
      throw ShapeError("images_to_tensor: images in a batch must share a size");
    }
    for (int c = 0; c < s.c; ++c) {
      float* dst = data.data() + (static_cast<std::size_t>(n) * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = img.pixels[i * s.c + c] / 255.0f;
    }
  }
  return Tensor<float>(s, std::move(data));
}

LabelMap masks_to_labels(std::span<const ClassMap* const> masks) {
  if (masks.empty()) throw ShapeError("masks_to_labels: empty batch");
  LabelMap out{static_cast<int>(masks.size()), masks.front()->height, masks.front()->width, {}};
  out.labels.reserve(static_cast<std::size_t>(out.n) * out.h * out.w);
  for (const ClassMap* m : masks) {
    if (m->height != out.h || m->width != out.w) {
      throw ShapeError("masks_to_labels: masks in a batch must share a size");
    }
    out.labels.insert(out.labels.end(), m->labels.begin(), m->labels.end());
  }
  return out;
}

std::vector<ClassMap> argmax_classes(const Tensor<float>& logits) {
  const Shape s = logits.shape();
  const std::size_t plane = s.plane();
  std::vector<ClassMap> out;
  for (int n = 0; n < s.n; ++n) {
    ClassMap m{s.h, s.w, std::vector<std::uint8_t>(plane, 0)};
    const float* base = logits.data().data() + static_cast<std::size_t>(n) * s.c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      int best = 0;
      for (int c = 1; c < s.c; ++c) {
        if (base[c * plane + i] > base[best * plane + i]) best = c;
      }
      m.labels[i] = static_cast<std::uint8_t>(best);
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace cscunet
