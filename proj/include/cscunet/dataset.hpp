#pragma once

// Segmentation datasets on disk:
//
//   root/images/NAME.png   8-bit RGB
//   root/masks/NAME.png    8-bit grayscale class indices
//   root/split.txt         "NAME train|val|test" per line
//
// Color-coded masks must be converted to class indices beforehand.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cscunet/ops.hpp"
#include "cscunet/tensor.hpp"

namespace cscunet {

/// Interleaved 8-bit pixels, row-major, RGB order when channels == 3.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;

  bool operator==(const Image&) const = default;
};

/// Per-pixel class indices, row-major.
struct ClassMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  bool operator==(const ClassMap&) const = default;
};

enum class Split { train, val, test };

std::string to_string(Split s);
/// Throws DataError for anything other than train, val, test.
Split parse_split(const std::string& s);

struct Record {
  std::string name;
  Image image;
  ClassMap mask;
  Split split = Split::train;
};

struct SampleSet {
  std::vector<Record> records;
  int class_count = 2;
  std::optional<int> ignore_index;

  /// Indices of records in `split`, in record order.
  [[nodiscard]] std::vector<std::size_t> indices(Split split) const;
};

/// Lexicographic by name. Throws DataError for unpaired files, names missing
/// from split.txt and mask values outside [0, class_count) other than
/// ignore_index; the message names the offending file.
SampleSet load_dataset(const std::filesystem::path& root, int class_count,
                       std::optional<int> ignore_index = std::nullopt);

enum class SyntheticKind { cracks, shapes };

SyntheticKind parse_synthetic_kind(const std::string& s);
int class_count(SyntheticKind kind);

struct SplitCounts {
  int train = 0;
  int val = 0;
  int test = 0;

  /// Two thirds train, one sixth each val and test (300 -> 200/50/50).
  static SplitCounts default_for(int n);
};

/// Draws n image/mask pairs determined entirely by `seed` and writes them in
/// the dataset layout under `out`.
///   cracks: 2 classes, thin random-walk curves (1-3 px) over texture.
///   shapes: 3 classes, disk interiors (1) with 1-px boundaries (2).
SampleSet gen_synthetic(SyntheticKind kind, int n, int size, std::uint64_t seed,
                        const std::filesystem::path& out,
                        std::optional<SplitCounts> splits = std::nullopt);

/// In-memory generation of a single sample (used by gen_synthetic).
Record synthesize_sample(SyntheticKind kind, int size, std::uint64_t seed, std::size_t index);

// --- image io --------------------------------------------------------------

Image read_image(const std::filesystem::path& path);
ClassMap read_mask(const std::filesystem::path& path);
void write_image(const Image& image, const std::filesystem::path& path);
void write_mask(const ClassMap& mask, const std::filesystem::path& path);

// --- predictions -----------------------------------------------------------

using Color = std::array<std::uint8_t, 3>;

/// Fixed RGB palette indexed by class: black, white, red, green, blue,
/// yellow, magenta, cyan, maroon, dark green, navy, olive.
std::span<const Color> default_palette();

Image colorize(const ClassMap& pred, std::span<const Color> palette);
/// Inverse of colorize. Throws DataError for colors outside the palette.
ClassMap decolorize(const Image& image, std::span<const Color> palette);
/// Throws DataError when a class index has no palette entry.
void write_prediction(const ClassMap& pred, std::span<const Color> palette,
                      const std::filesystem::path& out);

// --- tensors ---------------------------------------------------------------

/// Stacks images into (N, C, H, W), scaled to [0, 1]. All images must share
/// a size.
Tensor<float> images_to_tensor(std::span<const Image* const> images);
LabelMap masks_to_labels(std::span<const ClassMap* const> masks);
/// Channel-wise argmax of (N, C, H, W) logits; ties pick the lower class.
std::vector<ClassMap> argmax_classes(const Tensor<float>& logits);

}  // namespace cscunet
