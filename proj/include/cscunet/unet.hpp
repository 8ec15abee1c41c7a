#pragma once

// U-Net and the CSC-Unet family. Every double-conv stage is a two-layer
// CSC block; the variants differ only in unfolding counts, so they share a
// parameter layout and, for equal seeds, identical initial weights.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cscunet/mlcsc.hpp"
#include "cscunet/ops.hpp"
#include "cscunet/tensor.hpp"

namespace cscunet {

enum class Variant { unet, encode, decode, all };

std::string to_string(Variant v);
/// Accepts "unet", "encode", "decode", "all". Throws ConfigError otherwise.
Variant parse_variant(const std::string& name);

struct VariantSpec {
  Variant variant = Variant::unet;
  int encode_unfoldings = 0;
  int decode_unfoldings = 0;
  std::array<int, 5> widths{16, 32, 64, 128, 256};
  int in_channels = 3;
  int num_classes = 2;
  bool batchnorm = true;

  void validate() const;
  /// "U-Net", "CSC-Unet-Encode-2", "CSC-Unet-Decode-1", "CSC-Unet-All-2-1".
  [[nodiscard]] std::string display_name() const;
  /// Unfoldings actually used by encoder and decoder blocks.
  [[nodiscard]] int encoder_k() const;
  [[nodiscard]] int decoder_k() const;

  bool operator==(const VariantSpec&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

/// Running statistics of one batch-norm layer, referenced by name.
struct NamedStats {
  std::string name;
  BatchNormStats<float>* stats;
};

class Model {
 public:
  static constexpr int kStages = 5;

  Model() = default;
  Model(const VariantSpec& spec, std::uint64_t seed);

  /// Logits (N, num_classes, H, W). H and W must be divisible by 16.
  Tensor<float> forward(const Tensor<float>& x, Mode mode);

  [[nodiscard]] const VariantSpec& spec() const { return spec_; }

  /// Every trainable array exactly once, in a fixed order.
  [[nodiscard]] std::vector<NamedTensor> parameters() const;
  [[nodiscard]] std::vector<Tensor<float>> parameter_tensors() const;
  [[nodiscard]] std::vector<NamedStats> batchnorm_stats();
  [[nodiscard]] std::size_t parameter_count() const;
  void zero_grad();

  /// Per-stage blocks, exposed for inspection and tests.
  [[nodiscard]] const std::vector<CscBlock<float>>& encoder() const { return encoder_; }
  [[nodiscard]] const std::vector<CscBlock<float>>& decoder() const { return decoder_; }

 private:
  VariantSpec spec_;
  std::vector<CscBlock<float>> encoder_;    // 5 stages
  std::vector<ConvKernel<float>> upsample_; // 4, deepest first
  std::vector<CscBlock<float>> decoder_;    // 4, deepest first
  ConvKernel<float> classifier_;            // 1x1
};

Model build_model(const VariantSpec& spec, std::uint64_t seed);
Tensor<float> model_forward(Model& model, const Tensor<float>& x, Mode mode);

// --- checkpoints -----------------------------------------------------------
//
// Little-endian layout:
//   magic "CSCUNET\0", u32 version
//   spec: u32 variant, u32 a, u32 b, u32 widths[5], u32 in_channels,
//         u32 num_classes, u32 batchnorm
//   u32 parameter count, then per parameter:
//         u32 name length, name bytes, u32 dims[4], f32 values
//   u32 stats count, then per batch-norm layer and pass:
//         u32 name length, name bytes, u32 channels, f32 mean[], f32 var[]

inline constexpr std::uint32_t kCheckpointVersion = 2;

std::vector<std::uint8_t> serialize_checkpoint(Model& model);
Model deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace cscunet
