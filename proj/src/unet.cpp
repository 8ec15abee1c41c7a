#include "cscunet/unet.hpp"

#include <cmath>
#include <random>

#include "cscunet/errors.hpp"

namespace cscunet {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::unet:
      return "unet";
    case Variant::encode:
      return "encode";
    case Variant::decode:
      return "decode";
    case Variant::all:
      return "all";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  if (name == "unet") return Variant::unet;
  if (name == "encode") return Variant::encode;
  if (name == "decode") return Variant::decode;
  if (name == "all") return Variant::all;
  throw ConfigError("unknown variant '" + name + "' (expected unet, encode, decode or all)");
}

void VariantSpec::validate() const {
  if (encode_unfoldings < 0 || decode_unfoldings < 0) {
    throw ConfigError("unfolding counts must be >= 0");
  }
  switch (variant) {
    case Variant::unet:
      if (encode_unfoldings != 0 || decode_unfoldings != 0) {
        throw ConfigError("variant unet takes no unfoldings");
      }
      break;
    case Variant::encode:
      if (decode_unfoldings != 0) throw ConfigError("variant encode takes no decode unfoldings");
      break;
    case Variant::decode:
      if (encode_unfoldings != 0) throw ConfigError("variant decode takes no encode unfoldings");
      break;
    case Variant::all:
      break;
  }
  for (int w : widths) {
    if (w < 1) throw ConfigError("channel widths must be positive");
  }
  if (in_channels < 1) throw ConfigError("in_channels must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
}

std::string VariantSpec::display_name() const {
  switch (variant) {
    case Variant::unet:
      return "U-Net";
    case Variant::encode:
      return "CSC-Unet-Encode-" + std::to_string(encode_unfoldings);
    case Variant::decode:
      return "CSC-Unet-Decode-" + std::to_string(decode_unfoldings);
    case Variant::all:
      return "CSC-Unet-All-" + std::to_string(encode_unfoldings) + "-" +
             std::to_string(decode_unfoldings);
  }
  return "unknown";
}

int VariantSpec::encoder_k() const {
  return (variant == Variant::encode || variant == Variant::all) ? encode_unfoldings : 0;
}

int VariantSpec::decoder_k() const {
  return (variant == Variant::decode || variant == Variant::all) ? decode_unfoldings : 0;
}

namespace {

ConvKernel<float> he_kernel(int out_channels, int in_channels, int k, double fan_in,
                            std::mt19937_64& rng) {
  const Shape ws{out_channels, in_channels, k, k};
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
  std::vector<float> w(ws.numel());
  for (auto& v : w) v = static_cast<float>(normal(rng));
  return {Tensor<float>(ws, std::move(w), true), Tensor<float>::zeros({1, out_channels, 1, 1}, true)};
}

}  // namespace

Model::Model(const VariantSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  std::mt19937_64 rng(seed);
  const auto& w = spec_.widths;
  int in = spec_.in_channels;
  for (int s = 0; s < kStages; ++s) {
    encoder_.emplace_back(BlockConfig::uniform(in, w[s], 2, spec_.encoder_k(), spec_.batchnorm),
                          rng);
    in = w[s];
  }
  for (int s = kStages - 2; s >= 0; --s) {
    // Transposed conv from w[s+1] channels down to w[s]; stored as the
    // kernel of the forward conv w[s] -> w[s+1].
    ConvKernel<float> up = he_kernel(w[s + 1], w[s], 3, w[s + 1] * 9.0, rng);
    up.bias = Tensor<float>::zeros({1, w[s], 1, 1}, true);
    upsample_.push_back(std::move(up));
    decoder_.emplace_back(
        BlockConfig::uniform(2 * w[s], w[s], 2, spec_.decoder_k(), spec_.batchnorm), rng);
  }
  classifier_ = he_kernel(spec_.num_classes, w[0], 1, w[0], rng);
}

Tensor<float> Model::forward(const Tensor<float>& x, Mode mode) {
  const Shape xs = x.shape();
  if (xs.h % 16 != 0 || xs.w % 16 != 0) {
    throw ShapeError("spatial dims must be divisible by 16, got " + std::to_string(xs.h) + "x" +
                     std::to_string(xs.w));
  }
  if (xs.c != spec_.in_channels) {
    throw ShapeError("model expects " + std::to_string(spec_.in_channels) +
                     " input channels, got " + std::to_string(xs.c));
  }
  std::vector<Tensor<float>> skips;
  Tensor<float> h = x;
  for (int s = 0; s < kStages; ++s) {
    h = encoder_[s](h, mode);
    if (s + 1 < kStages) {
      skips.push_back(h);
      h = maxpool2d(h);
    }
  }
  for (std::size_t d = 0; d < decoder_.size(); ++d) {
    const Tensor<float>& skip = skips[skips.size() - 1 - d];
    const Tensor<float> up =
        conv_transpose2d(h, upsample_[d].weight, upsample_[d].bias, 2, 1, 1);
    h = decoder_[d](concat_channels(skip, up), mode);
  }
  return conv2d(h, classifier_, 1, 0);
}

std::vector<NamedTensor> Model::parameters() const {
  std::vector<NamedTensor> out;
  auto add_block = [&out](const std::string& prefix, const CscBlock<float>& block) {
    const auto& layers = block.params().layers;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = prefix + ".layer" + std::to_string(i) + ".";
      out.push_back({p + "weight", layers[i].weight});
      out.push_back({p + "step", layers[i].step});
      out.push_back({p + "threshold", layers[i].threshold});
      if (layers[i].bn_gamma.defined()) {
        out.push_back({p + "bn_gamma", layers[i].bn_gamma});
        out.push_back({p + "bn_beta", layers[i].bn_beta});
      }
    }
  };
  for (int s = 0; s < kStages; ++s) add_block("enc" + std::to_string(s), encoder_[s]);
  for (std::size_t d = 0; d < decoder_.size(); ++d) {
    const std::string stage = std::to_string(kStages - 2 - static_cast<int>(d));
    out.push_back({"up" + stage + ".weight", upsample_[d].weight});
    out.push_back({"up" + stage + ".bias", upsample_[d].bias});
    add_block("dec" + stage, decoder_[d]);
  }
  out.push_back({"classifier.weight", classifier_.weight});
  out.push_back({"classifier.bias", classifier_.bias});
  return out;
}

std::vector<Tensor<float>> Model::parameter_tensors() const {
  std::vector<Tensor<float>> out;
  for (auto& p : parameters()) out.push_back(p.tensor);
  return out;
}

std::vector<NamedStats> Model::batchnorm_stats() {
  std::vector<NamedStats> out;
  auto add_block = [&out](const std::string& prefix, CscBlock<float>& block) {
    auto& layers = block.params().layers;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (!layers[i].bn_gamma.defined()) continue;
      const std::string name = prefix + ".layer" + std::to_string(i) + ".bn";
      out.push_back({name, &layers[i].bn_stats});
      for (std::size_t t = 0; t < layers[i].unfold_bn_stats.size(); ++t) {
        out.push_back({name + ".pass" + std::to_string(t + 1), &layers[i].unfold_bn_stats[t]});
      }
    }
  };
  for (int s = 0; s < kStages; ++s) add_block("enc" + std::to_string(s), encoder_[s]);
  for (std::size_t d = 0; d < decoder_.size(); ++d) {
    add_block("dec" + std::to_string(kStages - 2 - static_cast<int>(d)), decoder_[d]);
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

void Model::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

Model build_model(const VariantSpec& spec, std::uint64_t seed) { return Model(spec, seed); }

Tensor<float> model_forward(Model& model, const Tensor<float>& x, Mode mode) {
  return model.forward(x, mode);
}

}  // namespace cscunet
