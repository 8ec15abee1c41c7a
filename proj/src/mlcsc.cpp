#include "cscunet/mlcsc.hpp"

#include <cmath>
#include <string>

#include "cscunet/errors.hpp"

namespace cscunet {

void BlockConfig::validate() const {
  if (layers < 1) throw ConfigError("block needs at least one layer");
  if (unfoldings < 0) throw ConfigError("unfolding count must be >= 0");
  if (channels.size() != static_cast<std::size_t>(layers) + 1) {
    throw ConfigError("channel plan must list " + std::to_string(layers + 1) + " entries, got " +
                      std::to_string(channels.size()));
  }
  for (int c : channels) {
    if (c < 1) throw ConfigError("channel counts must be positive");
  }
}

BlockConfig BlockConfig::uniform(int in_channels, int out_channels, int layers, int unfoldings,
                                 bool batchnorm) {
  BlockConfig cfg;
  cfg.layers = layers;
  cfg.unfoldings = unfoldings;
  cfg.batchnorm = batchnorm;
  cfg.channels.assign(static_cast<std::size_t>(layers) + 1, out_channels);
  cfg.channels[0] = in_channels;
  cfg.validate();
  return cfg;
}

template <typename T>
BlockParams<T> BlockParams<T>::init(const BlockConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  BlockParams params;
  for (int i = 1; i <= cfg.layers; ++i) {
    const int cin = cfg.channels[i - 1];
    const int cout = cfg.channels[i];
    const Shape ws{cout, cin, 3, 3};
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / (cin * 9.0)));
    std::vector<T> w(ws.numel());
    for (auto& v : w) v = static_cast<T>(normal(rng));
    LayerParams<T> layer;
    layer.weight = Tensor<T>(ws, std::move(w), true);
    layer.step = Tensor<T>::scalar(T(1), true);
    layer.threshold = Tensor<T>::zeros({1, cout, 1, 1}, true);
    if (cfg.batchnorm) {
      layer.bn_gamma = Tensor<T>::full({1, cout, 1, 1}, T(1), true);
      layer.bn_beta = Tensor<T>::zeros({1, cout, 1, 1}, true);
      layer.bn_stats = BatchNormStats<T>::fresh(cout);
      layer.unfold_bn_stats.assign(cfg.unfoldings, BatchNormStats<T>::fresh(cout));
    }
    params.layers.push_back(std::move(layer));
  }
  return params;
}

template <typename T>
std::vector<Tensor<T>> BlockParams<T>::trainable() const {
  std::vector<Tensor<T>> out;
  for (const auto& layer : layers) {
    out.push_back(layer.weight);
    out.push_back(layer.step);
    out.push_back(layer.threshold);
    if (layer.bn_gamma.defined()) {
      out.push_back(layer.bn_gamma);
      out.push_back(layer.bn_beta);
    }
  }
  return out;
}

template <typename T>
std::size_t BlockParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : trainable()) n += t.numel();
  return n;
}

namespace {

template <typename T>
void check_layers(const BlockConfig& cfg, const BlockParams<T>& params) {
  cfg.validate();
  if (params.layers.size() != static_cast<std::size_t>(cfg.layers)) {
    throw ConfigError("block parameters hold " + std::to_string(params.layers.size()) +
                      " layers, config expects " + std::to_string(cfg.layers));
  }
}

// gamma and beta are shared by all passes; running statistics are kept per
// pass because the code distribution shifts from one unfolding to the next.
template <typename T>
BatchNormStats<T>& pass_stats(LayerParams<T>& layer, int pass, Mode mode) {
  if (pass == 0) return layer.bn_stats;
  auto& extra = layer.unfold_bn_stats;
  if (extra.size() < static_cast<std::size_t>(pass)) {
    if (mode == Mode::eval) {
      throw ConfigError("csc block: no running statistics for unfolding " + std::to_string(pass));
    }
    extra.resize(pass, BatchNormStats<T>::fresh(layer.bn_gamma.shape().c));
  }
  return extra[pass - 1];
}

// relu(bn(z)); z already carries theta.
template <typename T>
Tensor<T> activate(Tensor<T> z, const BlockConfig& cfg, LayerParams<T>& layer, int pass,
                   Mode mode) {
  if (cfg.batchnorm) {
    z = batchnorm2d(z, layer.bn_gamma, layer.bn_beta, pass_stats(layer, pass, mode), mode);
  }
  return relu(z);
}

}  // namespace

template <typename T>
BlockState<T> layered_threshold_forward(const Tensor<T>& y, const BlockConfig& cfg,
                                        BlockParams<T>& params, Mode mode) {
  check_layers(cfg, params);
  if (y.shape().c != cfg.channels[0]) {
    throw ShapeError("csc block: input has " + std::to_string(y.shape().c) +
                     " channels, expected " + std::to_string(cfg.channels[0]));
  }
  BlockState<T> state;
  Tensor<T> prev = y;
  for (auto& layer : params.layers) {
    // mu * conv(x; W) is computed as conv(x; mu * W).
    const Tensor<T> scaled = scale(layer.weight, layer.step);
    prev = activate(conv2d(prev, scaled, layer.threshold, 1, 1), cfg, layer, 0, mode);
    state.codes.push_back(prev);
  }
  return state;
}

template <typename T>
void ml_ista_unfold(const Tensor<T>& y, const BlockConfig& cfg, BlockParams<T>& params,
                    BlockState<T>& state, Mode mode) {
  check_layers(cfg, params);
  if (state.codes.size() != params.layers.size()) {
    throw ShapeError("csc block: state holds the wrong number of codes");
  }
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    auto& layer = params.layers[i];
    const Tensor<T>& below = i == 0 ? y : state.codes[i - 1];
    const Tensor<T>& previous = state.codes[i];
    const Tensor<T> residual =
        sub(conv_transpose2d(previous, layer.weight, Tensor<T>{}, 1, 1, 0), below);
    const Tensor<T> correction =
        conv2d(residual, scale(layer.weight, layer.step), Tensor<T>{}, 1, 1);
    state.codes[i] = activate(add_channel_bias(sub(previous, correction), layer.threshold), cfg,
                              layer, state.pass + 1, mode);
  }
  ++state.pass;
}

template <typename T>
Tensor<T> ml_ista_forward(const Tensor<T>& y, const BlockConfig& cfg, BlockParams<T>& params,
                          Mode mode) {
  BlockState<T> state = layered_threshold_forward(y, cfg, params, mode);
  for (int t = 0; t < cfg.unfoldings; ++t) ml_ista_unfold(y, cfg, params, state, mode);
  return state.codes.back();
}

template <typename T>
Tensor<T> csc_block_forward(const Tensor<T>& x, const BlockConfig& cfg, BlockParams<T>& params,
                            Mode mode) {
  return ml_ista_forward(x, cfg, params, mode);
}

template <typename T>
CscBlock<T>::CscBlock(BlockConfig cfg, std::mt19937_64& rng)
    : config_(std::move(cfg)), params_(BlockParams<T>::init(config_, rng)) {}

template struct BlockParams<float>;
template struct BlockParams<double>;
template class CscBlock<float>;
template class CscBlock<double>;

#define CSCUNET_INSTANTIATE_BLOCK(T)                                                          \
  template BlockState<T> layered_threshold_forward(const Tensor<T>&, const BlockConfig&,      \
                                                   BlockParams<T>&, Mode);                    \
  template void ml_ista_unfold(const Tensor<T>&, const BlockConfig&, BlockParams<T>&,         \
                               BlockState<T>&, Mode);                                         \
  template Tensor<T> ml_ista_forward(const Tensor<T>&, const BlockConfig&, BlockParams<T>&,   \
                                     Mode);                                                   \
  template Tensor<T> csc_block_forward(const Tensor<T>&, const BlockConfig&, BlockParams<T>&, \
                                       Mode);

CSCUNET_INSTANTIATE_BLOCK(float)
CSCUNET_INSTANTIATE_BLOCK(double)

#undef CSCUNET_INSTANTIATE_BLOCK

}  // namespace cscunet
