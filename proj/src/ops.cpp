#include "cscunet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "cscunet/errors.hpp"

namespace cscunet {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  int channels;  // channels of the image side
  int height, width;
  int kh, kw;
  int stride, padding;
  int out_h, out_w;

  [[nodiscard]] std::size_t rows() const { return static_cast<std::size_t>(channels) * kh * kw; }
  [[nodiscard]] std::size_t cols() const { return static_cast<std::size_t>(out_h) * out_w; }
  [[nodiscard]] bool is_pointwise() const {
    return kh == 1 && kw == 1 && stride == 1 && padding == 0;
  }
};

// Output columns ow in [lo, hi) read input column ow * stride - padding + kj
// inside the image.
struct ColumnRange {
  int lo;
  int hi;
};

inline ColumnRange valid_columns(const ConvGeometry& g, int kj) {
  const int offset = kj - g.padding;
  // smallest ow with ow * stride + offset >= 0
  int lo = offset >= 0 ? 0 : (-offset + g.stride - 1) / g.stride;
  // largest ow with ow * stride + offset <= width - 1
  int hi = g.width - 1 - offset < 0 ? 0 : (g.width - 1 - offset) / g.stride + 1;
  lo = std::min(lo, g.out_w);
  hi = std::clamp(hi, lo, g.out_w);
  return {lo, hi};
}

// cols is (channels*kh*kw) x (out_h*out_w), row-major.
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t plane = g.cols();
  std::size_t row = 0;
  for (int c = 0; c < g.channels; ++c) {
    const T* chan = img + static_cast<std::size_t>(c) * g.height * g.width;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj, ++row) {
        T* dst = cols + row * plane;
        const ColumnRange r = valid_columns(g, kj);
        const int offset = kj - g.padding;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + ki;
          T* drow = dst + static_cast<std::size_t>(oh) * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(drow, drow + g.out_w, T(0));
            continue;
          }
          const T* srow = chan + static_cast<std::size_t>(ih) * g.width;
          std::fill(drow, drow + r.lo, T(0));
          if (g.stride == 1) {
            std::copy(srow + r.lo + offset, srow + r.hi + offset, drow + r.lo);
          } else {
            for (int ow = r.lo; ow < r.hi; ++ow) drow[ow] = srow[ow * g.stride + offset];
          }
          std::fill(drow + r.hi, drow + g.out_w, T(0));
        }
      }
    }
  }
}

// Scatter-add of im2col's layout back onto the image.
template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t plane = g.cols();
  std::size_t row = 0;
  for (int c = 0; c < g.channels; ++c) {
    T* chan = img + static_cast<std::size_t>(c) * g.height * g.width;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj, ++row) {
        const T* src = cols + row * plane;
        const ColumnRange r = valid_columns(g, kj);
        const int offset = kj - g.padding;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + ki;
          if (ih < 0 || ih >= g.height) continue;
          const T* srow = src + static_cast<std::size_t>(oh) * g.out_w;
          T* drow = chan + static_cast<std::size_t>(ih) * g.width;
          if (g.stride == 1) {
            T* d = drow + offset;
            for (int ow = r.lo; ow < r.hi; ++ow) d[ow] += srow[ow];
          } else {
            for (int ow = r.lo; ow < r.hi; ++ow) drow[ow * g.stride + offset] += srow[ow];
          }
        }
      }
    }
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

template <typename T>
void require_channel_vector(const Tensor<T>& v, int channels, const char* op, const char* what) {
  const Shape expect{1, channels, 1, 1};
  if (v.shape() != expect) {
    throw ShapeError(std::string(op) + ": " + what + " must have shape " + to_string(expect) +
                     ", got " + to_string(v.shape()));
  }
}

template <typename T>
Node<T>* node_of(const Tensor<T>& t) {
  return t.defined() ? t.node().get() : nullptr;
}

template <typename T>
bool wants_grad(const Node<T>* n) {
  return n != nullptr && n->requires_grad;
}

}  // namespace

int conv_out_size(int in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

int conv_transpose_out_size(int in, int kernel, int stride, int padding, int output_padding) {
  return (in - 1) * stride - 2 * padding + kernel + output_padding;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (xs.c != ws.c) {
    throw ShapeError("conv2d: input has " + std::to_string(xs.c) + " channels, kernel expects " +
                     std::to_string(ws.c));
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: need stride >= 1 and padding >= 0");
  if (bias.defined()) require_channel_vector(bias, ws.n, "conv2d", "bias");
  const int oh = conv_out_size(xs.h, ws.h, stride, padding);
  const int ow = conv_out_size(xs.w, ws.w, stride, padding);
  if (xs.h + 2 * padding < ws.h || xs.w + 2 * padding < ws.w || oh <= 0 || ow <= 0) {
    throw ShapeError("conv2d: kernel larger than padded input " + to_string(xs));
  }
  const ConvGeometry geo{xs.c, xs.h, xs.w, ws.h, ws.w, stride, padding, oh, ow};
  const Shape out_shape{xs.n, ws.n, oh, ow};
  const auto K = static_cast<Eigen::Index>(geo.rows());
  const auto P = static_cast<Eigen::Index>(geo.cols());
  const std::size_t in_stride = static_cast<std::size_t>(xs.c) * xs.h * xs.w;
  const std::size_t out_stride = static_cast<std::size_t>(ws.n) * P;

  Buffer<T> out(out_shape.numel());
  Buffer<T> cols(geo.is_pointwise() ? 0 : geo.rows() * geo.cols());
  ConstMatMap<T> wm(weight.data().data(), ws.n, K);
  const T* bdata = bias.defined() ? bias.data().data() : nullptr;
  for (int n = 0; n < xs.n; ++n) {
    const T* xn = x.data().data() + n * in_stride;
    const T* colp = xn;
    if (!geo.is_pointwise()) {
      im2col(xn, geo, cols.data());
      colp = cols.data();
    }
    MatMap<T> on(out.data() + n * out_stride, ws.n, P);
    on.noalias() = wm * ConstMatMap<T>(colp, K, P);
    if (bdata != nullptr) {
      for (int c = 0; c < ws.n; ++c) on.row(c).array() += bdata[c];
    }
  }

  Node<T>* xn_ = node_of(x);
  Node<T>* wn_ = node_of(weight);
  Node<T>* bn_ = node_of(bias);
  return make_op_result<T>(
      "conv2d", out_shape, std::move(out), {x, weight, bias},
      [=](Node<T>& self) {
        const T* g = self.grad.data();
        Buffer<T> scratch(geo.rows() * geo.cols());
        ConstMatMap<T> wmat(wn_->data.data(), ws.n, K);
        T* gx = wants_grad(xn_) ? xn_->grad_buffer().data() : nullptr;
        T* gw = wants_grad(wn_) ? wn_->grad_buffer().data() : nullptr;
        T* gb = wants_grad(bn_) ? bn_->grad_buffer().data() : nullptr;
        for (int n = 0; n < xs.n; ++n) {
          ConstMatMap<T> gn(g + n * out_stride, ws.n, P);
          if (gx != nullptr) {
            if (geo.is_pointwise()) {
              MatMap<T>(gx + n * in_stride, K, P).noalias() += wmat.transpose() * gn;
            } else {
              MatMap<T>(scratch.data(), K, P).noalias() = wmat.transpose() * gn;
              col2im_add(scratch.data(), geo, gx + n * in_stride);
            }
          }
          if (gw != nullptr) {
            const T* xdata = xn_->data.data() + n * in_stride;
            const T* colp = xdata;
            if (!geo.is_pointwise()) {
              im2col(xdata, geo, scratch.data());
              colp = scratch.data();
            }
            MatMap<T>(gw, ws.n, K).noalias() += gn * ConstMatMap<T>(colp, K, P).transpose();
          }
          if (gb != nullptr) {
            for (int c = 0; c < ws.n; ++c) gb[c] += gn.row(c).sum();
          }
        }
      });
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, int padding, int output_padding) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (xs.c != ws.n) {
    throw ShapeError("conv_transpose2d: input has " + std::to_string(xs.c) +
                     " channels, kernel out_channels is " + std::to_string(ws.n));
  }
  if (stride < 1 || padding < 0 || output_padding < 0 || output_padding >= stride) {
    throw ShapeError("conv_transpose2d: need stride >= 1, padding >= 0, 0 <= output_padding < stride");
  }
  if (bias.defined()) require_channel_vector(bias, ws.c, "conv_transpose2d", "bias");
  const int oh = conv_transpose_out_size(xs.h, ws.h, stride, padding, output_padding);
  const int ow = conv_transpose_out_size(xs.w, ws.w, stride, padding, output_padding);
  if (oh <= 0 || ow <= 0) {
    throw ShapeError("conv_transpose2d: non-positive output dims for input " + to_string(xs));
  }
  // Geometry of the forward conv that this op is the adjoint of.
  const ConvGeometry geo{ws.c, oh, ow, ws.h, ws.w, stride, padding, xs.h, xs.w};
  const Shape out_shape{xs.n, ws.c, oh, ow};
  const auto K = static_cast<Eigen::Index>(geo.rows());
  const auto P = static_cast<Eigen::Index>(geo.cols());
  const std::size_t in_stride = static_cast<std::size_t>(xs.c) * P;
  const std::size_t out_stride = static_cast<std::size_t>(ws.c) * oh * ow;

  Buffer<T> out(out_shape.numel(), T(0));
  Buffer<T> cols(geo.rows() * geo.cols());
  ConstMatMap<T> wm(weight.data().data(), ws.n, K);
  const T* bdata = bias.defined() ? bias.data().data() : nullptr;
  for (int n = 0; n < xs.n; ++n) {
    ConstMatMap<T> xm(x.data().data() + n * in_stride, ws.n, P);
    T* on = out.data() + n * out_stride;
    if (geo.is_pointwise()) {
      MatMap<T>(on, K, P).noalias() = wm.transpose() * xm;
    } else {
      MatMap<T>(cols.data(), K, P).noalias() = wm.transpose() * xm;
      col2im_add(cols.data(), geo, on);
    }
    if (bdata != nullptr) {
      for (int c = 0; c < ws.c; ++c) {
        T* plane = on + static_cast<std::size_t>(c) * oh * ow;
        for (int i = 0; i < oh * ow; ++i) plane[i] += bdata[c];
      }
    }
  }

  Node<T>* xn_ = node_of(x);
  Node<T>* wn_ = node_of(weight);
  Node<T>* bn_ = node_of(bias);
  return make_op_result<T>(
      "conv_transpose2d", out_shape, std::move(out), {x, weight, bias},
      [=](Node<T>& self) {
        const T* g = self.grad.data();
        Buffer<T> scratch(geo.is_pointwise() ? 0 : geo.rows() * geo.cols());
        ConstMatMap<T> wmat(wn_->data.data(), ws.n, K);
        T* gx = wants_grad(xn_) ? xn_->grad_buffer().data() : nullptr;
        T* gw = wants_grad(wn_) ? wn_->grad_buffer().data() : nullptr;
        T* gb = wants_grad(bn_) ? bn_->grad_buffer().data() : nullptr;
        for (int n = 0; n < xs.n; ++n) {
          const T* gn = g + n * out_stride;
          const T* colp = gn;
          if ((gx != nullptr || gw != nullptr) && !geo.is_pointwise()) {
            im2col(gn, geo, scratch.data());
            colp = scratch.data();
          }
          ConstMatMap<T> gcols(colp, K, P);
          if (gx != nullptr) {
            MatMap<T>(gx + n * in_stride, ws.n, P).noalias() += wmat * gcols;
          }
          if (gw != nullptr) {
            ConstMatMap<T> xm(xn_->data.data() + n * in_stride, ws.n, P);
            MatMap<T>(gw, ws.n, K).noalias() += xm * gcols.transpose();
          }
          if (gb != nullptr) {
            for (int c = 0; c < ws.c; ++c) {
              const T* plane = gn + static_cast<std::size_t>(c) * oh * ow;
              T acc = T(0);
              for (int i = 0; i < oh * ow; ++i) acc += plane[i];
              gb[c] += acc;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
  const Shape xs = x.shape();
  if (xs.h % 2 != 0 || xs.w % 2 != 0) {
    throw ShapeError("maxpool2d: spatial dims must be even, got " + to_string(xs));
  }
  const Shape out_shape{xs.n, xs.c, xs.h / 2, xs.w / 2};
  Buffer<T> out(out_shape.numel());
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out_shape.numel());
  const T* in = x.data().data();
  std::size_t o = 0;
  for (int nc = 0; nc < xs.n * xs.c; ++nc) {
    const std::size_t base = static_cast<std::size_t>(nc) * xs.h * xs.w;
    for (int i = 0; i < out_shape.h; ++i) {
      for (int j = 0; j < out_shape.w; ++j, ++o) {
        const std::size_t r0 = base + static_cast<std::size_t>(2 * i) * xs.w + 2 * j;
        const std::size_t cand[4] = {r0, r0 + 1, r0 + xs.w, r0 + xs.w + 1};
        std::size_t best = cand[0];
        for (int k = 1; k < 4; ++k) {
          if (in[cand[k]] > in[best]) best = cand[k];
        }
        out[o] = in[best];
        (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  Node<T>* xn_ = node_of(x);
  return make_op_result<T>("maxpool2d", out_shape, std::move(out), {x},
                           [xn_, argmax](Node<T>& self) {
                             T* gx = xn_->grad_buffer().data();
                             for (std::size_t k = 0; k < argmax->size(); ++k) {
                               gx[(*argmax)[k]] += self.grad[k];
                             }
                           });
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormStats<T>& stats, Mode mode, T eps) {
  const Shape xs = x.shape();
  require_channel_vector(gamma, xs.c, "batchnorm2d", "gamma");
  require_channel_vector(beta, xs.c, "batchnorm2d", "beta");
  if (stats.mean.size() != static_cast<std::size_t>(xs.c) ||
      stats.var.size() != static_cast<std::size_t>(xs.c)) {
    throw ShapeError("batchnorm2d: running statistics have wrong channel count");
  }
  const std::size_t plane = xs.plane();
  const std::size_t count = static_cast<std::size_t>(xs.n) * plane;
  const T* in = x.data().data();
  const T* gm = gamma.data().data();
  const T* bt = beta.data().data();

  auto xhat = std::make_shared<Buffer<T>>(xs.numel());
  auto inv_std = std::make_shared<Buffer<T>>(xs.c);
  Buffer<T> out(xs.numel());
  for (int c = 0; c < xs.c; ++c) {
    T mean_c;
    T var_c;
    if (mode == Mode::train) {
      double acc = 0.0;
      for (int n = 0; n < xs.n; ++n) {
        const T* p = in + (static_cast<std::size_t>(n) * xs.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      const double mean = acc / static_cast<double>(count);
      double sq = 0.0;
      for (int n = 0; n < xs.n; ++n) {
        const T* p = in + (static_cast<std::size_t>(n) * xs.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mean;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(count);
      mean_c = static_cast<T>(mean);
      var_c = static_cast<T>(var);
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      stats.mean[c] = (T(1) - stats.momentum) * stats.mean[c] + stats.momentum * mean_c;
      stats.var[c] =
          (T(1) - stats.momentum) * stats.var[c] + stats.momentum * static_cast<T>(unbiased);
    } else {
      mean_c = stats.mean[c];
      var_c = stats.var[c];
    }
    const T is = T(1) / std::sqrt(var_c + eps);
    (*inv_std)[c] = is;
    for (int n = 0; n < xs.n; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * xs.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T h = (in[off + i] - mean_c) * is;
        (*xhat)[off + i] = h;
        out[off + i] = gm[c] * h + bt[c];
      }
    }
  }

  Node<T>* xn_ = node_of(x);
  Node<T>* gn_ = node_of(gamma);
  Node<T>* bn_ = node_of(beta);
  return make_op_result<T>(
      "batchnorm2d", xs, std::move(out), {x, gamma, beta},
      [=](Node<T>& self) {
        const T* g = self.grad.data();
        T* gx = wants_grad(xn_) ? xn_->grad_buffer().data() : nullptr;
        T* gg = wants_grad(gn_) ? gn_->grad_buffer().data() : nullptr;
        T* gb = wants_grad(bn_) ? bn_->grad_buffer().data() : nullptr;
        const T* gam = gn_->data.data();
        for (int c = 0; c < xs.c; ++c) {
          double sum_g = 0.0;
          double sum_gx = 0.0;
          for (int n = 0; n < xs.n; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * xs.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_g += g[off + i];
              sum_gx += static_cast<double>(g[off + i]) * (*xhat)[off + i];
            }
          }
          if (gg != nullptr) gg[c] += static_cast<T>(sum_gx);
          if (gb != nullptr) gb[c] += static_cast<T>(sum_g);
          if (gx == nullptr) continue;
          const T scale_c = gam[c] * (*inv_std)[c];
          if (mode == Mode::eval) {
            for (int n = 0; n < xs.n; ++n) {
              const std::size_t off = (static_cast<std::size_t>(n) * xs.c + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) gx[off + i] += scale_c * g[off + i];
            }
            continue;
          }
          const T mean_g = static_cast<T>(sum_g / static_cast<double>(count));
          const T mean_gx = static_cast<T>(sum_gx / static_cast<double>(count));
          for (int n = 0; n < xs.n; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * xs.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              gx[off + i] += scale_c * (g[off + i] - mean_g - (*xhat)[off + i] * mean_gx);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Buffer<T> out(x.numel());
  const T* in = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
  Node<T>* xn_ = node_of(x);
  return make_op_result<T>("relu", x.shape(), std::move(out), {x}, [xn_](Node<T>& self) {
    T* gx = xn_->grad_buffer().data();
    const T* xv = xn_->data.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (xv[i] > T(0)) gx[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Buffer<T> out(a.numel());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  Node<T>* an = node_of(a);
  Node<T>* bn = node_of(b);
  return make_op_result<T>("add", a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& self) {
    for (Node<T>* in : {an, bn}) {
      if (!wants_grad(in)) continue;
      T* g = in->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  Buffer<T> out(a.numel());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
  Node<T>* an = node_of(a);
  Node<T>* bn = node_of(b);
  return make_op_result<T>("sub", a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (wants_grad(an)) {
      T* g = an->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(bn)) {
      T* g = bn->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, const Tensor<T>& factor) {
  if (factor.numel() != 1) throw ShapeError("scale: factor must have exactly one element");
  const T f = factor.data()[0];
  Buffer<T> out(x.numel());
  const T* in = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * f;
  Node<T>* xn_ = node_of(x);
  Node<T>* fn_ = node_of(factor);
  return make_op_result<T>("scale", x.shape(), std::move(out), {x, factor},
                           [xn_, fn_](Node<T>& self) {
                             const T fv = fn_->data[0];
                             if (wants_grad(xn_)) {
                               T* g = xn_->grad_buffer().data();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 g[i] += self.grad[i] * fv;
                               }
                             }
                             if (wants_grad(fn_)) {
                               double acc = 0.0;
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 acc += static_cast<double>(self.grad[i]) * xn_->data[i];
                               }
                               fn_->grad_buffer()[0] += static_cast<T>(acc);
                             }
                           });
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const Shape xs = x.shape();
  require_channel_vector(bias, xs.c, "add_channel_bias", "bias");
  const std::size_t plane = xs.plane();
  Buffer<T> out(x.numel());
  const T* in = x.data().data();
  const T* b = bias.data().data();
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * xs.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) out[off + i] = in[off + i] + b[c];
    }
  }
  Node<T>* xn_ = node_of(x);
  Node<T>* bn_ = node_of(bias);
  return make_op_result<T>("add_channel_bias", xs, std::move(out), {x, bias},
                           [=](Node<T>& self) {
                             const T* g = self.grad.data();
                             if (wants_grad(xn_)) {
                               T* gx = xn_->grad_buffer().data();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += g[i];
                             }
                             if (wants_grad(bn_)) {
                               T* gb = bn_->grad_buffer().data();
                               for (int c = 0; c < xs.c; ++c) {
                                 double acc = 0.0;
                                 for (int n = 0; n < xs.n; ++n) {
                                   const std::size_t off =
                                       (static_cast<std::size_t>(n) * xs.c + c) * plane;
                                   for (std::size_t i = 0; i < plane; ++i) acc += g[off + i];
                                 }
                                 gb[c] += static_cast<T>(acc);
                               }
                             }
                           });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape as = a.shape();
  const Shape bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
    throw ShapeError("concat_channels: incompatible shapes " + to_string(as) + " and " +
                     to_string(bs));
  }
  const Shape out_shape{as.n, as.c + bs.c, as.h, as.w};
  const std::size_t a_block = static_cast<std::size_t>(as.c) * as.h * as.w;
  const std::size_t b_block = static_cast<std::size_t>(bs.c) * bs.h * bs.w;
  Buffer<T> out(out_shape.numel());
  for (int n = 0; n < as.n; ++n) {
    T* dst = out.data() + n * (a_block + b_block);
    std::copy_n(a.data().data() + n * a_block, a_block, dst);
    std::copy_n(b.data().data() + n * b_block, b_block, dst + a_block);
  }
  Node<T>* an = node_of(a);
  Node<T>* bn = node_of(b);
  return make_op_result<T>("concat_channels", out_shape, std::move(out), {a, b},
                           [=](Node<T>& self) {
                             for (int n = 0; n < as.n; ++n) {
                               const T* src = self.grad.data() + n * (a_block + b_block);
                               if (wants_grad(an)) {
                                 T* g = an->grad_buffer().data() + n * a_block;
                                 for (std::size_t i = 0; i < a_block; ++i) g[i] += src[i];
                               }
                               if (wants_grad(bn)) {
                                 T* g = bn->grad_buffer().data() + n * b_block;
                                 for (std::size_t i = 0; i < b_block; ++i) {
                                   g[i] += src[a_block + i];
                                 }
                               }
                             }
                           });
}

namespace {

// Per-pixel log-sum-exp over channels for one batch item.
template <typename T>
void channel_logsumexp(const T* z, int channels, std::size_t plane, std::vector<double>& lse) {
  lse.assign(plane, 0.0);
  std::vector<double> mx(plane, -std::numeric_limits<double>::infinity());
  for (int c = 0; c < channels; ++c) {
    const T* p = z + c * plane;
    for (std::size_t i = 0; i < plane; ++i) mx[i] = std::max(mx[i], static_cast<double>(p[i]));
  }
  for (int c = 0; c < channels; ++c) {
    const T* p = z + c * plane;
    for (std::size_t i = 0; i < plane; ++i) lse[i] += std::exp(p[i] - mx[i]);
  }
  for (std::size_t i = 0; i < plane; ++i) lse[i] = mx[i] + std::log(lse[i]);
}

}  // namespace

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits) {
  const Shape s = logits.shape();
  const std::size_t plane = s.plane();
  Buffer<T> out(s.numel());
  std::vector<double> lse;
  for (int n = 0; n < s.n; ++n) {
    const std::size_t off = static_cast<std::size_t>(n) * s.c * plane;
    channel_logsumexp(logits.data().data() + off, s.c, plane, lse);
    for (int c = 0; c < s.c; ++c) {
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = off + c * plane + i;
        out[k] = static_cast<T>(logits.data()[k] - lse[i]);
      }
    }
  }
  Node<T>* xn_ = node_of(logits);
  return make_op_result<T>("log_softmax", s, std::move(out), {logits}, [=](Node<T>& self) {
    T* gx = xn_->grad_buffer().data();
    const T* y = self.data.data();
    for (int n = 0; n < s.n; ++n) {
      const std::size_t off = static_cast<std::size_t>(n) * s.c * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        double gsum = 0.0;
        for (int c = 0; c < s.c; ++c) gsum += self.grad[off + c * plane + i];
        for (int c = 0; c < s.c; ++c) {
          const std::size_t k = off + c * plane + i;
          gx[k] += static_cast<T>(self.grad[k] - std::exp(static_cast<double>(y[k])) * gsum);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax_nll(const Tensor<T>& logits, const LabelMap& target,
                          std::optional<int> ignore_index) {
  const Shape s = logits.shape();
  if (target.n != s.n || target.h != s.h || target.w != s.w ||
      target.labels.size() != static_cast<std::size_t>(s.n) * s.h * s.w) {
    throw ShapeError("log_softmax_nll: target map does not match logits " + to_string(s));
  }
  for (std::size_t i = 0; i < target.labels.size(); ++i) {
    const int t = target.labels[i];
    if (ignore_index && t == *ignore_index) continue;
    if (t < 0 || t >= s.c) {
      throw ShapeError("log_softmax_nll: class index " + std::to_string(t) + " at pixel " +
                       std::to_string(i) + " outside [0, " + std::to_string(s.c) + ")");
    }
  }
  const std::size_t plane = s.plane();
  std::vector<double> lse;
  double total = 0.0;
  std::size_t count = 0;
  for (int n = 0; n < s.n; ++n) {
    const std::size_t off = static_cast<std::size_t>(n) * s.c * plane;
    channel_logsumexp(logits.data().data() + off, s.c, plane, lse);
    for (std::size_t i = 0; i < plane; ++i) {
      const int t = target.labels[n * plane + i];
      if (ignore_index && t == *ignore_index) continue;
      total += lse[i] - logits.data()[off + t * plane + i];
      ++count;
    }
  }
  const double loss = count > 0 ? total / static_cast<double>(count) : 0.0;
  Node<T>* xn_ = node_of(logits);
  auto labels = std::make_shared<std::vector<std::int32_t>>(target.labels);
  return make_op_result<T>(
      "log_softmax_nll", Shape{}, Buffer<T>{static_cast<T>(loss)}, {logits},
      [=](Node<T>& self) {
        if (count == 0) return;
        const double g = self.grad[0] / static_cast<double>(count);
        T* gx = xn_->grad_buffer().data();
        std::vector<double> lse_b;
        for (int n = 0; n < s.n; ++n) {
          const std::size_t off = static_cast<std::size_t>(n) * s.c * plane;
          const T* z = xn_->data.data() + off;
          channel_logsumexp(z, s.c, plane, lse_b);
          for (std::size_t i = 0; i < plane; ++i) {
            const int t = (*labels)[n * plane + i];
            if (ignore_index && t == *ignore_index) continue;
            for (int c = 0; c < s.c; ++c) {
              const double p = std::exp(z[c * plane + i] - lse_b[i]);
              gx[off + c * plane + i] += static_cast<T>(g * (p - (c == t ? 1.0 : 0.0)));
            }
          }
        }
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  Node<T>* xn_ = node_of(x);
  return make_op_result<T>("sum", Shape{}, Buffer<T>{static_cast<T>(acc)}, {x},
                           [xn_](Node<T>& self) {
                             T* g = xn_->grad_buffer().data();
                             for (std::size_t i = 0; i < xn_->data.size(); ++i) {
                               g[i] += self.grad[0];
                             }
                           });
}

template <typename T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    acc += static_cast<double>(a.data()[i]) * b.data()[i];
  }
  Node<T>* an = node_of(a);
  Node<T>* bn = node_of(b);
  return make_op_result<T>("dot", Shape{}, Buffer<T>{static_cast<T>(acc)}, {a, b},
                           [an, bn](Node<T>& self) {
                             const T g = self.grad[0];
                             if (wants_grad(an)) {
                               T* ga = an->grad_buffer().data();
                               for (std::size_t i = 0; i < an->data.size(); ++i) {
                                 ga[i] += g * bn->data[i];
                               }
                             }
                             if (wants_grad(bn)) {
                               T* gb = bn->grad_buffer().data();
                               for (std::size_t i = 0; i < bn->data.size(); ++i) {
                                 gb[i] += g * an->data[i];
                               }
                             }
                           });
}

#define CSCUNET_INSTANTIATE_OPS(T)                                                             \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);  \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                      int, int, int);                                         \
  template Tensor<T> maxpool2d(const Tensor<T>&);                                              \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                 BatchNormStats<T>&, Mode, T);                                 \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> log_softmax(const Tensor<T>&);                                            \
  template Tensor<T> log_softmax_nll(const Tensor<T>&, const LabelMap&, std::optional<int>);   \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> dot(const Tensor<T>&, const Tensor<T>&);

CSCUNET_INSTANTIATE_OPS(float)
CSCUNET_INSTANTIATE_OPS(double)

#undef CSCUNET_INSTANTIATE_OPS

}  // namespace cscunet
