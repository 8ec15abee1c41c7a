#include "cscunet/selftest.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include "cscunet/metrics.hpp"
#include "cscunet/ops.hpp"
#include "cscunet/optim.hpp"
#include "cscunet/unet.hpp"

namespace cscunet {

bool SelfTestReport::all_passed() const {
  for (const auto& c : checks) {
    if (!c.passed) return false;
  }
  return true;
}

std::vector<std::string> SelfTestReport::failures() const {
  std::vector<std::string> out;
  for (const auto& c : checks) {
    if (!c.passed) out.push_back(c.name);
  }
  return out;
}

void print_check(std::ostream& os, const CheckResult& check) {
  os << (check.passed ? "PASS " : "FAIL ") << std::left << std::setw(40) << check.name << ' '
     << check.detail << " (" << std::fixed << std::setprecision(2) << check.seconds << "s)\n";
  os.unsetf(std::ios::floatfield);
}

GradFn block_grad_fn(const BlockConfig& cfg) {
  return [cfg](std::span<const Tensor<double>> in) {
    BlockParams<double> params;
    std::size_t k = 1;
    for (int i = 1; i <= cfg.layers; ++i) {
      LayerParams<double> layer;
      layer.weight = in[k++];
      layer.step = in[k++];
      layer.threshold = in[k++];
      if (cfg.batchnorm) {
        layer.bn_gamma = in[k++];
        layer.bn_beta = in[k++];
        layer.bn_stats = BatchNormStats<double>::fresh(cfg.channels[i]);
      }
      params.layers.push_back(std::move(layer));
    }
    return csc_block_forward(in[0], cfg, params, Mode::train);
  };
}

std::vector<InputSpec> block_input_specs(const BlockConfig& cfg, int batch, int size) {
  std::vector<InputSpec> specs;
  specs.push_back({{batch, cfg.channels[0], size, size}});
  for (int i = 1; i <= cfg.layers; ++i) {
    const int cin = cfg.channels[i - 1];
    const int cout = cfg.channels[i];
    specs.push_back({{cout, cin, 3, 3}});
    specs.push_back({Shape{}, InputKind::positive});
    specs.push_back({{1, cout, 1, 1}, InputKind::uniform, !cfg.batchnorm});
    if (cfg.batchnorm) {
      specs.push_back({{1, cout, 1, 1}, InputKind::positive});
      specs.push_back({{1, cout, 1, 1}});
    }
  }
  return specs;
}

namespace {

using Clock = std::chrono::steady_clock;

std::string fmt_err(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

// conv2d whose weight gradient is off by 1%.
Tensor<double> corrupted_conv2d(const Tensor<double>& x, const Tensor<double>& w,
                                const Tensor<double>& b) {
  Tensor<double> value;
  {
    NoGradGuard guard;
    value = conv2d(x, w, b, 1, 1);
  }
  const auto d = value.data();
  return make_op_result<double>(
      "conv2d_corrupted", value.shape(), Buffer<double>(d.begin(), d.end()), {x, w, b},
      [x, w, b](Node<double>& self) {
        Tensor<double> xl = x.detach();
        Tensor<double> wl = w.detach();
        Tensor<double> bl = b.detach();
        xl.set_requires_grad(true);
        wl.set_requires_grad(true);
        bl.set_requires_grad(true);
        dot(conv2d(xl, wl, bl, 1, 1), Tensor<double>(self.shape, std::vector<double>(self.grad.begin(), self.grad.end()))).backward();
        auto acc = [](const Tensor<double>& dst, const Tensor<double>& src, double factor) {
          if (!dst.requires_grad()) return;
          auto& g = dst.node()->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * src.grad()[i];
        };
        acc(x, xl, 1.0);
        acc(w, wl, 1.01);
        acc(b, bl, 1.0);
      });
}

CheckResult from_gradcheck(const GradCheckReport& r) {
  return {"gradcheck:" + r.name, r.passed, "max rel err " + fmt_err(r.worst()), 0.0};
}

CheckResult check_k0_equivalence() {
  double worst = 0.0;
  for (int draw = 0; draw < 50; ++draw) {
    for (bool bn : {false, true}) {
      std::mt19937_64 rng(1000 + draw);
      const BlockConfig cfg = BlockConfig::uniform(3, 5, 2, 0, bn);
      BlockParams<float> params = BlockParams<float>::init(cfg, rng);
      std::uniform_real_distribution<float> u(-1.0f, 1.0f);
      for (auto& layer : params.layers) {
        layer.step.data()[0] = 0.5f + (u(rng) + 1.0f);
        for (auto& t : layer.threshold.data()) t = 0.2f * u(rng);
      }
      std::vector<float> xv(2 * 3 * 8 * 8);
      for (auto& v : xv) v = u(rng);
      const Tensor<float> x({2, 3, 8, 8}, xv);
      NoGradGuard guard;
      BlockParams<float> copy = params;
      const Tensor<float> block = ml_ista_forward(x, cfg, copy, Mode::train);
      Tensor<float> h = x;
      for (auto& layer : params.layers) {
        std::vector<float> w(layer.weight.data().begin(), layer.weight.data().end());
        for (auto& v : w) v *= layer.step.item();
        h = conv2d(h, Tensor<float>(layer.weight.shape(), w), layer.threshold, 1, 1);
        if (bn) h = batchnorm2d(h, layer.bn_gamma, layer.bn_beta, layer.bn_stats, Mode::train);
        h = relu(h);
      }
      for (std::size_t i = 0; i < h.numel(); ++i) {
        worst = std::max(worst, static_cast<double>(std::abs(h.data()[i] - block.data()[i])));
      }
    }
  }
  return {"k0_equivalence", worst <= 1e-6, "max abs diff " + fmt_err(worst), 0.0};
}

CheckResult check_ista_descent() {
  bool monotone = true;
  for (int p = 0; p < 20; ++p) {
    std::mt19937_64 rng(2000 + p);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> y(1 * 2 * 8 * 8);
    std::vector<double> w(4 * 2 * 3 * 3);
    for (auto& v : y) v = g(rng);
    for (auto& v : w) v = g(rng) / 3.0;
    PursuitProblem prob{Tensor<double>({1, 2, 8, 8}, y), Tensor<double>({4, 2, 3, 3}, w), 0.1, 1.0};
    const double sigma = dictionary_spectral_norm(prob.dictionary, prob.code_shape());
    prob.step = 0.9 / (sigma * sigma);
    monotone = monotone && ista_pursuit(prob, 100).monotone;
  }
  // Identity dictionary: the fixed point is relu(y - lambda).
  std::mt19937_64 rng(77);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> y(2 * 8 * 8);
  for (auto& v : y) v = g(rng);
  std::vector<double> delta(2 * 2 * 9, 0.0);
  delta[0 * 18 + 0 * 9 + 4] = 1.0;
  delta[1 * 18 + 1 * 9 + 4] = 1.0;
  const PursuitProblem ident{Tensor<double>({1, 2, 8, 8}, y), Tensor<double>({2, 2, 3, 3}, delta),
                             0.3, 0.9};
  const PursuitResult r = ista_pursuit(ident, 100);
  double err = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    err = std::max(err, std::abs(r.code.data()[i] - std::max(0.0, y[i] - 0.3)));
  }
  return {"ista_descent", monotone && err < 1e-8,
          std::string(monotone ? "monotone" : "NOT monotone") + ", identity err " + fmt_err(err),
          0.0};
}

CheckResult check_adjointness() {
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    std::mt19937_64 rng(3000 + t);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::vector<float> xv(2 * 3 * 8 * 8), yv(2 * 4 * 8 * 8), wv(4 * 3 * 9);
    for (auto* v : {&xv, &yv, &wv}) {
      for (auto& e : *v) e = u(rng);
    }
    NoGradGuard guard;
    const Tensor<float> x({2, 3, 8, 8}, xv), y({2, 4, 8, 8}, yv), w({4, 3, 3, 3}, wv);
    const double lhs = dot(conv2d(x, w, Tensor<float>{}, 1, 1), y).item();
    const double rhs = dot(x, conv_transpose2d(y, w, Tensor<float>{}, 1, 1, 0)).item();
    worst = std::max(worst, std::abs(lhs - rhs) / std::max(std::abs(lhs), std::abs(rhs)));
  }
  return {"adjointness", worst < 1e-4, "max rel diff " + fmt_err(worst), 0.0};
}

CheckResult check_parameter_parity() {
  VariantSpec base;
  base.widths = {8, 16, 32, 64, 128};
  std::vector<std::size_t> counts;
  for (auto [v, a, b] : {std::tuple{Variant::unet, 0, 0}, std::tuple{Variant::encode, 2, 0},
                         std::tuple{Variant::decode, 0, 2}, std::tuple{Variant::all, 2, 2}}) {
    VariantSpec s = base;
    s.variant = v;
    s.encode_unfoldings = a;
    s.decode_unfoldings = b;
    counts.push_back(build_model(s, 1).parameter_count());
  }
  const bool same = std::all_of(counts.begin(), counts.end(),
                                [&](std::size_t c) { return c == counts.front(); });
  return {"parameter_parity", same, std::to_string(counts.front()) + " parameters", 0.0};
}

CheckResult check_metric_oracle() {
  bool ok = true;
  for (int classes : {2, 3, 11}) {
    std::mt19937_64 rng(4000 + classes);
    std::uniform_int_distribution<int> label(0, classes - 1);
    for (int t = 0; t < 1000; ++t) {
      ClassMap pred{16, 16, std::vector<std::uint8_t>(256)};
      ClassMap truth{16, 16, std::vector<std::uint8_t>(256)};
      for (int i = 0; i < 256; ++i) {
        pred.labels[i] = static_cast<std::uint8_t>(label(rng));
        truth.labels[i] = static_cast<std::uint8_t>(label(rng));
      }
      const MetricsReport r = compute_metrics(pred, truth, classes);
      double iou_sum = 0.0;
      int present = 0;
      int correct = 0;
      for (int c = 0; c < classes; ++c) {
        int tp = 0, fp = 0, fn = 0;
        for (int i = 0; i < 256; ++i) {
          const bool p = pred.labels[i] == c;
          const bool g = truth.labels[i] == c;
          tp += p && g;
          fp += p && !g;
          fn += !p && g;
        }
        correct += tp;
        if (tp + fp + fn == 0) {
          ok = ok && !r.iou[c].has_value();
          continue;
        }
        const double iou = static_cast<double>(tp) / (tp + fp + fn);
        ok = ok && r.iou[c].has_value() && *r.iou[c] == iou;
        iou_sum += iou;
        ++present;
      }
      ok = ok && r.mean_iou == iou_sum / present && r.pixel_acc == correct / 256.0;
    }
  }
  return {"metric_oracle", ok, "3000 random map pairs", 0.0};
}

CheckResult check_lr_schedule() {
  const double lr0 = 1e-4;
  const bool ok = step_decay_lr(lr0, 0, 50) == lr0 && step_decay_lr(lr0, 49, 50) == lr0 &&
                  step_decay_lr(lr0, 50, 50) == lr0 / 2 && step_decay_lr(lr0, 100, 50) == lr0 / 4;
  return {"lr_schedule", ok, "epochs 0/49/50/100", 0.0};
}

CheckResult check_adam_first_step() {
  std::vector<Tensor<double>> p{Tensor<double>::scalar(0.0, true)};
  p[0].grad_mut()[0] = 1.0;
  AdamState state;
  adam_step(p, state, 1e-3);
  const double delta = p[0].item();
  // -lr * 1 / (1 + eps) with eps = 1e-8
  const bool ok = std::abs(delta + 1e-3) <= 1e-3 * 1e-8 * 1.0001;
  return {"adam_first_step", ok, "delta " + fmt_err(delta), 0.0};
}

}  // namespace

SelfTestReport run_selftest(const SelfTestOptions& options,
                            const std::function<void(const CheckResult&)>& on_check) {
  SelfTestReport report;
  auto run = [&](const std::function<CheckResult()>& check) {
    const auto start = Clock::now();
    CheckResult r;
    try {
      r = check();
    } catch (const std::exception& e) {
      r.passed = false;
      r.detail = std::string("threw: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    report.checks.push_back(r);
    if (on_check) on_check(r);
  };

  for (const RegisteredOp& op : registered_ops()) {
    GradFn fn = op.fn;
    if (options.corrupt_conv_grad && op.name == "conv2d") {
      fn = [](std::span<const Tensor<double>> in) { return corrupted_conv2d(in[0], in[1], in[2]); };
    }
    run([&] { return from_gradcheck(grad_check(op.name, fn, op.inputs, 11)); });
  }
  for (bool bn : {false, true}) {
    for (int k = 1; k <= 3; ++k) {
      run([&] {
        const BlockConfig cfg = BlockConfig::uniform(3, 4, 2, k, bn);
        const auto specs = block_input_specs(cfg, 2, 6);
        const std::string name =
            "csc_block_k" + std::to_string(k) + (bn ? "_bn" : "");
        return from_gradcheck(grad_check(name, block_grad_fn(cfg), specs, 21 + k));
      });
    }
  }
  run(check_k0_equivalence);
  run(check_ista_descent);
  run(check_adjointness);
  run(check_parameter_parity);
  run(check_metric_oracle);
  run(check_lr_schedule);
  run(check_adam_first_step);
  return report;
}

}  // namespace cscunet
