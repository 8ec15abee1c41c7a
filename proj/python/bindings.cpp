#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <sstream>

#include "cscunet/errors.hpp"
#include "cscunet/metrics.hpp"
#include "cscunet/mlcsc.hpp"
#include "cscunet/ops.hpp"
#include "cscunet/selftest.hpp"
#include "cscunet/training.hpp"
#include "cscunet/unet.hpp"

namespace py = pybind11;
using namespace cscunet;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor<T> to_tensor(const Array<T>& a) {
  if (a.ndim() != 4) throw ShapeError("expected a 4-d array (N, C, H, W)");
  const Shape s{static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
                static_cast<int>(a.shape(2)), static_cast<int>(a.shape(3))};
  return Tensor<T>(s, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
Array<T> to_array(const Tensor<T>& t) {
  const Shape s = t.shape();
  Array<T> out({s.n, s.c, s.h, s.w});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

ClassMap to_class_map(const Array<std::uint8_t>& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-d label map");
  return {static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
          std::vector<std::uint8_t>(a.data(), a.data() + a.size())};
}

VariantSpec make_spec(const std::string& variant, int encode_unfoldings, int decode_unfoldings,
                      std::array<int, 5> widths, int in_channels, int num_classes,
                      bool batchnorm) {
  VariantSpec s;
  s.variant = parse_variant(variant);
  s.encode_unfoldings = encode_unfoldings;
  s.decode_unfoldings = decode_unfoldings;
  s.widths = widths;
  s.in_channels = in_channels;
  s.num_classes = num_classes;
  s.batchnorm = batchnorm;
  s.validate();
  return s;
}

py::dict report_to_dict(const MetricsReport& r) {
  py::dict d;
  d["pixel_acc"] = r.pixel_acc;
  d["mean_iou"] = r.mean_iou;
  d["class_avg"] = r.class_avg;
  py::list iou;
  for (const auto& v : r.iou) {
    if (v) {
      iou.append(*v);
    } else {
      iou.append(py::none());
    }
  }
  d["iou"] = iou;
  Array<std::uint64_t> conf({r.confusion.classes, r.confusion.classes});
  std::copy(r.confusion.counts.begin(), r.confusion.counts.end(), conf.mutable_data());
  d["confusion"] = conf;
  return d;
}

py::list log_to_list(const RunLog& log) {
  py::list rows;
  for (const auto& r : log.rows) {
    py::dict d;
    d["epoch"] = r.epoch;
    d["lr"] = r.lr;
    d["train_loss"] = r.train_loss;
    d["val_loss"] = r.val_loss;
    d["wall_seconds"] = r.wall_seconds;
    rows.append(d);
  }
  return rows;
}

Mode parse_mode(const std::string& m) {
  if (m == "train") return Mode::train;
  if (m == "eval") return Mode::eval;
  throw ConfigError("mode must be train or eval, got " + m);
}

}  // namespace

PYBIND11_MODULE(_cscunet, m) {
  m.doc() = "U-Net segmentation with multi-layer convolutional sparse coding blocks";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<NonFiniteError>(m, "NonFiniteError", PyExc_ArithmeticError);

  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& variant, int encode_unfoldings, int decode_unfoldings,
                       std::array<int, 5> widths, int in_channels, int num_classes,
                       bool batchnorm, std::uint64_t seed) {
             return Model(make_spec(variant, encode_unfoldings, decode_unfoldings, widths,
                                    in_channels, num_classes, batchnorm),
                          seed);
           }),
           py::arg("variant") = "unet", py::arg("encode_unfoldings") = 0,
           py::arg("decode_unfoldings") = 0,
           py::arg("widths") = std::array<int, 5>{16, 32, 64, 128, 256},
           py::arg("in_channels") = 3, py::arg("num_classes") = 2, py::arg("batchnorm") = true,
           py::arg("seed") = 0)
      .def_property_readonly("name", [](const Model& self) { return self.spec().display_name(); })
      .def_property_readonly("num_classes", [](const Model& self) { return self.spec().num_classes; })
      .def("parameter_count", &Model::parameter_count)
      .def("parameter_names",
           [](const Model& self) {
             std::vector<std::string> names;
             for (const auto& p : self.parameters()) names.push_back(p.name);
             return names;
           })
      .def(
          "forward",
          [](Model& self, const Array<float>& x, const std::string& mode) {
            NoGradGuard guard;
            return to_array(self.forward(to_tensor(x), parse_mode(mode)));
          },
          py::arg("x"), py::arg("mode") = "eval",
          "Logits (N, classes, H, W) for images (N, C, H, W).")
      .def("save", [](Model& self, const std::filesystem::path& p) { save_checkpoint(self, p); })
      .def("__repr__", [](const Model& self) {
        return "<Model " + self.spec().display_name() + ", " +
               std::to_string(self.parameter_count()) + " parameters>";
      });

  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

  m.def(
      "conv2d",
      [](const Array<double>& x, const Array<double>& w, int stride, int padding) {
        NoGradGuard guard;
        return to_array(conv2d(to_tensor(x), to_tensor(w), Tensor<double>{}, stride, padding));
      },
      py::arg("x"), py::arg("weight"), py::arg("stride") = 1, py::arg("padding") = 1);
  m.def(
      "conv_transpose2d",
      [](const Array<double>& y, const Array<double>& w, int stride, int padding,
         int output_padding) {
        NoGradGuard guard;
        return to_array(conv_transpose2d(to_tensor(y), to_tensor(w), Tensor<double>{}, stride,
                                         padding, output_padding));
      },
      py::arg("y"), py::arg("weight"), py::arg("stride") = 1, py::arg("padding") = 1,
      py::arg("output_padding") = 0);

  m.def(
      "ista_pursuit",
      [](const Array<double>& signal, const Array<double>& dictionary, double lam,
         std::optional<double> step, int iterations) {
        PursuitProblem prob{to_tensor(signal), to_tensor(dictionary), lam, 1.0};
        if (step) {
          prob.step = *step;
        } else {
          const double sigma = dictionary_spectral_norm(prob.dictionary, prob.code_shape());
          prob.step = 0.9 / (sigma * sigma);
        }
        const PursuitResult r = ista_pursuit(prob, iterations);
        return py::make_tuple(to_array(r.code), r.objective);
      },
      py::arg("signal"), py::arg("dictionary"), py::arg("lam"), py::arg("step") = py::none(),
      py::arg("iterations") = 100,
      "Nonnegative ISTA from a zero code. Returns (code, objective trace). The "
      "default step is 0.9 / sigma_max^2.");

  m.def(
      "compute_metrics",
      [](const Array<std::uint8_t>& pred, const Array<std::uint8_t>& truth, int num_classes,
         std::optional<int> ignore_index) {
        return report_to_dict(
            compute_metrics(to_class_map(pred), to_class_map(truth), num_classes, ignore_index));
      },
      py::arg("pred"), py::arg("truth"), py::arg("num_classes"),
      py::arg("ignore_index") = py::none());

  m.def(
      "gen_synthetic",
      [](const std::string& kind, int n, int size, std::uint64_t seed,
         const std::filesystem::path& out) {
        return gen_synthetic(parse_synthetic_kind(kind), n, size, seed, out).records.size();
      },
      py::arg("kind"), py::arg("n"), py::arg("size"), py::arg("seed"), py::arg("out"),
      "Writes a synthetic dataset and returns the number of samples.");

  m.def(
      "train",
      [](const std::filesystem::path& dataset, const std::filesystem::path& out,
         const std::string& variant, int encode_unfoldings, int decode_unfoldings,
         std::array<int, 5> widths, int num_classes, int epochs, int batch_size,
         std::optional<double> lr0, int lr_halving_period, std::uint64_t seed,
         bool record_wall_time) {
        TrainConfig cfg;
        cfg.spec = make_spec(variant, encode_unfoldings, decode_unfoldings, widths, 3,
                             num_classes, true);
        cfg.dataset_root = dataset;
        cfg.out_dir = out;
        cfg.epochs = epochs;
        cfg.batch_size = batch_size;
        cfg.lr0 = lr0;
        cfg.lr_halving_period = lr_halving_period;
        cfg.seed = seed;
        cfg.record_wall_time = record_wall_time;
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = cmd_train(cfg);
        }
        py::dict d;
        d["log"] = log_to_list(r.log);
        d["final_checkpoint"] = r.final_checkpoint;
        d["best_checkpoint"] = r.best_checkpoint;
        d["runlog"] = r.runlog;
        d["best_epoch"] = r.best_epoch;
        return d;
      },
      py::arg("dataset"), py::arg("out"), py::arg("variant") = "unet",
      py::arg("encode_unfoldings") = 0, py::arg("decode_unfoldings") = 0,
      py::arg("widths") = std::array<int, 5>{16, 32, 64, 128, 256}, py::arg("num_classes") = 2,
      py::arg("epochs") = 200, py::arg("batch_size") = 4, py::arg("lr0") = py::none(),
      py::arg("lr_halving_period") = 50, py::arg("seed") = 0,
      py::arg("record_wall_time") = true);

  m.def(
      "evaluate",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& dataset,
         const std::string& split, const std::filesystem::path& out_csv) {
        return report_to_dict(cmd_eval(checkpoint, dataset, parse_split(split), out_csv));
      },
      py::arg("checkpoint"), py::arg("dataset"), py::arg("split") = "test",
      py::arg("out_csv") = "metrics.csv");

  m.def("predict", &cmd_predict, py::arg("checkpoint"), py::arg("images"), py::arg("out"));

  m.def("selftest", [] {
    py::list out;
    for (const CheckResult& c : run_selftest().checks) {
      py::dict d;
      d["name"] = c.name;
      d["passed"] = c.passed;
      d["detail"] = c.detail;
      out.append(d);
    }
    return out;
  });
}
