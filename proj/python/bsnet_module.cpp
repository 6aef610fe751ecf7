#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "bsnet/explain.hpp"
#include "bsnet/runner.hpp"

namespace py = pybind11;
using namespace bsnet;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

DiffArray to_diff(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return DiffArray::from_data(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_numpy(const DiffArray& x) {
  std::vector<py::ssize_t> shape(x.shape().begin(), x.shape().end());
  Array out(shape);
  std::copy(x.data().begin(), x.data().end(), out.mutable_data());
  return out;
}

NumericMode parse_mode(const std::string& s) {
  if (s == "f64") return NumericMode::f64;
  if (s == "f32") return NumericMode::f32;
  throw ConfigError("numeric mode must be f64 or f32, got '" + s + "'");
}

RunConfig make_config(const std::optional<std::filesystem::path>& path,
                      const std::vector<std::string>& overrides) {
  ConfigEntries entries;
  if (path) entries = parse_config_file(*path);
  for (const auto& o : overrides) apply_override(entries, o);
  return build_config(entries);
}

py::dict stats_dict(const AccuracyStats& s) {
  py::dict d;
  d["mean"] = s.mean;
  d["std"] = s.std;
  d["ci_half_width"] = s.ci_half_width;
  d["n"] = s.n;
  return d;
}

py::object parse_json(const std::string& text) {
  return py::module_::import("json").attr("loads")(text);
}

}  // namespace

PYBIND11_MODULE(_bsnet, m) {
  m.doc() = "Few-shot metric learning with a shared embedding and several similarity heads.";
  configure_allocator();

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);

  m.def("set_numeric_mode", [](const std::string& s) { set_numeric_mode(parse_mode(s)); },
        py::arg("mode"));
  m.def("numeric_mode", [] { return numeric_mode() == NumericMode::f64 ? "f64" : "f32"; });

  py::class_<LabeledDataset>(m, "Dataset")
      .def("__len__", [](const LabeledDataset& d) { return d.items.size(); })
      .def_property_readonly("class_names", [](const LabeledDataset& d) { return d.class_names; })
      .def_property_readonly("classes", &LabeledDataset::classes)
      .def_property_readonly("labels",
                             [](const LabeledDataset& d) {
                               std::vector<std::size_t> out;
                               for (const auto& it : d.items) out.push_back(it.label);
                               return out;
                             })
      .def("image",
           [](const LabeledDataset& d, std::size_t i) {
             const auto& img = *d.items.at(i).image;
             py::array_t<float> out({img.height, img.width, std::size_t{3}});
             std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
             return out;
           },
           py::arg("index"), "HxWx3 RGB image in [0, 1].")
      .def("batch",
           [](const LabeledDataset& d, const std::vector<std::size_t>& items) {
             Rng rng(0);
             return to_numpy(make_batch(d, items, false, rng));
           },
           py::arg("items"), "Evaluation-preprocessed [N,3,84,84] batch.");

  m.def("generate_synthetic",
        [](std::size_t classes, std::size_t images_per_class, double variation, std::uint64_t seed,
           std::size_t size) {
          return generate_synthetic({classes, images_per_class, variation, seed, size});
        },
        py::arg("classes") = 30, py::arg("images_per_class") = 40, py::arg("variation") = 0.15,
        py::arg("seed") = 7, py::arg("size") = 84);
  m.def("load_image_dir", [](const std::filesystem::path& p) { return load_image_dir(p); },
        py::arg("path"));
  m.def("split_dataset",
        [](const LabeledDataset& d, std::uint64_t seed, std::optional<std::array<std::size_t, 3>> counts) {
          const auto s = counts ? split_counts(d, seed, *counts) : split_dataset(d, seed);
          return py::make_tuple(s.train, s.val, s.test);
        },
        py::arg("dataset"), py::arg("seed") = 1, py::arg("counts") = py::none(),
        "Class-disjoint (train, val, test); 2:1:1 unless explicit class counts are given.");

  py::class_<BisimModel>(m, "Model")
      .def(py::init([](const std::string& backbone, const std::vector<std::string>& heads,
                       const std::vector<double>& loss_weights, std::uint64_t seed) {
             ModelSpec spec;
             spec.backbone = parse_backbone(backbone);
             spec.heads.clear();
             for (const auto& h : heads) spec.heads.push_back(parse_head(h));
             spec.loss_weights = loss_weights;
             return std::make_unique<BisimModel>(spec, seed);
           }),
           py::arg("backbone") = "conv4",
           py::arg("heads") = std::vector<std::string>{"relation", "cosine"},
           py::arg("loss_weights") = std::vector<double>{}, py::arg("seed") = 1)
      .def_property_readonly("heads",
                             [](const BisimModel& m) {
                               std::vector<std::string> out;
                               for (std::size_t d = 0; d < m.head_count(); ++d)
                                 out.push_back(to_string(m.head(d).kind()));
                               return out;
                             })
      .def_property_readonly("feature_shape", &BisimModel::feature_shape)
      .def("scores",
           [](const BisimModel& m, const Array& support, const Array& query, std::size_t way,
              std::size_t shot, bool train_mode) {
             NoGradGuard guard;
             const auto mode = train_mode ? BatchNormMode::train : BatchNormMode::eval;
             const auto f = m.embed(to_diff(support), to_diff(query), way, shot, mode);
             const auto s = ScoreMatrix::from_heads(m.head_scores(f, mode));
             Array out({s.queries, s.way, s.heads});
             std::copy(s.values.begin(), s.values.end(), out.mutable_data());
             return out;
           },
           py::arg("support"), py::arg("query"), py::arg("way"), py::arg("shot"),
           py::arg("train_mode") = false,
           "[Q, way, H] head scores; support rows are class-major.")
      .def("save",
           [](BisimModel& m, const std::filesystem::path& p) {
             write_checkpoint(p, capture(m, nullptr, 0, numeric_mode()));
           })
      .def("load", [](BisimModel& m, const std::filesystem::path& p) {
        return restore(m, nullptr, read_checkpoint(p));
      });

  m.def("predict",
        [](const Array& scores) {
          if (scores.ndim() != 3) throw ShapeError("scores must be [Q, way, H]");
          ScoreMatrix s(scores.shape(0), scores.shape(1), scores.shape(2));
          std::copy(scores.data(), scores.data() + scores.size(), s.values.begin());
          return combined_predictions(s);
        },
        py::arg("scores"), "Argmax of the head-averaged scores; ties go to the lowest class.");
  m.def("ci_half_width", &ci_half_width, py::arg("std"), py::arg("n"));
  m.def("accuracy_stats", [](const std::vector<double>& a) { return stats_dict(accuracy_stats(a)); });

  py::class_<RunConfig>(m, "RunConfig")
      .def_property_readonly("text", &resolved_config_text)
      .def_property_readonly("output_directory", &output_directory);
  m.def("load_config", &make_config, py::arg("path") = py::none(),
        py::arg("overrides") = std::vector<std::string>{},
        "Config from an optional file plus key=value overrides.");
  m.def("train",
        [](const RunConfig& c, std::optional<std::filesystem::path> resume) {
          const auto s = run_train(c, resume);
          py::dict d;
          d["checkpoint"] = s.checkpoint;
          d["episodes"] = s.episodes_done;
          d["mean_accuracy"] = s.mean_accuracy;
          d["events"] = s.events;
          return d;
        },
        py::arg("config"), py::arg("resume") = py::none());
  m.def("evaluate",
        [](const RunConfig& c, const std::filesystem::path& ckpt) {
          return parse_json(report_json(run_eval(c, ckpt)));
        },
        py::arg("config"), py::arg("checkpoint"));
  m.def("rademacher", [](const RunConfig& c) { return parse_json(rademacher_json(rademacher_lab(c))); },
        py::arg("config"), "Shared-embedding bound check; nothing is written to disk.");
  m.def("estimate_constant_family",
        [](std::size_t n_sigma, std::uint64_t seed) {
          Rng rng(seed);
          return estimate_complexity(constant_family(), Sample{{0.0}}, n_sigma, SupBudget{}, rng).value;
        },
        py::arg("n_sigma") = 64, py::arg("seed") = 1);
  m.def("weight_sweep",
        [](const RunConfig& c) {
          const auto rows = weight_sweep(c, loss_weight_grid());
          py::list out;
          for (const auto& r : rows) {
            py::dict d;
            d["lambda"] = r.lambda;
            d["beta"] = r.beta;
            d["accuracy"] = stats_dict(r.accuracy);
            d["head_accuracy"] = r.head_accuracy;
            out.append(d);
          }
          return out;
        },
        py::arg("config"));
  m.def("grad_cam_map",
        [](const Array& feature, const Array& grad) {
          if (feature.ndim() != 3 || grad.ndim() != 3) throw ShapeError("expected [C, h, w] arrays");
          const auto hm = grad_cam_map({feature.data(), static_cast<std::size_t>(feature.size())},
                                       {grad.data(), static_cast<std::size_t>(grad.size())},
                                       feature.shape(0), feature.shape(1), feature.shape(2));
          Array values({hm.height, hm.width});
          std::copy(hm.values.begin(), hm.values.end(), values.mutable_data());
          return values;
        },
        py::arg("feature"), py::arg("grad"));
}
