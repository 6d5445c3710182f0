#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "ehnet/experiment.h"

namespace py = pybind11;
using namespace ehnet;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  std::vector<std::size_t> shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const Tensor& t) {
  py::array_t<double> out(t.shape());
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

AffineParams square(const Array& m, const char* name) {
  if (m.ndim() != 2 || m.shape(0) != m.shape(1)) throw py::value_error(std::string(name) + " must be square");
  return {to_tensor(m), Tensor()};
}

py::dict summary_dict(const EvalSummary& s) {
  py::dict d;
  d["base_miou"] = s.base_miou;
  d["new_miou"] = s.new_miou;
  d["mean_miou"] = s.mean_miou;
  d["ms_per_frame"] = s.ms_per_frame;
  return d;
}

std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  write_report_csv(os, r);
  return os.str();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Incremental few-shot segmentation with adaptive embedding updates";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<ExperimentConfig>(m, "Config")
      .def_static("from_json", &parse_config, py::arg("text"))
      .def_static("load", &load_config, py::arg("path"))
      .def("to_json", &config_to_json)
      .def_readwrite("seed", &ExperimentConfig::seed)
      .def_readwrite("repeat", &ExperimentConfig::repeat)
      .def("__repr__", [](const ExperimentConfig& c) { return "Config(seed=" + std::to_string(c.seed) + ")"; });

  py::class_<BaseState>(m, "Base")
      .def("save", [](const BaseState& b, const std::string& dir) { save_base(dir, b); }, py::arg("dir"))
      .def_static("load", &load_base, py::arg("dir"))
      .def_readonly("losses", &BaseState::losses)
      .def_property_readonly("embed_dim", [](const BaseState& b) { return b.model.embed_dim(); })
      .def_property_readonly("base_classes", [](const BaseState& b) {
        std::vector<int> ids;
        for (const auto& r : b.pool.records()) ids.push_back(r.class_id());
        return ids;
      });

  m.def("train_base", [](const ExperimentConfig& c) {
    py::gil_scoped_release nogil;
    return train_base(c);
  }, py::arg("config"));
  m.def("evaluate", [](const ExperimentConfig& c, const BaseState& b) {
    EvalReport r;
    {
      py::gil_scoped_release nogil;
      r = evaluate(c, b);
    }
    return py::make_tuple(report_csv(r), summary_dict(r.summary));
  }, py::arg("config"), py::arg("base"), "Returns (report CSV text, summary dict).");
  m.def("ablate", [](const ExperimentConfig& c, const std::string& axis) {
    std::vector<AblationRow> rows;
    {
      py::gil_scoped_release nogil;
      rows = ablation_run(c, parse_ablation_axis(axis));
    }
    py::list out;
    for (const auto& r : rows) {
      py::dict d = summary_dict(r.summary);
      d["setting"] = r.setting;
      out.append(d);
    }
    return out;
  }, py::arg("config"), py::arg("axis"));
  m.def("export_dataset", &export_dataset, py::arg("config"), py::arg("dir"), py::arg("draw") = 0);

  m.def("taxonomy", [](std::uint64_t seed, std::size_t groups, std::size_t classes_per_group,
                       std::size_t image_size) {
    const Taxonomy t = gen_taxonomy(seed, {groups, classes_per_group, image_size});
    py::list out;
    for (const auto& c : t.classes) {
      py::dict d;
      d["class_id"] = c.class_id;
      d["group"] = c.group;
      d["hue"] = c.hue;
      d["freq"] = c.freq;
      d["corners"] = c.corners;
      d["area"] = py::make_tuple(c.area_lo, c.area_hi);
      out.append(d);
    }
    return out;
  }, py::arg("seed"), py::arg("groups") = 4, py::arg("classes_per_group") = 4, py::arg("image_size") = 32);

  m.def("render", [](std::uint64_t tax_seed, int class_id, std::uint64_t seed, std::size_t groups,
                     std::size_t classes_per_group, std::size_t image_size) {
    const Taxonomy t = gen_taxonomy(tax_seed, {groups, classes_per_group, image_size});
    const RenderedSample s = render_sample(t, class_id, seed);
    py::array_t<std::uint8_t> mask({s.mask.height, s.mask.width});
    std::copy(s.mask.values.begin(), s.mask.values.end(), mask.mutable_data());
    return py::make_tuple(to_array(s.image.pixels), mask);
  }, py::arg("taxonomy_seed"), py::arg("class_id"), py::arg("seed"), py::arg("groups") = 4,
     py::arg("classes_per_group") = 4, py::arg("image_size") = 32,
     "Returns a [3 x H x W] image in [0, 1] and an [H x W] 0/1 mask.");

  m.def("kmeans", [](const Array& points, std::size_t k, std::size_t restarts, std::uint64_t seed) {
    if (points.ndim() != 2) throw py::value_error("points must be [n x d]");
    std::vector<std::vector<double>> p;
    for (py::ssize_t i = 0; i < points.shape(0); ++i)
      p.emplace_back(points.data(i, 0), points.data(i, 0) + points.shape(1));
    const KMeansResult r = kmeans(p, k, restarts, seed);
    return py::make_tuple(r.assignments, r.centroids, r.sse);
  }, py::arg("points"), py::arg("k"), py::arg("restarts") = 5, py::arg("seed") = 0);

  m.def("eaus_update", [](const Array& e, const Array& phi, const Array& psi, const Array& w) {
    if (e.ndim() != 2) throw py::value_error("embeddings must be [n x D]");
    const EausParams p{square(phi, "phi"), square(psi, "psi"), square(w, "w")};
    const std::vector<char> active(static_cast<std::size_t>(e.shape(0)), 1);
    EausStep step;
    const Tensor out = eaus_forward(to_tensor(e), p, active, &step);
    return py::make_tuple(to_array(out), to_array(step.attention));
  }, py::arg("embeddings"), py::arg("phi"), py::arg("psi"), py::arg("w"),
     "Updates every row; returns (updated embeddings, attention).");

  m.attr("REPORT_HEADER") = kReportHeader;
}
