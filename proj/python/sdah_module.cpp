#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "sdah/config.hpp"
#include "sdah/error.hpp"
#include "sdah/explain.hpp"
#include "sdah/inference.hpp"
#include "sdah/io.hpp"
#include "sdah/metrics.hpp"
#include "sdah/network.hpp"
#include "sdah/selfcheck.hpp"
#include "sdah/training.hpp"

namespace py = pybind11;
using namespace sdah;

namespace {

using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;
using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor<float> to_tensor(const F32Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  if (shape.size() == 2) shape.insert(shape.begin(), 1);
  if (shape.size() != 3) throw ShapeError("image must be [H x W] or [C x H x W]");
  return Tensor<float>(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

F32Array to_array(const Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  F32Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

U8Array label_array(const LabelMap& l) {
  U8Array out({l.height, l.width});
  std::copy(l.values.begin(), l.values.end(), out.mutable_data());
  return out;
}

LabelMap to_label(const U8Array& a) {
  if (a.ndim() != 2) throw ShapeError("label must be [H x W]");
  return {static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
          std::vector<std::uint8_t>(a.data(), a.data() + a.size())};
}

Mask to_mask(const py::array& a) {
  const auto u = U8Array::ensure(a);
  if (!u || u.ndim() != 2) throw ShapeError("mask must be a 2-D array");
  Mask m{static_cast<int>(u.shape(0)), static_cast<int>(u.shape(1)), {}};
  m.on.resize(u.size());
  for (py::ssize_t i = 0; i < u.size(); ++i) m.on[i] = u.data()[i] != 0;
  return m;
}

std::vector<SegSample> to_samples(const std::vector<F32Array>& images, const std::vector<U8Array>& labels,
                                  int classes) {
  if (images.size() != labels.size()) throw DataError("images and labels differ in count");
  std::vector<SegSample> out;
  for (std::size_t i = 0; i < images.size(); ++i) out.push_back({to_tensor(images[i]), to_label(labels[i]), classes});
  return out;
}

struct PyModel {
  Model<float> model;
  TrainState<float> state;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "SDAH-UNet core bindings";

  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<GraphError>(m, "GraphError", PyExc_RuntimeError);

  m.def("default_config_json", [] { return run_config_to_json(RunConfig{}); });
  m.def("normalize_config_json", [](const std::string& text) { return run_config_to_json(run_config_from_json(text)); },
        "Parse a run configuration (missing fields take defaults) and print it back in full.");
  m.def("lr_at", [](std::int64_t step, const std::string& train_json) {
    return lr_at(step, train_config_from_json(train_json));
  });
  m.def("count_flops", [](const std::string& model_json, int height, int width) {
    return count_flops(model_config_from_json(model_json), height, width);
  });

  m.def("synth", [](int n, int size, int classes, std::uint64_t seed) {
    py::list out;
    for (const auto& s : synth_dataset(n, size, size, classes, seed))
      out.append(py::make_tuple(to_array(s.image), label_array(s.label)));
    return out;
  }, py::arg("n"), py::arg("size") = 32, py::arg("classes") = 2, py::arg("seed") = 0);

  m.def("dsc", [](const py::array& a, const py::array& b) { return dsc(to_mask(a), to_mask(b)); });
  m.def("hd95", [](const py::array& a, const py::array& b, std::array<double, 2> spacing) {
    return hd95(to_mask(a), to_mask(b), spacing);
  }, py::arg("a"), py::arg("b"), py::arg("spacing") = std::array<double, 2>{1.0, 1.0});
  m.def("paired_t_test", [](const std::vector<double>& a, const std::vector<double>& b) {
    const auto r = paired_t_test(a, b);
    py::dict d;
    d["t"] = r.t;
    d["p"] = r.p;
    d["dof"] = r.dof;
    d["mean_diff"] = r.mean_diff;
    return d;
  });

  m.def("selfcheck", [] {
    std::vector<std::tuple<std::string, bool, std::string>> out;
    for (const auto& r : run_selfcheck()) out.emplace_back(r.name, r.passed, r.detail);
    return out;
  });

  py::class_<PyModel>(m, "Model")
      .def(py::init([](const std::string& model_json) {
        return PyModel{build_model<float>(model_config_from_json(model_json)), {}};
      }), py::arg("model_json") = "{}")
      .def_static("load", [](const std::filesystem::path& p) {
        const Checkpoint ck = load_checkpoint(p);
        PyModel pm{load_model<float>(ck), {}};
        if (ck.find("train.step")) pm.state.adam = load_adam_state(ck, pm.model);
        return pm;
      })
      .def("save", [](const PyModel& pm, const std::filesystem::path& p, const std::string& train_json) {
        save_checkpoint(p, train_checkpoint(pm.model, pm.state, train_config_from_json(train_json)));
      }, py::arg("path"), py::arg("train_json") = "{}")
      .def_property_readonly("config_json", [](const PyModel& pm) { return model_config_to_json(pm.model.config, 2); })
      .def_property_readonly("num_params", [](const PyModel& pm) { return count_params(pm.model); })
      .def_property_readonly("step", [](const PyModel& pm) { return pm.state.adam.step; })
      .def("param_names", [](const PyModel& pm) {
        std::vector<std::string> out;
        for (const auto& [n, _] : pm.model.params) out.push_back(n);
        return out;
      })
      .def("param", [](const PyModel& pm, const std::string& name) { return to_array(pm.model.param(name)); })
      .def("predict_logits", [](const PyModel& pm, const F32Array& image) {
        const auto x = to_tensor(image);
        Tensor<float> logits;
        {
          py::gil_scoped_release nogil;
          logits = predict_logits(pm.model, x);
        }
        return to_array(logits);
      })
      .def("predict", [](const PyModel& pm, const F32Array& image, int crop, int step) {
        SlidingConfig cfg;
        cfg.crop = crop > 0 ? crop : pm.model.config.image_size;
        cfg.step = step > 0 ? step : cfg.crop / 2;
        cfg.validate();
        const auto probs = sliding_predict(pm.model, to_tensor(image), cfg);
        return py::make_tuple(to_array(probs), label_array(argmax_labels(probs)));
      }, py::arg("image"), py::arg("crop") = 0, py::arg("step") = 0)
      .def("train", [](PyModel& pm, const std::vector<F32Array>& images, const std::vector<U8Array>& labels,
                       const std::string& train_json) {
        const auto data = to_samples(images, labels, pm.model.config.num_classes);
        const auto cfg = train_config_from_json(train_json);
        const std::size_t before = pm.state.history.size();
        {
          py::gil_scoped_release nogil;
          train(pm.model, data, cfg, pm.state);
        }
        std::vector<double> losses;
        for (std::size_t i = before; i < pm.state.history.size(); ++i) losses.push_back(pm.state.history[i].loss);
        return losses;
      }, py::arg("images"), py::arg("labels"), py::arg("train_json") = "{}")
      .def("explain", [](const PyModel& pm, const std::filesystem::path& out, const F32Array& image,
                         const std::string& case_name, int target_class, int stride) {
        ExplainRequest req;
        req.case_name = case_name;
        req.target_class = target_class;
        req.point_stride = stride;
        std::vector<std::string> files;
        for (const auto& p : write_explain(out, pm.model, to_tensor(image), req)) files.push_back(p.string());
        return files;
      }, py::arg("out"), py::arg("image"), py::arg("case_name") = "case", py::arg("target_class") = 1,
         py::arg("stride") = 1);
}
