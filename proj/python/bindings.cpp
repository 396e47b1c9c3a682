#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "sprout/attacks.hpp"
#include "sprout/checkpoint.hpp"
#include "sprout/config.hpp"
#include "sprout/dirichlet.hpp"
#include "sprout/error.hpp"
#include "sprout/evaluation.hpp"
#include "sprout/experiment.hpp"
#include "sprout/rng.hpp"
#include "sprout/training.hpp"
#include "sprout/vicinity.hpp"

namespace py = pybind11;
using namespace sprout;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::array_t<double> to_numpy(const ad::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

ad::Tensor from_numpy(const Array& a) {
  ad::Shape shape(a.shape(), a.shape() + a.ndim());
  return ad::Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::list history_rows(const TrainHistory& h) {
  py::list rows;
  for (const auto& e : h.epochs) {
    py::dict d;
    d["epoch"] = e.epoch;
    d["loss"] = e.loss;
    d["clean_acc"] = e.clean_acc;
    d["seconds"] = e.seconds;
    d["beta"] = e.beta;
    rows.append(d);
  }
  return rows;
}

}  // namespace

PYBIND11_MODULE(_sproutlab, m) {
  m.doc() = "Vicinity training with learned Dirichlet label smoothing, PGD attacks and evaluation.";

  auto base = py::register_exception<Error>(m, "SproutError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());

  m.attr("__version__") = version();

  py::class_<Dataset>(m, "Dataset")
      .def_property_readonly("images", [](const Dataset& d) { return to_numpy(d.images); })
      .def_readonly("labels", &Dataset::labels)
      .def_readonly("num_classes", &Dataset::num_classes)
      .def_readonly("name", &Dataset::name)
      .def("__len__", &Dataset::size)
      .def("head", &Dataset::head)
      .def("id", [](const Dataset& d) { return dataset_id(d); });

  m.def("synth_blobs", &synth_blobs, py::arg("num_classes"), py::arg("n_per_class"), py::arg("dim"),
        py::arg("separation"), py::arg("seed"));
  m.def("load_idx", &load_idx, py::arg("images"), py::arg("labels"), py::arg("max_n") = py::none(),
        py::arg("num_classes") = 10);
  m.def("load_cifar_bin", &load_cifar_bin, py::arg("path"), py::arg("max_n") = py::none());
  m.def("make_dataset", [](const Array& images, std::vector<std::size_t> labels, std::size_t k) {
    Dataset d{from_numpy(images), std::move(labels), k, "array"};
    d.validate();
    return d;
  }, py::arg("images"), py::arg("labels"), py::arg("num_classes"));

  py::class_<Model>(m, "Model")
      .def("logits", [](const Model& md, const Array& x) { return to_numpy(md.logits(from_numpy(x))); })
      .def("predict", [](const Model& md, const Array& x) { return md.predict(from_numpy(x)); })
      .def("parameter_count", &Model::parameter_count)
      .def_property_readonly("arch", [](const Model& md) { return to_string(md.spec.arch); })
      .def_property_readonly("num_classes", [](const Model& md) { return md.spec.num_classes; })
      .def("params", [](const Model& md) {
        py::dict d;
        for (std::size_t i = 0; i < md.params.size(); ++i) d[py::str(md.names[i])] = to_numpy(md.params[i]);
        return d;
      });

  m.def("build_model", [](const Dataset& d, const std::string& arch, std::size_t width, std::size_t pool,
                          std::uint64_t seed) { return build_model(spec_for(d, parse_arch(arch), width, pool), seed); },
        py::arg("dataset"), py::arg("arch") = "cnn", py::arg("width") = 1, py::arg("pool") = 4, py::arg("seed") = 0);

  py::class_<Checkpoint>(m, "Checkpoint")
      .def_readonly("model", &Checkpoint::model)
      .def_readonly("log_beta", &Checkpoint::log_beta)
      .def_readonly("config", &Checkpoint::config)
      .def_readonly("epoch", &Checkpoint::epoch)
      .def_readonly("seed", &Checkpoint::seed)
      .def_readonly("seed_lineage", &Checkpoint::seed_lineage);
  m.def("load_checkpoint", &load_checkpoint);
  m.def("save_checkpoint", &save_checkpoint);
  m.def("checkpoint_id", &checkpoint_id);

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def(py::init<>())
      .def_static("from_file", &ExperimentConfig::from_file)
      .def_static("from_string", &ExperimentConfig::from_string, py::arg("ini"), py::arg("base") = std::filesystem::path{})
      .def("set", &ExperimentConfig::set)
      .def("get", &ExperimentConfig::get)
      .def("apply_override", &ExperimentConfig::apply_override)
      .def("values", &ExperimentConfig::values)
      .def("to_ini", &ExperimentConfig::to_ini)
      .def("load_train", &ExperimentConfig::load_train)
      .def("load_test", &ExperimentConfig::load_test);

  m.def("config_schema", [] {
    std::vector<std::tuple<std::string, std::string, std::string>> out;
    for (const auto& k : config_schema()) out.emplace_back(k.name, k.fallback, k.doc);
    return out;
  });

  m.def("run_command", [](const std::string& command, const ExperimentConfig& cfg) {
    std::vector<std::string> out;
    for (const auto& p : run_command(command, cfg)) out.push_back(p.generic_string());
    return out;
  });

  m.def("train", [](const Dataset& d, const ExperimentConfig& cfg, const Checkpoint* init) {
    TrainResult r;
    {
      py::gil_scoped_release release;
      r = train(d, cfg.train_config(), init);
    }
    return py::make_tuple(r.checkpoint, history_rows(r.history));
  }, py::arg("dataset"), py::arg("config"), py::arg("init") = nullptr);

  py::class_<AttackSpec>(m, "AttackSpec")
      .def(py::init([](double eps, std::size_t steps, std::optional<double> step, std::size_t restarts,
                       const std::string& loss, bool zero_start, std::uint64_t seed) {
             AttackSpec s{eps, steps, step, restarts, parse_attack_loss(loss), zero_start, seed};
             s.validate();
             return s;
           }),
           py::arg("epsilon") = 0.03, py::arg("steps") = 20, py::arg("step_size") = py::none(),
           py::arg("restarts") = 1, py::arg("loss") = "ce", py::arg("include_zero_start") = true,
           py::arg("seed") = 0)
      .def_readwrite("epsilon", &AttackSpec::epsilon)
      .def_readwrite("steps", &AttackSpec::steps)
      .def_readwrite("restarts", &AttackSpec::restarts)
      .def_readwrite("seed", &AttackSpec::seed)
      .def("effective_step_size", &AttackSpec::effective_step_size);

  m.def("pgd_linf", [](const Model& md, const Array& x, const std::vector<std::size_t>& labels, const AttackSpec& s) {
    const ad::Tensor xt = from_numpy(x);
    ad::Tensor adv;
    {
      py::gil_scoped_release release;
      adv = pgd_linf(md, xt, labels, s);
    }
    return to_numpy(adv);
  });
  m.def("accuracy", &accuracy);
  m.def("robust_accuracy", &robust_accuracy, py::call_guard<py::gil_scoped_release>());
  m.def("invariance_suite", [](const Model& md, const Dataset& d) { return invariance_suite(md, d); });

  m.def("loss_landscape", [](const Model& md, const Array& x, std::size_t label, std::size_t n_grid,
                             double max_mag, std::uint64_t seed) {
    const Landscape l = loss_landscape(md, from_numpy(x), label, n_grid, max_mag, seed);
    return py::make_tuple(to_numpy(l.loss), l.u, l.v);
  }, py::arg("model"), py::arg("x"), py::arg("label"), py::arg("n_grid") = 20, py::arg("max_mag") = 0.1,
        py::arg("seed") = 0);

  m.def("gce_loss", [](const Array& logits, const Array& labels) {
    ad::Tape t;
    return gce_loss(t.constant(from_numpy(logits)), from_numpy(labels)).value().item();
  });

  m.def("sample_dirichlet", [](const std::vector<double>& conc, std::uint64_t seed) {
    Rng rng(seed);
    return sample_dirichlet(conc, rng).z;
  });
  m.def("dirichlet_moments", [](const std::vector<double>& beta) {
    const DirichletMoments mo = moments(beta);
    return py::make_tuple(mo.mean, to_numpy(mo.cov));
  });
}
