// Python bindings. Arrays cross the boundary as float64 numpy arrays; the
// pipeline entry points take the same JSON config files as the CLI.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mmb/clustering.h"
#include "mmb/ensemble.h"
#include "mmb/error.h"
#include "mmb/metrics.h"
#include "mmb/pipeline.h"
#include "mmb/stats.h"
#include "mmb/synth.h"

namespace py = pybind11;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

mmb::Matrix to_matrix(const Array& a, const char* name) {
  mmb::require(a.ndim() == 2, mmb::ErrorKind::kShape, std::string(name) + " must be two-dimensional");
  mmb::Matrix m(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), m.flat().begin());
  return m;
}

Array to_array(const mmb::Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.flat().begin(), m.flat().end(), out.mutable_data());
  return out;
}

mmb::LogLikTensor to_tensor(const Array& loglik) {
  mmb::LogLikTensor t;
  t.values = to_matrix(loglik, "loglik");
  t.correct = mmb::Matrix(t.values.rows(), t.values.cols());
  for (std::size_t a = 0; a < t.values.cols(); ++a) t.prompt_ids.push_back("p" + std::to_string(a));
  for (std::size_t j = 0; j < t.values.rows(); ++j) t.sample_ids.push_back("s" + std::to_string(j));
  return t;
}

struct PyFit {
  Array weights;
  double objective;
  std::size_t iterations;
  bool converged;
  double closed_form_gap;
  std::string stop_reason;
};

PyFit wrap(const mmb::EnsembleFit& fit) {
  return {to_array(fit.weights.weights), fit.report.final_objective, fit.report.iterations,
          fit.report.converged, fit.report.closed_form_gap, fit.report.stop_reason};
}

mmb::RunConfig run_config(const std::string& path, const std::optional<std::string>& out,
                          std::optional<std::uint64_t> seed) {
  auto config = mmb::load_run_config(path);
  if (out) config.output = *out;
  if (seed) config.master_seed = *seed;
  config.validate();
  return config;
}

mmb::RunOptions run_options(std::size_t threads, const std::string& format) {
  mmb::RunOptions options;
  options.threads = threads;
  options.format = mmb::parse_report_format(format);
  return options;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Mixture-of-Bayesian prompt ensembles";

  static PyObject* error_type = PyErr_NewException("mmb.MmbError", PyExc_ValueError, nullptr);
  m.attr("MmbError") = py::handle(error_type);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const mmb::Error& e) {
      auto inst = py::reinterpret_borrow<py::object>(error_type)(e.what());
      inst.attr("kind") = std::string(mmb::to_string(e.kind()));
      PyErr_SetObject(error_type, inst.ptr());
    }
  });

  py::class_<PyFit>(m, "FitResult")
      .def_readonly("weights", &PyFit::weights)
      .def_readonly("objective", &PyFit::objective)
      .def_readonly("iterations", &PyFit::iterations)
      .def_readonly("converged", &PyFit::converged)
      .def_readonly("closed_form_gap", &PyFit::closed_form_gap)
      .def_readonly("stop_reason", &PyFit::stop_reason);

  m.def(
      "fit_bpe", [](const Array& loglik) { return wrap(mmb::fit_bpe(to_tensor(loglik))); }, py::arg("loglik"),
      "Entropy-regularized prompt weights from an M x N log-likelihood matrix. Returns 1 x N weights.");
  m.def(
      "fit_mmb",
      [](const Array& loglik, const Array& assignments) {
        return wrap(mmb::fit_mmb(to_tensor(loglik), to_matrix(assignments, "assignments")));
      },
      py::arg("loglik"), py::arg("assignments"),
      "Per-group weights from M x N log-likelihoods and M x K soft assignments. Returns K x N weights.");

  py::class_<mmb::ClusterModel>(m, "ClusterModel")
      .def_property_readonly("centroids", [](const mmb::ClusterModel& c) { return to_array(c.centroids); })
      .def_readonly("temperature", &mmb::ClusterModel::temperature)
      .def_property_readonly("k", &mmb::ClusterModel::k)
      .def("soft_assign",
           [](const mmb::ClusterModel& c, const Array& x) {
             return to_array(mmb::soft_assign_rows(to_matrix(x, "embeddings"), c));
           })
      .def("hard_assign", [](const mmb::ClusterModel& c, const Array& x) {
        const auto rows = to_matrix(x, "embeddings");
        std::vector<std::size_t> out;
        for (std::size_t r = 0; r < rows.rows(); ++r) out.push_back(mmb::hard_assign(rows.row(r), c));
        return out;
      });

  m.def(
      "spherical_kmeans",
      [](const Array& embeddings, std::size_t k, std::size_t n_init, std::size_t n_iter, std::uint64_t seed,
         double temperature) {
        return mmb::fit_spherical_kmeans(to_matrix(embeddings, "embeddings"), k, n_init, n_iter, seed, temperature);
      },
      py::arg("embeddings"), py::arg("k"), py::arg("n_init") = 3, py::arg("n_iter") = 1000, py::arg("seed") = 0,
      py::arg("temperature") = mmb::kDefaultTemperature);

  m.def(
      "predict",
      [](const Array& weights, const Array& prompt_probs, std::optional<std::vector<double>> assignment) {
        mmb::EnsembleWeights w;
        w.weights = to_matrix(weights, "weights");
        w.kind = w.k() == 1 ? mmb::EnsembleKind::kBpe : mmb::EnsembleKind::kMmb;
        const std::vector<double> p = assignment.value_or(std::vector<double>(w.k(), 1.0 / w.k()));
        return mmb::predict_with_assignment(w, to_matrix(prompt_probs, "prompt_probs"), p);
      },
      py::arg("weights"), py::arg("prompt_probs"), py::arg("assignment") = py::none(),
      "Mixture of N x C per-prompt class probabilities under K x N weights and a group assignment.");

  m.def(
      "evaluate",
      [](const Array& probs, std::optional<std::vector<int>> labels, std::size_t n_bins, int positive_class,
         std::size_t coverage_points) {
        mmb::MetricSettings s;
        s.n_bins = n_bins;
        s.positive_class = positive_class;
        s.coverage_points = coverage_points;
        const auto e = mmb::evaluate_predictions(mmb::PredictionSet(to_matrix(probs, "probs"), labels), s);
        py::dict out;
        for (const auto& [name, value] : e.metrics) out[py::str(name)] = value;
        return out;
      },
      py::arg("probs"), py::arg("labels") = py::none(), py::arg("n_bins") = mmb::kDefaultBins,
      py::arg("positive_class") = 0, py::arg("coverage_points") = 20,
      "Metric name to value, in catalog order. Without labels only mean_confidence is reported.");

  m.def(
      "paired_permutation_test",
      [](std::vector<double> a, std::vector<double> b, std::size_t n_perm, std::uint64_t seed,
         const std::string& mode, std::size_t threads) {
        return mmb::paired_permutation_test({std::move(a), std::move(b), {}}, n_perm, seed,
                                            mmb::parse_permutation_mode(mode), threads);
      },
      py::arg("a"), py::arg("b"), py::arg("n_perm") = 10000, py::arg("seed") = 0, py::arg("mode") = "auto",
      py::arg("threads") = 1);
  m.def(
      "by_fdr",
      [](const std::vector<double>& p, double alpha) {
        const auto d = mmb::by_fdr(p, alpha);
        return py::make_tuple(d.rejected, d.adjusted_p);
      },
      py::arg("p_values"), py::arg("alpha") = 0.05, "Benjamini-Yekutieli step-up: (rejected, adjusted p-values).");
  m.def(
      "bootstrap_mean_ci",
      [](const std::vector<double>& values, std::size_t n_boot, double level, std::uint64_t seed) {
        const auto ci = mmb::bootstrap_mean_ci(values, n_boot, level, seed);
        return py::make_tuple(ci.low, ci.high);
      },
      py::arg("values"), py::arg("n_boot") = 1000, py::arg("level") = 95.0, py::arg("seed") = 0);

  m.def(
      "synth",
      [](const std::filesystem::path& out, const std::string& config_json) {
        auto config = mmb::synth_config_from_json(config_json);
        config.validate();
        mmb::cmd_synth(config, out);
      },
      py::arg("out"), py::arg("config_json") = "{}", "Writes a synthetic benchmark (bundle and ground truth).");

  m.def(
      "run_fit",
      [](const std::string& config, std::optional<std::string> out, std::optional<std::uint64_t> seed,
         std::size_t threads) { mmb::cmd_fit(run_config(config, out, seed), run_options(threads, "table")); },
      py::arg("config"), py::arg("out") = py::none(), py::arg("seed") = py::none(), py::arg("threads") = 1);
  m.def(
      "run_eval",
      [](const std::string& config, std::optional<std::string> out, std::optional<std::uint64_t> seed,
         std::size_t threads) {
        const auto r = mmb::cmd_eval(run_config(config, out, seed), run_options(threads, "table"));
        std::vector<std::string> failed;
        for (const auto& c : r.cells) {
          if (!c.ok) failed.push_back(c.cell);
        }
        return failed;
      },
      py::arg("config"), py::arg("out") = py::none(), py::arg("seed") = py::none(), py::arg("threads") = 1,
      "Evaluates fitted weights; returns the ids of cells that failed.");
  m.def(
      "run_compare",
      [](const std::string& config, std::optional<std::string> out, std::optional<std::uint64_t> seed,
         std::size_t threads) {
        mmb::cmd_compare(run_config(config, out, seed), run_options(threads, "table"));
      },
      py::arg("config"), py::arg("out") = py::none(), py::arg("seed") = py::none(), py::arg("threads") = 1);
  m.def(
      "run_report",
      [](const std::string& config, std::optional<std::string> out, const std::string& format) {
        return mmb::cmd_report(run_config(config, out, std::nullopt), run_options(1, format));
      },
      py::arg("config"), py::arg("out") = py::none(), py::arg("format") = "table");
}
