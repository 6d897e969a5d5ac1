#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "mixsearch/cli.hpp"
#include "mixsearch/error.hpp"
#include "mixsearch/mixer.hpp"
#include "mixsearch/tasks.hpp"
#include "mixsearch/verify.hpp"
#include "mixsearch/weave.hpp"

namespace py = pybind11;
using namespace mixsearch;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  const Shape s = t.shape();
  py::array_t<double> out({s.n, s.c, s.h, s.w});
  std::copy(t.vec().begin(), t.vec().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 4) throw py::value_error("expected an (n, c, h, w) array");
  Tensor t({static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)),
            static_cast<int>(a.shape(3))});
  std::copy(a.data(), a.data() + a.size(), t.values().begin());
  return t;
}

// Stacks a dataset into (images, labels) arrays.
py::tuple stack(const Dataset& ds) {
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const Batch b = make_batch(ds, idx);
  return py::make_tuple(to_numpy(b.images), to_numpy(b.labels));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Bindings for the mixsearch core library";

  static py::exception<Error> error(m, "MixsearchError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      error(e.what());
    }
  });

  m.def("version", [] { return std::string(cli::tool_version()); });

  m.def(
      "count_cell_space",
      [](int normal_edges, int special_edges, std::array<int, 4> sizes) {
        // Exact integers of any size cross the boundary as decimal text.
        return py::int_(py::str(weave::count_cell_space(normal_edges, special_edges, sizes).str()));
      },
      py::arg("normal_edges"), py::arg("special_edges"), py::arg("sizes"));

  m.def(
      "sample_mix_weights",
      [](int k, double mu, std::uint64_t seed) {
        Rng rng(seed);
        return mixer::sample_mix_weights(k, mu, rng);
      },
      py::arg("k"), py::arg("mu"), py::arg("seed") = 0);

  m.def(
      "default_domains",
      [](int height, int width) {
        std::vector<std::string> names;
        for (const auto& d : tasks::default_domains(height, width)) names.push_back(d.name);
        return names;
      },
      py::arg("height") = 32, py::arg("width") = 32);

  m.def(
      "gen_domain",
      [](const std::string& name, int n, std::uint64_t seed, int height, int width, bool test) {
        for (const auto& d : tasks::default_domains(height, width)) {
          if (d.name == name) {
            return stack(tasks::gen_domain(d, n, seed, test ? tasks::Split::Test : tasks::Split::Train));
          }
        }
        throw py::value_error("unknown domain '" + name + "'");
      },
      py::arg("name"), py::arg("n"), py::arg("seed") = 0, py::arg("height") = 32, py::arg("width") = 32,
      py::arg("test") = false, "Images (n, 1, h, w) and one-hot labels (n, 2, h, w).");

  m.def(
      "dice_jaccard",
      [](const py::array_t<double>& pred, const py::array_t<double>& gt) {
        const auto o = tasks::dice_jaccard(from_numpy(pred), from_numpy(gt));
        return py::make_tuple(o.dice, o.jaccard);
      },
      py::arg("pred"), py::arg("gt"));

  m.def("op_gradcheck", [](double tolerance) {
    std::vector<py::dict> rows;
    for (const auto& r : verify::op_gradcheck(tolerance)) {
      py::dict d;
      d["name"] = r.name;
      d["input_error"] = r.input_error;
      d["param_error"] = r.param_error;
      d["pass"] = r.pass();
      rows.push_back(d);
    }
    return rows;
  }, py::arg("tolerance") = 1e-4);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> full{"mixsearch"};
        full.insert(full.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const auto& a : full) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one tool command; returns (exit_code, stdout, stderr).");
}
