#include <optional>
#include <sstream>
#include <string>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "metamorph/pipeline.hpp"

namespace py = pybind11;
using namespace metamorph;

PYBIND11_MODULE(_metamorph, m) {
    m.doc() = "Continuous weight manifolds for residual networks";

    m.def(
        "train_prior",
        [](const std::string& config, uint64_t seed, const std::string& out) {
            std::ostringstream log;
            pipeline::cmd_train_prior(config, seed, out, log);
            return log.str();
        },
        py::arg("config"), py::arg("seed"), py::arg("out"));

    m.def(
        "smooth",
        [](const std::string& in, const std::string& out, const std::string& scope) {
            if (scope != "intra-block" && scope != "stage-wide")
                throw ContractError("smooth: scope must be intra-block or stage-wide");
            std::ostringstream log;
            pipeline::cmd_smooth(in, out,
                                 scope == "stage-wide" ? SmoothScope::kStageWide
                                                       : SmoothScope::kIntraBlock,
                                 log);
            return log.str();
        },
        py::arg("in_path"), py::arg("out"), py::arg("scope") = "intra-block");

    m.def(
        "train_inr",
        [](const std::string& prior, const std::string& config, const std::string& out,
           bool incremental, bool alpha_scaling, bool grad_accum, bool pre_init,
           bool disentangle) {
            AblationFlags flags;
            flags.incremental = incremental;
            flags.alpha_scaling = alpha_scaling;
            flags.grad_accum = grad_accum;
            flags.pre_init = pre_init;
            flags.disentangle = disentangle;
            std::ostringstream log;
            pipeline::cmd_train_inr(prior, config, flags, out, log);
            return log.str();
        },
        py::arg("prior"), py::arg("config"), py::arg("out"), py::arg("incremental") = true,
        py::arg("alpha_scaling") = true, py::arg("grad_accum") = true, py::arg("pre_init") = true,
        py::arg("disentangle") = true);

    m.def(
        "sample",
        [](const std::string& inr, double gamma, const std::string& out, int K, uint64_t seed) {
            std::ostringstream log;
            pipeline::cmd_sample(inr, gamma, K, seed, out, log);
            return log.str();
        },
        py::arg("inr"), py::arg("gamma"), py::arg("out"), py::arg("K") = 16, py::arg("seed") = 0);

    m.def(
        "eval",
        [](const std::string& model, const std::string& split, const std::string& report,
           std::optional<uint64_t> seed) {
            std::ostringstream out;
            pipeline::cmd_eval(model, split, report, seed.value_or(0), seed.has_value(), out);
            return out.str();
        },
        py::arg("model"), py::arg("split") = "test", py::arg("report") = "json",
        py::arg("seed") = py::none());

    m.def(
        "sweep",
        [](const std::string& inr, const std::string& gammas, int K, uint64_t seed) {
            std::ostringstream out;
            pipeline::cmd_sweep(inr, gammas, "csv", K, seed, out);
            return out.str();
        },
        py::arg("inr"), py::arg("gammas"), py::arg("K") = 16, py::arg("seed") = 0);

    m.def("lr_schedule", &lr_schedule, py::arg("epoch"), py::arg("warmup_epochs"),
          py::arg("peak_lr"));
    m.def("gamma_from_width", &gamma_from_width, py::arg("width"), py::arg("reference"));
    m.def("width_from_gamma", &width_from_gamma, py::arg("reference"), py::arg("gamma"));
    m.def("parse_gammas", &pipeline::parse_gammas, py::arg("spec"));
    m.def(
        "coordinate",
        [](int layer, int num_layers, int in_index, int in_ref, int out_index, int out_ref,
           int normalizer) {
            LayerIndexRef ref{layer, num_layers, in_index, in_ref, out_index, out_ref, normalizer};
            CoordinateVector cv = build_coordinate(ref);
            return std::vector<double>(cv.v.begin(), cv.v.end());
        },
        py::arg("layer"), py::arg("num_layers"), py::arg("in_index"), py::arg("in_ref"),
        py::arg("out_index"), py::arg("out_ref"), py::arg("normalizer"));
}
