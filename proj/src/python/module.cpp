#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>
#include <torch/torch.h>

#include <cstring>

#include "forceworld/checkpoint.hpp"
#include "forceworld/control.hpp"
#include "forceworld/errors.hpp"
#include "forceworld/eval.hpp"
#include "forceworld/flow_matching.hpp"
#include "forceworld/sampler.hpp"
#include "forceworld/world.hpp"

namespace py = pybind11;
using namespace forceworld;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const FloatArray& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  auto t = torch::empty(shape, torch::kFloat32);
  std::memcpy(t.data_ptr(), a.data(), t.nbytes());
  return t;
}

torch::Tensor to_tensor(const DoubleArray& a) {
  std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
  auto t = torch::empty(shape, torch::kFloat64);
  std::memcpy(t.data_ptr(), a.data(), t.nbytes());
  return t;
}

template <typename T>
py::array_t<T> to_array(const torch::Tensor& tensor) {
  auto t = tensor.detach().contiguous().cpu().to(c10::CppTypeToScalarType<T>::value);
  py::array_t<T> out(std::vector<py::ssize_t>(t.sizes().begin(), t.sizes().end()));
  std::memcpy(out.mutable_data(), t.data_ptr(), t.nbytes());
  return out;
}

sampler::Controls to_controls(const std::optional<std::vector<control::ControlPoint>>& points) {
  if (!points || points->empty()) return std::nullopt;
  return *points;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Flow-matching interactive world model: simulator, sampler and metrics.";

  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);

  py::class_<control::ControlPoint>(m, "ControlPoint")
      .def(py::init([](int i, int j, float di, float dj) { return control::ControlPoint{i, j, di, dj}; }),
           py::arg("i"), py::arg("j"), py::arg("di"), py::arg("dj"))
      .def_readwrite("i", &control::ControlPoint::i)
      .def_readwrite("j", &control::ControlPoint::j)
      .def_readwrite("di", &control::ControlPoint::di)
      .def_readwrite("dj", &control::ControlPoint::dj)
      .def("__eq__", [](const control::ControlPoint& a, const control::ControlPoint& b) { return a == b; })
      .def("__repr__", [](const control::ControlPoint& p) {
        return "ControlPoint(i=" + std::to_string(p.i) + ", j=" + std::to_string(p.j) + ", di=" + std::to_string(p.di) +
               ", dj=" + std::to_string(p.dj) + ")";
      });

  m.def(
      "sample_path",
      [](const DoubleArray& y1, double t, const DoubleArray& noise, double sigma_min) {
        flow::FlowMatchConfig cfg;
        cfg.sigma_min = sigma_min;
        return to_array<double>(flow::sample_path(to_tensor(y1), t, to_tensor(noise), cfg));
      },
      py::arg("y1"), py::arg("t"), py::arg("noise"), py::arg("sigma_min") = 1e-7,
      "Point on the conditional path from noise toward y1 at time t.");
  m.def(
      "target_vector_field",
      [](const DoubleArray& y, const DoubleArray& y1, double t, double sigma_min) {
        flow::FlowMatchConfig cfg;
        cfg.sigma_min = sigma_min;
        return to_array<double>(flow::target_vector_field(to_tensor(y), to_tensor(y1), t, cfg));
      },
      py::arg("y"), py::arg("y1"), py::arg("t"), py::arg("sigma_min") = 1e-7);

  m.def(
      "simulate",
      [](const std::string& preset, int n_frames, uint64_t seed, int size) {
        auto cfg = world::WorldConfig::preset_named(preset);
        if (size > 0) cfg.height = cfg.width = size;
        cfg.validate();
        Rng rng(seed);
        auto clip = world::simulate(cfg, n_frames, rng);
        py::dict out;
        out["frames"] = to_array<float>(clip.frames);
        out["flows"] = to_array<float>(clip.flows);
        out["masks"] = to_array<uint8_t>(clip.masks);
        out["object_states"] = to_array<double>(clip.object_states);
        out["agent_index"] = clip.agent_index;
        return out;
      },
      py::arg("preset") = "interactions", py::arg("n_frames") = 16, py::arg("seed") = 0, py::arg("size") = 0,
      "Simulate one clip. Returns frames (N,3,H,W), flows (N-1,2,H,W), masks and object states.");

  m.def(
      "sample_control_pixels",
      [](const FloatArray& flow, int n_c, uint64_t seed) {
        Rng rng(seed);
        return control::sample_control_pixels(to_tensor(flow), n_c, rng).points;
      },
      py::arg("flow"), py::arg("n_c"), py::arg("seed") = 0,
      "Draw n_c distinct pixels with probability proportional to squared flow magnitude.");
  m.def(
      "build_sparse_raster",
      [](const std::vector<control::ControlPoint>& points, int height, int width) {
        return to_array<float>(control::build_sparse_raster(points, height, width));
      },
      py::arg("points"), py::arg("height"), py::arg("width"));

  m.def(
      "block_match_flow",
      [](const FloatArray& a, const FloatArray& b, int block, int radius) {
        return to_array<float>(eval::block_match_flow(to_tensor(a), to_tensor(b), {block, radius}));
      },
      py::arg("frame_a"), py::arg("frame_b"), py::arg("block") = 5, py::arg("radius") = 4);
  m.def(
      "iou", [](const FloatArray& a, const FloatArray& b) { return eval::iou(to_tensor(a) != 0, to_tensor(b) != 0); },
      py::arg("a"), py::arg("b"));
  m.def(
      "psnr", [](const FloatArray& a, const FloatArray& b) { return eval::psnr(to_tensor(a), to_tensor(b)); },
      py::arg("a"), py::arg("b"));
  m.def(
      "ssim", [](const FloatArray& a, const FloatArray& b) { return eval::ssim(to_tensor(a), to_tensor(b)); },
      py::arg("a"), py::arg("b"));

  py::class_<ckpt::ModelBundle>(m, "Model")
      .def_static(
          "load", [](const std::filesystem::path& path) { return ckpt::load_model(path); }, py::arg("path"))
      .def_static(
          "save_untrained",
          [](const std::filesystem::path& path, const std::string& net_config_json, int ode_steps, uint64_t seed) {
            auto cfg = nlohmann::json::parse(net_config_json).get<net::NetConfig>();
            torch::manual_seed(seed);
            net::VectorFieldRegressor net(cfg);
            flow::FlowMatchConfig fc;
            fc.n_ode_steps = ode_steps;
            ckpt::save_model(path, net, fc);
          },
          py::arg("path"), py::arg("net_config_json"), py::arg("ode_steps") = 10, py::arg("seed") = 0,
          "Write a freshly initialized model, e.g. for smoke tests.")
      .def_readonly("fingerprint", &ckpt::ModelBundle::fingerprint)
      .def_property_readonly("height", [](const ckpt::ModelBundle& b) { return b.net_cfg.height; })
      .def_property_readonly("width", [](const ckpt::ModelBundle& b) { return b.net_cfg.width; })
      .def_property_readonly("ode_steps", [](const ckpt::ModelBundle& b) { return b.flow_cfg.n_ode_steps; });

  py::class_<sampler::GenerationSession>(m, "Session")
      .def(py::init([](const ckpt::ModelBundle& model, const FloatArray& frame, uint64_t seed, int max_history,
                       int ode_steps, const std::string& integrator) {
             sampler::SessionConfig cfg;
             cfg.flow = model.flow_cfg;
             cfg.max_history = max_history;
             if (ode_steps > 0) cfg.flow.n_ode_steps = ode_steps;
             if (!integrator.empty()) cfg.flow.integrator = flow::integrator_from_string(integrator);
             return sampler::GenerationSession(model.net, cfg, to_tensor(frame), seed);
           }),
           py::arg("model"), py::arg("frame"), py::arg("seed") = 0, py::arg("max_history") = 16,
           py::arg("ode_steps") = 0, py::arg("integrator") = "",
           "ode_steps 0 and an empty integrator keep the values stored with the model.")
      .def(
          "step",
          [](sampler::GenerationSession& s, const std::optional<std::vector<control::ControlPoint>>& controls) {
            torch::Tensor frame;
            {
              py::gil_scoped_release release;
              frame = s.step(to_controls(controls));
            }
            return to_array<float>(frame);
          },
          py::arg("controls") = py::none(), "Generate the next frame; no controls means free dynamics.")
      .def(
          "rollout",
          [](sampler::GenerationSession& s, int n_frames) {
            std::vector<py::array_t<float>> out;
            for (const auto& f : s.rollout(n_frames)) out.push_back(to_array<float>(f));
            return out;
          },
          py::arg("n_frames"))
      .def("clone", &sampler::GenerationSession::clone)
      .def_property_readonly("frame_index", &sampler::GenerationSession::frame_index)
      .def_property_readonly("history_length", &sampler::GenerationSession::history_length)
      .def_property_readonly("frames", [](const sampler::GenerationSession& s) {
        std::vector<py::array_t<float>> out;
        for (const auto& f : s.frames()) out.push_back(to_array<float>(f));
        return out;
      });

  m.attr("__version__") = FORCEWORLD_VERSION;
}
