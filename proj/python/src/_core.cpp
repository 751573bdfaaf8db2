#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "polygonizer/checkpoint.hpp"
#include "polygonizer/cli.hpp"
#include "polygonizer/codec.hpp"
#include "polygonizer/data.hpp"
#include "polygonizer/evaluate.hpp"
#include "polygonizer/metrics.hpp"

namespace py = pybind11;
using namespace polygonizer;

namespace {

using Coords = std::vector<std::pair<double, double>>;
using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

PolygonRing to_ring(const Coords& c) {
    PolygonRing r;
    for (const auto& [x, y] : c) r.vertices.push_back({x, y});
    return r;
}

Coords to_coords(const PolygonRing& r) {
    Coords c;
    for (const Point2& p : r.vertices) c.emplace_back(p.x, p.y);
    return c;
}

F32Array to_array(const Image& img) {
    if (img.shape.size() != 3) throw Error(ErrorCode::Shape, "image must have rank 3");
    F32Array a({img.shape[0], img.shape[1], img.shape[2]});
    std::copy(img.data.begin(), img.data.end(), a.mutable_data());
    return a;
}

Image from_array(const F32Array& a) {
    if (a.ndim() != 3) throw Error(ErrorCode::Shape, "image must have shape (3, D, D)");
    Image img({static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
               static_cast<std::size_t>(a.shape(2))});
    std::copy(a.data(), a.data() + a.size(), img.data.begin());
    return img;
}

py::dict prediction_dict(const std::string& id, const Prediction& p) {
    py::dict d;
    d["id"] = id;
    d["tokens"] = p.tokens.tokens;
    d["ring"] = p.ring ? py::cast(to_coords(*p.ring)) : py::none();
    d["terminated"] = p.terminated;
    d["failure"] = p.failure.empty() ? py::none() : py::cast(p.failure);
    return d;
}

class PyModel {
public:
    explicit PyModel(Polygonizer<float> model) : model_(std::move(model)) {}

    static PyModel load(const std::string& path) { return PyModel(load_checkpoint(path).model); }
    static PyModel desk(std::uint64_t seed) {
        ModelConfig c = ModelConfig::desk();
        c.seed = seed;
        return PyModel(Polygonizer<float>(c));
    }
    static PyModel from_config_json(const std::string& text) {
        return PyModel(Polygonizer<float>(nlohmann::json::parse(text).get<ModelConfig>()));
    }

    std::string config_json() const { return nlohmann::json(model_.config()).dump(); }
    int grid_size() const { return model_.config().input_size; }
    std::size_t parameter_count() const { return model_.params().total_elements(); }
    void save(const std::string& path) const { save_checkpoint(path, model_, nullptr, nlohmann::json::object()); }

    py::list predict(const std::vector<F32Array>& images) const {
        std::vector<Sample> samples(images.size());
        for (std::size_t i = 0; i < images.size(); ++i) {
            samples[i].id = std::to_string(i);
            samples[i].image = from_array(images[i]);
        }
        std::vector<Prediction> preds;
        {
            py::gil_scoped_release release;
            preds = predict_all(ModelPredictor(model_), samples);
        }
        py::list out;
        for (std::size_t i = 0; i < preds.size(); ++i) out.append(prediction_dict(samples[i].id, preds[i]));
        return out;
    }

private:
    Polygonizer<float> model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Native core of the building footprint polygonizer";
    m.attr("__version__") = kVersion;

    static py::exception<Error> error(m, "PolygonizerError", PyExc_RuntimeError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            py::set_error(error, (std::string(to_string(e.code())) + ": " + e.what()).c_str());
        }
    });

    m.def("encode_polygon",
          [](const Coords& ring, int grid_size) { return encode_polygon(to_ring(ring), TokenVocabulary(grid_size)).tokens; },
          py::arg("ring"), py::arg("grid_size"), "Token ids <s> x1 y1 ... xn yn </s> of a ring.");
    m.def(
        "decode_tokens",
        [](const std::vector<int>& tokens, int grid_size) {
            const TokenVocabulary v(grid_size);
            const DecodedRing d = decode_tokens(make_sequence(tokens, v), v);
            return py::make_tuple(to_coords(d.ring), d.terminated);
        },
        py::arg("tokens"), py::arg("grid_size"), "Returns (ring, terminated).");

    m.def("iou", [](const Coords& a, const Coords& b, std::size_t resolution) { return iou(to_ring(a), to_ring(b), resolution); },
          py::arg("a"), py::arg("b"), py::arg("resolution") = 256);
    m.def(
        "max_tangent_angle_error",
        [](const Coords& pred, const Coords& gt, double step) {
            return max_tangent_angle_error(to_ring(pred), to_ring(gt), step);
        },
        py::arg("pred"), py::arg("gt"), py::arg("sample_step") = 0.5);
    m.def("c_iou", &c_iou, py::arg("iou"), py::arg("n_pred"), py::arg("n_gt"));
    m.def(
        "rasterize",
        [](const Coords& ring, std::size_t size) {
            const BinaryMask mask = rasterize(to_ring(ring), size);
            py::array_t<std::uint8_t> a({mask.height, mask.width});
            std::copy(mask.bits.begin(), mask.bits.end(), a.mutable_data());
            return a;
        },
        py::arg("ring"), py::arg("size"));

    m.def(
        "generate_dataset",
        [](std::size_t n, std::uint64_t seed, int image_size) {
            SceneConfig cfg;
            cfg.seed = seed;
            cfg.image_size = image_size;
            const Dataset ds = generate_dataset(cfg, n);
            py::list out;
            for (const Sample& s : ds.samples) {
                py::dict d;
                d["id"] = s.id;
                d["image"] = to_array(s.image);
                d["ring"] = to_coords(s.ring);
                out.append(d);
            }
            return out;
        },
        py::arg("n"), py::arg("seed") = 0, py::arg("image_size") = 64,
        "Synthetic samples as dicts {id, image (3, D, D) float32, ring}.");

    py::class_<PyModel>(m, "Model")
        .def_static("load", &PyModel::load, py::arg("path"))
        .def_static("desk", &PyModel::desk, py::arg("seed") = 0)
        .def_static("from_config_json", &PyModel::from_config_json, py::arg("config"))
        .def_property_readonly("config_json", &PyModel::config_json)
        .def_property_readonly("grid_size", &PyModel::grid_size)
        .def_property_readonly("parameter_count", &PyModel::parameter_count)
        .def("save", &PyModel::save, py::arg("path"))
        .def("predict", &PyModel::predict, py::arg("images"),
             "Greedy decoding; one dict {id, tokens, ring, terminated, failure} per image.");

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int code = 0;
            {
                py::gil_scoped_release release;
                code = run_cli(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs a CLI command in-process; returns (exit_code, stdout, stderr).");
}
