#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "pqnet/half.hpp"
#include "pqnet/modelio.hpp"

namespace py = pybind11;
using namespace pqnet;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const Tensor& t) {
    FloatArray out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

InMemoryDataset dataset_of(const FloatArray& images, const std::optional<std::vector<int>>& labels) {
    std::size_t classes = 0;
    if (labels)
        for (int l : *labels) classes = std::max<std::size_t>(classes, static_cast<std::size_t>(l) + 1);
    return InMemoryDataset(to_tensor(images), labels, classes);
}

py::bytes as_bytes(const Bytes& b) { return py::bytes(reinterpret_cast<const char*>(b.data()), b.size()); }

Bytes from_bytes(const py::bytes& b) {
    const std::string s = b;
    return Bytes(s.begin(), s.end());
}

py::dict footprint_dict(const FootprintReport& fp) {
    py::dict d;
    d["index_bytes"] = fp.index_bytes();
    d["centroid_bytes"] = fp.centroid_bytes();
    d["raw_bytes"] = fp.raw_bytes();
    d["total_bytes"] = fp.total_bytes();
    d["dense_bytes"] = fp.dense_bytes();
    d["compression_ratio"] = fp.compression_ratio();
    return d;
}

// A compressed model kept together with the architecture it decodes onto.
struct PyCompressed {
    CompressedModel model;
    std::string architecture;

    FloatArray predict(const FloatArray& x) const {
        const CompressedStudent s = materialize(model, parse_architecture(architecture));
        return to_array(forward_compressed(s, to_tensor(x)));
    }
};

}  // namespace

PYBIND11_MODULE(_pqnet, m) {
    m.doc() = "Activation-aware product quantization of small CNNs";

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ParseError>(m, "ParseError", base.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<ArgumentError>(m, "ArgumentError", base.ptr());
    py::register_exception<DegenerateDataError>(m, "DegenerateDataError", base.ptr());
    py::register_exception<TrainingError>(m, "TrainingError", base.ptr());
    py::register_exception<CorruptionError>(m, "CorruptionError", base.ptr());

    m.def("float_to_half", &float_to_half);
    m.def("half_to_float", &half_to_float);
    m.def("clamp_centroids", &clamp_centroids, py::arg("k_requested"), py::arg("c_out"), py::arg("m"));
    m.def(
        "layer_footprint",
        [](std::size_t subvectors, std::size_t k, std::size_t d) {
            const LayerFootprint f = layer_footprint(subvectors, k, d);
            return py::dict(py::arg("index_bytes") = f.index_bytes, py::arg("centroid_bytes") = f.centroid_bytes);
        },
        py::arg("subvectors"), py::arg("k"), py::arg("d"));

    m.def("toy_cnn_architecture", &toy_cnn_architecture);
    m.def("toy_resnet_architecture", &toy_resnet_architecture);

    m.def(
        "make_stripes",
        [](std::size_t n, std::uint64_t seed, double noise) {
            Rng rng(seed);
            const InMemoryDataset d = make_stripes(n, rng, noise);
            return py::make_tuple(to_array(d.all_images()), *d.labels());
        },
        py::arg("n"), py::arg("seed"), py::arg("noise") = 0.35);

    py::class_<Network>(m, "Network")
        .def(py::init([](const std::string& arch, std::uint64_t seed) {
                 Network net = parse_architecture(arch);
                 Rng rng(seed);
                 net.init_parameters(rng);
                 return net;
             }),
             py::arg("architecture"), py::arg("seed") = 0)
        .def("architecture", &format_architecture)
        .def("quantizable_ids", &Network::quantizable_ids)
        .def("predict", [](const Network& net, const FloatArray& x) { return to_array(predict(net, to_tensor(x))); })
        .def(
            "train",
            [](Network& net, const FloatArray& images, const std::vector<int>& labels, std::size_t epochs,
               std::size_t batch_size, double lr, std::uint64_t seed) {
                const InMemoryDataset data = dataset_of(images, labels);
                TrainConfig cfg;
                cfg.epochs = epochs;
                cfg.batch_size = batch_size;
                cfg.sgd.lr = lr;
                Rng rng(seed);
                net = train_toy_teacher(net, data, cfg, rng);
            },
            py::arg("images"), py::arg("labels"), py::arg("epochs") = 10, py::arg("batch_size") = 32,
            py::arg("lr") = 0.05, py::arg("seed") = 0)
        .def("accuracy",
             [](const Network& net, const FloatArray& images, const std::vector<int>& labels) {
                 return evaluate(net, dataset_of(images, labels));
             })
        .def("save_dense", [](const Network& net) { return as_bytes(save_dense(net)); })
        .def("load_dense", [](Network& net, const py::bytes& b) { load_dense(from_bytes(b), net); });

    py::class_<PyCompressed>(m, "CompressedModel")
        .def_property_readonly("seed", [](const PyCompressed& c) { return c.model.seed; })
        .def("to_bytes", [](const PyCompressed& c) { return as_bytes(save_compressed(c.model)); })
        .def("footprint", [](const PyCompressed& c) { return footprint_dict(footprint(c.model)); })
        .def("predict", &PyCompressed::predict)
        .def_static(
            "from_bytes",
            [](const py::bytes& b, const std::string& arch) { return PyCompressed{load_compressed(from_bytes(b)), arch}; },
            py::arg("data"), py::arg("architecture"));

    m.def(
        "quantize",
        [](const Network& teacher, const FloatArray& images, std::size_t k, std::size_t classifier_k,
           const std::string& regime, bool exact, bool activation_aware, std::size_t em_iters,
           std::size_t layer_iters, std::size_t global_epochs, std::uint64_t seed) {
            const InMemoryDataset data = dataset_of(images, std::nullopt);
            PipelineOptions o;
            const auto r = parse_regime(regime);
            if (!r) throw ArgumentError("regime must be small or large, got " + regime);
            o.plan.regime = *r;
            o.plan.k = k;
            o.plan.classifier_k = classifier_k;
            o.plan.exact = exact;
            o.activation_aware = activation_aware;
            o.em.n_iter = em_iters;
            o.ft.layer_iterations = layer_iters;
            o.ft.global_epochs = global_epochs;
            o.global_finetune = global_epochs > 0;
            o.seed = seed;
            PipelineResult res;
            {
                py::gil_scoped_release release;
                res = quantize_network(teacher, data, o);
            }
            return PyCompressed{compress(res.student), format_architecture(teacher)};
        },
        py::arg("teacher"), py::arg("images"), py::arg("k") = 256, py::arg("classifier_k") = 2048,
        py::arg("regime") = "small", py::arg("exact") = false, py::arg("activation_aware") = true,
        py::arg("em_iters") = 100, py::arg("layer_iters") = 100, py::arg("global_epochs") = 3, py::arg("seed") = 0);
}
