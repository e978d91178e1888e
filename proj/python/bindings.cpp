#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <sstream>

#include "esnet/analysis.hpp"
#include "esnet/cli.hpp"
#include "esnet/io.hpp"
#include "esnet/training.hpp"

namespace py = pybind11;
using namespace esnet;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor4<T> to_tensor(const Array<T>& a) {
    if (a.ndim() != 4) throw ShapeError("expected a 4-D array (N, C, H, W), got " + std::to_string(a.ndim()) + "-D");
    Tensor4<T> t(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                 static_cast<std::size_t>(a.shape(2)), static_cast<std::size_t>(a.shape(3)));
    std::memcpy(t.data(), a.data(), t.size() * sizeof(T));
    return t;
}

template <typename T>
Array<T> to_array(const Tensor4<T>& t) {
    Array<T> a({t.n(), t.c(), t.h(), t.w()});
    std::memcpy(a.mutable_data(), t.data(), t.size() * sizeof(T));
    return a;
}

Array<int> labels_to_array(const LabelMap& m) {
    Array<int> a({m.n, m.h, m.w});
    std::memcpy(a.mutable_data(), m.data.data(), m.data.size() * sizeof(int));
    return a;
}

LabelMap array_to_labels(const Array<int>& a) {
    if (a.ndim() != 3) throw ShapeError("expected a 3-D label array (N, H, W)");
    LabelMap m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
               static_cast<std::size_t>(a.shape(2)));
    std::memcpy(m.data.data(), a.data(), m.data.size() * sizeof(int));
    return m;
}

NetworkSpec spec_from(const std::string& config) {
    return parse_config(config.empty() ? default_config_json() : config);
}

ConvGeometry geometry(std::array<std::size_t, 2> stride, std::array<std::size_t, 2> padding,
                      std::array<std::size_t, 2> dilation) {
    ConvGeometry g;
    g.stride = stride;
    g.padding = padding;
    g.dilation = dilation;
    return g;
}

std::vector<double> bias_vector(const std::optional<Array<double>>& b) {
    if (!b) return {};
    return std::vector<double>(b->data(), b->data() + b->size());
}

/// Single-precision network built from a JSON config.
class PyNetwork {
public:
    PyNetwork(const std::string& config, std::uint64_t seed) : net_(spec_from(config), seed) {}

    Array<float> forward(const Array<float>& x, bool train) const {
        return to_array(net_.forward(to_tensor(x), train ? Mode::Train : Mode::Infer));
    }

    Array<int> predict(const Array<float>& x) const {
        return labels_to_array(argmax_channels(net_.forward(to_tensor(x))));
    }

    /// Loss and gradients for one batch; running statistics are updated.
    py::tuple loss_and_grads(const Array<float>& x, const Array<int>& labels, int ignore_index) {
        Tape<float> tape;
        const Tensor4f logits = net_.forward(to_tensor(x), Mode::Train, &tape);
        const LossResult<float> loss = softmax_cross_entropy(logits, array_to_labels(labels), ignore_index);
        const Gradients<float> grads = backward(net_.plan, net_.params, tape, loss.dlogits);
        apply_running_stats(net_.plan, net_.params, tape);
        py::dict g;
        for (std::size_t i = 0; i < net_.params.size(); ++i) {
            if (net_.params.layout()[i].learnable()) g[py::str(net_.params.layout()[i].name)] = to_array(grads[i]);
        }
        return py::make_tuple(static_cast<double>(loss.loss), g);
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const ParamInfo& p : net_.params.layout().entries()) out.push_back(p.name);
        return out;
    }

    Array<float> get(const std::string& name) const { return to_array(net_.params.at(name)); }

    void set(const std::string& name, const Array<float>& value) {
        Tensor4f& dst = net_.params.at(name);
        if (static_cast<std::size_t>(value.size()) != dst.size()) {
            throw ShapeError("parameter " + name + " has " + std::to_string(dst.size()) + " values, got " +
                             std::to_string(value.size()));
        }
        std::memcpy(dst.data(), value.data(), dst.size() * sizeof(float));
    }

    std::uint64_t learnable_count() const { return net_.params.learnable_count(); }
    void save(const std::string& path) const { save_weights(path, net_.params); }
    void load(const std::string& path) { load_weights(path, net_.params); }

private:
    Network<float> net_;
};

py::dict accounting_dict(const AccountingReport& r) {
    py::list rows;
    for (const AccountingRow& row : r.rows) {
        py::dict d;
        d["stage"] = row.stage_name;
        d["block_kind"] = block_kind_name(row.block_kind);
        d["layers"] = row.layers;
        d["channels"] = row.channels;
        d["kernel_elems"] = row.kernel_elems;
        d["product"] = row.product;
        rows.append(d);
    }
    py::dict out;
    out["rows"] = rows;
    out["total"] = r.total;
    out["published_total"] = r.published_total ? py::cast(*r.published_total) : py::none();
    out["consistent"] = r.consistent();
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "ESNet core bindings";

    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<PreconditionError>(m, "PreconditionError", PyExc_ValueError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

    m.def("default_config", &default_config_json, "JSON config of the 20-class, 1024x512 network");

    py::class_<PyNetwork>(m, "Network")
        .def(py::init<const std::string&, std::uint64_t>(), py::arg("config") = "", py::arg("seed") = 0)
        .def("forward", &PyNetwork::forward, py::arg("x"), py::arg("train") = false,
             "Logits (N, classes, H, W) for float32 input (N, 3, H, W)")
        .def("predict", &PyNetwork::predict, py::arg("x"), "Argmax labels (N, H, W)")
        .def("loss_and_grads", &PyNetwork::loss_and_grads, py::arg("x"), py::arg("labels"),
             py::arg("ignore_index") = 255)
        .def("param_names", &PyNetwork::names)
        .def("get", &PyNetwork::get, py::arg("name"))
        .def("set", &PyNetwork::set, py::arg("name"), py::arg("value"))
        .def_property_readonly("learnable_count", &PyNetwork::learnable_count)
        .def("save", &PyNetwork::save, py::arg("path"))
        .def("load", &PyNetwork::load, py::arg("path"));

    m.def(
        "conv2d",
        [](const Array<double>& x, const Array<double>& w, const std::optional<Array<double>>& b,
           std::array<std::size_t, 2> stride, std::array<std::size_t, 2> padding,
           std::array<std::size_t, 2> dilation) {
            const std::vector<double> bias = bias_vector(b);
            return to_array(conv2d(to_tensor(x), to_tensor(w), std::span<const double>(bias),
                                   geometry(stride, padding, dilation)));
        },
        py::arg("x"), py::arg("w"), py::arg("b") = py::none(), py::arg("stride") = std::array<std::size_t, 2>{1, 1},
        py::arg("padding") = std::array<std::size_t, 2>{0, 0}, py::arg("dilation") = std::array<std::size_t, 2>{1, 1},
        "Cross-correlation in double precision; weight is (C_out, C_in, kH, kW)");

    m.def(
        "transposed_conv2d",
        [](const Array<double>& x, const Array<double>& w, const std::optional<Array<double>>& b,
           std::array<std::size_t, 2> stride, std::array<std::size_t, 2> padding,
           std::array<std::size_t, 2> output_padding) {
            const std::vector<double> bias = bias_vector(b);
            return to_array(transposed_conv2d(to_tensor(x), to_tensor(w), std::span<const double>(bias),
                                              geometry(stride, padding, {1, 1}), output_padding));
        },
        py::arg("x"), py::arg("w"), py::arg("b") = py::none(), py::arg("stride") = std::array<std::size_t, 2>{2, 2},
        py::arg("padding") = std::array<std::size_t, 2>{1, 1},
        py::arg("output_padding") = std::array<std::size_t, 2>{1, 1},
        "Transposed convolution in double precision; weight is (C_in, C_out, kH, kW)");

    m.def(
        "shape_trace",
        [](const std::string& config) {
            const NetworkSpec spec = spec_from(config);
            py::list out;
            for (const TraceEntry& e : shape_trace(spec, spec.input))
                out.append(py::make_tuple(e.layer, e.group, e.stage, py::make_tuple(e.dims.h, e.dims.w, e.dims.c)));
            return out;
        },
        py::arg("config") = "", "(layer, group, stage, (H, W, C)) per layer at the config's input size");

    m.def(
        "kernel_accounting", [](const std::string& config) { return accounting_dict(kernel_accounting(spec_from(config))); },
        py::arg("config") = "");
    m.def(
        "reference_accounting", [](std::size_t classes) { return accounting_dict(kernel_accounting(build_erfnet_reference(classes))); },
        py::arg("num_classes") = 20, "Kernel accounting of the ERFNet reference skeleton");
    m.def("reduction_ratio", &reduction_ratio, py::arg("a_total"), py::arg("b_total"), "100 * (1 - a / b)");

    m.def(
        "learnable_param_count", [](const std::string& config) { return learnable_param_count(spec_from(config)).total; },
        py::arg("config") = "");

    m.def(
        "receptive_field",
        [](const std::string& config) {
            py::list out;
            for (const RFEntry& e : receptive_field(spec_from(config))) {
                py::dict d;
                d["layer"] = e.layer;
                d["stage"] = e.stage;
                d["rf_h"] = e.rf_h;
                d["rf_w"] = e.rf_w;
                d["jump"] = e.jump;
                d["branch_rf"] = e.branch_rf;
                out.append(d);
            }
            return out;
        },
        py::arg("config") = "");

    m.def(
        "flop_count",
        [](const std::string& config, std::optional<std::array<std::size_t, 2>> size) {
            const NetworkSpec spec = spec_from(config);
            InputDims in = spec.input;
            if (size) in = {in[0], (*size)[0], (*size)[1]};
            return flop_count(spec, in).total;
        },
        py::arg("config") = "", py::arg("size") = py::none(), "Multiply-accumulates per image");

    m.def(
        "synth_dataset",
        [](std::size_t n, std::size_t h, std::size_t w, std::size_t classes, std::uint64_t seed) {
            const auto data = synth_dataset(n, h, w, classes, seed);
            Array<double> images({n, std::size_t{3}, h, w});
            Array<int> labels({n, h, w});
            for (std::size_t i = 0; i < n; ++i) {
                std::memcpy(images.mutable_data() + i * 3 * h * w, data[i].image.data(), 3 * h * w * sizeof(double));
                std::memcpy(labels.mutable_data() + i * h * w, data[i].label.data.data(), h * w * sizeof(int));
            }
            return py::make_tuple(images, labels);
        },
        py::arg("n"), py::arg("height"), py::arg("width"), py::arg("classes"), py::arg("seed"),
        "Rectangles on a dark background: images (N, 3, H, W) in [0, 1] and labels (N, H, W)");

    m.def(
        "train_toy",
        [](const std::string& config, std::size_t steps, std::uint64_t seed, std::size_t images, std::size_t batch,
           const std::string& optimizer) {
            const NetworkSpec spec = spec_from(config);
            const auto data = synth_dataset(images, spec.input[1], spec.input[2], spec.num_classes, seed);
            Network<float> net(spec, seed);
            TrainOptions opts;
            opts.steps = steps;
            opts.batch = batch;
            opts.optimizer.kind = parse_optimizer(optimizer);
            TrainReport r;
            {
                py::gil_scoped_release release;
                r = train_toy(net, data, opts);
            }
            py::list losses;
            for (const CurvePoint& p : r.curve) losses.append(p.loss);
            py::dict out;
            out["losses"] = losses;
            out["pixel_accuracy"] = r.pixel_accuracy;
            out["miou"] = r.miou ? py::cast(*r.miou) : py::none();
            return out;
        },
        py::arg("config"), py::arg("steps") = 500, py::arg("seed") = 1, py::arg("images") = 8, py::arg("batch") = 4,
        py::arg("optimizer") = "adam");

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int code;
            {
                py::gil_scoped_release release;
                code = run_cli(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs one CLI subcommand; returns (exit_code, stdout, stderr)");
}
