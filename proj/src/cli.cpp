#include "esnet/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <sstream>

#include "CLI11.hpp"
#include "esnet/analysis.hpp"
#include "esnet/gradcheck_suite.hpp"
#include "esnet/io.hpp"
#include "esnet/training.hpp"

namespace esnet {

namespace {

NetworkSpec spec_from(const std::string& config_path) {
    return config_path.empty() ? parse_config(default_config_json()) : load_config(config_path);
}

std::pair<std::size_t, std::size_t> parse_size(const std::string& s) {
    const auto x = s.find('x');
    auto digits = [](const std::string& t) { return !t.empty() && std::all_of(t.begin(), t.end(), ::isdigit); };
    if (x == std::string::npos || !digits(s.substr(0, x)) || !digits(s.substr(x + 1))) {
        throw PreconditionError("--size must look like HxW, e.g. 1024x512; got '" + s + "'");
    }
    return {std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
}

std::uint64_t fnv1a(const Tensor4f& t) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    const auto* p = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < t.size() * sizeof(float); ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

int cmd_analyze(const std::string& config, const std::string& csv, std::ostream& out) {
    const NetworkSpec spec = spec_from(config);
    out << "== " << spec.label << " layer trace (input " << spec.input[1] << " x " << spec.input[2] << " x "
        << spec.input[0] << ") ==\n";
    out << format_shape_table(shape_trace(spec, spec.input)) << "\n";
    out << "== output size per group ==\n";
    for (const TraceEntry& e : group_trace(spec, spec.input)) out << e.group << ": " << format_hwc(e.dims) << "\n";

    const AccountingReport mine = kernel_accounting(spec);
    out << "\n== kernel accounting: " << spec.label << " ==\n" << format_accounting_table(mine);
    const NetworkSpec ref = build_erfnet_reference(spec.num_classes);
    const AccountingReport theirs = kernel_accounting(ref);
    out << "\n== kernel accounting: " << ref.label << " reference ==\n" << format_accounting_table(theirs);
    out << "\nreduction vs published reference total: "
        << format_percent(reduction_ratio(mine.total, theirs.published_total.value_or(theirs.total))) << "\n";
    out << "reduction vs computed reference total: " << format_percent(reduction_ratio(mine.total, theirs.total))
        << "\n";

    const ParamCountReport params = learnable_param_count(spec);
    out << "\n== learnable parameters ==\n" << format_param_table(params);
    out << "\n== receptive field ==\n" << format_rf_table(receptive_field(spec));
    const MacReport macs = flop_count(spec, spec.input);
    out << "\n== multiply-accumulates per image ==\n" << format_mac_table(macs);
    std::ostringstream g;
    g << std::fixed << std::setprecision(2) << 2.0 * static_cast<double>(macs.total) / 1e9;
    out << "approx. " << g.str() << " GFLOPs (2 per MAC)\n";

    if (!csv.empty()) write_file(csv, accounting_csv(mine));
    return kExitOk;
}

int cmd_forward(const std::string& config, const std::string& weights, const std::string& image,
                const std::string& labels, const std::string& color, std::ostream& out) {
    const NetworkSpec spec = spec_from(config);
    Network<float> net(spec);
    load_weights(weights, net.params);
    const Tensor4f x = image_to_tensor(read_pnm(image)).cast<float>();
    check_input(spec, x.shape());
    const Tensor4f logits = net.forward(x, Mode::Infer);
    const LabelMap pred = argmax_channels(logits);
    write_pnm(labels, labels_to_image(pred));
    if (!color.empty()) write_pnm(color, colorize(pred, spec.num_classes));
    std::vector<std::size_t> hist(spec.num_classes, 0);
    for (int v : pred.data) ++hist[static_cast<std::size_t>(v)];
    out << "wrote " << labels << " (" << pred.w << " x " << pred.h << ")\n";
    for (std::size_t c = 0; c < hist.size(); ++c) {
        if (hist[c]) out << "class " << c << ": " << hist[c] << " px\n";
    }
    return kExitOk;
}

int cmd_train(const std::string& config, std::size_t steps, std::uint64_t seed, std::size_t images,
              std::size_t batch, const std::string& optimizer, std::size_t max_iter, const std::string& weights_out,
              const std::string& curve_out, std::ostream& out) {
    const NetworkSpec spec = spec_from(config);
    const auto data = synth_dataset(images, spec.input[1], spec.input[2], spec.num_classes, seed);
    Network<float> net(spec, seed);
    TrainOptions opts;
    opts.steps = steps;
    opts.batch = batch;
    opts.optimizer.kind = parse_optimizer(optimizer);
    opts.optimizer.max_iter = max_iter;
    if (max_iter != 0 && max_iter < steps) throw PreconditionError("--max-iter must be 0 or at least --steps");
    const TrainReport rep = train_toy(net, data, opts);
    if (!weights_out.empty()) save_weights(weights_out, net.params);
    if (!curve_out.empty()) write_file(curve_out, curve_csv(rep.curve));
    out << std::setprecision(6);
    if (!rep.curve.empty()) {
        out << "initial loss " << rep.curve.front().loss << ", final loss " << rep.curve.back().loss << "\n";
    }
    out << "train pixel accuracy " << rep.pixel_accuracy * 100.0 << "%\n";
    if (rep.miou) out << "train mIoU " << *rep.miou * 100.0 << "%\n";
    return kExitOk;
}

int cmd_gradcheck(const std::string& scale, const GradCheckOptions& opts, std::ostream& out) {
    const auto cases = run_gradcheck_suite(parse_suite_scale(scale), opts);
    bool ok = true;
    for (const GradCase& c : cases) {
        out << format_grad_case(c) << "\n";
        ok = ok && c.passed();
    }
    out << (ok ? "all gradient checks passed" : "gradient check FAILED") << " (tolerance 1e-4)\n";
    return ok ? kExitOk : kExitFailure;
}

int cmd_bench(const std::string& config, const std::string& size, std::size_t runs, std::size_t warmup,
              std::uint64_t seed, bool checksum, std::ostream& out) {
    if (runs == 0) throw PreconditionError("--runs must be at least 1");
    const auto [h, w] = parse_size(size);
    const NetworkSpec spec = spec_from(config);
    check_input(spec, {1, spec.input[0], h, w});
    const Network<float> net(spec, seed);
    Tensor4f x(1, spec.input[0], h, w);
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
    for (float& v : x.values()) v = static_cast<float>(rng.uniform());

    Tensor4f logits;
    for (std::size_t i = 0; i < warmup; ++i) logits = net.forward(x);
    std::vector<double> ms;
    for (std::size_t i = 0; i < runs; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        logits = net.forward(x);
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    double mean = 0.0;
    for (double v : ms) mean += v;
    mean /= static_cast<double>(ms.size());
    double var = 0.0;
    for (double v : ms) var += (v - mean) * (v - mean);
    const double stddev = ms.size() > 1 ? std::sqrt(var / static_cast<double>(ms.size() - 1)) : 0.0;

    out << std::fixed << std::setprecision(2);
    out << "input " << h << " x " << w << " x " << spec.input[0] << ", float32, " << runs << " runs after " << warmup
        << " warmup\n";
    out << "latency mean " << mean << " ms, stddev " << stddev << " ms, " << 1000.0 / mean << " FPS\n";
    if (checksum) {
        std::ostringstream hex;
        hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a(logits);
        out << "logits checksum " << hex.str() << "\n";
    }
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"ESNet segmentation network toolkit", "esnet"};
    app.require_subcommand(1);

    std::string config, csv, weights, image, labels, color, out_path, curve, scale = "small", size = "1024x512";
    std::string optimizer = "adam";
    std::size_t steps = 500, images = 8, batch = 4, runs = 10, warmup = 2, max_iter = 0;
    std::uint64_t seed = 1;
    bool checksum = false;

    auto* analyze = app.add_subcommand("analyze", "print layer trace, kernel accounting, parameters, RF and MACs");
    analyze->add_option("--config", config, "network config (JSON)")->check(CLI::ExistingFile);
    analyze->add_option("--csv", csv, "write the accounting rows as CSV");

    auto* fwd = app.add_subcommand("forward", "argmax inference on one image");
    fwd->add_option("--config", config, "network config (JSON)")->check(CLI::ExistingFile);
    fwd->add_option("--weights", weights, "ESNW weights")->required()->check(CLI::ExistingFile);
    fwd->add_option("--image", image, "input PPM (P6)")->required()->check(CLI::ExistingFile);
    fwd->add_option("--labels", labels, "output PGM (P5) label map")->required();
    fwd->add_option("--color", color, "optional colorized PPM");

    auto* train = app.add_subcommand("train-toy", "train on the synthetic rectangles set");
    train->add_option("--config", config, "network config (JSON)")->check(CLI::ExistingFile);
    train->add_option("--steps", steps, "optimizer steps");
    train->add_option("--seed", seed, "seed for data and initialization");
    train->add_option("--images", images, "number of synthetic images")->check(CLI::PositiveNumber);
    train->add_option("--batch", batch, "mini-batch size")->check(CLI::PositiveNumber);
    train->add_option("--optimizer", optimizer, "adam or sgd (same lr, poly, momentum/beta1, decay)")
        ->check(CLI::IsMember({"adam", "sgd"}));
    train->add_option("--max-iter", max_iter, "poly schedule horizon; 0 means --steps");
    train->add_option("--out", out_path, "write trained weights (ESNW)");
    train->add_option("--curve", curve, "write the loss curve (CSV)");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    GradCheckOptions gc_opts;
    gc->add_option("--scale", scale, "tiny or small")->check(CLI::IsMember({"tiny", "small"}));
    gc->add_option("--eps", gc_opts.eps, "relative finite-difference step")->check(CLI::PositiveNumber);
    gc->add_option("--seed", gc_opts.seed, "seed for data and coordinate subsampling");

    auto* bench = app.add_subcommand("bench", "single-precision forward latency");
    bench->add_option("--config", config, "network config (JSON)")->check(CLI::ExistingFile);
    bench->add_option("--size", size, "input size HxW");
    bench->add_option("--runs", runs, "timed runs");
    bench->add_option("--warmup", warmup, "untimed runs");
    bench->add_option("--seed", seed, "seed for weights and input");
    bench->add_flag("--checksum", checksum, "print an FNV-1a checksum of the logits");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*analyze) return cmd_analyze(config, csv, out);
        if (*fwd) return cmd_forward(config, weights, image, labels, color, out);
        if (*train) return cmd_train(config, steps, seed, images, batch, optimizer, max_iter, out_path, curve, out);
        if (*gc) return cmd_gradcheck(scale, gc_opts, out);
        if (*bench) return cmd_bench(config, size, runs, warmup, seed, checksum, out);
    } catch (const std::invalid_argument& e) {  // ShapeError, PreconditionError
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace esnet
