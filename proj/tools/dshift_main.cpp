#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "denseshift/convert.hpp"
#include "denseshift/kernel.hpp"
#include "denseshift/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace denseshift;
using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

json bench_json(const BenchStats& s) {
    return json{{"kernel", s.kernel},     {"bits", s.bits},
                {"length", s.length},     {"trials", s.trials},
                {"mean_ns", s.mean_ns},   {"stddev_ns", s.stddev_ns},
                {"checksum", s.checksum}};
}

int cmd_train(const std::string& config_path, bool print_config, const std::string& out_override,
              int64_t seed_override) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : parse_run_config(read_file(config_path));
    if (!out_override.empty()) cfg.output_dir = out_override;
    if (seed_override >= 0) cfg.train.seed = static_cast<uint64_t>(seed_override);
    if (cfg.network.layers.empty()) cfg.network = resolve_network(cfg);
    if (print_config) {
        std::cout << run_config_to_json(cfg) << "\n";
        return 0;
    }
    RunResult res = run_training(cfg);
    json summary{{"test_accuracy", res.test_accuracy},
                 {"model_checksum", res.model_checksum},
                 {"model_path", res.model_path},
                 {"steps", res.train.steps}};
    json cos = json::object();
    for (const auto& [layer, c] : res.train.final_cosine) cos[std::to_string(layer)] = c;
    summary["final_cosine"] = cos;
    std::cout << summary.dump() << "\n";
    return 0;
}

int cmd_eval(const std::string& model_path, const std::string& kind, const std::string& dir,
             int64_t limit, const std::string& kernel, const std::string& confusion_path) {
    LoadedModel m = load_model(model_path);
    DatasetConfig dc = m.meta.dataset;
    if (!kind.empty()) dc.kind = kind;
    if (!dir.empty()) dc.dir = dir;
    if (limit > 0) dc.limit_test = limit;
    TrainTest data = load_dataset(dc);
    apply_standardization(data.test, m.meta.stats);
    EvalResult ev = kernel == "packed" ? evaluate_packed(m.net, data.test)
                                       : evaluate(m.net, data.test);

    const std::string cpath = confusion_path.empty()
                                  ? (fs::path(model_path).parent_path() / "confusion.csv").string()
                                  : confusion_path;
    std::ofstream cf(cpath);
    cf << "true\\pred";
    for (int c = 0; c < ev.classes; ++c) cf << "," << c;
    cf << "\n";
    for (int t = 0; t < ev.classes; ++t) {
        cf << t;
        for (int p = 0; p < ev.classes; ++p)
            cf << "," << ev.confusion[static_cast<size_t>(t * ev.classes + p)];
        cf << "\n";
    }
    std::cout << json{{"accuracy", ev.accuracy},
                      {"kernel", kernel},
                      {"samples", data.test.size()},
                      {"confusion_csv", cpath}}
                     .dump()
              << "\n";
    return 0;
}

int cmd_convert(const std::string& in_path, const std::string& out_path, int64_t n_inputs,
                double tol, uint64_t seed) {
    LoadedModel m = load_model(in_path);
    bool any_quantized = false;
    for (const auto& l : m.net.spec.layers)
        if (l.has_weights() && l.provider.kind != ProviderKind::full_precision)
            any_quantized = true;
    if (!any_quantized)
        throw ConfigError("input model has no quantized layers; nothing to convert");

    ConvertResult conv = convert_network(m.net);
    EquivalenceReport rep = verify_equivalence(m.net, conv.network, n_inputs, tol, seed);

    json report{{"max_abs_diff", rep.max_abs_diff},
                {"tol", rep.tol},
                {"inputs", rep.inputs},
                {"pass", rep.pass},
                {"zero_free", quantized_layers_zero_free(conv.network)}};
    json layers = json::array();
    for (const auto& lc : conv.layers)
        layers.push_back({{"layer", lc.original_layer},
                          {"original_width", lc.original_width},
                          {"converted_width", lc.converted_width},
                          {"duplicated", lc.duplicated},
                          {"bits", lc.bits_out},
                          {"exponent_bias", lc.bias_out},
                          {"max_exponent_in", lc.max_exponent_in},
                          {"max_exponent_out", lc.max_exponent_out}});
    report["layers"] = layers;

    ModelMeta meta = m.meta;
    meta.report_json = report.dump();
    save_model(out_path, conv.network, meta);
    std::cout << report.dump() << "\n";
    return rep.pass ? 0 : 4;
}

int cmd_bench(int bits, int64_t length, int64_t trials, const std::string& kernel,
              uint64_t seed) {
    BenchStats shift_stats, dense_stats;
    if (kernel == "shift" || kernel == "both") {
        shift_stats = bench_kernel(KernelKind::shift, bits, length, trials, seed);
        std::cout << bench_json(shift_stats).dump() << "\n";
    }
    if (kernel == "denseshift" || kernel == "both") {
        dense_stats = bench_kernel(KernelKind::denseshift, bits, length, trials, seed);
        std::cout << bench_json(dense_stats).dump() << "\n";
    }
    if (kernel == "both") {
        std::cout << json{{"ratio_shift_over_denseshift",
                           shift_stats.mean_ns / dense_stats.mean_ns}}
                         .dump()
                  << "\n";
    }
    return 0;
}

int cmd_export_traces(const std::string& run_dir) {
    const fs::path dir(run_dir);
    if (!fs::exists(dir / "cosine.csv") || !fs::exists(dir / "trace.csv"))
        throw DataError("run dir is missing cosine.csv/trace.csv: " + run_dir);

    std::ifstream cf(dir / "cosine.csv");
    auto cosine = read_cosine_csv(cf);
    std::ifstream tf(dir / "trace.csv");
    int terms = 0;
    auto traces = read_trace_csv(tf, &terms);

    std::stable_sort(cosine.begin(), cosine.end(), [](const CosineRow& a, const CosineRow& b) {
        return a.layer != b.layer ? a.layer < b.layer : a.epoch < b.epoch;
    });
    std::stable_sort(traces.begin(), traces.end(), [](const TraceRecord& a, const TraceRecord& b) {
        return a.step != b.step ? a.step < b.step : a.index < b.index;
    });

    fs::create_directories(dir / "export");
    {
        std::ofstream f(dir / "export" / "cosine.csv");
        write_cosine_csv(f, cosine);
    }
    {
        std::ofstream f(dir / "export" / "trace.csv");
        write_trace_csv(f, terms, traces);
    }
    std::cout << json{{"cosine_rows", cosine.size()},
                      {"trace_rows", traces.size()},
                      {"export_dir", (dir / "export").string()}}
                     .dump()
              << "\n";
    return 0;
}

int cmd_make_data(const std::string& kind, const std::string& dir, int64_t n_train,
                  int64_t n_test, uint64_t seed) {
    if (kind == "mnist_twin") {
        write_mnist_twin(dir, n_train, n_test, seed);
    } else if (kind == "cifar10_twin") {
        write_cifar10_twin(dir, (n_train + 4) / 5, n_test, seed);
    } else {
        throw ConfigError("make-data supports mnist_twin and cifar10_twin");
    }
    std::cout << json{{"kind", kind}, {"dir", dir}, {"train", n_train}, {"test", n_test}}.dump()
              << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dshift: train, convert, and run zero-free power-of-two shift networks"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "train a network from a JSON config");
    std::string config_path, out_override;
    bool print_config = false;
    int64_t seed_override = -1;
    train->add_option("--config", config_path, "JSON run config");
    train->add_flag("--print-config", print_config, "print the fully expanded config and exit");
    train->add_option("--output-dir", out_override, "override output directory");
    train->add_option("--seed", seed_override, "override training seed");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a model on a dataset");
    std::string model_path, data_kind, data_dir, kernel = "float", confusion_path;
    int64_t limit = 0;
    eval->add_option("--model", model_path, "model file")->required();
    eval->add_option("--data-kind", data_kind, "dataset kind (defaults to the model's)");
    eval->add_option("--data-dir", data_dir, "dataset directory");
    eval->add_option("--limit", limit, "evaluate at most N samples");
    eval->add_option("--kernel", kernel, "float | packed")
        ->check(CLI::IsMember({"float", "packed"}));
    eval->add_option("--confusion", confusion_path, "confusion matrix CSV path");

    // convert
    auto* convert = app.add_subcommand("convert", "rewrite a shift network zero-free");
    std::string in_path, out_path;
    int64_t conv_inputs = 100;
    double conv_tol = 1e-5;
    uint64_t conv_seed = 1;
    convert->add_option("--in", in_path, "input model")->required();
    convert->add_option("--out", out_path, "output model")->required();
    convert->add_option("--inputs", conv_inputs, "equivalence-check inputs");
    convert->add_option("--tol", conv_tol, "equivalence tolerance");
    convert->add_option("--seed", conv_seed, "equivalence-check seed");

    // bench
    auto* bench = app.add_subcommand("bench", "micro-benchmark the MAC kernels");
    int bench_bits = 3;
    int64_t bench_length = 4096, bench_trials = 1000;
    std::string bench_kind = "both";
    uint64_t bench_seed = 1;
    bench->add_option("--bits", bench_bits, "code width (2-4)");
    bench->add_option("--length", bench_length, "elements per dot product");
    bench->add_option("--trials", bench_trials, "timed trials (min 30)");
    bench->add_option("--kernel", bench_kind, "shift | denseshift | both")
        ->check(CLI::IsMember({"shift", "denseshift", "both"}));
    bench->add_option("--seed", bench_seed, "data seed");

    // export-traces
    auto* exp = app.add_subcommand("export-traces", "consolidate run CSVs for plotting");
    std::string run_dir;
    exp->add_option("--run-dir", run_dir, "training output directory")->required();

    // make-data
    auto* mk = app.add_subcommand("make-data", "write a procedural twin dataset");
    std::string mk_kind = "mnist_twin", mk_dir = "data";
    int64_t mk_train = 12000, mk_test = 2000;
    uint64_t mk_seed = 1;
    mk->add_option("--kind", mk_kind, "mnist_twin | cifar10_twin");
    mk->add_option("--dir", mk_dir, "output directory");
    mk->add_option("--train", mk_train, "training samples");
    mk->add_option("--test", mk_test, "test samples");
    mk->add_option("--seed", mk_seed, "generator seed");

    try {
        app.parse(argc, argv);
        if (*train) return cmd_train(config_path, print_config, out_override, seed_override);
        if (*eval) return cmd_eval(model_path, data_kind, data_dir, limit, kernel, confusion_path);
        if (*convert) return cmd_convert(in_path, out_path, conv_inputs, conv_tol, conv_seed);
        if (*bench) return cmd_bench(bench_bits, bench_length, bench_trials, bench_kind, bench_seed);
        if (*exp) return cmd_export_traces(run_dir);
        if (*mk) return cmd_make_data(mk_kind, mk_dir, mk_train, mk_test, mk_seed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
