#include "denseshift/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "denseshift/convert.hpp"
#include "denseshift/kernel.hpp"
#include "denseshift/optim.hpp"
#include "json.hpp"

namespace denseshift {

namespace {

Tensor gather_batch(const Dataset& d, const std::vector<int64_t>& order, int64_t start,
                    int64_t count, std::vector<int>* labels) {
    auto shape = d.images.shape;
    shape[0] = count;
    Tensor x(shape);
    const int64_t per = d.images.numel() / d.size();
    for (int64_t i = 0; i < count; ++i) {
        const int64_t src = order[static_cast<size_t>(start + i)];
        std::copy_n(d.images.data.begin() + src * per, per, x.data.begin() + i * per);
        if (labels) labels->push_back(d.labels[static_cast<size_t>(src)]);
    }
    return x;
}

std::vector<size_t> weight_layers(const Network& net) {
    std::vector<size_t> out;
    for (size_t li = 0; li < net.spec.layers.size(); ++li)
        if (net.spec.layers[li].has_weights()) out.push_back(li);
    return out;
}

int argmax_row(const Tensor& logits, int64_t row) {
    int best = 0;
    double bestv = logits.at2(row, 0);
    for (int64_t c = 1; c < logits.shape[1]; ++c)
        if (logits.at2(row, c) > bestv) {
            bestv = logits.at2(row, c);
            best = static_cast<int>(c);
        }
    return best;
}

} // namespace

namespace {

// Forward through the packed kernels for quantized layers; float elsewhere.
Tensor forward_packed(const Network& net, const Tensor& x0) {
    Tensor cur = x0;
    const int64_t batch = x0.shape[0];
    Network& mutable_net = const_cast<Network&>(net); // eval-mode forward only
    for (size_t li = 0; li < net.spec.layers.size(); ++li) {
        const auto& l = net.spec.layers[li];
        const bool packed_layer =
            l.has_weights() && (l.provider.kind == ProviderKind::dense_shift ||
                                (l.provider.kind == ProviderKind::quantizer &&
                                 l.provider.quant_kind == QuantKind::symmetric_pot));
        if (!packed_layer) {
            // run the single layer through the float engine
            NetworkSpec sub;
            sub.input_shape = std::vector<int64_t>(cur.shape.begin() + 1, cur.shape.end());
            sub.layers = {l};
            Network tmp;
            tmp.spec = sub;
            tmp.states = {mutable_net.states[li]};
            cur = forward_eval(tmp, cur);
            continue;
        }

        // weights as codes
        const Tensor w = effective_weights(net, li);
        std::vector<ShiftCode> codes(static_cast<size_t>(w.numel()));
        for (int64_t i = 0; i < w.numel(); ++i) {
            auto d = decompose_power_of_two(w[i]);
            if (!d) throw NumericError("packed eval: weight is not a power of two");
            codes[static_cast<size_t>(i)] = {
                static_cast<int8_t>(d->first),
                static_cast<uint8_t>(d->second - l.provider.exponent_bias)};
        }
        PackedWeightBlob blob = pack(codes, l.provider.bits, l.provider.exponent_bias);
        FixedActivations acts = quantize_activations(cur);

        if (l.kind == LayerKind::conv2d) {
            auto out = conv_forward_packed(
                acts, blob, {l.in_channels, l.out_channels, l.kernel, l.stride, l.padding});
            Tensor y(out.shape);
            const double scale = std::exp2(l.provider.exponent_bias + acts.scale_exponent);
            const int64_t per = y.numel() / (batch * l.out_channels);
            for (int64_t i = 0; i < y.numel(); ++i) y[i] = static_cast<double>(out.acc[static_cast<size_t>(i)]) * scale;
            if (l.has_bias)
                for (int64_t n = 0; n < batch; ++n)
                    for (int64_t c = 0; c < l.out_channels; ++c)
                        for (int64_t i = 0; i < per; ++i)
                            y[(n * l.out_channels + c) * per + i] += net.states[li].bias[c];
            cur = std::move(y);
        } else {
            Tensor y({batch, l.out_features});
            const double scale = std::exp2(l.provider.exponent_bias + acts.scale_exponent);
            for (int64_t n = 0; n < batch; ++n) {
                std::span<const int8_t> row(acts.values.data() + n * l.in_features,
                                            static_cast<size_t>(l.in_features));
                for (int64_t o = 0; o < l.out_features; ++o) {
                    std::vector<ShiftCode> wrow(codes.begin() + o * l.in_features,
                                                codes.begin() + (o + 1) * l.in_features);
                    PackedWeightBlob rb = pack(wrow, l.provider.bits, l.provider.exponent_bias);
                    double v = static_cast<double>(dot_denseshift(row, rb)) * scale;
                    if (l.has_bias) v += net.states[li].bias[o];
                    y.at2(n, o) = v;
                }
            }
            cur = std::move(y);
        }
    }
    return cur;
}

} // namespace

std::vector<int> predict(const Network& net, const Dataset& data, bool packed, int64_t batch) {
    if (data.size() == 0) throw DataError("evaluate: empty dataset");
    std::vector<int64_t> order(static_cast<size_t>(data.size()));
    std::iota(order.begin(), order.end(), 0);
    std::vector<int> preds;
    preds.reserve(static_cast<size_t>(data.size()));
    for (int64_t start = 0; start < data.size(); start += batch) {
        const int64_t take = std::min<int64_t>(batch, data.size() - start);
        Tensor x = gather_batch(data, order, start, take, nullptr);
        Tensor logits = packed ? forward_packed(net, x) : forward_eval(net, x);
        for (int64_t i = 0; i < take; ++i) preds.push_back(argmax_row(logits, i));
    }
    return preds;
}

namespace {

EvalResult eval_impl(const Network& net, const Dataset& data, bool packed, int64_t batch) {
    const std::vector<int> preds = predict(net, data, packed, batch);
    EvalResult res;
    res.classes = data.classes;
    res.confusion.assign(static_cast<size_t>(data.classes) * data.classes, 0);
    int64_t correct = 0;
    for (int64_t i = 0; i < data.size(); ++i) {
        const int pred = preds[static_cast<size_t>(i)];
        const int truth = data.labels[static_cast<size_t>(i)];
        res.confusion[static_cast<size_t>(truth * data.classes + pred)]++;
        if (pred == truth) ++correct;
    }
    res.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    return res;
}

} // namespace

EvalResult evaluate(const Network& net, const Dataset& data, int64_t batch) {
    return eval_impl(net, data, false, batch);
}

EvalResult evaluate_packed(const Network& net, const Dataset& data, int64_t batch) {
    return eval_impl(net, data, true, batch);
}

TrainOutput train_network(Network& net, const Dataset& train, const TrainConfig& cfg,
                          const MetricsConfig& metrics) {
    cfg.validate();
    if (train.size() == 0) throw DataError("training set is empty");

    SgdOptimizer opt(net, {cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.wd_on_latents});
    TraceRecorder tracer(net, metrics.trace_elements);
    const auto wlayers = weight_layers(net);

    std::vector<FilterSnapshot> init_snaps;
    for (size_t li : wlayers)
        init_snaps.push_back(snapshot_filters(net, li, 0, metrics.snapshot_source));

    TrainOutput out;
    out.trace_scale_terms = tracer.active() ? tracer.scale_terms() : 0;
    std::vector<int64_t> order(static_cast<size_t>(train.size()));
    std::iota(order.begin(), order.end(), 0);

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.schedule == "cosine"
                              ? cosine_lr_at(cfg.base_lr, epoch, cfg.epochs)
                              : cfg.base_lr;
        Rng shuffle_rng = Rng::for_stream(cfg.seed, 1000 + static_cast<uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng.engine());

        double loss_sum = 0.0;
        int64_t batches = 0;
        for (int64_t start = 0; start < train.size(); start += cfg.batch_size) {
            const int64_t take = std::min<int64_t>(cfg.batch_size, train.size() - start);
            std::vector<int> labels;
            Tensor x = gather_batch(train, order, start, take, &labels);
            auto fwd = forward(net, x, true);
            auto loss = softmax_cross_entropy(fwd.logits, labels);
            if (!std::isfinite(loss.loss))
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch));
            auto grads = backward(net, fwd, loss.grad_logits);
            try {
                opt.step(net, grads, lr);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                                   ")");
            }
            tracer.record(net, out.steps);
            ++out.steps;
            loss_sum += loss.loss;
            ++batches;
        }
        out.epoch_losses.push_back(loss_sum / static_cast<double>(std::max<int64_t>(batches, 1)));
        out.epoch_lrs.push_back(lr);

        if (metrics.snapshot_per_epoch) {
            for (size_t k = 0; k < wlayers.size(); ++k) {
                auto snap = snapshot_filters(net, wlayers[k], epoch + 1, metrics.snapshot_source);
                out.cosine_rows.push_back(
                    {wlayers[k], epoch + 1, filter_avg_cosine(init_snaps[k], snap)});
            }
        }
    }

    for (size_t k = 0; k < wlayers.size(); ++k) {
        auto snap = snapshot_filters(net, wlayers[k], cfg.epochs, metrics.snapshot_source);
        out.final_cosine.push_back({wlayers[k], filter_avg_cosine(init_snaps[k], snap)});
    }
    out.traces = tracer.records();
    return out;
}

std::vector<int64_t> dataset_input_shape(const DatasetConfig& cfg) {
    if (cfg.kind == "mnist" || cfg.kind == "mnist_twin") return {1, 28, 28};
    if (cfg.kind == "cifar10" || cfg.kind == "cifar10_twin") return {3, 32, 32};
    if (cfg.kind == "blobs") return {cfg.blob_dim, 1, 1};
    throw ConfigError("unknown dataset kind: " + cfg.kind);
}

NetworkSpec resolve_network(const RunConfig& cfg) {
    if (!cfg.network.layers.empty()) return cfg.network;
    if (cfg.preset.name.empty())
        throw ConfigError("config needs either an explicit network or a preset name");
    return expand_preset(cfg.preset, dataset_input_shape(cfg.dataset));
}

RunResult run_training(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    cfg.train.validate();
    TrainTest data = load_dataset(cfg.dataset);
    const ChannelStats stats = compute_channel_stats(data.train);
    apply_standardization(data.train, stats);
    apply_standardization(data.test, stats);

    NetworkSpec spec = resolve_network(cfg);
    Network net = Network::build(spec, cfg.init, cfg.train.seed);
    net.latent_grad_opts = cfg.grad;

    TrainOutput train_out = train_network(net, data.train, cfg.train, cfg.metrics);
    EvalResult ev = evaluate(net, data.test);

    fs::create_directories(cfg.output_dir);
    const std::string model_path = (fs::path(cfg.output_dir) / "model.dsnm").string();
    save_model(model_path, net, {stats, data.train.classes, cfg.dataset, ""});

    {
        std::ofstream f(fs::path(cfg.output_dir) / "cosine.csv");
        write_cosine_csv(f, train_out.cosine_rows);
    }
    {
        std::ofstream f(fs::path(cfg.output_dir) / "trace.csv");
        write_trace_csv(f, train_out.trace_scale_terms, train_out.traces);
    }
    {
        std::ofstream f(fs::path(cfg.output_dir) / "metrics.csv");
        f << "epoch,lr,train_loss\n";
        f.precision(17);
        for (size_t e = 0; e < train_out.epoch_losses.size(); ++e)
            f << (e + 1) << "," << train_out.epoch_lrs[e] << "," << train_out.epoch_losses[e]
              << "\n";
    }

    RunResult res;
    res.model_path = model_path;
    res.model_checksum = file_checksum(model_path);
    res.test_accuracy = ev.accuracy;
    res.train = std::move(train_out);

    {
        nlohmann::json j;
        j["test_accuracy"] = res.test_accuracy;
        j["model_checksum"] = res.model_checksum;
        j["steps"] = res.train.steps;
        nlohmann::json cosines = nlohmann::json::object();
        for (const auto& [layer, cos] : res.train.final_cosine)
            cosines[std::to_string(layer)] = cos;
        j["final_cosine"] = cosines;
        std::ofstream f(fs::path(cfg.output_dir) / "summary.json");
        f << j.dump(2) << "\n";
    }
    return res;
}

} // namespace denseshift
