#include <filesystem>
#include <fstream>

#include "denseshift/config.hpp"
#include "denseshift/model_io.hpp"
#include "doctest.h"

using namespace denseshift;
namespace fs = std::filesystem;

namespace {

Network mixed_network(uint64_t seed) {
    NetworkSpec spec;
    spec.input_shape = {1, 8, 8};
    LayerSpec c1;
    c1.kind = LayerKind::conv2d;
    c1.in_channels = 1;
    c1.out_channels = 4;
    c1.kernel = 3;
    c1.padding = 1;
    LayerSpec bn;
    bn.kind = LayerKind::batchnorm;
    bn.channels = 4;
    LayerSpec relu;
    relu.kind = LayerKind::relu;
    LayerSpec pool;
    pool.kind = LayerKind::maxpool;
    pool.kernel = 2;
    pool.stride = 2;
    LayerSpec flat;
    flat.kind = LayerKind::flatten;
    LayerSpec l1;
    l1.kind = LayerKind::linear;
    l1.in_features = 64;
    l1.out_features = 12;
    l1.provider.kind = ProviderKind::dense_shift;
    l1.provider.bits = 3;
    l1.provider.exponent_bias = -2;
    LayerSpec relu2 = relu;
    LayerSpec l2;
    l2.kind = LayerKind::linear;
    l2.in_features = 12;
    l2.out_features = 5;
    l2.provider.kind = ProviderKind::quantizer;
    l2.provider.quant_kind = QuantKind::sign_shift;
    l2.provider.bits = 3;
    l2.provider.exponent_bias = -3;
    spec.layers = {c1, bn, relu, pool, flat, l1, relu2, l2};
    Network net = Network::build(spec, {InitStrategy::low_variance, 1e-3}, seed);
    // make bn stats non-trivial so the round trip is meaningful
    Rng rng(seed + 1);
    for (int64_t i = 0; i < 4; ++i) {
        net.states[1].running_mean[i] = rng.normal(0, 1);
        net.states[1].running_var[i] = std::abs(rng.normal(1, 0.2));
    }
    return net;
}

} // namespace

TEST_CASE("model file round trip is bit-exact for discrete and float layers") {
    Network net = mixed_network(3);
    ModelMeta meta;
    meta.stats.mean = {0.13};
    meta.stats.stddev = {0.31};
    meta.classes = 5;
    meta.dataset.kind = "mnist_twin";

    const auto path = (fs::temp_directory_path() / "dsh_model_rt.dsnm").string();
    save_model(path, net, meta);
    LoadedModel back = load_model(path);

    CHECK(back.meta.classes == 5);
    CHECK(back.meta.stats.mean == meta.stats.mean);
    CHECK(back.meta.stats.stddev == meta.stats.stddev);
    REQUIRE(back.net.spec.layers.size() == net.spec.layers.size());

    // discrete layers: identical effective weights
    CHECK(effective_weights(back.net, 5).data == effective_weights(net, 5).data);
    CHECK(effective_weights(back.net, 7).data == effective_weights(net, 7).data);
    // float layers bit-exact
    CHECK(back.net.states[0].weight.data == net.states[0].weight.data);
    CHECK(back.net.states[1].running_mean.data == net.states[1].running_mean.data);

    // forward agreement, bit for bit
    Rng rng(9);
    Tensor x({2, 1, 8, 8});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.normal(0, 1);
    CHECK(forward_eval(net, x).data == forward_eval(back.net, x).data);

    // save(load(save(m))) is stable
    const auto path2 = (fs::temp_directory_path() / "dsh_model_rt2.dsnm").string();
    save_model(path2, back.net, back.meta);
    CHECK(file_checksum(path) == file_checksum(path2));
    fs::remove(path);
    fs::remove(path2);
}

TEST_CASE("model checksum catches corruption") {
    Network net = mixed_network(4);
    const auto path = (fs::temp_directory_path() / "dsh_model_bad.dsnm").string();
    save_model(path, net, {{{0.0}, {1.0}}, 5, {}, ""});
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(40);
        char c;
        f.seekg(40);
        f.get(c);
        f.seekp(40);
        f.put(static_cast<char>(c ^ 0x5a));
    }
    CHECK_THROWS_AS(load_model(path), DataError);
    fs::remove(path);
}

TEST_CASE("run config JSON round trips") {
    RunConfig cfg;
    cfg.train.epochs = 20;
    cfg.train.seed = 7;
    cfg.dataset.kind = "cifar10_twin";
    cfg.preset.name = "cifar_small";
    cfg.preset.provider = "symmetric_pot";
    cfg.preset.exponent_bias = -5;
    cfg.init.strategy = InitStrategy::kaiming;
    cfg.output_dir = "runs/t";

    const std::string text = run_config_to_json(cfg);
    RunConfig back = parse_run_config(text);
    CHECK(run_config_equal(cfg, back));
    CHECK(run_config_to_json(back) == text);

    CHECK_THROWS_AS(parse_run_config("{not json"), ConfigError);
    CHECK_THROWS_AS(parse_run_config(R"({"train":{"momentum":1.5}})"), ConfigError);
    CHECK_THROWS_AS(parse_run_config(R"({"train":{"schedule":"linear"}})"), ConfigError);
}

TEST_CASE("explicit network JSON survives the round trip") {
    RunConfig cfg;
    cfg.preset.name = "lenet";
    cfg.network = expand_preset(cfg.preset, {1, 28, 28});
    const std::string text = run_config_to_json(cfg);
    RunConfig back = parse_run_config(text);
    REQUIRE_FALSE(back.network.layers.empty());
    CHECK(network_spec_to_json(back.network) == network_spec_to_json(cfg.network));
}

TEST_CASE("presets expand to consistent geometries") {
    PresetConfig p;
    p.name = "lenet";
    p.provider = "dense_shift";
    NetworkSpec lenet = expand_preset(p, {1, 28, 28});
    CHECK(lenet.output_shape() == std::vector<int64_t>{10});
    // first conv full precision, later quantized
    CHECK(lenet.layers[0].provider.kind == ProviderKind::full_precision);
    CHECK(lenet.layers[4].provider.kind == ProviderKind::dense_shift);

    p.name = "cifar_small";
    p.provider = "sign_shift";
    NetworkSpec cs = expand_preset(p, {3, 32, 32});
    CHECK(cs.output_shape() == std::vector<int64_t>{10});
    CHECK(cs.layers[4].provider.kind == ProviderKind::quantizer);
    CHECK(cs.layers[4].provider.quant_kind == QuantKind::sign_shift);

    p.name = "nope";
    CHECK_THROWS_AS(expand_preset(p, {1, 28, 28}), ConfigError);

    p.name = "lenet";
    p.quantize_classifier = false;
    NetworkSpec nq = expand_preset(p, {1, 28, 28});
    CHECK(nq.layers.back().provider.kind == ProviderKind::full_precision);
}
