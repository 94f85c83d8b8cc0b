#include "denseshift/config.hpp"

#include "json.hpp"

namespace denseshift {

using nlohmann::json;

void TrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (base_lr <= 0) throw ConfigError("base_lr must be > 0");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0,1)");
    if (batch_size <= 0) throw ConfigError("batch_size must be > 0");
    if (schedule != "cosine" && schedule != "constant")
        throw ConfigError("schedule must be cosine or constant");
}

namespace {

WeightProvider provider_of(const PresetConfig& p, bool head) {
    WeightProvider w;
    const int bias = head ? p.head_exponent_bias : p.exponent_bias;
    if (p.provider == "full_precision") {
        w.kind = ProviderKind::full_precision;
    } else if (p.provider == "dense_shift") {
        w.kind = ProviderKind::dense_shift;
        w.bits = p.bits;
        w.exponent_bias = bias;
    } else if (p.provider == "symmetric_pot" || p.provider == "sign_shift") {
        w.kind = ProviderKind::quantizer;
        w.quant_kind =
            p.provider == "symmetric_pot" ? QuantKind::symmetric_pot : QuantKind::sign_shift;
        w.bits = p.bits;
        w.exponent_bias = bias;
    } else {
        throw ConfigError("unknown preset provider: " + p.provider);
    }
    return w;
}

LayerSpec conv_spec(int64_t cin, int64_t cout, int64_t k, int64_t stride, int64_t pad,
                    WeightProvider prov) {
    LayerSpec l;
    l.kind = LayerKind::conv2d;
    l.in_channels = cin;
    l.out_channels = cout;
    l.kernel = k;
    l.stride = stride;
    l.padding = pad;
    l.provider = prov;
    return l;
}

LayerSpec linear_spec(int64_t fin, int64_t fout, WeightProvider prov) {
    LayerSpec l;
    l.kind = LayerKind::linear;
    l.in_features = fin;
    l.out_features = fout;
    l.provider = prov;
    return l;
}

LayerSpec bn_spec(int64_t c) {
    LayerSpec l;
    l.kind = LayerKind::batchnorm;
    l.channels = c;
    return l;
}

LayerSpec plain(LayerKind k) {
    LayerSpec l;
    l.kind = k;
    return l;
}

LayerSpec pool_spec(int64_t k, int64_t s) {
    LayerSpec l;
    l.kind = LayerKind::maxpool;
    l.kernel = k;
    l.stride = s;
    return l;
}

} // namespace

NetworkSpec expand_preset(const PresetConfig& p, const std::vector<int64_t>& input_shape) {
    const WeightProvider fp{};
    const WeightProvider quant = provider_of(p, false);
    const WeightProvider head = p.quantize_classifier ? provider_of(p, true) : fp;

    NetworkSpec spec;
    spec.input_shape = input_shape;
    if (p.name == "lenet") {
        const int64_t c1 = p.width1 > 0 ? p.width1 : 8;
        const int64_t c2 = p.width2 > 0 ? p.width2 : 16;
        // first conv stays full precision
        spec.layers = {conv_spec(input_shape[0], c1, 5, 1, 0, fp),
                       bn_spec(c1),
                       plain(LayerKind::relu),
                       pool_spec(2, 2),
                       conv_spec(c1, c2, 5, 1, 0, quant),
                       bn_spec(c2),
                       plain(LayerKind::relu),
                       pool_spec(2, 2),
                       plain(LayerKind::flatten)};
        const auto flat = spec.output_shape();
        spec.layers.push_back(linear_spec(flat[0], p.classes, head));
    } else if (p.name == "cifar_small") {
        const int64_t c1 = p.width1 > 0 ? p.width1 : 16;
        const int64_t c2 = p.width2 > 0 ? p.width2 : 32;
        // coarse average pooling after conv2 keeps the classifier from reading
        // fine part positions directly, so arrangement detection lands on conv2
        LayerSpec avg;
        avg.kind = LayerKind::avgpool;
        avg.kernel = p.head_pool;
        avg.stride = p.head_pool;
        spec.layers = {conv_spec(input_shape[0], c1, 3, 1, 1, fp),
                       bn_spec(c1),
                       plain(LayerKind::relu),
                       pool_spec(2, 2),
                       conv_spec(c1, c2, 3, 1, 1, quant),
                       bn_spec(c2),
                       plain(LayerKind::relu),
                       avg,
                       plain(LayerKind::flatten)};
        const auto flat = spec.output_shape();
        spec.layers.push_back(linear_spec(flat[0], p.classes, head));
    } else if (p.name == "mlp") {
        spec.layers = {plain(LayerKind::flatten)};
        const auto flat = spec.output_shape();
        spec.layers.push_back(linear_spec(flat[0], 32, quant));
        spec.layers.push_back(plain(LayerKind::relu));
        spec.layers.push_back(linear_spec(32, p.classes, head));
    } else {
        throw ConfigError("unknown preset: " + p.name);
    }
    spec.validate();
    return spec;
}

namespace {

json provider_to_json(const WeightProvider& p) {
    switch (p.kind) {
    case ProviderKind::full_precision:
        return {{"kind", "full_precision"}};
    case ProviderKind::dense_shift:
        return {{"kind", "dense_shift"}, {"bits", p.bits}, {"exponent_bias", p.exponent_bias}};
    case ProviderKind::quantizer:
        return {{"kind", "quantizer"},
                {"quantizer", p.quant_kind == QuantKind::symmetric_pot ? "symmetric_pot"
                                                                       : "sign_shift"},
                {"bits", p.bits},
                {"exponent_bias", p.exponent_bias},
                {"zero_threshold", p.zero_threshold}};
    }
    throw ConfigError("bad provider");
}

WeightProvider provider_from_json(const json& j) {
    WeightProvider p;
    const std::string kind = j.value("kind", "full_precision");
    if (kind == "full_precision") {
        p.kind = ProviderKind::full_precision;
    } else if (kind == "dense_shift") {
        p.kind = ProviderKind::dense_shift;
        p.bits = j.value("bits", 3);
        p.exponent_bias = j.value("exponent_bias", 0);
    } else if (kind == "quantizer") {
        p.kind = ProviderKind::quantizer;
        const std::string q = j.value("quantizer", "symmetric_pot");
        if (q == "symmetric_pot")
            p.quant_kind = QuantKind::symmetric_pot;
        else if (q == "sign_shift")
            p.quant_kind = QuantKind::sign_shift;
        else
            throw ConfigError("unknown quantizer kind: " + q);
        p.bits = j.value("bits", 3);
        p.exponent_bias = j.value("exponent_bias", 0);
        p.zero_threshold = j.value("zero_threshold", -1.0);
    } else {
        throw ConfigError("unknown provider kind: " + kind);
    }
    return p;
}

const char* kind_name(LayerKind k) {
    switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::linear: return "linear";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::channel_dup: return "channel_dup";
    }
    throw ConfigError("bad layer kind");
}

json layer_to_json(const LayerSpec& l) {
    json j;
    j["kind"] = kind_name(l.kind);
    switch (l.kind) {
    case LayerKind::conv2d:
        j["in_channels"] = l.in_channels;
        j["out_channels"] = l.out_channels;
        j["kernel"] = l.kernel;
        j["stride"] = l.stride;
        j["padding"] = l.padding;
        j["bias"] = l.has_bias;
        j["provider"] = provider_to_json(l.provider);
        break;
    case LayerKind::linear:
        j["in_features"] = l.in_features;
        j["out_features"] = l.out_features;
        j["bias"] = l.has_bias;
        j["provider"] = provider_to_json(l.provider);
        break;
    case LayerKind::batchnorm:
        j["channels"] = l.channels;
        break;
    case LayerKind::maxpool:
    case LayerKind::avgpool:
        j["kernel"] = l.kernel;
        j["stride"] = l.stride;
        break;
    case LayerKind::channel_dup:
        j["sources"] = l.dup_sources;
        break;
    default:
        break;
    }
    return j;
}

LayerSpec layer_from_json(const json& j) {
    LayerSpec l;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "conv2d") {
        l.kind = LayerKind::conv2d;
        l.in_channels = j.at("in_channels").get<int64_t>();
        l.out_channels = j.at("out_channels").get<int64_t>();
        l.kernel = j.at("kernel").get<int64_t>();
        l.stride = j.value("stride", int64_t{1});
        l.padding = j.value("padding", int64_t{0});
        l.has_bias = j.value("bias", true);
        if (j.contains("provider")) l.provider = provider_from_json(j["provider"]);
    } else if (kind == "linear") {
        l.kind = LayerKind::linear;
        l.in_features = j.at("in_features").get<int64_t>();
        l.out_features = j.at("out_features").get<int64_t>();
        l.has_bias = j.value("bias", true);
        if (j.contains("provider")) l.provider = provider_from_json(j["provider"]);
    } else if (kind == "batchnorm") {
        l.kind = LayerKind::batchnorm;
        l.channels = j.at("channels").get<int64_t>();
    } else if (kind == "relu") {
        l.kind = LayerKind::relu;
    } else if (kind == "maxpool" || kind == "avgpool") {
        l.kind = kind == "maxpool" ? LayerKind::maxpool : LayerKind::avgpool;
        l.kernel = j.at("kernel").get<int64_t>();
        l.stride = j.value("stride", l.kernel);
    } else if (kind == "flatten") {
        l.kind = LayerKind::flatten;
    } else if (kind == "channel_dup") {
        l.kind = LayerKind::channel_dup;
        l.dup_sources = j.at("sources").get<std::vector<int64_t>>();
    } else {
        throw ConfigError("unknown layer kind: " + kind);
    }
    return l;
}

json network_to_json_obj(const NetworkSpec& spec) {
    json j;
    j["input_shape"] = spec.input_shape;
    j["layers"] = json::array();
    for (const auto& l : spec.layers) j["layers"].push_back(layer_to_json(l));
    return j;
}

json dataset_to_json_obj(const DatasetConfig& d) {
    return json{{"kind", d.kind},
                {"dir", d.dir},
                {"twin_seed", d.twin_seed},
                {"twin_train", d.twin_train},
                {"twin_test", d.twin_test},
                {"limit_train", d.limit_train},
                {"limit_test", d.limit_test},
                {"blob_classes", d.blob_classes},
                {"blob_dim", d.blob_dim},
                {"blob_n_per_class", d.blob_n_per_class}};
}

DatasetConfig dataset_from_json_obj(const json& j) {
    DatasetConfig d;
    d.kind = j.value("kind", d.kind);
    d.dir = j.value("dir", d.dir);
    d.twin_seed = j.value("twin_seed", d.twin_seed);
    d.twin_train = j.value("twin_train", d.twin_train);
    d.twin_test = j.value("twin_test", d.twin_test);
    d.limit_train = j.value("limit_train", d.limit_train);
    d.limit_test = j.value("limit_test", d.limit_test);
    d.blob_classes = j.value("blob_classes", d.blob_classes);
    d.blob_dim = j.value("blob_dim", d.blob_dim);
    d.blob_n_per_class = j.value("blob_n_per_class", d.blob_n_per_class);
    return d;
}

NetworkSpec network_from_json_obj(const json& j) {
    NetworkSpec spec;
    spec.input_shape = j.at("input_shape").get<std::vector<int64_t>>();
    for (const auto& lj : j.at("layers")) spec.layers.push_back(layer_from_json(lj));
    spec.validate();
    return spec;
}

} // namespace

std::string network_spec_to_json(const NetworkSpec& spec) {
    return network_to_json_obj(spec).dump();
}

NetworkSpec network_spec_from_json(const std::string& text) {
    try {
        return network_from_json_obj(json::parse(text));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad network JSON: ") + e.what());
    }
}

std::string dataset_config_to_json(const DatasetConfig& cfg) {
    return dataset_to_json_obj(cfg).dump();
}

DatasetConfig dataset_config_from_json(const std::string& text) {
    try {
        return dataset_from_json_obj(json::parse(text));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad dataset JSON: ") + e.what());
    }
}

RunConfig parse_run_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    try {
        RunConfig cfg;
        if (j.contains("train")) {
            const auto& t = j["train"];
            cfg.train.epochs = t.value("epochs", cfg.train.epochs);
            cfg.train.base_lr = t.value("base_lr", cfg.train.base_lr);
            cfg.train.momentum = t.value("momentum", cfg.train.momentum);
            cfg.train.weight_decay = t.value("weight_decay", cfg.train.weight_decay);
            cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
            cfg.train.seed = t.value("seed", cfg.train.seed);
            cfg.train.schedule = t.value("schedule", cfg.train.schedule);
            cfg.train.wd_on_latents = t.value("wd_on_latents", cfg.train.wd_on_latents);
        }
        cfg.train.validate();
        if (j.contains("dataset")) cfg.dataset = dataset_from_json_obj(j["dataset"]);
        if (j.contains("preset")) {
            const auto& p = j["preset"];
            cfg.preset.name = p.value("name", cfg.preset.name);
            cfg.preset.provider = p.value("provider", cfg.preset.provider);
            cfg.preset.bits = p.value("bits", cfg.preset.bits);
            cfg.preset.exponent_bias = p.value("exponent_bias", cfg.preset.exponent_bias);
            cfg.preset.head_exponent_bias =
                p.value("head_exponent_bias", cfg.preset.head_exponent_bias);
            cfg.preset.quantize_classifier =
                p.value("quantize_classifier", cfg.preset.quantize_classifier);
            cfg.preset.classes = p.value("classes", cfg.preset.classes);
            cfg.preset.width1 = p.value("width1", cfg.preset.width1);
            cfg.preset.width2 = p.value("width2", cfg.preset.width2);
            cfg.preset.head_pool = p.value("head_pool", cfg.preset.head_pool);
        }
        if (j.contains("network") && !j["network"].is_null())
            cfg.network = network_from_json_obj(j["network"]);
        if (j.contains("init")) {
            const std::string s = j["init"].value("strategy", "low_variance");
            if (s == "low_variance")
                cfg.init.strategy = InitStrategy::low_variance;
            else if (s == "kaiming")
                cfg.init.strategy = InitStrategy::kaiming;
            else
                throw ConfigError("unknown init strategy: " + s);
            cfg.init.sigma = j["init"].value("sigma", cfg.init.sigma);
        }
        if (j.contains("metrics")) {
            const auto& m = j["metrics"];
            cfg.metrics.snapshot_per_epoch =
                m.value("snapshot_per_epoch", cfg.metrics.snapshot_per_epoch);
            cfg.metrics.trace_elements = m.value("trace_elements", cfg.metrics.trace_elements);
            const std::string src = m.value("snapshot_source", "discrete");
            if (src == "discrete")
                cfg.metrics.snapshot_source = SnapshotSource::discrete;
            else if (src == "continuous")
                cfg.metrics.snapshot_source = SnapshotSource::continuous;
            else
                throw ConfigError("unknown snapshot source: " + src);
        }
        if (j.contains("grad")) {
            cfg.grad.rescale_wsign = j["grad"].value("rescale_wsign", cfg.grad.rescale_wsign);
            cfg.grad.drop_ln2 = j["grad"].value("drop_ln2", cfg.grad.drop_ln2);
        }
        cfg.output_dir = j.value("output_dir", cfg.output_dir);
        return cfg;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config field error: ") + e.what());
    }
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j;
    j["train"] = {{"epochs", cfg.train.epochs},
                  {"base_lr", cfg.train.base_lr},
                  {"momentum", cfg.train.momentum},
                  {"weight_decay", cfg.train.weight_decay},
                  {"batch_size", cfg.train.batch_size},
                  {"seed", cfg.train.seed},
                  {"schedule", cfg.train.schedule},
                  {"wd_on_latents", cfg.train.wd_on_latents}};
    j["dataset"] = dataset_to_json_obj(cfg.dataset);
    j["preset"] = {{"name", cfg.preset.name},
                   {"provider", cfg.preset.provider},
                   {"bits", cfg.preset.bits},
                   {"exponent_bias", cfg.preset.exponent_bias},
                   {"head_exponent_bias", cfg.preset.head_exponent_bias},
                   {"quantize_classifier", cfg.preset.quantize_classifier},
                   {"classes", cfg.preset.classes},
                   {"width1", cfg.preset.width1},
                   {"width2", cfg.preset.width2},
                   {"head_pool", cfg.preset.head_pool}};
    if (!cfg.network.layers.empty())
        j["network"] = network_to_json_obj(cfg.network);
    else
        j["network"] = nullptr;
    j["init"] = {{"strategy",
                  cfg.init.strategy == InitStrategy::low_variance ? "low_variance" : "kaiming"},
                 {"sigma", cfg.init.sigma}};
    j["metrics"] = {{"snapshot_per_epoch", cfg.metrics.snapshot_per_epoch},
                    {"trace_elements", cfg.metrics.trace_elements},
                    {"snapshot_source",
                     cfg.metrics.snapshot_source == SnapshotSource::discrete ? "discrete"
                                                                             : "continuous"}};
    j["grad"] = {{"rescale_wsign", cfg.grad.rescale_wsign}, {"drop_ln2", cfg.grad.drop_ln2}};
    j["output_dir"] = cfg.output_dir;
    return j.dump(2);
}

bool run_config_equal(const RunConfig& a, const RunConfig& b) {
    return run_config_to_json(a) == run_config_to_json(b);
}

} // namespace denseshift
