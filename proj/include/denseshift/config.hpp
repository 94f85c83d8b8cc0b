#pragma once

#include <string>

#include "denseshift/data.hpp"
#include "denseshift/metrics.hpp"
#include "denseshift/nn.hpp"

namespace denseshift {

struct TrainConfig {
    int64_t epochs = 200;
    double base_lr = 1e-3;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int64_t batch_size = 64;
    uint64_t seed = 42;
    std::string schedule = "cosine"; // cosine | constant
    bool wd_on_latents = true;

    void validate() const;
};

struct MetricsConfig {
    bool snapshot_per_epoch = true;
    int64_t trace_elements = 64;
    SnapshotSource snapshot_source = SnapshotSource::discrete;
};

// Preset network shapes expanded into explicit layers at parse time. The
// provider string selects how the quantized layers train.
struct PresetConfig {
    std::string name;                    // lenet | cifar_small | mlp
    std::string provider = "dense_shift"; // full_precision | dense_shift | symmetric_pot | sign_shift
    int bits = 3;
    int exponent_bias = 0;
    int head_exponent_bias = -3;
    bool quantize_classifier = true;
    int classes = 10;
    int64_t width1 = 0, width2 = 0; // conv channel overrides (0 = preset default)
    int64_t head_pool = 4;          // cifar_small: avgpool kernel before the classifier
};

struct RunConfig {
    TrainConfig train;
    DatasetConfig dataset;
    PresetConfig preset;   // used when network.layers is empty
    NetworkSpec network;   // explicit layer list (wins over preset)
    InitConfig init;
    MetricsConfig metrics;
    LatentGradOptions grad;
    std::string output_dir = "runs/out";
};

NetworkSpec expand_preset(const PresetConfig& preset, const std::vector<int64_t>& input_shape);

// JSON <-> config. Parsing applies defaults for missing fields; serialization
// writes every field so --print-config output round-trips to an equal config.
RunConfig parse_run_config(const std::string& json_text);
std::string run_config_to_json(const RunConfig& cfg);

std::string network_spec_to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const std::string& json_text);

std::string dataset_config_to_json(const DatasetConfig& cfg);
DatasetConfig dataset_config_from_json(const std::string& json_text);

bool run_config_equal(const RunConfig& a, const RunConfig& b);

} // namespace denseshift
