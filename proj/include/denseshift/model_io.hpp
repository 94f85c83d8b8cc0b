#pragma once

#include <string>

#include "denseshift/config.hpp"
#include "denseshift/data.hpp"
#include "denseshift/nn.hpp"

namespace denseshift {

// Model file "DSNM": magic, version u8, u32 LE length + JSON (network spec,
// standardization stats, class count), per-layer payloads (packed DSHW blobs
// for quantized layers, raw f64 tensors otherwise), trailing fnv1a-64 checksum
// over everything before it.
struct ModelMeta {
    ChannelStats stats;
    int classes = 0;
    DatasetConfig dataset;   // what the model was trained on (eval defaults)
    std::string report_json; // optional, e.g. conversion equivalence report
};

struct LoadedModel {
    Network net;
    ModelMeta meta;
};

void save_model(const std::string& path, const Network& net, const ModelMeta& meta);
LoadedModel load_model(const std::string& path);

uint64_t file_checksum(const std::string& path);

} // namespace denseshift
