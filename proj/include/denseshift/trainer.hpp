#pragma once

#include <string>
#include <vector>

#include "denseshift/config.hpp"
#include "denseshift/data.hpp"
#include "denseshift/metrics.hpp"
#include "denseshift/model_io.hpp"
#include "denseshift/nn.hpp"

namespace denseshift {

struct EvalResult {
    double accuracy = 0.0;
    int classes = 0;
    std::vector<int64_t> confusion; // classes x classes, row = true label
};

EvalResult evaluate(const Network& net, const Dataset& data, int64_t batch = 256);

// Fixed-point inference path: quantized conv/linear layers run on 8-bit
// activations through the packed shift kernels; everything else stays float.
EvalResult evaluate_packed(const Network& net, const Dataset& data, int64_t batch = 256);

// Top-1 predictions, through the float path or the packed-kernel path.
std::vector<int> predict(const Network& net, const Dataset& data, bool packed = false,
                         int64_t batch = 256);

struct TrainOutput {
    std::vector<double> epoch_losses;
    std::vector<double> epoch_lrs;
    std::vector<CosineRow> cosine_rows;                  // per epoch x weight layer
    std::vector<std::pair<size_t, double>> final_cosine; // per weight layer
    int trace_scale_terms = 0;
    std::vector<TraceRecord> traces;
    int64_t steps = 0;
};

// Runs the SGD loop on an already-standardized training set. Throws
// NumericError (naming the epoch) if the loss or a gradient goes non-finite.
TrainOutput train_network(Network& net, const Dataset& train, const TrainConfig& cfg,
                          const MetricsConfig& metrics);

std::vector<int64_t> dataset_input_shape(const DatasetConfig& cfg);
NetworkSpec resolve_network(const RunConfig& cfg);

struct RunResult {
    std::string model_path;
    uint64_t model_checksum = 0;
    double test_accuracy = 0.0;
    TrainOutput train;
};

// End-to-end: load + standardize data, build, train, evaluate, and write
// model.dsnm, cosine.csv, trace.csv, metrics.csv, summary.json to output_dir.
RunResult run_training(const RunConfig& cfg);

} // namespace denseshift
