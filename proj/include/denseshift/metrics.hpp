#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "denseshift/nn.hpp"

namespace denseshift {

enum class SnapshotSource {
    discrete,  // the tensor that multiplies activations (materialized for quantized layers)
    continuous // raw latent weights (w_sign for dense_shift layers)
};

// Per-filter flattened weight vectors of one weight layer at one epoch.
struct FilterSnapshot {
    size_t layer = 0;
    int64_t epoch = 0;
    int64_t filters = 0;
    int64_t dim = 0;
    std::vector<double> data; // filters x dim, row-major
};

FilterSnapshot snapshot_filters(const Network& net, size_t layer_index, int64_t epoch,
                                SnapshotSource source = SnapshotSource::discrete);

// Mean over filters of cos(init_f, cur_f); a zero-norm filter on either side
// contributes 0 to the average.
double filter_avg_cosine(const FilterSnapshot& init, const FilterSnapshot& cur);

struct CosineRow {
    size_t layer = 0;
    int64_t epoch = 0;
    double cosine = 0.0;
};

// Schema: layer,epoch,cosine
void write_cosine_csv(std::ostream& os, const std::vector<CosineRow>& rows);
std::vector<CosineRow> read_cosine_csv(std::istream& is);

struct TraceRecord {
    int64_t step = 0;
    size_t layer = 0;
    int64_t index = 0;
    double w_sign = 0.0;
    std::vector<double> w_scale; // w_1..w_T
    double w_shift = 0.0;
};

// Samples up to `max_elements` evenly spaced elements of the first dense-shift
// layer and appends one record per element every time record() is called.
class TraceRecorder {
public:
    TraceRecorder(const Network& net, int64_t max_elements = 64);

    bool active() const { return layer_ >= 0; }
    size_t layer() const { return static_cast<size_t>(layer_); }
    int scale_terms() const { return scale_terms_; }
    void record(const Network& net, int64_t step);
    const std::vector<TraceRecord>& records() const { return records_; }

private:
    int64_t layer_ = -1;
    int scale_terms_ = 0;
    std::vector<int64_t> indices_;
    std::vector<TraceRecord> records_;
};

// Schema: step,layer,index,w_sign,w_1..w_T,w_shift
void write_trace_csv(std::ostream& os, int scale_terms, const std::vector<TraceRecord>& rows);
std::vector<TraceRecord> read_trace_csv(std::istream& is, int* scale_terms_out = nullptr);

} // namespace denseshift
