#include "denseshift/metrics.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

namespace denseshift {

FilterSnapshot snapshot_filters(const Network& net, size_t layer_index, int64_t epoch,
                                SnapshotSource source) {
    const auto& l = net.spec.layers.at(layer_index);
    if (!l.has_weights())
        throw ConfigError("snapshot: layer " + std::to_string(layer_index) + " has no weights");
    Tensor w;
    if (source == SnapshotSource::discrete) {
        w = effective_weights(net, layer_index);
    } else {
        const auto& st = net.states[layer_index];
        w = l.provider.kind == ProviderKind::dense_shift ? st.latents.w_sign : st.weight;
    }
    FilterSnapshot snap;
    snap.layer = layer_index;
    snap.epoch = epoch;
    snap.filters = w.shape[0];
    snap.dim = w.numel() / w.shape[0];
    snap.data = std::move(w.data);
    return snap;
}

double filter_avg_cosine(const FilterSnapshot& init, const FilterSnapshot& cur) {
    if (init.filters != cur.filters || init.dim != cur.dim)
        throw ShapeError("cosine metric: snapshot shapes differ");
    double total = 0.0;
    for (int64_t f = 0; f < init.filters; ++f) {
        const double* a = init.data.data() + f * init.dim;
        const double* b = cur.data.data() + f * init.dim;
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (int64_t i = 0; i < init.dim; ++i) {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        if (na > 0.0 && nb > 0.0) total += dot / (std::sqrt(na) * std::sqrt(nb));
        // zero-norm filters contribute 0
    }
    return total / static_cast<double>(init.filters);
}

void write_cosine_csv(std::ostream& os, const std::vector<CosineRow>& rows) {
    os << "layer,epoch,cosine\n";
    for (const auto& r : rows) os << r.layer << "," << r.epoch << "," << r.cosine << "\n";
}

std::vector<CosineRow> read_cosine_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != "layer,epoch,cosine")
        throw DataError("bad cosine CSV header");
    std::vector<CosineRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        CosineRow r;
        char c1, c2;
        if (!(ss >> r.layer >> c1 >> r.epoch >> c2 >> r.cosine) || c1 != ',' || c2 != ',')
            throw DataError("bad cosine CSV row: " + line);
        rows.push_back(r);
    }
    return rows;
}

TraceRecorder::TraceRecorder(const Network& net, int64_t max_elements) {
    for (size_t li = 0; li < net.spec.layers.size(); ++li) {
        const auto& l = net.spec.layers[li];
        if (l.has_weights() && l.provider.kind == ProviderKind::dense_shift) {
            layer_ = static_cast<int64_t>(li);
            scale_terms_ = net.states[li].latents.scale_term_count();
            const int64_t n = net.states[li].latents.numel();
            const int64_t take = std::min<int64_t>(max_elements, n);
            for (int64_t k = 0; k < take; ++k) indices_.push_back(k * n / take);
            break;
        }
    }
}

void TraceRecorder::record(const Network& net, int64_t step) {
    if (!active()) return;
    const auto& latents = net.states[static_cast<size_t>(layer_)].latents;
    auto m = materialize_shift(latents);
    for (int64_t idx : indices_) {
        TraceRecord r;
        r.step = step;
        r.layer = static_cast<size_t>(layer_);
        r.index = idx;
        r.w_sign = latents.w_sign[idx];
        for (const auto& t : latents.w_scale) r.w_scale.push_back(t[idx]);
        r.w_shift = m.w_shift[idx];
        records_.push_back(std::move(r));
    }
}

void write_trace_csv(std::ostream& os, int scale_terms, const std::vector<TraceRecord>& rows) {
    os << "step,layer,index,w_sign";
    for (int t = 1; t <= scale_terms; ++t) os << ",w_" << t;
    os << ",w_shift\n";
    os.precision(17);
    for (const auto& r : rows) {
        os << r.step << "," << r.layer << "," << r.index << "," << r.w_sign;
        for (double v : r.w_scale) os << "," << v;
        os << "," << r.w_shift << "\n";
    }
}

std::vector<TraceRecord> read_trace_csv(std::istream& is, int* scale_terms_out) {
    std::string line;
    if (!std::getline(is, line)) throw DataError("empty trace CSV");
    int terms = 0;
    {
        std::istringstream hs(line);
        std::string col;
        std::vector<std::string> cols;
        while (std::getline(hs, col, ',')) cols.push_back(col);
        if (cols.size() < 5 || cols[0] != "step" || cols[1] != "layer" || cols[2] != "index" ||
            cols[3] != "w_sign" || cols.back() != "w_shift")
            throw DataError("bad trace CSV header");
        terms = static_cast<int>(cols.size()) - 5;
        for (int t = 1; t <= terms; ++t)
            if (cols[static_cast<size_t>(3 + t)] != "w_" + std::to_string(t))
                throw DataError("bad trace CSV header");
    }
    if (scale_terms_out) *scale_terms_out = terms;
    std::vector<TraceRecord> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != static_cast<size_t>(terms) + 5)
            throw DataError("bad trace CSV row: " + line);
        TraceRecord r;
        r.step = std::stoll(fields[0]);
        r.layer = static_cast<size_t>(std::stoull(fields[1]));
        r.index = std::stoll(fields[2]);
        r.w_sign = std::stod(fields[3]);
        for (int t = 0; t < terms; ++t) r.w_scale.push_back(std::stod(fields[static_cast<size_t>(4 + t)]));
        r.w_shift = std::stod(fields.back());
        rows.push_back(std::move(r));
    }
    return rows;
}

} // namespace denseshift
