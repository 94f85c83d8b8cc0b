#include "denseshift/convert.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace denseshift {

std::optional<std::pair<int, int>> decompose_power_of_two(double v) {
    if (v == 0.0 || !std::isfinite(v)) return std::nullopt;
    int e = 0;
    const double m = std::frexp(std::abs(v), &e); // |v| = m * 2^e, m in [0.5, 1)
    if (m != 0.5) return std::nullopt;
    return std::make_pair(v < 0 ? -1 : 1, e - 1);
}

namespace {

struct Entry {
    int sign = 0; // 0 encodes the zero weight
    int exponent = 0;
};

Entry entry_of(double v, const std::string& where) {
    if (v == 0.0) return {0, 0};
    auto d = decompose_power_of_two(v);
    if (!d) throw ConfigError(where + ": weight " + std::to_string(v) +
                              " is not zero or a signed power of two");
    return {d->first, d->second};
}

struct ExponentRange {
    int lo = std::numeric_limits<int>::max();
    int hi = std::numeric_limits<int>::min();
    void add(int e) {
        lo = std::min(lo, e);
        hi = std::max(hi, e);
    }
    bool empty() const { return lo > hi; }
};

// Shared elementwise rewrite: fills the widened weight tensor given a lookup
// from (row, feature) to the original entry and the duplicate layout.
void fill_pairs(Tensor& out, const std::vector<int64_t>& dup_sources,
                const std::vector<bool>& is_dup, int64_t rows, int64_t in_features,
                const std::vector<Entry>& entries, ExponentRange& range) {
    const int64_t total = in_features + static_cast<int64_t>(dup_sources.size());
    std::vector<int64_t> dup_slot(static_cast<size_t>(in_features), -1);
    for (size_t d = 0; d < dup_sources.size(); ++d)
        dup_slot[static_cast<size_t>(dup_sources[d])] = in_features + static_cast<int64_t>(d);

    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < in_features; ++j) {
            const Entry e = entries[static_cast<size_t>(r * in_features + j)];
            if (!is_dup[static_cast<size_t>(j)]) {
                out[r * total + j] = e.sign * std::exp2(e.exponent);
                range.add(e.exponent);
                continue;
            }
            const int64_t jd = dup_slot[static_cast<size_t>(j)];
            if (e.sign == 0) {
                out[r * total + j] = 1.0;   // +2^0
                out[r * total + jd] = -1.0; // -2^0, pair sums to 0
                range.add(0);
            } else {
                out[r * total + j] = e.sign * std::exp2(e.exponent + 1);
                out[r * total + jd] = -e.sign * std::exp2(e.exponent);
                range.add(e.exponent);
                range.add(e.exponent + 1);
            }
        }
    }
}

} // namespace

ConvertedLayer convert_layer(const Tensor& w) {
    if (w.rank() != 2) throw ShapeError("convert_layer expects a (out,in) matrix");
    const int64_t rows = w.shape[0], cols = w.shape[1];
    std::vector<Entry> entries(static_cast<size_t>(rows * cols));
    std::vector<bool> has_zero(static_cast<size_t>(cols), false);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < cols; ++j) {
            const Entry e = entry_of(w.at2(r, j), "convert_layer");
            entries[static_cast<size_t>(r * cols + j)] = e;
            if (e.sign == 0) has_zero[static_cast<size_t>(j)] = true;
        }

    ConvertedLayer out;
    for (int64_t j = 0; j < cols; ++j)
        if (has_zero[static_cast<size_t>(j)]) out.dup_sources.push_back(j);
    out.weights = Tensor({rows, cols + static_cast<int64_t>(out.dup_sources.size())});
    ExponentRange range;
    fill_pairs(out.weights, out.dup_sources, has_zero, rows, cols, entries, range);
    out.min_exponent = range.empty() ? 0 : range.lo;
    out.max_exponent = range.empty() ? 0 : range.hi;
    return out;
}

ConvertedLayer convert_conv_layer(const Tensor& w) {
    if (w.rank() != 4) throw ShapeError("convert_conv_layer expects (CO,CI,k,k)");
    const int64_t co = w.shape[0], ci = w.shape[1], kk = w.shape[2] * w.shape[3];
    std::vector<Entry> entries(static_cast<size_t>(w.numel()));
    std::vector<bool> has_zero(static_cast<size_t>(ci), false);
    for (int64_t i = 0; i < w.numel(); ++i) {
        const Entry e = entry_of(w[i], "convert_conv_layer");
        entries[static_cast<size_t>(i)] = e;
        if (e.sign == 0) has_zero[static_cast<size_t>((i / kk) % ci)] = true;
    }

    ConvertedLayer out;
    for (int64_t c = 0; c < ci; ++c)
        if (has_zero[static_cast<size_t>(c)]) out.dup_sources.push_back(c);
    const int64_t ci_out = ci + static_cast<int64_t>(out.dup_sources.size());
    out.weights = Tensor({co, ci_out, w.shape[2], w.shape[3]});

    std::vector<int64_t> dup_slot(static_cast<size_t>(ci), -1);
    for (size_t d = 0; d < out.dup_sources.size(); ++d)
        dup_slot[static_cast<size_t>(out.dup_sources[d])] = ci + static_cast<int64_t>(d);

    ExponentRange range;
    for (int64_t o = 0; o < co; ++o)
        for (int64_t c = 0; c < ci; ++c)
            for (int64_t p = 0; p < kk; ++p) {
                const Entry e = entries[static_cast<size_t>((o * ci + c) * kk + p)];
                const int64_t base = (o * ci_out + c) * kk + p;
                if (!has_zero[static_cast<size_t>(c)]) {
                    out.weights[base] = e.sign * std::exp2(e.exponent);
                    range.add(e.exponent);
                    continue;
                }
                const int64_t dup = (o * ci_out + dup_slot[static_cast<size_t>(c)]) * kk + p;
                if (e.sign == 0) {
                    out.weights[base] = 1.0;
                    out.weights[dup] = -1.0;
                    range.add(0);
                } else {
                    out.weights[base] = e.sign * std::exp2(e.exponent + 1);
                    out.weights[dup] = -e.sign * std::exp2(e.exponent);
                    range.add(e.exponent);
                    range.add(e.exponent + 1);
                }
            }
    out.min_exponent = range.empty() ? 0 : range.lo;
    out.max_exponent = range.empty() ? 0 : range.hi;
    return out;
}

namespace {

// Latents that materialize to exactly (sign, S) per element.
LatentWeights latents_from_values(const Tensor& w, int bits, int bias,
                                  const std::string& where) {
    std::vector<ShiftCode> codes(static_cast<size_t>(w.numel()));
    const int T = scale_terms_for_bits(bits);
    for (int64_t i = 0; i < w.numel(); ++i) {
        auto d = decompose_power_of_two(w[i]);
        if (!d) throw ConfigError(where + ": converted weight is not a power of two");
        const int s = d->second - bias;
        if (s < 0 || s > T)
            throw ConfigError(where + ": exponent " + std::to_string(d->second) +
                              " outside dense-shift range");
        codes[static_cast<size_t>(i)] = {static_cast<int8_t>(d->first),
                                         static_cast<uint8_t>(s)};
    }
    return latents_from_codes(codes, w.shape, bits, bias);
}

int bits_for_span(int span) {
    for (int bits = 2; bits <= 4; ++bits)
        if (scale_terms_for_bits(bits) >= span) return bits;
    throw ConfigError("converted exponent span " + std::to_string(span) +
                      " exceeds the 4-bit dense-shift range");
}

} // namespace

ConvertResult convert_network(const Network& net) {
    ConvertResult result;
    NetworkSpec out_spec;
    out_spec.input_shape = net.spec.input_shape;
    std::vector<LayerState> out_states;

    for (size_t li = 0; li < net.spec.layers.size(); ++li) {
        const auto& l = net.spec.layers[li];
        const auto& st = net.states[li];
        if (!l.has_weights() || l.provider.kind == ProviderKind::full_precision) {
            out_spec.layers.push_back(l);
            out_states.push_back(st);
            continue;
        }

        const Tensor w = effective_weights(net, li);
        ConvertedLayer conv =
            l.kind == LayerKind::conv2d ? convert_conv_layer(w) : convert_layer(w);

        if (!conv.dup_sources.empty()) {
            LayerSpec dup;
            dup.kind = LayerKind::channel_dup;
            dup.dup_sources = conv.dup_sources;
            out_spec.layers.push_back(dup);
            out_states.emplace_back();
        }

        LayerSpec nl = l;
        const int64_t extra = static_cast<int64_t>(conv.dup_sources.size());
        if (l.kind == LayerKind::conv2d)
            nl.in_channels += extra;
        else
            nl.in_features += extra;
        nl.provider.kind = ProviderKind::dense_shift;

        const int bias = std::min(conv.min_exponent, conv.max_exponent);
        const int bits = bits_for_span(conv.max_exponent - bias);
        nl.provider.bits = bits;
        nl.provider.exponent_bias = bias;

        LayerState ns;
        ns.latents = latents_from_values(conv.weights, bits, bias,
                                         "layer " + std::to_string(li));
        ns.bias = st.bias;
        out_spec.layers.push_back(nl);
        out_states.push_back(std::move(ns));

        LayerConversion info;
        info.original_layer = li;
        info.original_width = l.kind == LayerKind::conv2d ? l.in_channels : l.in_features;
        info.converted_width = info.original_width + extra;
        info.duplicated = extra;
        info.bits_out = bits;
        info.bias_out = bias;
        int max_in = 0;
        bool any = false;
        for (int64_t i = 0; i < w.numel(); ++i) {
            if (auto d = decompose_power_of_two(w[i])) {
                max_in = any ? std::max(max_in, d->second) : d->second;
                any = true;
            }
        }
        info.max_exponent_in = max_in;
        info.max_exponent_out = conv.max_exponent;
        result.layers.push_back(info);
    }

    Network out;
    out.spec = std::move(out_spec);
    out.spec.validate();
    out.states = std::move(out_states);
    out.latent_grad_opts = net.latent_grad_opts;
    result.network = std::move(out);
    return result;
}

EquivalenceReport verify_equivalence(const Network& a, const Network& b, int64_t n_inputs,
                                     double tol, uint64_t seed, bool integer_inputs) {
    if (a.spec.input_shape != b.spec.input_shape)
        throw ShapeError("verify_equivalence: input shapes differ");
    if (a.spec.output_shape() != b.spec.output_shape())
        throw ShapeError("verify_equivalence: output shapes differ");

    Rng rng(seed);
    EquivalenceReport rep;
    rep.tol = tol;
    rep.inputs = n_inputs;
    const int64_t batch = std::min<int64_t>(n_inputs, 16);
    int64_t done = 0;
    while (done < n_inputs) {
        const int64_t take = std::min<int64_t>(batch, n_inputs - done);
        std::vector<int64_t> shape = {take};
        for (int64_t d : a.spec.input_shape) shape.push_back(d);
        Tensor x(shape);
        for (int64_t i = 0; i < x.numel(); ++i)
            x[i] = integer_inputs ? static_cast<double>(rng.uniform_int(-4, 4))
                                  : rng.normal(0.0, 1.0);
        Tensor ya = forward_eval(a, x);
        Tensor yb = forward_eval(b, x);
        for (int64_t i = 0; i < ya.numel(); ++i)
            rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(ya[i] - yb[i]));
        done += take;
    }
    rep.pass = rep.max_abs_diff <= tol;
    return rep;
}

bool quantized_layers_zero_free(const Network& net) {
    for (size_t li = 0; li < net.spec.layers.size(); ++li) {
        const auto& l = net.spec.layers[li];
        if (!l.has_weights() || l.provider.kind == ProviderKind::full_precision) continue;
        const Tensor w = effective_weights(net, li);
        for (int64_t i = 0; i < w.numel(); ++i)
            if (w[i] == 0.0) return false;
    }
    return true;
}

} // namespace denseshift
