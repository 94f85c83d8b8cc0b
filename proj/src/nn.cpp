#include "denseshift/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace denseshift {

namespace {

std::string layer_name(const LayerSpec& l, size_t index) {
    static const char* names[] = {"conv2d",  "linear",  "batchnorm",   "relu",
                                  "maxpool", "avgpool", "flatten",     "channel_dup"};
    return "layer " + std::to_string(index) + " (" + names[static_cast<int>(l.kind)] + ")";
}

int64_t conv_out_dim(int64_t in, int64_t k, int64_t s, int64_t p) {
    return (in + 2 * p - k) / s + 1;
}

} // namespace

std::vector<int64_t> NetworkSpec::layer_output_shape(const LayerSpec& l,
                                                     const std::vector<int64_t>& in,
                                                     size_t index) {
    auto fail = [&](const std::string& what) {
        throw ShapeError(layer_name(l, index) + ": " + what + ", input shape " + shape_str(in));
    };
    switch (l.kind) {
    case LayerKind::conv2d: {
        if (in.size() != 3) fail("expects (C,H,W) input");
        if (in[0] != l.in_channels)
            fail("expected " + std::to_string(l.in_channels) + " input channels");
        const int64_t ho = conv_out_dim(in[1], l.kernel, l.stride, l.padding);
        const int64_t wo = conv_out_dim(in[2], l.kernel, l.stride, l.padding);
        if (ho <= 0 || wo <= 0) fail("kernel larger than padded input");
        return {l.out_channels, ho, wo};
    }
    case LayerKind::linear: {
        if (in.size() != 1) fail("expects flat (F) input");
        if (in[0] != l.in_features)
            fail("expected " + std::to_string(l.in_features) + " input features");
        return {l.out_features};
    }
    case LayerKind::batchnorm: {
        const int64_t c = in.empty() ? 0 : in[0];
        if (c != l.channels) fail("expected " + std::to_string(l.channels) + " channels");
        return in;
    }
    case LayerKind::relu:
        return in;
    case LayerKind::maxpool:
    case LayerKind::avgpool: {
        if (in.size() != 3) fail("expects (C,H,W) input");
        const int64_t ho = (in[1] - l.kernel) / l.stride + 1;
        const int64_t wo = (in[2] - l.kernel) / l.stride + 1;
        if (ho <= 0 || wo <= 0) fail("pool window larger than input");
        return {in[0], ho, wo};
    }
    case LayerKind::flatten: {
        int64_t n = 1;
        for (int64_t d : in) n *= d;
        return {n};
    }
    case LayerKind::channel_dup: {
        if (in.empty()) fail("expects channel/feature input");
        for (int64_t s : l.dup_sources)
            if (s < 0 || s >= in[0]) fail("duplicate source channel out of range");
        auto out = in;
        out[0] += static_cast<int64_t>(l.dup_sources.size());
        return out;
    }
    }
    fail("unknown layer kind");
    return {};
}

std::vector<int64_t> NetworkSpec::output_shape() const {
    auto shape = input_shape;
    for (size_t i = 0; i < layers.size(); ++i) shape = layer_output_shape(layers[i], shape, i);
    return shape;
}

void NetworkSpec::validate() const {
    if (input_shape.empty()) throw ConfigError("network input shape is empty");
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        if (l.has_weights() && l.provider.kind == ProviderKind::dense_shift &&
            (l.provider.bits < 2 || l.provider.bits > 4))
            throw ConfigError(layer_name(l, i) + ": dense_shift bits must be in {2,3,4}");
        if (l.has_weights() && l.provider.kind == ProviderKind::quantizer)
            l.provider.quantizer_config().validate();
    }
    (void)output_shape(); // throws on inconsistent geometry
}

Network Network::build(NetworkSpec spec, const InitConfig& init, uint64_t seed) {
    spec.validate();
    Network net;
    net.spec = std::move(spec);
    net.states.resize(net.spec.layers.size());
    for (size_t i = 0; i < net.spec.layers.size(); ++i) {
        const auto& l = net.spec.layers[i];
        auto& st = net.states[i];
        Rng rng = Rng::for_stream(seed, i);
        if (l.kind == LayerKind::conv2d || l.kind == LayerKind::linear) {
            const std::vector<int64_t> wshape =
                l.kind == LayerKind::conv2d
                    ? std::vector<int64_t>{l.out_channels, l.in_channels, l.kernel, l.kernel}
                    : std::vector<int64_t>{l.out_features, l.in_features};
            const int64_t fan_in = l.kind == LayerKind::conv2d
                                       ? l.in_channels * l.kernel * l.kernel
                                       : l.in_features;
            if (l.provider.kind == ProviderKind::dense_shift) {
                st.latents = init.strategy == InitStrategy::low_variance
                                 ? init_low_variance(wshape, l.provider.bits,
                                                     l.provider.exponent_bias, init.sigma, rng)
                                 : init_kaiming(wshape, l.provider.bits,
                                                l.provider.exponent_bias, fan_in, rng);
            } else {
                st.weight = Tensor(wshape);
                const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
                for (int64_t j = 0; j < st.weight.numel(); ++j)
                    st.weight[j] = rng.normal(0.0, std);
            }
            if (l.has_bias)
                st.bias = Tensor({l.kind == LayerKind::conv2d ? l.out_channels : l.out_features});
        } else if (l.kind == LayerKind::batchnorm) {
            st.gamma = Tensor({l.channels});
            st.gamma.fill(1.0);
            st.beta = Tensor({l.channels});
            st.running_mean = Tensor({l.channels});
            st.running_var = Tensor({l.channels});
            st.running_var.fill(1.0);
        }
    }
    return net;
}

void gemm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

namespace {

// C(M,N) += A(M,K) * B(N,K)^T
void gemm_nt_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (int64_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] += acc;
        }
    }
}

// C(M,N) += A(K,M)^T * B(K,N)
void gemm_tn_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void im2col(const double* x, int64_t c_in, int64_t h, int64_t w, int64_t k, int64_t s, int64_t p,
            double* cols, int64_t ho, int64_t wo) {
    for (int64_t c = 0; c < c_in; ++c) {
        for (int64_t ky = 0; ky < k; ++ky) {
            for (int64_t kx = 0; kx < k; ++kx) {
                double* row = cols + ((c * k + ky) * k + kx) * ho * wo;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    const int64_t iy = oy * s - p + ky;
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        const int64_t ix = ox * s - p + kx;
                        row[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                                ? x[(c * h + iy) * w + ix]
                                                : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_acc(const double* cols, int64_t c_in, int64_t h, int64_t w, int64_t k, int64_t s,
                int64_t p, double* gx, int64_t ho, int64_t wo) {
    for (int64_t c = 0; c < c_in; ++c) {
        for (int64_t ky = 0; ky < k; ++ky) {
            for (int64_t kx = 0; kx < k; ++kx) {
                const double* row = cols + ((c * k + ky) * k + kx) * ho * wo;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    const int64_t iy = oy * s - p + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        const int64_t ix = ox * s - p + kx;
                        if (ix < 0 || ix >= w) continue;
                        gx[(c * h + iy) * w + ix] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

Tensor materialize_layer_weights(const LayerSpec& l, const LayerState& st) {
    switch (l.provider.kind) {
    case ProviderKind::full_precision:
        return st.weight;
    case ProviderKind::dense_shift:
        return materialize_shift(st.latents).w_shift;
    case ProviderKind::quantizer:
        return quantize(st.weight, l.provider.quantizer_config());
    }
    throw ConfigError("unknown weight provider");
}

} // namespace

Tensor effective_weights(const Network& net, size_t index) {
    if (index >= net.spec.layers.size() || !net.spec.layers[index].has_weights())
        throw ConfigError("layer " + std::to_string(index) + " has no weights");
    return materialize_layer_weights(net.spec.layers[index], net.states[index]);
}

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

struct BnView {
    int64_t channels;
    int64_t per_channel; // elements per channel per sample
    int64_t batch;
};

BnView bn_view(const Tensor& x) {
    if (x.rank() == 4) return {x.shape[1], x.shape[2] * x.shape[3], x.shape[0]};
    if (x.rank() == 2) return {x.shape[1], 1, x.shape[0]};
    throw ShapeError("batchnorm expects 2-D or 4-D input");
}

double& bn_at(Tensor& x, const BnView& v, int64_t n, int64_t c, int64_t i) {
    return x.data[static_cast<size_t>((n * v.channels + c) * v.per_channel + i)];
}
double bn_at(const Tensor& x, const BnView& v, int64_t n, int64_t c, int64_t i) {
    return x.data[static_cast<size_t>((n * v.channels + c) * v.per_channel + i)];
}

} // namespace

ForwardResult forward(Network& net, const Tensor& x, bool training) {
    if (x.rank() < 2)
        throw ShapeError("network input must include a batch dimension, got " +
                         shape_str(x.shape));
    std::vector<int64_t> sample_shape(x.shape.begin() + 1, x.shape.end());
    if (sample_shape != net.spec.input_shape)
        throw ShapeError("network input: expected per-sample shape " +
                         shape_str(net.spec.input_shape) + ", got " + shape_str(sample_shape));

    ForwardResult res;
    res.caches.resize(net.spec.layers.size());
    Tensor cur = x;
    const int64_t batch = x.shape[0];

    for (size_t li = 0; li < net.spec.layers.size(); ++li) {
        const auto& l = net.spec.layers[li];
        auto& st = net.states[li];
        auto& cache = res.caches[li];
        cache.input = cur;

        switch (l.kind) {
        case LayerKind::conv2d: {
            if (cur.rank() != 4 || cur.shape[1] != l.in_channels)
                throw ShapeError(layer_name(l, li) + ": bad input " + shape_str(cur.shape));
            const int64_t h = cur.shape[2], w = cur.shape[3];
            const int64_t ho = conv_out_dim(h, l.kernel, l.stride, l.padding);
            const int64_t wo = conv_out_dim(w, l.kernel, l.stride, l.padding);
            const int64_t ckk = l.in_channels * l.kernel * l.kernel;
            cache.w_eff = materialize_layer_weights(l, st);
            cache.cols = Tensor({batch, ckk, ho * wo});
            Tensor out({batch, l.out_channels, ho, wo});
            for (int64_t n = 0; n < batch; ++n) {
                double* cols_n = cache.cols.data.data() + n * ckk * ho * wo;
                im2col(cur.data.data() + n * l.in_channels * h * w, l.in_channels, h, w,
                       l.kernel, l.stride, l.padding, cols_n, ho, wo);
                gemm_acc(cache.w_eff.data.data(), cols_n,
                         out.data.data() + n * l.out_channels * ho * wo, l.out_channels, ckk,
                         ho * wo);
            }
            if (l.has_bias)
                for (int64_t n = 0; n < batch; ++n)
                    for (int64_t c = 0; c < l.out_channels; ++c) {
                        const double b = st.bias[c];
                        double* o = out.data.data() + (n * l.out_channels + c) * ho * wo;
                        for (int64_t i = 0; i < ho * wo; ++i) o[i] += b;
                    }
            cur = std::move(out);
            break;
        }
        case LayerKind::linear: {
            if (cur.rank() != 2 || cur.shape[1] != l.in_features)
                throw ShapeError(layer_name(l, li) + ": bad input " + shape_str(cur.shape));
            cache.w_eff = materialize_layer_weights(l, st);
            Tensor out({batch, l.out_features});
            // out = x * W^T
            gemm_nt_acc(cur.data.data(), cache.w_eff.data.data(), out.data.data(), batch,
                        l.in_features, l.out_features);
            if (l.has_bias)
                for (int64_t n = 0; n < batch; ++n)
                    for (int64_t j = 0; j < l.out_features; ++j) out.at2(n, j) += st.bias[j];
            cur = std::move(out);
            break;
        }
        case LayerKind::batchnorm: {
            const BnView v = bn_view(cur);
            if (v.channels != l.channels)
                throw ShapeError(layer_name(l, li) + ": bad input " + shape_str(cur.shape));
            Tensor out(cur.shape);
            cache.bn_xhat = Tensor(cur.shape);
            cache.bn_centered = Tensor(cur.shape);
            cache.bn_invstd = Tensor({v.channels});
            const int64_t m = v.batch * v.per_channel;
            for (int64_t c = 0; c < v.channels; ++c) {
                double mean, var;
                if (training) {
                    double sum = 0.0;
                    for (int64_t n = 0; n < v.batch; ++n)
                        for (int64_t i = 0; i < v.per_channel; ++i) sum += bn_at(cur, v, n, c, i);
                    mean = sum / m;
                    double sq = 0.0;
                    for (int64_t n = 0; n < v.batch; ++n)
                        for (int64_t i = 0; i < v.per_channel; ++i) {
                            const double d = bn_at(cur, v, n, c, i) - mean;
                            sq += d * d;
                        }
                    var = sq / m;
                    const double unbiased = m > 1 ? sq / (m - 1) : var;
                    st.running_mean[c] = (1 - kBnMomentum) * st.running_mean[c] + kBnMomentum * mean;
                    st.running_var[c] = (1 - kBnMomentum) * st.running_var[c] + kBnMomentum * unbiased;
                } else {
                    mean = st.running_mean[c];
                    var = st.running_var[c];
                }
                const double invstd = 1.0 / std::sqrt(var + kBnEps);
                cache.bn_invstd[c] = invstd;
                const double g = st.gamma[c], b = st.beta[c];
                for (int64_t n = 0; n < v.batch; ++n)
                    for (int64_t i = 0; i < v.per_channel; ++i) {
                        const double centered = bn_at(cur, v, n, c, i) - mean;
                        const double xh = centered * invstd;
                        bn_at(cache.bn_centered, v, n, c, i) = centered;
                        bn_at(cache.bn_xhat, v, n, c, i) = xh;
                        bn_at(out, v, n, c, i) = g * xh + b;
                    }
            }
            cur = std::move(out);
            break;
        }
        case LayerKind::relu: {
            Tensor out(cur.shape);
            for (int64_t i = 0; i < cur.numel(); ++i) out[i] = cur[i] > 0.0 ? cur[i] : 0.0;
            cur = std::move(out);
            break;
        }
        case LayerKind::maxpool:
        case LayerKind::avgpool: {
            if (cur.rank() != 4)
                throw ShapeError(layer_name(l, li) + ": bad input " + shape_str(cur.shape));
            const int64_t c_in = cur.shape[1], h = cur.shape[2], w = cur.shape[3];
            const int64_t ho = (h - l.kernel) / l.stride + 1;
            const int64_t wo = (w - l.kernel) / l.stride + 1;
            Tensor out({batch, c_in, ho, wo});
            const bool is_max = l.kind == LayerKind::maxpool;
            if (is_max) cache.pool_argmax.resize(static_cast<size_t>(out.numel()));
            int64_t oi = 0;
            for (int64_t n = 0; n < batch; ++n)
                for (int64_t c = 0; c < c_in; ++c)
                    for (int64_t oy = 0; oy < ho; ++oy)
                        for (int64_t ox = 0; ox < wo; ++ox, ++oi) {
                            if (is_max) {
                                double best = -1e300;
                                int64_t best_idx = -1;
                                for (int64_t ky = 0; ky < l.kernel; ++ky)
                                    for (int64_t kx = 0; kx < l.kernel; ++kx) {
                                        const int64_t iy = oy * l.stride + ky;
                                        const int64_t ix = ox * l.stride + kx;
                                        const int64_t idx = ((n * c_in + c) * h + iy) * w + ix;
                                        if (cur[idx] > best) {
                                            best = cur[idx];
                                            best_idx = idx;
                                        }
                                    }
                                out[oi] = best;
                                cache.pool_argmax[static_cast<size_t>(oi)] = best_idx;
                            } else {
                                double sum = 0.0;
                                for (int64_t ky = 0; ky < l.kernel; ++ky)
                                    for (int64_t kx = 0; kx < l.kernel; ++kx) {
                                        const int64_t iy = oy * l.stride + ky;
                                        const int64_t ix = ox * l.stride + kx;
                                        sum += cur[((n * c_in + c) * h + iy) * w + ix];
                                    }
                                out[oi] = sum / (l.kernel * l.kernel);
                            }
                        }
            cur = std::move(out);
            break;
        }
        case LayerKind::flatten: {
            cur = cur.reshaped({batch, cur.numel() / batch});
            break;
        }
        case LayerKind::channel_dup: {
            const int64_t c_in = cur.shape[1];
            const int64_t inner = cur.numel() / (batch * c_in);
            const int64_t c_out = c_in + static_cast<int64_t>(l.dup_sources.size());
            auto out_shape = cur.shape;
            out_shape[1] = c_out;
            Tensor out(out_shape);
            for (int64_t n = 0; n < batch; ++n) {
                std::memcpy(out.data.data() + n * c_out * inner,
                            cur.data.data() + n * c_in * inner,
                            static_cast<size_t>(c_in * inner) * sizeof(double));
                for (size_t d = 0; d < l.dup_sources.size(); ++d)
                    std::memcpy(out.data.data() + (n * c_out + c_in + static_cast<int64_t>(d)) * inner,
                                cur.data.data() + (n * c_in + l.dup_sources[d]) * inner,
                                static_cast<size_t>(inner) * sizeof(double));
            }
            cur = std::move(out);
            break;
        }
        }
        cache.out_shape = cur.shape;
    }
    res.logits = std::move(cur);
    return res;
}

Tensor forward_eval(const Network& net, const Tensor& x) {
    // Eval never mutates state; the const_cast is safe because training=false
    // skips the running-stat updates.
    return forward(const_cast<Network&>(net), x, false).logits;
}

std::vector<ParamGrads> backward(const Network& net, const ForwardResult& fwd,
                                 const Tensor& grad_logits) {
    if (fwd.caches.size() != net.spec.layers.size())
        throw Error("backward: cache does not match network");
    if (grad_logits.shape != fwd.logits.shape)
        throw ShapeError("backward: loss gradient shape mismatch");

    std::vector<ParamGrads> grads(net.spec.layers.size());
    Tensor g = grad_logits;

    for (size_t li_plus = net.spec.layers.size(); li_plus > 0; --li_plus) {
        const size_t li = li_plus - 1;
        const auto& l = net.spec.layers[li];
        const auto& st = net.states[li];
        const auto& cache = fwd.caches[li];
        if (g.shape != cache.out_shape)
            throw Error("backward: stale cache at " + layer_name(l, li));
        const int64_t batch = cache.input.shape[0];

        switch (l.kind) {
        case LayerKind::conv2d: {
            const int64_t h = cache.input.shape[2], w = cache.input.shape[3];
            const int64_t ho = g.shape[2], wo = g.shape[3];
            const int64_t ckk = l.in_channels * l.kernel * l.kernel;
            Tensor gw({l.out_channels, ckk});
            Tensor gx(cache.input.shape);
            Tensor gcols({ckk, ho * wo});
            for (int64_t n = 0; n < batch; ++n) {
                const double* gout_n = g.data.data() + n * l.out_channels * ho * wo;
                const double* cols_n = cache.cols.data.data() + n * ckk * ho * wo;
                gemm_nt_acc(gout_n, cols_n, gw.data.data(), l.out_channels, ho * wo, ckk);
                gcols.fill(0.0);
                gemm_tn_acc(cache.w_eff.data.data(), gout_n, gcols.data.data(), ckk,
                            l.out_channels, ho * wo);
                col2im_acc(gcols.data.data(), l.in_channels, h, w, l.kernel, l.stride, l.padding,
                           gx.data.data() + n * l.in_channels * h * w, ho, wo);
            }
            Tensor gw4 = gw.reshaped({l.out_channels, l.in_channels, l.kernel, l.kernel});
            if (l.has_bias) {
                Tensor gb({l.out_channels});
                for (int64_t n = 0; n < batch; ++n)
                    for (int64_t c = 0; c < l.out_channels; ++c) {
                        const double* go = g.data.data() + (n * l.out_channels + c) * ho * wo;
                        double acc = 0.0;
                        for (int64_t i = 0; i < ho * wo; ++i) acc += go[i];
                        gb[c] += acc;
                    }
                grads[li].bias = std::move(gb);
            }
            if (l.provider.kind == ProviderKind::dense_shift)
                grads[li].latents = backward_latents(gw4, st.latents, net.latent_grad_opts);
            else if (l.provider.kind == ProviderKind::quantizer)
                grads[li].weight =
                    ste_backward_quantizer(gw4, st.weight, l.provider.quantizer_config());
            else
                grads[li].weight = std::move(gw4);
            g = std::move(gx);
            break;
        }
        case LayerKind::linear: {
            Tensor gw({l.out_features, l.in_features});
            // gw = g^T * x
            gemm_tn_acc(g.data.data(), cache.input.data.data(), gw.data.data(), l.out_features,
                        batch, l.in_features);
            Tensor gx({batch, l.in_features});
            gemm_acc(g.data.data(), cache.w_eff.data.data(), gx.data.data(), batch,
                     l.out_features, l.in_features);
            if (l.has_bias) {
                Tensor gb({l.out_features});
                for (int64_t n = 0; n < batch; ++n)
                    for (int64_t j = 0; j < l.out_features; ++j) gb[j] += g.at2(n, j);
                grads[li].bias = std::move(gb);
            }
            if (l.provider.kind == ProviderKind::dense_shift)
                grads[li].latents = backward_latents(gw, st.latents, net.latent_grad_opts);
            else if (l.provider.kind == ProviderKind::quantizer)
                grads[li].weight =
                    ste_backward_quantizer(gw, st.weight, l.provider.quantizer_config());
            else
                grads[li].weight = std::move(gw);
            g = std::move(gx);
            break;
        }
        case LayerKind::batchnorm: {
            const BnView v = bn_view(cache.input);
            const int64_t m = v.batch * v.per_channel;
            Tensor gx(cache.input.shape);
            Tensor dgamma({v.channels}), dbeta({v.channels});
            for (int64_t c = 0; c < v.channels; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int64_t n = 0; n < v.batch; ++n)
                    for (int64_t i = 0; i < v.per_channel; ++i) {
                        const double dy = bn_at(g, v, n, c, i);
                        sum_dy += dy;
                        sum_dy_xhat += dy * bn_at(cache.bn_xhat, v, n, c, i);
                    }
                dgamma[c] = sum_dy_xhat;
                dbeta[c] = sum_dy;
                const double gamma = st.gamma[c];
                const double invstd = cache.bn_invstd[c];
                for (int64_t n = 0; n < v.batch; ++n)
                    for (int64_t i = 0; i < v.per_channel; ++i) {
                        const double dy = bn_at(g, v, n, c, i);
                        const double xh = bn_at(cache.bn_xhat, v, n, c, i);
                        bn_at(gx, v, n, c, i) =
                            gamma * invstd / m * (m * dy - sum_dy - xh * sum_dy_xhat);
                    }
            }
            grads[li].gamma = std::move(dgamma);
            grads[li].beta = std::move(dbeta);
            g = std::move(gx);
            break;
        }
        case LayerKind::relu: {
            Tensor gx(cache.input.shape);
            for (int64_t i = 0; i < gx.numel(); ++i)
                gx[i] = cache.input[i] > 0.0 ? g[i] : 0.0;
            g = std::move(gx);
            break;
        }
        case LayerKind::maxpool: {
            Tensor gx(cache.input.shape);
            for (int64_t i = 0; i < g.numel(); ++i)
                gx[cache.pool_argmax[static_cast<size_t>(i)]] += g[i];
            g = std::move(gx);
            break;
        }
        case LayerKind::avgpool: {
            const int64_t c_in = cache.input.shape[1];
            const int64_t h = cache.input.shape[2], w = cache.input.shape[3];
            const int64_t ho = g.shape[2], wo = g.shape[3];
            Tensor gx(cache.input.shape);
            const double inv = 1.0 / (l.kernel * l.kernel);
            for (int64_t n = 0; n < batch; ++n)
                for (int64_t c = 0; c < c_in; ++c)
                    for (int64_t oy = 0; oy < ho; ++oy)
                        for (int64_t ox = 0; ox < wo; ++ox) {
                            const double gv = g[((n * c_in + c) * ho + oy) * wo + ox] * inv;
                            for (int64_t ky = 0; ky < l.kernel; ++ky)
                                for (int64_t kx = 0; kx < l.kernel; ++kx)
                                    gx[((n * c_in + c) * h + oy * l.stride + ky) * w + ox * l.stride + kx] += gv;
                        }
            g = std::move(gx);
            break;
        }
        case LayerKind::flatten: {
            g = g.reshaped(cache.input.shape);
            break;
        }
        case LayerKind::channel_dup: {
            const int64_t c_in = cache.input.shape[1];
            const int64_t inner = cache.input.numel() / (batch * c_in);
            const int64_t c_out = c_in + static_cast<int64_t>(l.dup_sources.size());
            Tensor gx(cache.input.shape);
            for (int64_t n = 0; n < batch; ++n) {
                std::memcpy(gx.data.data() + n * c_in * inner, g.data.data() + n * c_out * inner,
                            static_cast<size_t>(c_in * inner) * sizeof(double));
                for (size_t d = 0; d < l.dup_sources.size(); ++d) {
                    const double* src =
                        g.data.data() + (n * c_out + c_in + static_cast<int64_t>(d)) * inner;
                    double* dst = gx.data.data() + (n * c_in + l.dup_sources[d]) * inner;
                    for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                }
            }
            g = std::move(gx);
            break;
        }
        }
    }
    return grads;
}

LossResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw ShapeError("loss expects (batch, classes) logits");
    const int64_t batch = logits.shape[0];
    const int64_t classes = logits.shape[1];
    if (static_cast<int64_t>(labels.size()) != batch)
        throw ShapeError("loss: label count does not match batch");

    LossResult res;
    res.grad_logits = Tensor(logits.shape);
    double total = 0.0;
    for (int64_t n = 0; n < batch; ++n) {
        const int y = labels[static_cast<size_t>(n)];
        if (y < 0 || y >= classes) throw DataError("label out of range");
        double maxv = logits.at2(n, 0);
        for (int64_t c = 1; c < classes; ++c) maxv = std::max(maxv, logits.at2(n, c));
        double denom = 0.0;
        for (int64_t c = 0; c < classes; ++c) denom += std::exp(logits.at2(n, c) - maxv);
        const double logz = maxv + std::log(denom);
        total += logz - logits.at2(n, y);
        for (int64_t c = 0; c < classes; ++c) {
            const double p = std::exp(logits.at2(n, c) - logz);
            res.grad_logits.at2(n, c) = (p - (c == y ? 1.0 : 0.0)) / static_cast<double>(batch);
        }
    }
    res.loss = total / static_cast<double>(batch);
    return res;
}

} // namespace denseshift
