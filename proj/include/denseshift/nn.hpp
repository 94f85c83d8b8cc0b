#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "denseshift/quantizers.hpp"
#include "denseshift/reparam.hpp"
#include "denseshift/rng.hpp"
#include "denseshift/tensor.hpp"

namespace denseshift {

enum class LayerKind { conv2d, linear, batchnorm, relu, maxpool, avgpool, flatten, channel_dup };

enum class ProviderKind { full_precision, dense_shift, quantizer };

// Per-layer weight provider: what actually multiplies activations in a
// conv/linear layer and how it trains.
struct WeightProvider {
    ProviderKind kind = ProviderKind::full_precision;
    int bits = 3;          // dense_shift / quantizer
    int exponent_bias = 0; // dense_shift / quantizer
    QuantKind quant_kind = QuantKind::symmetric_pot;
    double zero_threshold = -1.0; // sign_shift; <0 means default

    QuantizerConfig quantizer_config() const {
        return QuantizerConfig{quant_kind, bits, exponent_bias, zero_threshold};
    }
};

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    // conv2d
    int64_t in_channels = 0, out_channels = 0;
    int64_t kernel = 0, stride = 1, padding = 0; // kernel/stride shared with pools
    // linear
    int64_t in_features = 0, out_features = 0;
    // batchnorm
    int64_t channels = 0;
    // channel_dup: axis-1 slices to append, in order
    std::vector<int64_t> dup_sources;
    WeightProvider provider; // conv/linear only
    bool has_bias = true;    // conv/linear

    bool has_weights() const { return kind == LayerKind::conv2d || kind == LayerKind::linear; }
};

struct NetworkSpec {
    std::vector<int64_t> input_shape; // per-sample: (C,H,W) or (F)
    std::vector<LayerSpec> layers;

    // Shape of layer `i`'s output given its per-sample input shape; throws
    // ShapeError naming the layer on inconsistency.
    static std::vector<int64_t> layer_output_shape(const LayerSpec& layer,
                                                   const std::vector<int64_t>& in, size_t index);
    std::vector<int64_t> output_shape() const;
    void validate() const;
};

struct LayerState {
    Tensor weight; // full_precision / quantizer latent real weights
    LatentWeights latents; // dense_shift
    Tensor bias;
    Tensor gamma, beta, running_mean, running_var; // batchnorm
};

enum class InitStrategy { kaiming, low_variance };

struct InitConfig {
    InitStrategy strategy = InitStrategy::low_variance;
    double sigma = 1e-3; // low_variance only
};

struct Network {
    NetworkSpec spec;
    std::vector<LayerState> states;
    LatentGradOptions latent_grad_opts;

    static Network build(NetworkSpec spec, const InitConfig& init, uint64_t seed);
};

struct LayerCache {
    Tensor input;
    Tensor cols;  // conv im2col, (N, C*k*k, Hout*Wout)
    Tensor w_eff; // weights that multiplied activations
    Tensor bn_xhat;
    Tensor bn_invstd; // per channel
    Tensor bn_centered;
    std::vector<int64_t> pool_argmax;
    std::vector<int64_t> out_shape;
};

struct ForwardResult {
    Tensor logits;
    std::vector<LayerCache> caches;
};

// Training-mode forward updates batchnorm running statistics.
ForwardResult forward(Network& net, const Tensor& x, bool training);
Tensor forward_eval(const Network& net, const Tensor& x);

struct ParamGrads {
    std::optional<Tensor> weight;
    std::optional<LatentGrads> latents;
    std::optional<Tensor> bias;
    std::optional<Tensor> gamma, beta;
};

// One ParamGrads per layer; requires the caches of the matching forward call.
std::vector<ParamGrads> backward(const Network& net, const ForwardResult& fwd,
                                 const Tensor& grad_logits);

struct LossResult {
    double loss = 0.0;
    Tensor grad_logits;
};

LossResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// The tensor that multiplies activations in weight layer `index`
// (materialized for quantized providers, raw for full precision).
Tensor effective_weights(const Network& net, size_t index);

// Row-major (M,K) x (K,N) -> (M,N), C += A*B. Shared by conv and linear paths.
void gemm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);

} // namespace denseshift
