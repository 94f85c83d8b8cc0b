#pragma once

#include <cstdint>
#include <vector>

#include "denseshift/rng.hpp"
#include "denseshift/tensor.hpp"

namespace denseshift {

// Discrete weight of a dense-shift layer: effective value sign * 2^(shift + bias),
// with the layer-wide exponent bias kept outside the code. Never zero.
struct ShiftCode {
    int8_t sign = 1;   // +1 or -1
    uint8_t shift = 0; // S in [0, T]
};

inline int scale_terms_for_bits(int bits) { return (1 << (bits - 1)) - 1; }

// Full-precision latents backing one dense-shift weight tensor: one sign latent
// plus T scale latents per element, T = 2^(bits-1) - 1.
struct LatentWeights {
    std::vector<int64_t> shape;
    int bits = 3;          // in {2,3,4}
    int exponent_bias = 0; // b
    Tensor w_sign;
    std::vector<Tensor> w_scale; // T tensors, each of `shape`

    LatentWeights() = default;
    LatentWeights(std::vector<int64_t> shape_, int bits_, int exponent_bias_);

    int scale_term_count() const { return scale_terms_for_bits(bits); }
    int64_t numel() const { return w_sign.numel(); }
    void validate() const;
};

// Heaviside step: 1 for x > 0, 0 otherwise (including x == 0).
inline double heaviside(double x) { return x > 0.0 ? 1.0 : 0.0; }

struct MaterializedShift {
    Tensor w_shift;               // effective real weights, elementwise sign * 2^(S+b)
    std::vector<ShiftCode> codes; // per element (sign, S)
};

// Elementwise recursion S_0 = 0, S_t = H(w_t) * (S_{t-1} + 1), then
// w = (2*H(w_sign) - 1) * 2^(S_T + b).
MaterializedShift materialize_shift(const LatentWeights& latents);

struct LatentGradOptions {
    bool rescale_wsign = true; // sqrt(S_T+1) factor instead of 2^(S_T+b)
    bool drop_ln2 = false;     // ablation: drop the ln2 of d(2^S)/dS on scale latents
};

struct LatentGrads {
    Tensor g_sign;
    std::vector<Tensor> g_scale;
};

// STE backward through the materialization. The sign latent receives
// grad * sqrt(S_T+1) when rescaling is on, grad * 2^(S_T+b) otherwise.
// Scale latent t receives grad * sign * 2^(S_T+b) * ln2 * prod_{k>t} H(w_k) * (S_{t-1}+1),
// every Heaviside derivative replaced by 1.
LatentGrads backward_latents(const Tensor& grad_wshift, const LatentWeights& latents,
                             const LatentGradOptions& opts = {});

// All latent tensors i.i.d. normal(0, sigma^2); sigma defaults to 1e-3.
LatentWeights init_low_variance(std::vector<int64_t> shape, int bits, int exponent_bias,
                                double sigma, Rng& rng);

// All latent tensors i.i.d. normal(0, 2/fan_in).
LatentWeights init_kaiming(std::vector<int64_t> shape, int bits, int exponent_bias,
                           int64_t fan_in, Rng& rng);

// Latents (±0.5 patterns) that materialize to exactly the given codes.
LatentWeights latents_from_codes(const std::vector<ShiftCode>& codes,
                                 std::vector<int64_t> shape, int bits, int exponent_bias);

} // namespace denseshift
