#pragma once

#include <cmath>

#include "denseshift/tensor.hpp"

namespace denseshift {

enum class QuantKind { symmetric_pot, sign_shift };

// Baseline quantizer configuration. Levels are {±2^b .. ±2^(b+T)} for the
// zero-free symmetric variant and {0} ∪ {±2^b .. ±2^(b+Ts)} for the
// sign-shift variant, which spends one code on zero (Ts = T - 1).
struct QuantizerConfig {
    QuantKind kind = QuantKind::symmetric_pot;
    int bits = 3;
    int exponent_bias = 0; // b
    double zero_threshold = -1.0; // sign_shift only; <0 means default 2^(b-1)

    int max_exponent_offset() const {
        const int t = (1 << (bits - 1)) - 1;
        return kind == QuantKind::sign_shift ? t - 1 : t;
    }
    double min_level() const { return std::exp2(exponent_bias); }
    double max_level() const { return std::exp2(exponent_bias + max_exponent_offset()); }
    double effective_zero_threshold() const {
        return zero_threshold >= 0.0 ? zero_threshold : 0.5 * min_level();
    }
    void validate() const;
};

// Round-to-nearest signed power of two with clamping; never returns zero.
// sign(0) is +1, and magnitudes below the smallest level clamp up to it.
Tensor quantize_symmetric_pot(const Tensor& w, int bits, int exponent_bias);

// Ternary-based variant: magnitudes at or below the threshold become zero,
// the rest round to the nearest power of two in the (one smaller) level set.
Tensor quantize_sign_shift(const Tensor& w, int bits, double zero_threshold, int exponent_bias);

Tensor quantize(const Tensor& w, const QuantizerConfig& cfg);

// STE: gradient passes through where |w| does not exceed the top level and is
// zeroed where the quantizer saturated above it.
Tensor ste_backward_quantizer(const Tensor& grad_out, const Tensor& w, const QuantizerConfig& cfg);

} // namespace denseshift
