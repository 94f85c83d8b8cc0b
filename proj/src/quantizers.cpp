#include "denseshift/quantizers.hpp"

#include <algorithm>

namespace denseshift {

void QuantizerConfig::validate() const {
    if (bits < 2 || bits > 4) throw ConfigError("quantizer bits must be in {2,3,4}");
}

static int round_log2_clamped(double mag, int lo, int hi) {
    // mag > 0. lround ties away from zero, matching round(1.5) = 2.
    const double e = std::log2(mag);
    const long r = std::lround(e);
    return static_cast<int>(std::clamp<long>(r, lo, hi));
}

Tensor quantize_symmetric_pot(const Tensor& w, int bits, int exponent_bias) {
    QuantizerConfig cfg{QuantKind::symmetric_pot, bits, exponent_bias, 0.0};
    cfg.validate();
    const int lo = exponent_bias;
    const int hi = exponent_bias + cfg.max_exponent_offset();
    Tensor out(w.shape);
    for (int64_t i = 0; i < w.numel(); ++i) {
        const double v = w[i];
        const double s = v < 0.0 ? -1.0 : 1.0;
        const double mag = std::abs(v);
        const int e = mag == 0.0 ? lo : round_log2_clamped(mag, lo, hi);
        out[i] = s * std::exp2(e);
    }
    return out;
}

Tensor quantize_sign_shift(const Tensor& w, int bits, double zero_threshold, int exponent_bias) {
    QuantizerConfig cfg{QuantKind::sign_shift, bits, exponent_bias, zero_threshold};
    cfg.validate();
    if (cfg.effective_zero_threshold() < 0.0)
        throw ConfigError("zero_threshold must be non-negative");
    const double thr = cfg.effective_zero_threshold();
    const int lo = exponent_bias;
    const int hi = exponent_bias + cfg.max_exponent_offset();
    Tensor out(w.shape);
    for (int64_t i = 0; i < w.numel(); ++i) {
        const double v = w[i];
        const double mag = std::abs(v);
        if (mag <= thr) {
            out[i] = 0.0;
            continue;
        }
        const double s = v < 0.0 ? -1.0 : 1.0;
        out[i] = s * std::exp2(round_log2_clamped(mag, lo, hi));
    }
    return out;
}

Tensor quantize(const Tensor& w, const QuantizerConfig& cfg) {
    return cfg.kind == QuantKind::symmetric_pot
               ? quantize_symmetric_pot(w, cfg.bits, cfg.exponent_bias)
               : quantize_sign_shift(w, cfg.bits, cfg.effective_zero_threshold(),
                                     cfg.exponent_bias);
}

Tensor ste_backward_quantizer(const Tensor& grad_out, const Tensor& w,
                              const QuantizerConfig& cfg) {
    if (!grad_out.same_shape(w)) throw ShapeError("quantizer STE grad/weight shape mismatch");
    const double top = cfg.max_level();
    Tensor g(w.shape);
    for (int64_t i = 0; i < w.numel(); ++i)
        g[i] = std::abs(w[i]) <= top ? grad_out[i] : 0.0;
    return g;
}

} // namespace denseshift
