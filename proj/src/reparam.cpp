#include "denseshift/reparam.hpp"

#include <cmath>

namespace denseshift {

LatentWeights::LatentWeights(std::vector<int64_t> shape_, int bits_, int exponent_bias_)
    : shape(std::move(shape_)), bits(bits_), exponent_bias(exponent_bias_), w_sign(shape) {
    if (bits < 2 || bits > 4) throw ConfigError("dense_shift bits must be in {2,3,4}");
    w_scale.assign(static_cast<size_t>(scale_term_count()), Tensor(shape));
}

void LatentWeights::validate() const {
    if (bits < 2 || bits > 4) throw ConfigError("dense_shift bits must be in {2,3,4}");
    if (static_cast<int>(w_scale.size()) != scale_term_count())
        throw ConfigError("latent scale term count does not match bits");
    if (!w_sign.all_finite()) throw NumericError("non-finite sign latent");
    for (const auto& t : w_scale) {
        if (!t.same_shape(w_sign)) throw ShapeError("latent tensor shape mismatch");
        if (!t.all_finite()) throw NumericError("non-finite scale latent");
    }
}

MaterializedShift materialize_shift(const LatentWeights& latents) {
    const int T = latents.scale_term_count();
    const int64_t n = latents.numel();
    MaterializedShift out;
    out.w_shift = Tensor(latents.shape);
    out.codes.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        int s = 0; // S_0
        for (int t = 0; t < T; ++t)
            s = latents.w_scale[static_cast<size_t>(t)][i] > 0.0 ? s + 1 : 0;
        const int8_t sign = latents.w_sign[i] > 0.0 ? int8_t{1} : int8_t{-1};
        out.codes[static_cast<size_t>(i)] = ShiftCode{sign, static_cast<uint8_t>(s)};
        out.w_shift[i] = sign * std::exp2(static_cast<double>(s + latents.exponent_bias));
    }
    return out;
}

LatentGrads backward_latents(const Tensor& grad_wshift, const LatentWeights& latents,
                             const LatentGradOptions& opts) {
    if (!grad_wshift.same_shape(latents.w_sign))
        throw ShapeError("grad shape does not match latent shape");
    const int T = latents.scale_term_count();
    const int64_t n = latents.numel();
    const double ln2 = opts.drop_ln2 ? 1.0 : std::log(2.0);

    LatentGrads grads;
    grads.g_sign = Tensor(latents.shape);
    grads.g_scale.assign(static_cast<size_t>(T), Tensor(latents.shape));

    std::vector<int> s_chain(static_cast<size_t>(T) + 1);
    for (int64_t i = 0; i < n; ++i) {
        s_chain[0] = 0;
        for (int t = 1; t <= T; ++t) {
            const double w_t = latents.w_scale[static_cast<size_t>(t - 1)][i];
            s_chain[static_cast<size_t>(t)] = w_t > 0.0 ? s_chain[static_cast<size_t>(t - 1)] + 1 : 0;
        }
        const int s_final = s_chain[static_cast<size_t>(T)];
        const double pow_w = std::exp2(static_cast<double>(s_final + latents.exponent_bias));
        const double sign = latents.w_sign[i] > 0.0 ? 1.0 : -1.0;
        const double g = grad_wshift[i];

        grads.g_sign[i] =
            opts.rescale_wsign ? g * std::sqrt(static_cast<double>(s_final) + 1.0) : g * pow_w;

        // dS_T/dS_t telescopes to prod_{k=t+1..T} H(w_k); dS_t/dw_t is (S_{t-1}+1)
        // under STE. Accumulate the product walking t from T down to 1.
        double chain = 1.0;
        for (int t = T; t >= 1; --t) {
            grads.g_scale[static_cast<size_t>(t - 1)][i] =
                g * sign * pow_w * ln2 * chain * (s_chain[static_cast<size_t>(t - 1)] + 1.0);
            chain *= heaviside(latents.w_scale[static_cast<size_t>(t - 1)][i]);
        }
    }
    return grads;
}

static LatentWeights init_normal(std::vector<int64_t> shape, int bits, int exponent_bias,
                                 double stddev, Rng& rng) {
    LatentWeights lw(std::move(shape), bits, exponent_bias);
    for (int64_t i = 0; i < lw.numel(); ++i) lw.w_sign[i] = rng.normal(0.0, stddev);
    for (auto& t : lw.w_scale)
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
    return lw;
}

LatentWeights init_low_variance(std::vector<int64_t> shape, int bits, int exponent_bias,
                                double sigma, Rng& rng) {
    if (sigma <= 0.0) throw ConfigError("low-variance init sigma must be positive");
    return init_normal(std::move(shape), bits, exponent_bias, sigma, rng);
}

LatentWeights init_kaiming(std::vector<int64_t> shape, int bits, int exponent_bias,
                           int64_t fan_in, Rng& rng) {
    if (fan_in <= 0) throw ConfigError("kaiming init fan_in must be positive");
    return init_normal(std::move(shape), bits, exponent_bias,
                       std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

LatentWeights latents_from_codes(const std::vector<ShiftCode>& codes,
                                 std::vector<int64_t> shape, int bits, int exponent_bias) {
    LatentWeights lw(std::move(shape), bits, exponent_bias);
    if (static_cast<int64_t>(codes.size()) != lw.numel())
        throw ShapeError("code count does not match latent shape");
    const int T = lw.scale_term_count();
    for (int64_t i = 0; i < lw.numel(); ++i) {
        const auto& c = codes[static_cast<size_t>(i)];
        if (c.shift > T)
            throw ConfigError("shift " + std::to_string(c.shift) + " exceeds T=" +
                              std::to_string(T));
        lw.w_sign[i] = c.sign > 0 ? 0.5 : -0.5;
        // a trailing run of `shift` positive terms ending at w_T gives S_T == shift
        for (int t = 0; t < T; ++t)
            lw.w_scale[static_cast<size_t>(t)][i] = t >= T - c.shift ? 0.5 : -0.5;
    }
    return lw;
}

} // namespace denseshift
