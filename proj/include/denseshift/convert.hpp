#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "denseshift/nn.hpp"

namespace denseshift {

// v == sign * 2^p exactly? Returns (sign, p).
std::optional<std::pair<int, int>> decompose_power_of_two(double v);

// One weight matrix (out x in) rewritten over a widened input: every input
// feature with at least one zero outgoing weight is duplicated, a zero entry
// becomes the pair (+1, -1) and a nonzero entry s*2^p over a duplicated
// feature becomes (s*2^(p+1), -s*2^p). The result is zero-free and satisfies
// W'x' == Wx when the duplicated inputs equal the originals.
struct ConvertedLayer {
    Tensor weights;                   // (out, in + dup) for linear layouts
    std::vector<int64_t> dup_sources; // duplicated feature/channel ids, append order
    int min_exponent = 0;             // over the converted entries
    int max_exponent = 0;
};

// Matrix form (features = columns). Throws ConfigError on non-power-of-two entries.
ConvertedLayer convert_layer(const Tensor& w);

// Conv kernel form (CO, CI, k, k); duplication granularity is the input channel.
ConvertedLayer convert_conv_layer(const Tensor& w);

struct LayerConversion {
    size_t original_layer = 0;
    int64_t original_width = 0;  // input features/channels before conversion
    int64_t converted_width = 0; // after duplication
    int64_t duplicated = 0;
    int bits_out = 0;
    int bias_out = 0;
    int max_exponent_in = 0;
    int max_exponent_out = 0;
};

struct ConvertResult {
    Network network;
    std::vector<LayerConversion> layers;
};

// Rewrites every quantized layer of a shift network (weights in {0} ∪ {±2^p})
// into a dense-shift layer, inserting a channel_dup stage in front of layers
// that need duplicated inputs. Full-precision layers pass through unchanged.
ConvertResult convert_network(const Network& net);

struct EquivalenceReport {
    double max_abs_diff = 0.0;
    double tol = 0.0;
    int64_t inputs = 0;
    bool pass = false;
};

// Evaluates both networks on random inputs (standard normal, or uniform
// integers in [-4,4] when integer_inputs is set) and compares outputs.
EquivalenceReport verify_equivalence(const Network& a, const Network& b, int64_t n_inputs,
                                     double tol, uint64_t seed, bool integer_inputs = false);

// True when every quantized layer materializes with no zero weight.
bool quantized_layers_zero_free(const Network& net);

} // namespace denseshift
