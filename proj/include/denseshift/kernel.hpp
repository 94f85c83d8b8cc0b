#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "denseshift/reparam.hpp"
#include "denseshift/tensor.hpp"

namespace denseshift {

// Bit-packed shift codes. Each code takes `bits` bits: low (bits-1) bits hold
// the shift S, the top bit holds the sign (1 = negative). Codes are packed
// LSB-first into little-endian 64-bit words; a code may straddle a word
// boundary. The Shift-kernel variant reserves the code with an all-ones S
// field and a clear sign bit for the zero weight, so it represents one fewer
// magnitude than the dense variant at equal width.
struct PackedWeightBlob {
    uint8_t bits = 3;
    int8_t exponent_bias = 0;
    uint64_t count = 0;
    std::vector<uint8_t> payload; // logical size: 8 * ceil(count*bits/64), plus guard bytes

    size_t logical_bytes() const {
        const uint64_t words = (count * bits + 63) / 64;
        return static_cast<size_t>(words * 8);
    }
    uint32_t code_at(uint64_t i) const; // raw n-bit code
};

// Shift-variant weight: zero or sign*2^(shift+bias).
struct TernaryShiftCode {
    bool is_zero = false;
    int8_t sign = 1;
    uint8_t shift = 0;
};

PackedWeightBlob pack(std::span<const ShiftCode> codes, int bits, int exponent_bias);
std::vector<ShiftCode> unpack(const PackedWeightBlob& blob);

PackedWeightBlob pack_shift(std::span<const TernaryShiftCode> codes, int bits, int exponent_bias);
std::vector<TernaryShiftCode> unpack_shift(const PackedWeightBlob& blob);

// DSHW block: magic "DSHW", version u8, bits u8, bias i8, count u64 LE, payload words LE.
void write_blob(std::ostream& os, const PackedWeightBlob& blob);
PackedWeightBlob read_blob(std::istream& is);

// 8-bit activations sharing one power-of-two scale exponent:
// real value = values[i] * 2^scale_exponent.
struct FixedActivations {
    std::vector<int64_t> shape;
    std::vector<int8_t> values;
    int scale_exponent = 0;
};

// Rounds to int8 with the smallest power-of-two scale that fits max|x| in 127.
FixedActivations quantize_activations(const Tensor& x);
Tensor dequantize_activations(const FixedActivations& x);

// Branch-free MAC: sum_i signflip(x_i) << S_i. The result is the raw integer
// accumulator; real value = acc * 2^(exponent_bias + activation scale).
int64_t dot_denseshift(std::span<const int8_t> x, const PackedWeightBlob& w);

// Shift-network MAC with the per-element zero test of the ternary code space.
int64_t dot_shift(std::span<const int8_t> x, const PackedWeightBlob& w);

struct ConvGeometry {
    int64_t in_channels = 0, out_channels = 0;
    int64_t kernel = 0, stride = 1, padding = 0;
};

struct PackedConvOut {
    std::vector<int64_t> shape; // (N, C_out, H_out, W_out)
    std::vector<int64_t> acc;   // raw accumulators
};

// Integer convolution over packed dense-shift weights (count = CO*CI*k*k,
// row-major). Throws on a possible accumulator overflow.
PackedConvOut conv_forward_packed(const FixedActivations& x, const PackedWeightBlob& w,
                                  const ConvGeometry& geom);

enum class KernelKind { shift, denseshift };

struct BenchStats {
    std::string kernel;
    int bits = 0;
    int64_t length = 0;
    int64_t trials = 0;
    double mean_ns = 0.0;
    double stddev_ns = 0.0;
    uint64_t checksum = 0;
};

// Times one dot-product call per trial over `length` elements; warm-up runs
// are discarded and the checksum of all results is kept live.
BenchStats bench_kernel(KernelKind kind, int bits, int64_t length, int64_t trials, uint64_t seed);

} // namespace denseshift
