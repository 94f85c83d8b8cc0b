#include "denseshift/kernel.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>

namespace denseshift {

namespace {

constexpr size_t kGuardBytes = 8; // lets the decoder memcpy a full window at the tail

void check_bits(int bits) {
    if (bits < 2 || bits > 4) throw ConfigError("packed blob bits must be in {2,3,4}");
}

uint32_t shift_field_mask(int bits) { return (1u << (bits - 1)) - 1; }

void put_code(std::vector<uint8_t>& payload, uint64_t index, int bits, uint32_t code) {
    const uint64_t bit = index * static_cast<uint64_t>(bits);
    for (int b = 0; b < bits; ++b) {
        const uint64_t pos = bit + static_cast<uint64_t>(b);
        if (code & (1u << b)) payload[pos >> 3] |= static_cast<uint8_t>(1u << (pos & 7));
    }
}

PackedWeightBlob make_blob(int bits, int exponent_bias, uint64_t count) {
    check_bits(bits);
    if (exponent_bias < -128 || exponent_bias > 127)
        throw ConfigError("exponent bias must fit int8");
    PackedWeightBlob blob;
    blob.bits = static_cast<uint8_t>(bits);
    blob.exponent_bias = static_cast<int8_t>(exponent_bias);
    blob.count = count;
    blob.payload.assign((count * static_cast<uint64_t>(bits) + 63) / 64 * 8 + kGuardBytes, 0);
    return blob;
}

template <typename T> void write_le(std::ostream& os, T v) {
    uint8_t buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<uint8_t>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T> T read_le(std::istream& is) {
    uint8_t buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw DataError("truncated packed-weight block");
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
}

} // namespace

uint32_t PackedWeightBlob::code_at(uint64_t i) const {
    const uint64_t bit = i * static_cast<uint64_t>(bits);
    uint64_t window;
    std::memcpy(&window, payload.data() + (bit >> 3), sizeof(window));
    return static_cast<uint32_t>(window >> (bit & 7)) & ((1u << bits) - 1);
}

PackedWeightBlob pack(std::span<const ShiftCode> codes, int bits, int exponent_bias) {
    PackedWeightBlob blob = make_blob(bits, exponent_bias, codes.size());
    const uint32_t smask = shift_field_mask(bits);
    for (uint64_t i = 0; i < codes.size(); ++i) {
        const auto& c = codes[i];
        if (c.shift > smask)
            throw ConfigError("shift value " + std::to_string(c.shift) + " does not fit " +
                              std::to_string(bits - 1) + " bits");
        const uint32_t code = (c.sign < 0 ? 1u << (bits - 1) : 0u) | c.shift;
        put_code(blob.payload, i, bits, code);
    }
    return blob;
}

std::vector<ShiftCode> unpack(const PackedWeightBlob& blob) {
    std::vector<ShiftCode> codes(blob.count);
    const uint32_t smask = shift_field_mask(blob.bits);
    for (uint64_t i = 0; i < blob.count; ++i) {
        const uint32_t code = blob.code_at(i);
        codes[i].sign = (code >> (blob.bits - 1)) ? int8_t{-1} : int8_t{1};
        codes[i].shift = static_cast<uint8_t>(code & smask);
    }
    return codes;
}

PackedWeightBlob pack_shift(std::span<const TernaryShiftCode> codes, int bits,
                            int exponent_bias) {
    PackedWeightBlob blob = make_blob(bits, exponent_bias, codes.size());
    const uint32_t smask = shift_field_mask(bits);
    for (uint64_t i = 0; i < codes.size(); ++i) {
        const auto& c = codes[i];
        uint32_t code;
        if (c.is_zero) {
            code = smask; // reserved: all-ones S field, sign bit clear
        } else {
            if (c.shift >= smask)
                throw ConfigError("shift value " + std::to_string(c.shift) +
                                  " collides with the zero code at " + std::to_string(bits) +
                                  " bits");
            code = (c.sign < 0 ? 1u << (bits - 1) : 0u) | c.shift;
        }
        put_code(blob.payload, i, bits, code);
    }
    return blob;
}

std::vector<TernaryShiftCode> unpack_shift(const PackedWeightBlob& blob) {
    std::vector<TernaryShiftCode> codes(blob.count);
    const uint32_t smask = shift_field_mask(blob.bits);
    for (uint64_t i = 0; i < blob.count; ++i) {
        const uint32_t code = blob.code_at(i);
        const uint32_t s = code & smask;
        if (s == smask) {
            if (code >> (blob.bits - 1))
                throw DataError("invalid shift-variant code (negative zero)");
            codes[i].is_zero = true;
        } else {
            codes[i].is_zero = false;
            codes[i].sign = (code >> (blob.bits - 1)) ? int8_t{-1} : int8_t{1};
            codes[i].shift = static_cast<uint8_t>(s);
        }
    }
    return codes;
}

void write_blob(std::ostream& os, const PackedWeightBlob& blob) {
    os.write("DSHW", 4);
    write_le<uint8_t>(os, 1);
    write_le<uint8_t>(os, blob.bits);
    write_le<uint8_t>(os, static_cast<uint8_t>(blob.exponent_bias));
    write_le<uint64_t>(os, blob.count);
    os.write(reinterpret_cast<const char*>(blob.payload.data()),
             static_cast<std::streamsize>(blob.logical_bytes()));
}

PackedWeightBlob read_blob(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DSHW", 4) != 0)
        throw DataError("bad packed-weight magic");
    const uint8_t version = read_le<uint8_t>(is);
    if (version != 1) throw DataError("unsupported packed-weight version");
    const uint8_t bits = read_le<uint8_t>(is);
    check_bits(bits);
    const int8_t bias = static_cast<int8_t>(read_le<uint8_t>(is));
    const uint64_t count = read_le<uint64_t>(is);
    PackedWeightBlob blob = make_blob(bits, bias, count);
    is.read(reinterpret_cast<char*>(blob.payload.data()),
            static_cast<std::streamsize>(blob.logical_bytes()));
    if (!is) throw DataError("truncated packed-weight payload");
    return blob;
}

FixedActivations quantize_activations(const Tensor& x) {
    double maxabs = 0.0;
    for (double v : x.data) maxabs = std::max(maxabs, std::abs(v));
    int e = 0;
    if (maxabs > 0.0) {
        e = static_cast<int>(std::ceil(std::log2(maxabs / 127.0)));
        while (std::ldexp(127.0, e) < maxabs) ++e; // guard against log2 rounding
    }
    FixedActivations out;
    out.shape = x.shape;
    out.scale_exponent = e;
    out.values.resize(static_cast<size_t>(x.numel()));
    const double inv = std::ldexp(1.0, -e);
    for (int64_t i = 0; i < x.numel(); ++i) {
        const long q = std::lround(x[i] * inv);
        out.values[static_cast<size_t>(i)] =
            static_cast<int8_t>(std::clamp(q, -128l, 127l));
    }
    return out;
}

Tensor dequantize_activations(const FixedActivations& x) {
    Tensor t(x.shape);
    const double scale = std::ldexp(1.0, x.scale_exponent);
    for (size_t i = 0; i < x.values.size(); ++i)
        t[static_cast<int64_t>(i)] = static_cast<double>(x.values[i]) * scale;
    return t;
}

namespace {

// Worst-case |accumulator| bound; also decides the 32/64-bit accumulator split.
uint64_t accumulator_bound(uint64_t count, int bits) {
    const uint32_t max_shift = shift_field_mask(bits);
    return count * (128ull << max_shift);
}

template <typename Acc>
Acc dot_denseshift_impl(const int8_t* x, const PackedWeightBlob& w) {
    const uint8_t* payload = w.payload.data();
    const int bits = w.bits;
    const uint32_t smask = shift_field_mask(bits);
    const uint32_t cmask = (1u << bits) - 1;
    Acc acc = 0;
    for (uint64_t i = 0; i < w.count; ++i) {
        const uint64_t bit = i * static_cast<uint64_t>(bits);
        uint64_t window;
        std::memcpy(&window, payload + (bit >> 3), sizeof(window));
        const uint32_t code = static_cast<uint32_t>(window >> (bit & 7)) & cmask;
        const Acc neg = -static_cast<Acc>(code >> (bits - 1)); // 0 or -1
        const Acc v = (static_cast<Acc>(x[i]) ^ neg) - neg;    // conditional negate
        acc += v << (code & smask);
    }
    return acc;
}

template <typename Acc>
Acc dot_shift_impl(const int8_t* x, const PackedWeightBlob& w) {
    const uint8_t* payload = w.payload.data();
    const int bits = w.bits;
    const uint32_t smask = shift_field_mask(bits);
    const uint32_t cmask = (1u << bits) - 1;
    Acc acc = 0;
    for (uint64_t i = 0; i < w.count; ++i) {
        const uint64_t bit = i * static_cast<uint64_t>(bits);
        uint64_t window;
        std::memcpy(&window, payload + (bit >> 3), sizeof(window));
        const uint32_t code = static_cast<uint32_t>(window >> (bit & 7)) & cmask;
        if (code == smask) continue; // zero weight: skip the MAC
        const Acc neg = -static_cast<Acc>(code >> (bits - 1));
        const Acc v = (static_cast<Acc>(x[i]) ^ neg) - neg;
        acc += v << (code & smask);
    }
    return acc;
}

void check_lengths(size_t xlen, const PackedWeightBlob& w) {
    if (xlen != w.count)
        throw ShapeError("dot kernel: activation length " + std::to_string(xlen) +
                         " != weight count " + std::to_string(w.count));
}

} // namespace

namespace {

// 32-bit accumulator up to 2^15 elements (worst case fits comfortably:
// 2^15 * 128 * 2^7 < 2^30), 64-bit beyond.
bool narrow_accumulator_ok(const PackedWeightBlob& w) {
    return w.count <= (1ull << 15) && accumulator_bound(w.count, w.bits) < (1ull << 31);
}

} // namespace

int64_t dot_denseshift(std::span<const int8_t> x, const PackedWeightBlob& w) {
    check_lengths(x.size(), w);
    if (narrow_accumulator_ok(w)) return dot_denseshift_impl<int32_t>(x.data(), w);
    return dot_denseshift_impl<int64_t>(x.data(), w);
}

int64_t dot_shift(std::span<const int8_t> x, const PackedWeightBlob& w) {
    check_lengths(x.size(), w);
    if (narrow_accumulator_ok(w)) return dot_shift_impl<int32_t>(x.data(), w);
    return dot_shift_impl<int64_t>(x.data(), w);
}

PackedConvOut conv_forward_packed(const FixedActivations& x, const PackedWeightBlob& w,
                                  const ConvGeometry& geom) {
    if (x.shape.size() != 4 || x.shape[1] != geom.in_channels)
        throw ShapeError("packed conv: bad activation shape");
    const int64_t per_dot = geom.in_channels * geom.kernel * geom.kernel;
    if (w.count != static_cast<uint64_t>(per_dot * geom.out_channels))
        throw ShapeError("packed conv: weight count does not match geometry");
    if (accumulator_bound(static_cast<uint64_t>(per_dot), w.bits) >= (1ull << 62))
        throw NumericError("packed conv: accumulator may overflow");

    const int64_t batch = x.shape[0], h = x.shape[2], wd = x.shape[3];
    const int64_t ho = (h + 2 * geom.padding - geom.kernel) / geom.stride + 1;
    const int64_t wo = (wd + 2 * geom.padding - geom.kernel) / geom.stride + 1;
    if (ho <= 0 || wo <= 0) throw ShapeError("packed conv: kernel larger than padded input");

    // Decode once; the MAC below stays shift-and-add.
    std::vector<ShiftCode> codes = unpack(w);

    PackedConvOut out;
    out.shape = {batch, geom.out_channels, ho, wo};
    out.acc.assign(static_cast<size_t>(batch * geom.out_channels * ho * wo), 0);
    size_t oi = 0;
    for (int64_t n = 0; n < batch; ++n)
        for (int64_t co = 0; co < geom.out_channels; ++co) {
            const ShiftCode* wrow = codes.data() + co * per_dot;
            for (int64_t oy = 0; oy < ho; ++oy)
                for (int64_t ox = 0; ox < wo; ++ox, ++oi) {
                    int64_t acc = 0;
                    const ShiftCode* wc = wrow;
                    for (int64_t ci = 0; ci < geom.in_channels; ++ci)
                        for (int64_t ky = 0; ky < geom.kernel; ++ky)
                            for (int64_t kx = 0; kx < geom.kernel; ++kx, ++wc) {
                                const int64_t iy = oy * geom.stride - geom.padding + ky;
                                const int64_t ix = ox * geom.stride - geom.padding + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                                const int64_t xv =
                                    x.values[static_cast<size_t>(((n * geom.in_channels + ci) * h + iy) * wd + ix)];
                                const int64_t v = wc->sign < 0 ? -xv : xv;
                                acc += v << wc->shift;
                            }
                    out.acc[oi] = acc;
                }
        }
    return out;
}

namespace {

template <typename T> inline void keep_live(const T& value) {
    asm volatile("" : : "g"(value) : "memory");
}

} // namespace

BenchStats bench_kernel(KernelKind kind, int bits, int64_t length, int64_t trials,
                        uint64_t seed) {
    check_bits(bits);
    if (length < 1) throw ConfigError("bench length must be >= 1");
    if (trials < 30) throw ConfigError("bench needs at least 30 trials");

    Rng rng(seed);
    std::vector<int8_t> x(static_cast<size_t>(length));
    for (auto& v : x) v = static_cast<int8_t>(rng.uniform_int(-128, 127));

    PackedWeightBlob blob;
    if (kind == KernelKind::denseshift) {
        std::vector<ShiftCode> codes(static_cast<size_t>(length));
        const int64_t smax = shift_field_mask(bits);
        for (auto& c : codes) {
            c.sign = rng.uniform_int(0, 1) ? int8_t{1} : int8_t{-1};
            c.shift = static_cast<uint8_t>(rng.uniform_int(0, smax));
        }
        blob = pack(codes, bits, 0);
    } else {
        // Uniform over the valid ternary space {0} ∪ {±2^0..±2^(smax-1)}.
        std::vector<TernaryShiftCode> codes(static_cast<size_t>(length));
        const int64_t smax = shift_field_mask(bits); // zero code excluded below
        const int64_t variants = 2 * smax + 1;
        for (auto& c : codes) {
            const int64_t pick = rng.uniform_int(0, variants - 1);
            if (pick == 0) {
                c.is_zero = true;
            } else {
                c.is_zero = false;
                c.sign = pick <= smax ? int8_t{1} : int8_t{-1};
                c.shift = static_cast<uint8_t>((pick - 1) % smax);
            }
        }
        blob = pack_shift(codes, bits, 0);
    }

    auto run_once = [&]() -> int64_t {
        return kind == KernelKind::denseshift ? dot_denseshift(x, blob) : dot_shift(x, blob);
    };

    const int64_t warmup = 5 + trials / 10;
    for (int64_t i = 0; i < warmup; ++i) keep_live(run_once());

    BenchStats stats;
    stats.kernel = kind == KernelKind::denseshift ? "denseshift" : "shift";
    stats.bits = bits;
    stats.length = length;
    stats.trials = trials;
    double sum = 0.0, sq = 0.0;
    uint64_t checksum = 0;
    using clock = std::chrono::steady_clock;
    for (int64_t t = 0; t < trials; ++t) {
        const auto t0 = clock::now();
        const int64_t acc = run_once();
        const auto t1 = clock::now();
        keep_live(acc);
        checksum = (checksum << 1 | checksum >> 63) ^ static_cast<uint64_t>(acc);
        const double ns =
            std::chrono::duration_cast<std::chrono::duration<double, std::nano>>(t1 - t0).count();
        sum += ns;
        sq += ns * ns;
    }
    stats.mean_ns = sum / static_cast<double>(trials);
    stats.stddev_ns =
        std::sqrt(std::max(0.0, sq / static_cast<double>(trials) - stats.mean_ns * stats.mean_ns));
    stats.checksum = checksum;
    return stats;
}

} // namespace denseshift
