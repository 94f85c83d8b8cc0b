#include <cmath>
#include <sstream>

#include "denseshift/kernel.hpp"
#include "denseshift/nn.hpp"
#include "doctest.h"

using namespace denseshift;

namespace {

std::vector<ShiftCode> random_dense_codes(int64_t n, int bits, Rng& rng, int max_shift = -1) {
    const int smax = max_shift >= 0 ? max_shift : (1 << (bits - 1)) - 1;
    std::vector<ShiftCode> codes(static_cast<size_t>(n));
    for (auto& c : codes) {
        c.sign = rng.uniform_int(0, 1) ? int8_t{1} : int8_t{-1};
        c.shift = static_cast<uint8_t>(rng.uniform_int(0, smax));
    }
    return codes;
}

std::vector<TernaryShiftCode> random_shift_codes(int64_t n, int bits, Rng& rng,
                                                 double zero_prob = 0.3) {
    const int smax = (1 << (bits - 1)) - 2;
    std::vector<TernaryShiftCode> codes(static_cast<size_t>(n));
    for (auto& c : codes) {
        if (rng.uniform(0, 1) < zero_prob) {
            c.is_zero = true;
        } else {
            c.is_zero = false;
            c.sign = rng.uniform_int(0, 1) ? int8_t{1} : int8_t{-1};
            c.shift = static_cast<uint8_t>(rng.uniform_int(0, smax));
        }
    }
    return codes;
}

std::vector<int8_t> random_acts(int64_t n, Rng& rng) {
    std::vector<int8_t> x(static_cast<size_t>(n));
    for (auto& v : x) v = static_cast<int8_t>(rng.uniform_int(-128, 127));
    return x;
}

} // namespace

TEST_CASE("pack/unpack round trip over random codes") {
    Rng rng(21);
    for (int bits : {2, 3, 4}) {
        auto codes = random_dense_codes(10000, bits, rng);
        PackedWeightBlob blob = pack(codes, bits, -2);
        CHECK(blob.count == 10000);
        CHECK(blob.logical_bytes() == static_cast<size_t>((10000 * bits + 63) / 64 * 8));
        auto back = unpack(blob);
        REQUIRE(back.size() == codes.size());
        for (size_t i = 0; i < codes.size(); ++i) {
            CHECK(back[i].sign == codes[i].sign);
            CHECK(back[i].shift == codes[i].shift);
        }

        auto tern = random_shift_codes(10000, bits, rng);
        PackedWeightBlob tb = pack_shift(tern, bits, 0);
        auto tback = unpack_shift(tb);
        for (size_t i = 0; i < tern.size(); ++i) {
            CHECK(tback[i].is_zero == tern[i].is_zero);
            if (!tern[i].is_zero) {
                CHECK(tback[i].sign == tern[i].sign);
                CHECK(tback[i].shift == tern[i].shift);
            }
        }
    }
}

TEST_CASE("edge packs: empty, single code, overflow") {
    PackedWeightBlob empty = pack({}, 3, 0);
    CHECK(empty.count == 0);
    CHECK(empty.logical_bytes() == 0);
    CHECK(unpack(empty).empty());

    std::vector<ShiftCode> one = {{int8_t{1}, uint8_t{0}}};
    PackedWeightBlob b2 = pack(one, 2, 0);
    auto back = unpack(b2);
    CHECK(back.size() == 1);
    CHECK(back[0].sign == 1);
    CHECK(back[0].shift == 0);

    std::vector<ShiftCode> big = {{int8_t{1}, uint8_t{2}}};
    CHECK_THROWS_AS(pack(big, 2, 0), ConfigError); // S=2 needs 2 bits, only 1 available

    std::vector<TernaryShiftCode> collide = {{false, int8_t{1}, uint8_t{3}}};
    CHECK_THROWS_AS(pack_shift(collide, 3, 0), ConfigError); // S=3 is the zero code at 3 bits
}

TEST_CASE("packed blob serialization is byte-exact") {
    std::vector<ShiftCode> codes = {{int8_t{1}, uint8_t{0}},
                                    {int8_t{-1}, uint8_t{1}},
                                    {int8_t{1}, uint8_t{1}}};
    PackedWeightBlob blob = pack(codes, 2, -1);
    std::ostringstream os;
    write_blob(os, blob);
    const std::string bytes = os.str();
    const unsigned char expected[] = {'D', 'S', 'H', 'W', 1, 2, 0xFF,
                                      3, 0, 0, 0, 0, 0, 0, 0,
                                      0x1C, 0, 0, 0, 0, 0, 0, 0};
    REQUIRE(bytes.size() == sizeof(expected));
    for (size_t i = 0; i < sizeof(expected); ++i)
        CHECK(static_cast<unsigned char>(bytes[i]) == expected[i]);

    std::istringstream is(bytes);
    PackedWeightBlob back = read_blob(is);
    CHECK(back.bits == 2);
    CHECK(back.exponent_bias == -1);
    auto decoded = unpack(back);
    REQUIRE(decoded.size() == 3);
    CHECK(decoded[1].sign == -1);
    CHECK(decoded[1].shift == 1);

    std::istringstream bad("XSHW");
    CHECK_THROWS_AS(read_blob(bad), DataError);
}

TEST_CASE("dot_denseshift hand arithmetic") {
    std::vector<ShiftCode> codes = {{int8_t{1}, uint8_t{1}}, {int8_t{-1}, uint8_t{2}}};
    PackedWeightBlob blob = pack(codes, 3, 0);
    std::vector<int8_t> x = {3, -2};
    CHECK(dot_denseshift(x, blob) == 14); // 3*2 + (-2)*(-4)

    std::vector<int8_t> zeros = {0, 0};
    CHECK(dot_denseshift(zeros, blob) == 0);

    std::vector<int8_t> wrong = {1};
    CHECK_THROWS_AS(dot_denseshift(wrong, blob), ShapeError);
}

TEST_CASE("dot_shift hand arithmetic with zero codes") {
    std::vector<TernaryShiftCode> w1 = {{true, int8_t{1}, uint8_t{0}}};
    PackedWeightBlob b1 = pack_shift(w1, 3, 0);
    std::vector<int8_t> x1 = {5};
    CHECK(dot_shift(x1, b1) == 0);

    std::vector<TernaryShiftCode> w2 = {{true, int8_t{1}, uint8_t{0}},
                                        {false, int8_t{-1}, uint8_t{2}}};
    PackedWeightBlob b2 = pack_shift(w2, 4, 0);
    std::vector<int8_t> x2 = {3, -2};
    CHECK(dot_shift(x2, b2) == 8); // 0 + (-2)*(-4)
}

TEST_CASE("kernels equal the real-arithmetic oracle exactly") {
    Rng rng(31);
    for (int bits : {2, 3, 4}) {
        for (int rep = 0; rep < 3; ++rep) {
            const int64_t n = 4096;
            auto codes = random_dense_codes(n, bits, rng);
            PackedWeightBlob blob = pack(codes, bits, 0);
            auto x = random_acts(n, rng);
            double oracle = 0.0;
            for (int64_t i = 0; i < n; ++i)
                oracle += static_cast<double>(x[static_cast<size_t>(i)]) *
                          (codes[static_cast<size_t>(i)].sign *
                           std::exp2(codes[static_cast<size_t>(i)].shift));
            CHECK(static_cast<double>(dot_denseshift(x, blob)) == oracle);

            auto tern = random_shift_codes(n, bits, rng);
            PackedWeightBlob tblob = pack_shift(tern, bits, 0);
            double toracle = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                const auto& c = tern[static_cast<size_t>(i)];
                if (!c.is_zero)
                    toracle += static_cast<double>(x[static_cast<size_t>(i)]) *
                               (c.sign * std::exp2(c.shift));
            }
            CHECK(static_cast<double>(dot_shift(x, tblob)) == toracle);
        }
    }
}

TEST_CASE("exponent bias scales the accumulator, not the kernel") {
    Rng rng(33);
    const int64_t n = 512;
    auto codes = random_dense_codes(n, 3, rng);
    PackedWeightBlob biased = pack(codes, 3, -3);
    auto x = random_acts(n, rng);
    double oracle = 0.0;
    for (int64_t i = 0; i < n; ++i)
        oracle += static_cast<double>(x[static_cast<size_t>(i)]) *
                  (codes[static_cast<size_t>(i)].sign *
                   std::exp2(codes[static_cast<size_t>(i)].shift - 3));
    const double scaled = static_cast<double>(dot_denseshift(x, biased)) * std::exp2(-3);
    CHECK(scaled == oracle);
}

TEST_CASE("wide accumulator path stays exact beyond 2^15 elements") {
    Rng rng(35);
    const int64_t n = (1 << 15) + 1234;
    auto codes = random_dense_codes(n, 4, rng);
    PackedWeightBlob blob = pack(codes, 4, 0);
    auto x = random_acts(n, rng);
    double oracle = 0.0;
    for (int64_t i = 0; i < n; ++i)
        oracle += static_cast<double>(x[static_cast<size_t>(i)]) *
                  (codes[static_cast<size_t>(i)].sign *
                   std::exp2(codes[static_cast<size_t>(i)].shift));
    CHECK(static_cast<double>(dot_denseshift(x, blob)) == oracle);
}

TEST_CASE("zero-equivalence: translated blobs agree when no zero codes exist") {
    Rng rng(37);
    const int64_t n = 2048;
    // dense codes restricted so they stay valid in the ternary space
    auto codes = random_dense_codes(n, 3, rng, (1 << 2) - 2);
    std::vector<TernaryShiftCode> tern(codes.size());
    for (size_t i = 0; i < codes.size(); ++i) tern[i] = {false, codes[i].sign, codes[i].shift};
    PackedWeightBlob dense = pack(codes, 3, 0);
    PackedWeightBlob shift = pack_shift(tern, 3, 0);
    for (int rep = 0; rep < 10; ++rep) {
        auto x = random_acts(n, rng);
        CHECK(dot_denseshift(x, dense) == dot_shift(x, shift));
    }
}

TEST_CASE("packed conv matches the float engine exactly") {
    Rng rng(41);

    // 1x1 conv with weight +1 is the identity.
    {
        std::vector<ShiftCode> one = {{int8_t{1}, uint8_t{0}}};
        PackedWeightBlob blob = pack(one, 2, 0);
        FixedActivations x;
        x.shape = {1, 1, 3, 3};
        x.scale_exponent = 0;
        for (int i = 0; i < 9; ++i) x.values.push_back(static_cast<int8_t>(i - 4));
        auto out = conv_forward_packed(x, blob, {1, 1, 1, 1, 0});
        for (int i = 0; i < 9; ++i) CHECK(out.acc[static_cast<size_t>(i)] == i - 4);
    }

    // All-zero input gives all-zero output.
    {
        auto codes = random_dense_codes(2 * 1 * 9, 3, rng);
        PackedWeightBlob blob = pack(codes, 3, 0);
        FixedActivations x;
        x.shape = {1, 1, 5, 5};
        x.values.assign(25, 0);
        auto out = conv_forward_packed(x, blob, {1, 2, 3, 1, 1});
        for (int64_t v : out.acc) CHECK(v == 0);
    }

    // Random conv against the nn-engine float path.
    for (int rep = 0; rep < 5; ++rep) {
        const ConvGeometry geom{3, 4, 3, 1, 1};
        const int bias = rep % 2 ? -2 : 0;
        auto codes = random_dense_codes(geom.out_channels * geom.in_channels * 9, 3, rng);
        PackedWeightBlob blob = pack(codes, 3, bias);

        FixedActivations x;
        x.shape = {2, 3, 6, 6};
        x.scale_exponent = -1;
        x.values = random_acts(2 * 3 * 36, rng);

        NetworkSpec spec;
        spec.input_shape = {3, 6, 6};
        LayerSpec conv;
        conv.kind = LayerKind::conv2d;
        conv.in_channels = 3;
        conv.out_channels = 4;
        conv.kernel = 3;
        conv.padding = 1;
        conv.has_bias = false;
        spec.layers = {conv};
        Network net = Network::build(spec, {}, 1);
        for (size_t i = 0; i < codes.size(); ++i)
            net.states[0].weight[static_cast<int64_t>(i)] =
                codes[i].sign * std::exp2(codes[i].shift + bias);

        Tensor fx = dequantize_activations(x);
        Tensor ref = forward_eval(net, fx);

        auto out = conv_forward_packed(x, blob, geom);
        REQUIRE(out.shape == ref.shape);
        const double scale = std::exp2(bias + x.scale_exponent);
        for (size_t i = 0; i < out.acc.size(); ++i)
            CHECK(static_cast<double>(out.acc[i]) * scale == ref[static_cast<int64_t>(i)]);
    }
}

TEST_CASE("activation quantization uses a shared power-of-two scale") {
    Tensor t({4}, {0.5, -1.0, 0.25, 0.75});
    FixedActivations q = quantize_activations(t);
    // max|x|=1.0 fits at scale 2^-7: 1.0/2^-7 = 128 > 127, so scale is 2^-6
    CHECK(std::ldexp(127.0, q.scale_exponent) >= 1.0);
    Tensor back = dequantize_activations(q);
    for (int64_t i = 0; i < 4; ++i)
        CHECK(std::abs(back[i] - t[i]) <= std::exp2(q.scale_exponent) * 0.5 + 1e-12);

    Tensor zeros({3});
    FixedActivations qz = quantize_activations(zeros);
    for (int8_t v : qz.values) CHECK(v == 0);
}

TEST_CASE("bench validates inputs and produces stable stats") {
    CHECK_THROWS_AS(bench_kernel(KernelKind::shift, 3, 128, 29, 1), ConfigError);
    auto stats = bench_kernel(KernelKind::denseshift, 3, 256, 30, 1);
    CHECK(stats.trials == 30);
    CHECK(stats.mean_ns > 0.0);
    CHECK(stats.kernel == "denseshift");
}
