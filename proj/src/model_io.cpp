#include "denseshift/model_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "denseshift/config.hpp"
#include "denseshift/convert.hpp"
#include "denseshift/kernel.hpp"
#include "json.hpp"

namespace denseshift {

namespace {

void write_u32_le(std::ostream& os, uint32_t v) {
    const uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                          static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32_le(std::istream& is) {
    uint8_t b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw DataError("truncated model file");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

void write_u64_le(std::ostream& os, uint64_t v) {
    uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

void write_f64_array(std::ostream& os, const Tensor& t) {
    for (double v : t.data) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        write_u64_le(os, bits);
    }
}

Tensor read_f64_array(std::istream& is, std::vector<int64_t> shape) {
    Tensor t(std::move(shape));
    std::vector<uint8_t> buf(static_cast<size_t>(t.numel()) * 8);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!is) throw DataError("truncated model tensor payload");
    for (int64_t i = 0; i < t.numel(); ++i) {
        uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
            bits |= static_cast<uint64_t>(buf[static_cast<size_t>(i * 8 + b)]) << (8 * b);
        double v;
        std::memcpy(&v, &bits, 8);
        t[i] = v;
    }
    return t;
}

// Discrete storage for a quantizer layer: the materialized level values as
// shift codes (sign_shift keeps its zeros in the ternary code space).
void write_quantizer_blob(std::ostream& os, const LayerSpec& l, const Tensor& q) {
    const auto cfg = l.provider.quantizer_config();
    if (cfg.kind == QuantKind::symmetric_pot) {
        std::vector<ShiftCode> codes(static_cast<size_t>(q.numel()));
        for (int64_t i = 0; i < q.numel(); ++i) {
            auto d = decompose_power_of_two(q[i]);
            if (!d) throw NumericError("quantized weight is not a power of two");
            codes[static_cast<size_t>(i)] = {static_cast<int8_t>(d->first),
                                             static_cast<uint8_t>(d->second - cfg.exponent_bias)};
        }
        write_blob(os, pack(codes, cfg.bits, cfg.exponent_bias));
    } else {
        std::vector<TernaryShiftCode> codes(static_cast<size_t>(q.numel()));
        for (int64_t i = 0; i < q.numel(); ++i) {
            if (q[i] == 0.0) {
                codes[static_cast<size_t>(i)].is_zero = true;
            } else {
                auto d = decompose_power_of_two(q[i]);
                if (!d) throw NumericError("quantized weight is not a power of two");
                codes[static_cast<size_t>(i)] = {false, static_cast<int8_t>(d->first),
                                                 static_cast<uint8_t>(d->second - cfg.exponent_bias)};
            }
        }
        write_blob(os, pack_shift(codes, cfg.bits, cfg.exponent_bias));
    }
}

} // namespace

void save_model(const std::string& path, const Network& net, const ModelMeta& meta) {
    std::ostringstream body;
    body.write("DSNM", 4);
    body.put(1); // version

    nlohmann::json j;
    j["network"] = nlohmann::json::parse(network_spec_to_json(net.spec));
    j["stats"] = {{"mean", meta.stats.mean}, {"stddev", meta.stats.stddev}};
    j["classes"] = meta.classes;
    j["dataset"] = nlohmann::json::parse(dataset_config_to_json(meta.dataset));
    if (!meta.report_json.empty()) j["report"] = nlohmann::json::parse(meta.report_json);
    const std::string js = j.dump();
    write_u32_le(body, static_cast<uint32_t>(js.size()));
    body.write(js.data(), static_cast<std::streamsize>(js.size()));

    for (size_t li = 0; li < net.spec.layers.size(); ++li) {
        const auto& l = net.spec.layers[li];
        const auto& st = net.states[li];
        if (l.has_weights()) {
            switch (l.provider.kind) {
            case ProviderKind::full_precision:
                write_f64_array(body, st.weight);
                break;
            case ProviderKind::dense_shift: {
                auto m = materialize_shift(st.latents);
                write_blob(body, pack(m.codes, l.provider.bits, l.provider.exponent_bias));
                break;
            }
            case ProviderKind::quantizer:
                write_quantizer_blob(body, l, quantize(st.weight, l.provider.quantizer_config()));
                break;
            }
            if (l.has_bias) write_f64_array(body, st.bias);
        } else if (l.kind == LayerKind::batchnorm) {
            write_f64_array(body, st.gamma);
            write_f64_array(body, st.beta);
            write_f64_array(body, st.running_mean);
            write_f64_array(body, st.running_var);
        }
    }

    const std::string bytes = body.str();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write model file: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    write_u64_le(f, fnv1a64(bytes.data(), bytes.size()));
    if (!f) throw DataError("failed writing model file: " + path);
}

LoadedModel load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open model file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string all = ss.str();
    if (all.size() < 17) throw DataError("model file too small: " + path);

    uint64_t stored = 0;
    for (int i = 0; i < 8; ++i)
        stored |= static_cast<uint64_t>(static_cast<uint8_t>(all[all.size() - 8 + i])) << (8 * i);
    if (fnv1a64(all.data(), all.size() - 8) != stored)
        throw DataError("model checksum mismatch: " + path);

    std::istringstream is(all.substr(0, all.size() - 8));
    char magic[4];
    is.read(magic, 4);
    if (std::memcmp(magic, "DSNM", 4) != 0) throw DataError("bad model magic: " + path);
    if (is.get() != 1) throw DataError("unsupported model version: " + path);

    const uint32_t jlen = read_u32_le(is);
    std::string js(jlen, '\0');
    is.read(js.data(), jlen);
    if (!is) throw DataError("truncated model header JSON");

    LoadedModel out;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(js);
        out.meta.stats.mean = j.at("stats").at("mean").get<std::vector<double>>();
        out.meta.stats.stddev = j.at("stats").at("stddev").get<std::vector<double>>();
        out.meta.classes = j.at("classes").get<int>();
        if (j.contains("dataset"))
            out.meta.dataset = dataset_config_from_json(j["dataset"].dump());
        if (j.contains("report")) out.meta.report_json = j["report"].dump();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad model header JSON: ") + e.what());
    }
    out.net.spec = network_spec_from_json(j.at("network").dump());
    out.net.states.resize(out.net.spec.layers.size());

    for (size_t li = 0; li < out.net.spec.layers.size(); ++li) {
        const auto& l = out.net.spec.layers[li];
        auto& st = out.net.states[li];
        if (l.has_weights()) {
            const std::vector<int64_t> wshape =
                l.kind == LayerKind::conv2d
                    ? std::vector<int64_t>{l.out_channels, l.in_channels, l.kernel, l.kernel}
                    : std::vector<int64_t>{l.out_features, l.in_features};
            switch (l.provider.kind) {
            case ProviderKind::full_precision:
                st.weight = read_f64_array(is, wshape);
                break;
            case ProviderKind::dense_shift: {
                PackedWeightBlob blob = read_blob(is);
                if (blob.bits != l.provider.bits ||
                    blob.exponent_bias != l.provider.exponent_bias)
                    throw DataError("blob parameters disagree with layer provider");
                st.latents =
                    latents_from_codes(unpack(blob), wshape, blob.bits, blob.exponent_bias);
                break;
            }
            case ProviderKind::quantizer: {
                PackedWeightBlob blob = read_blob(is);
                st.weight = Tensor(wshape);
                const auto cfg = l.provider.quantizer_config();
                if (cfg.kind == QuantKind::symmetric_pot) {
                    auto codes = unpack(blob);
                    for (int64_t i = 0; i < st.weight.numel(); ++i)
                        st.weight[i] = codes[static_cast<size_t>(i)].sign *
                                       std::exp2(codes[static_cast<size_t>(i)].shift +
                                                 blob.exponent_bias);
                } else {
                    auto codes = unpack_shift(blob);
                    for (int64_t i = 0; i < st.weight.numel(); ++i) {
                        const auto& c = codes[static_cast<size_t>(i)];
                        st.weight[i] =
                            c.is_zero ? 0.0 : c.sign * std::exp2(c.shift + blob.exponent_bias);
                    }
                }
                break;
            }
            }
            if (l.has_bias)
                st.bias = read_f64_array(
                    is, {l.kind == LayerKind::conv2d ? l.out_channels : l.out_features});
        } else if (l.kind == LayerKind::batchnorm) {
            st.gamma = read_f64_array(is, {l.channels});
            st.beta = read_f64_array(is, {l.channels});
            st.running_mean = read_f64_array(is, {l.channels});
            st.running_var = read_f64_array(is, {l.channels});
        }
    }
    return out;
}

uint64_t file_checksum(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string all = ss.str();
    return fnv1a64(all.data(), all.size());
}

} // namespace denseshift
