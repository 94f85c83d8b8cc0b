#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace denseshift {

// Error taxonomy; the CLI maps these onto exit codes (config=2, data=3,
// numeric=4).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct ShapeError : Error {
    using Error::Error;
};

// Non-finite loss / gradient during training.
struct NumericError : Error {
    using Error::Error;
};

// FNV-1a, used for model-file checksums and run summaries.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace denseshift
