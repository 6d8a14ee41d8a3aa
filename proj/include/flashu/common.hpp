#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace flashu {

enum class Task { Gen, Und };

inline const char* task_name(Task t) { return t == Task::Gen ? "gen" : "und"; }

// Error taxonomy. Usage errors map to exit code 1, everything else to 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// SplitMix64. All model weights and synthetic inputs derive from this
// generator so every artifact is a pure function of its seed.
class SplitMix64 {
  public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 24 bits of mantissa, so the draw is exact in f32.
    float next_unit() {
        return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
    }

    float next_uniform(float lo, float hi) { return lo + (hi - lo) * next_unit(); }

    // Box-Muller; consumes two draws per pair, second value discarded for
    // simplicity (determinism matters here, throughput does not).
    float next_gaussian() {
        float u1 = next_unit();
        float u2 = next_unit();
        if (u1 < 1e-12f) u1 = 1e-12f;
        const float r = std::sqrt(-2.0f * std::log(u1));
        const float theta = 6.28318530717958647692f * u2;
        return r * std::cos(theta);
    }

  private:
    std::uint64_t state_;
};

// FNV-1a, used for output checksums in reports and tests.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xCBF29CE484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

}  // namespace flashu
