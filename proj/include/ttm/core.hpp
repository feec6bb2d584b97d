#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ttm {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

/// Feature map / latent storage: rows = channels, cols = flattened spatial
/// positions in row-major (y * width + x) order.
template <typename Scalar>
struct Tensor3 {
    int c = 0, h = 0, w = 0;
    Mat<Scalar> m;  // c x (h*w)

    Tensor3() = default;
    Tensor3(int c_, int h_, int w_)
        : c(c_), h(h_), w(w_), m(Mat<Scalar>::Zero(c_, (Eigen::Index)h_ * w_)) {}

    int positions() const { return h * w; }
    long size() const { return (long)c * h * w; }

    bool same_shape(const Tensor3& o) const { return c == o.c && h == o.h && w == o.w; }
    bool all_finite() const { return m.allFinite(); }

    Scalar& at(int ch, int y, int x) { return m(ch, y * w + x); }
    Scalar at(int ch, int y, int x) const { return m(ch, y * w + x); }

    template <typename T>
    Tensor3<T> cast() const {
        Tensor3<T> out;
        out.c = c;
        out.h = h;
        out.w = w;
        out.m = m.template cast<T>();
        return out;
    }

    static Tensor3 zeros_like(const Tensor3& o) { return Tensor3(o.c, o.h, o.w); }
};

inline uint64_t fnv1a64(const void* data, size_t n) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Stable sub-stream seeds: same (seed, tag) always yields the same stream.
inline uint64_t derive_seed(uint64_t seed, std::string_view tag) {
    return splitmix64(seed ^ fnv1a64(tag));
}

inline uint64_t derive_seed(uint64_t seed, std::string_view tag, uint64_t index) {
    return splitmix64(derive_seed(seed, tag) ^ splitmix64(index + 0x51ed2701ull));
}

/// Deterministic random source. All draws are built from raw mt19937_64
/// output with fixed in-house transforms, so sequences are identical across
/// standard libraries and runs (std::*_distribution is implementation-defined
/// and is not used anywhere).
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t u64() { return eng_(); }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform() { return (double)(eng_() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller; consumes exactly two uniforms.
    double gaussian() {
        double u1 = 1.0 - uniform();  // (0, 1], keeps the log finite
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    /// Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        require(lo <= hi, "uniform_int: empty range");
        uint64_t span = (uint64_t)(hi - lo) + 1;
        uint64_t r = (uint64_t)(((unsigned __int128)eng_() * span) >> 64);
        return lo + (int64_t)r;
    }

    template <typename Scalar>
    void fill_gaussian(Mat<Scalar>& m, double scale = 1.0) {
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            for (Eigen::Index i = 0; i < m.rows(); ++i)
                m(i, j) = (Scalar)(scale * gaussian());
    }

    template <typename Scalar>
    Tensor3<Scalar> gaussian_tensor(int c, int h, int w) {
        Tensor3<Scalar> t(c, h, w);
        fill_gaussian(t.m);
        return t;
    }

private:
    std::mt19937_64 eng_;
};

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

}  // namespace ttm
