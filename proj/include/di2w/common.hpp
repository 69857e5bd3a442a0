#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace di2w {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Eigen::MatrixXd;
using Eigen::MatrixXf;
using Eigen::VectorXd;
using Eigen::VectorXf;

/// Error with a stable machine-readable code in front of the human message.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(code + ": " + message), code_(std::move(code)) {}
    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

[[noreturn]] inline void fail(std::string code, const std::string& message) {
    throw Error(std::move(code), message);
}

// FNV-1a, used for content hashes and seed derivation.
inline constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ull;

inline std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = kFnvOffset) {
    return fnv1a64(s.data(), s.size(), h);
}

template <typename Derived>
std::uint64_t hash_matrix(const Eigen::MatrixBase<Derived>& m, std::uint64_t h = kFnvOffset) {
    using Scalar = typename Derived::Scalar;
    for (Index c = 0; c < m.cols(); ++c)
        for (Index r = 0; r < m.rows(); ++r) {
            Scalar v = m(r, c);
            h = fnv1a64(&v, sizeof(v), h);
        }
    return h;
}

inline std::string hex64(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

/// Derives an independent seed for a named consumer of a base seed, so that
/// every random decision in the pipeline is reproducible from one seed.
inline std::uint64_t substream_seed(std::uint64_t base, std::string_view label,
                                    std::uint64_t index = 0) {
    std::uint64_t h = fnv1a64(label);
    h = fnv1a64(&base, sizeof(base), h);
    h = fnv1a64(&index, sizeof(index), h);
    return h;
}

/// Deterministic RNG. Draw functions are hand-rolled on top of mt19937_64 so
/// the byte-exact sequence does not depend on the standard library's
/// distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t raw() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform in {0, ..., n-1}, unbiased.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) fail("invalid-argument", "uniform_int requires n > 0");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    /// Fisher-Yates permutation of {0, ..., n-1}.
    std::vector<Index> permutation(Index n) {
        std::vector<Index> p(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
        for (Index i = n - 1; i > 0; --i) {
            const auto j = static_cast<Index>(uniform_int(static_cast<std::uint64_t>(i) + 1));
            std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
        }
        return p;
    }

    MatrixXd normal_matrix(Index rows, Index cols, double scale = 1.0) {
        MatrixXd m(rows, cols);
        for (Index r = 0; r < rows; ++r)
            for (Index c = 0; c < cols; ++c) m(r, c) = scale * normal();
        return m;
    }

    VectorXd normal_vector(Index n, double scale = 1.0) {
        VectorXd v(n);
        for (Index i = 0; i < n; ++i) v(i) = scale * normal();
        return v;
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace di2w
