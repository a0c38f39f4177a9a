#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

namespace mhstm {

// SplitMix64 finalizer. Used to derive independent stream seeds from one
// master seed plus a stream counter, so every consumer of randomness gets a
// stream that depends only on (seed, stream id) and never on call order.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
    return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

// Well-known stream ids. Keep them stable: changing one changes every output.
namespace stream {
inline constexpr std::uint64_t truth = 1;
inline constexpr std::uint64_t corpus = 2;
inline constexpr std::uint64_t brand_paths = 3;
inline constexpr std::uint64_t sampler = 10;
inline constexpr std::uint64_t heldout = 20;
inline constexpr std::uint64_t heldout_corpus = 21;
}  // namespace stream

class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    Rng(std::uint64_t seed, std::uint64_t stream_id) : engine_(derive_seed(seed, stream_id)) {}

    static constexpr result_type min() { return std::mt19937_64::min(); }
    static constexpr result_type max() { return std::mt19937_64::max(); }
    result_type operator()() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    std::size_t uniform_index(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    double normal(double mean, double sd) {
        if (sd == 0.0) return mean;
        return std::normal_distribution<double>(mean, sd)(engine_);
    }

    double gamma(double shape) {
        return std::gamma_distribution<double>(shape, 1.0)(engine_);
    }

    int poisson(double mean) { return std::poisson_distribution<int>(mean)(engine_); }

    // Symmetric or asymmetric Dirichlet draw via normalized gammas. Very small
    // concentrations underflow every gamma to zero; fall back to a single
    // uniformly chosen vertex in that case, which is the limiting law.
    std::vector<double> dirichlet(std::span<const double> concentration) {
        std::vector<double> out(concentration.size());
        double total = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = gamma(concentration[i]);
            total += out[i];
        }
        if (!(total > 0.0) || !std::isfinite(total)) {
            std::fill(out.begin(), out.end(), 0.0);
            out[uniform_index(out.size())] = 1.0;
            return out;
        }
        for (auto& x : out) x /= total;
        return out;
    }

    std::vector<double> dirichlet(std::size_t dim, double concentration) {
        std::vector<double> c(dim, concentration);
        return dirichlet(c);
    }

    // Draw an index proportional to nonnegative weights.
    std::size_t categorical(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double u = uniform() * total;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            u -= weights[i];
            if (u < 0.0) return i;
        }
        // Rounding can leave u marginally >= 0; return the last positive slot.
        for (std::size_t i = weights.size(); i-- > 0;)
            if (weights[i] > 0.0) return i;
        return weights.size() - 1;
    }

    // Draw from unnormalized log weights with max subtraction.
    std::size_t categorical_log(std::span<const double> log_weights, std::vector<double>& scratch) {
        double mx = -std::numeric_limits<double>::infinity();
        for (double lw : log_weights) mx = std::max(mx, lw);
        scratch.resize(log_weights.size());
        for (std::size_t i = 0; i < log_weights.size(); ++i)
            scratch[i] = std::exp(log_weights[i] - mx);
        return categorical(scratch);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace mhstm
