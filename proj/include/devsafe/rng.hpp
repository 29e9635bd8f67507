#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace devsafe {

// Counter-free xoshiro256** generator. All randomness in the library flows
// through this type so that runs are reproducible across platforms and
// compilers; std:: distributions are implementation-defined and never used.
class RngStream {
public:
    RngStream() : state_{1, 2, 3, 4} {}

    // Seeds the four state words via splitmix64 from (seed, stream_id), so
    // distinct stream ids derived from one seed are decorrelated.
    RngStream(std::uint64_t seed, std::uint64_t stream_id);

    std::uint64_t next_u64();

    // Uniform in [0, 1) with 53 random bits.
    double next_double();

    // Uniform integer in [0, bound) via rejection; bound must be > 0.
    std::uint64_t next_below(std::uint64_t bound);

    // Standard normal via Box-Muller (explicit formula, no std distribution).
    // No spare value is cached, so state() captures the generator completely.
    double next_normal();

    // Uniform in [lo, hi).
    double next_uniform(double lo, double hi);

    // Fisher-Yates shuffle of v.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct indices from [0, n), uniform without replacement, in the
    // order drawn (partial Fisher-Yates).
    std::vector<int> sample_without_replacement(int n, int k);

    std::array<std::uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<std::uint64_t, 4>& s) { state_ = s; }

private:
    std::array<std::uint64_t, 4> state_;
};

// Named stream ids; one RngStream per purpose keeps sampling decisions
// independent of each other and of thread scheduling.
enum class StreamId : std::uint64_t {
    kPairSampling = 1,
    kNegativeSampling = 2,
    kConstraintSampling = 3,
    kInit = 4,
    kDataGen = 5,
    kBaseModel = 6,
    kHeads = 7,
};

inline RngStream make_stream(std::uint64_t seed, StreamId id) {
    return RngStream(seed, static_cast<std::uint64_t>(id));
}

}  // namespace devsafe
