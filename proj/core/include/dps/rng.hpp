#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dps {

// Named sub-seeds: every random stream in a run is derived from the single
// user-facing seed plus a stable label, so adding a new stream never shifts
// the existing ones.
uint64_t derive_seed(uint64_t seed, std::string_view label);
uint64_t derive_seed(uint64_t seed, std::string_view label, uint64_t index);

// mt19937_64 is fully specified by the standard; the conversions below are
// written out by hand so results do not depend on the standard library's
// distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1) with 53 random bits
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n), rejection-sampled to avoid modulo bias
    uint64_t below(uint64_t n);

    double normal();

private:
    std::mt19937_64 engine_;
    bool   has_spare_ = false;
    double spare_     = 0.0;
};

} // namespace dps
