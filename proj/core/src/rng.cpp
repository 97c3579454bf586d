#include "dps/rng.hpp"

#include <cmath>

namespace dps {

namespace {

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace

uint64_t derive_seed(uint64_t seed, std::string_view label) {
    return splitmix64(splitmix64(seed) ^ fnv1a(label));
}

uint64_t derive_seed(uint64_t seed, std::string_view label, uint64_t index) {
    return splitmix64(derive_seed(seed, label) ^ splitmix64(index + 1));
}

uint64_t Rng::below(uint64_t n) {
    if (n <= 1) {
        return 0;
    }
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_     = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

} // namespace dps
