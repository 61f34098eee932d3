#pragma once

#include <cstdint>
#include <random>

namespace ssdiff {

using Rng = std::mt19937_64;

// Independent stream for (master, index); used for per-row / per-worker RNGs so
// results do not depend on how work is split across threads.
[[nodiscard]] Rng make_stream(std::uint64_t master_seed, std::uint64_t index);

[[nodiscard]] double standard_normal(Rng& rng);
[[nodiscard]] double uniform01(Rng& rng);
// Gamma(shape, 1) variate.
[[nodiscard]] double gamma_variate(Rng& rng, double shape);

}  // namespace ssdiff
