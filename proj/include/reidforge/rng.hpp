#pragma once

#include <cstdint>
#include <random>

namespace reidforge {

/// Every stochastic operation takes one of these explicitly; nothing reads global state.
using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

}  // namespace reidforge
