#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace fedsim {

// Largest-remainder (Hamilton) apportionment of `total` units in proportion
// to integer `weights`. Quotas are computed exactly in integer arithmetic.
// Leftover units go to the largest fractional remainders; ties go to the
// lower index. Requires a positive weight sum.
std::vector<std::uint64_t> apportion(std::span<const std::uint64_t> weights,
                                     std::uint64_t total);

// Converts real fractions to integer weights in millionths so they can be
// apportioned exactly. Fractions must be nonnegative and not all zero.
std::vector<std::uint64_t> fraction_weights(std::span<const double> fractions);

}  // namespace fedsim
