#pragma once

#include <cstdint>
#include <string_view>

namespace nmcrl {

// Independent per-component stream from a global seed and a fixed label,
// e.g. derive_seed(seed, "eval") never moves when "noise" draws change.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

std::uint64_t derive_seed(std::uint64_t seed, std::string_view label, std::uint64_t index);

}  // namespace nmcrl
