#pragma once

#include <cstdint>
#include <type_traits>

namespace curlmoe {

/// Element type code shared by tensor files and checkpoints.
enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <typename Real>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<Real, float> || std::is_same_v<Real, double>);
    return std::is_same_v<Real, float> ? DType::F32 : DType::F64;
}

constexpr std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

}  // namespace curlmoe
