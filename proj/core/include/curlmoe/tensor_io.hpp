#pragma once

// Single-tensor file ("SHD1"):
//   magic "SHD1" | version u32 | rank u32 | dims u32 x rank | dtype u8 (0=f32, 1=f64)
//   | component count u8 | components concatenated, each row-major, little-endian.
// Staggered vector fields are written with three components, scalar fields with one.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "curlmoe/dtype.hpp"
#include "curlmoe/fieldgrid.hpp"

namespace curlmoe::synth {

inline constexpr char kTensorMagic[4] = {'S', 'H', 'D', '1'};
inline constexpr std::uint32_t kTensorVersion = 1;

struct TensorHeader {
    std::vector<std::uint32_t> dims;
    DType dtype = DType::F32;
    std::uint8_t components = 1;
};

/// Reads only the header. Raises FormatError on bad magic or truncation.
TensorHeader read_tensor_header(const std::filesystem::path& path);

template <typename Real>
void write_tensor(const std::filesystem::path& path, const fieldgrid::FaceField<Real>& u);
template <typename Real>
void write_tensor(const std::filesystem::path& path, const fieldgrid::CellField<Real>& p);

/// The file's dtype must equal Real (DtypeMismatch otherwise); the grid is
/// rebuilt with spacing `h`.
template <typename Real>
fieldgrid::FaceField<Real> read_face_tensor(const std::filesystem::path& path, double h = 1.0);
template <typename Real>
fieldgrid::CellField<Real> read_cell_tensor(const std::filesystem::path& path, double h = 1.0);

}  // namespace curlmoe::synth
