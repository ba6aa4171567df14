#pragma once

// Checkpoint file ("SHDC"):
//   magic "SHDC" | version u32
//   per parameter: name_len u16 | name | rank u32 | dims u32 x rank | dtype u8 | data (LE)
//   optimiser state in the same record format, names suffixed "/m" and "/v"
//   step counter u64
// All integers little-endian. The step counter occupies the final eight bytes.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "curlmoe/dtype.hpp"
#include "curlmoe/nn.hpp"

namespace curlmoe::nn {

inline constexpr char kCheckpointMagic[4] = {'S', 'H', 'D', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
    std::string name;
    std::vector<std::uint32_t> dims;
    DType dtype = DType::F32;
    std::vector<double> values;  // widened on read; narrowed back on write

    std::size_t count() const;
};

struct Checkpoint {
    std::vector<CheckpointRecord> records;
    std::uint64_t step = 0;

    const CheckpointRecord* find(const std::string& name) const;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Writes every parameter, then its Adam state, then the step counter.
template <typename Real>
void save_params(const std::filesystem::path& path, const ParamStore<Real>& store);

/// Loads values (and Adam state plus step when `with_optimizer`) into an already
/// registered store. Every store parameter must be present with the same shape
/// and dtype; parameter records the store does not know are rejected.
template <typename Real>
void load_params(const std::filesystem::path& path, ParamStore<Real>& store, bool with_optimizer = true);

}  // namespace curlmoe::nn
