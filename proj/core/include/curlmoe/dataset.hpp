#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "curlmoe/fieldgrid.hpp"
#include "curlmoe/synthdata.hpp"

namespace curlmoe::synth {

enum class Split { Train, Val };

const char* to_string(Split s);
Split parse_split(const std::string& s);

struct ManifestRecord {
    std::string path;  // relative to the manifest's directory
    char domain = 'A';
    Split split = Split::Train;
};

/// CSV with header "path,domain,split".
struct Manifest {
    std::vector<ManifestRecord> records;

    static Manifest read(const std::filesystem::path& csv);
    void write(const std::filesystem::path& csv) const;

    std::vector<std::size_t> select(Split split, char domain) const;
    std::size_t count(Split split, char domain) const { return select(split, domain).size(); }

    /// Train split balanced between A and B; validation non-empty for both.
    void validate() const;
};

struct Batch {
    std::vector<std::size_t> records;  // indices into Manifest::records
    std::vector<int> labels;           // 0 = A, 1 = B
};

/// Each batch holds batch/2 samples of each domain. Domains are shuffled
/// independently per epoch, then each batch's order is shuffled; everything is
/// a pure function of (manifest, batch, seed, epoch).
class BalancedBatcher {
public:
    BalancedBatcher(const Manifest& manifest, Split split, std::size_t batch, std::uint64_t seed);

    std::size_t batches_per_epoch() const noexcept { return per_epoch_; }
    std::vector<Batch> epoch(std::uint64_t e) const;

private:
    std::vector<std::size_t> a_, b_;
    std::size_t batch_;
    std::size_t per_epoch_;
    std::uint64_t seed_;
};

/// Endless stream over consecutive epochs.
class BatchStream {
public:
    BatchStream(const Manifest& manifest, Split split, std::size_t batch, std::uint64_t seed);
    Batch next();

private:
    BalancedBatcher batcher_;
    std::uint64_t epoch_ = 0;
    std::vector<Batch> current_;
    std::size_t pos_ = 0;
};

struct DataConfig {
    int n = 32;
    double h = 1.0;
    int train_per_domain = 512;
    int val_per_domain = 64;
    int channels = 16;  // latent width, for the transport targets
    int patch = 8;      // patch edge for the separability check
    std::uint64_t seed = 0;
    RegimeAConfig regime_a;
    RegimeBConfig regime_b;
};

struct DataReport {
    std::size_t samples = 0;
    double max_divergence = 0.0;   // FP64, over every stored field
    double separability = 0.0;     // per-patch variance threshold accuracy
    double solid_fraction = 0.0;   // mean over regime B samples
    double solid_speed_ratio = 0.0;  // mean solid speed / mean fluid speed over regime B samples
    double target_distance = 0.0;
};

/// Writes train/ and val/ tensors (FP32), manifest.csv and targets.ckpt under `dir`.
DataReport generate_dataset(const DataConfig& cfg, const std::filesystem::path& dir);

/// Reads the FP32 velocity field of one manifest record.
fieldgrid::FaceField<float> load_sample(const std::filesystem::path& root, const ManifestRecord& r, double h);

}  // namespace curlmoe::synth
