#pragma once

// Deterministic generators for the two field regimes.
//
// Both regimes build a vector potential A in FP64, round it onto the dyadic
// lattice 2^-14 and take u = curl(A). With h a power of two every difference in
// the curl is then exact, so the velocity survives FP32 storage bit-for-bit and
// its FP64 divergence is exactly zero.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "curlmoe/fieldgrid.hpp"
#include "curlmoe/nn.hpp"

namespace curlmoe::synth {

using fieldgrid::CellField;
using fieldgrid::EdgeField;
using fieldgrid::FaceField;
using fieldgrid::GridSpec;

/// Broadband "open-channel" analogue: a sum of random Fourier modes of A with
/// amplitude |k|^-beta, shells 1..k_max visited round-robin.
struct RegimeAConfig {
    double beta = 2.0;
    int k_max = 0;  // 0 -> n/4
    double sigma = 1.0;
    int modes = 64;
    std::uint64_t seed = 0;
};

/// Confined "porous" analogue: an obstacle mask from thresholded smoothed
/// noise, a shear base flow plus smooth noise in A, and A damped inside and
/// next to obstacles.
struct RegimeBConfig {
    double solid_fraction = 0.35;
    int smoothing = 2;
    double base_flow = 0.4;
    double noise = 0.1;
    int noise_k_max = 3;
    double damping = 0.05;
    std::uint64_t seed = 0;
};

struct RegimeBSample {
    FaceField<double> u;
    CellField<double> mask;  // 1 = solid, 0 = fluid
};

inline constexpr double kPotentialQuantum = 1.0 / 16384.0;  // 2^-14

/// Rounds every entry to a multiple of 2^-14. Throws InvariantViolation if any
/// |entry| >= 64, where FP32 exactness of the curl would be lost.
EdgeField<double> quantize_potential(const EdgeField<double>& a);

FaceField<double> gen_regime_a(const RegimeAConfig& cfg, const GridSpec& spec);
RegimeBSample gen_regime_b(const RegimeBConfig& cfg, const GridSpec& spec);

/// Periodic box filter of half-width r along all three axes.
CellField<double> box_smooth(const CellField<double>& f, int r);

/// Mean over solid cells and over fluid cells of the cell speed
/// |(u_face_low + u_face_high)/2|.
struct ConfinementStats {
    double solid_speed = 0.0;
    double fluid_speed = 0.0;
    double solid_fraction = 0.0;
};
ConfinementStats confinement_stats(const FaceField<double>& u, const CellField<double>& mask);

/// Mean over the three components of the within-patch variance; one value per patch.
template <typename Real>
std::vector<double> patch_variances(const FaceField<Real>& u, int patch);

/// Best single-threshold accuracy separating `a` from `b` (either direction).
double threshold_separability(std::span<const double> a, std::span<const double> b);

/// Per-domain latent maps T_d = 0.9 * Q_d with Q_d orthogonal.
struct TransportTargets {
    int channels = 0;
    std::array<std::vector<double>, 2> maps;  // row-major C x C

    /// Seeded; regenerates until ||T_A - T_B||_F > 0.5.
    static TransportTargets generate(int channels, std::uint64_t seed);
    double frobenius_distance() const;

    /// out[t] = T_domain(t) * x[t].
    template <typename Real>
    nn::Matrix<Real> apply(const nn::Matrix<Real>& x, std::span<const int> labels) const;

    void save(const std::filesystem::path& path) const;
    static TransportTargets load(const std::filesystem::path& path);
};

/// splitmix64 mix of a base seed with a stream tag; used for per-sample seeds.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

}  // namespace curlmoe::synth
