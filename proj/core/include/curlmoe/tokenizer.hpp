#pragma once

// Patch autoencoder between staggered velocity fields and a coarse latent grid.
//
// The encoder maps each p^3 patch of the velocity (three face components, 3p^3
// values) through a shared MLP to C channels. The decoder never emits velocity:
// a shared per-token MLP emits the patch's edge values of a vector potential A,
// a pooled head emits the uniform harmonic flow, and u = curl(A) + harmonic.
// Every decoded state is therefore divergence-free for any parameter values.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "curlmoe/fieldgrid.hpp"
#include "curlmoe/nn.hpp"

namespace curlmoe::tokenizer {

using fieldgrid::EdgeField;
using fieldgrid::FaceField;
using fieldgrid::GridSpec;
using fieldgrid::HarmonicComponent;

struct TokenizerConfig {
    int n = 32;
    int patch = 8;
    int channels = 16;
    int hidden = 64;
    double h = 1.0;

    void validate() const;
    GridSpec grid() const { return GridSpec{n, h}; }
    int latent_side() const { return n / patch; }
    std::size_t tokens() const {
        const auto m = static_cast<std::size_t>(latent_side());
        return m * m * m;
    }
    std::size_t patch_values() const {
        const auto p = static_cast<std::size_t>(patch);
        return 3 * p * p * p;
    }
};

/// M^3 tokens x C channels. Token t <-> latent coordinate (I, J, K) with
/// t = (I*M + J)*M + K.
template <typename Real>
struct LatentGrid {
    int side = 0;
    nn::Matrix<Real> tokens;
};

template <typename Real>
struct DecodedState {
    EdgeField<Real> a;
    HarmonicComponent harm;
    FaceField<Real> u;

    /// Divergence of curl(a) + harm recomputed from `a` upcast to FP64.
    fieldgrid::DivergenceNorms verify(fieldgrid::Stencil stencil = fieldgrid::Stencil::Conjugate) const;
};

/// Copies each patch of `f` into one row: component-major, then row-major
/// inside the patch.
template <typename Real, fieldgrid::Location L>
nn::Matrix<Real> patchify(const fieldgrid::VectorField<Real, L>& f, int patch);

/// Inverse of `patchify`.
template <typename Real, fieldgrid::Location L>
fieldgrid::VectorField<Real, L> unpatchify(const nn::Matrix<Real>& rows, const GridSpec& spec, int patch);

/// MSE over all 3n^3 velocity entries.
template <typename Real>
double tokenizer_loss(const FaceField<Real>& u_true, const FaceField<Real>& u_hat);

template <typename Real>
class Tokenizer {
public:
    explicit Tokenizer(const TokenizerConfig& cfg, const std::string& prefix = "tok/");

    /// Seeded uniform init in registration order.
    void init(std::uint64_t seed);

    LatentGrid<Real> encode(const FaceField<Real>& u) const;
    DecodedState<Real> decode(const LatentGrid<Real>& z) const;

    /// Stacks the latents of several samples: rows [s*T, (s+1)*T) belong to sample s.
    nn::Matrix<Real> encode_batch(std::span<const FaceField<Real>> batch) const;

    /// Mean over the batch of tokenizer_loss(u, decode(encode(u)).u). With
    /// `grads`, accumulates parameter gradients (caller zeroes them). Per-sample
    /// losses are written to `per_sample` when non-null.
    double loss(std::span<const FaceField<Real>> batch, bool grads,
                std::vector<double>* per_sample = nullptr);

    const TokenizerConfig& config() const noexcept { return cfg_; }
    nn::ParamStore<Real>& store() noexcept { return store_; }
    const nn::ParamStore<Real>& store() const noexcept { return store_; }

private:
    TokenizerConfig cfg_;
    nn::ParamStore<Real> store_;
    nn::Mlp<Real> encoder_;
    nn::Mlp<Real> decoder_;
    nn::LinearLayer<Real> harmonic_head_;
};

}  // namespace curlmoe::tokenizer
