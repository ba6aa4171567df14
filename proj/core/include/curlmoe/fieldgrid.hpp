#pragma once

// Periodic staggered (MAC) grid and the discrete vector calculus on it.
//
// Layout: every component array holds n^3 values in row-major (i, j, k) order
// with k fastest. Edge fields (vector potentials) live on edges indexed by the
// cell at the edge's low corner; face fields (velocities) on faces; scalars at
// cell centres. Curl and divergence both use backward differences, so
// divergence(curl(a)) vanishes identically; the gradient uses forward
// differences and is the negative adjoint of the divergence.

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "curlmoe/errors.hpp"

namespace curlmoe::fieldgrid {

struct GridSpec {
    int n = 32;
    double h = 1.0;

    /// Throws ShapeError unless n >= 2 and h > 0.
    void validate() const;

    std::size_t cells() const noexcept {
        const auto m = static_cast<std::size_t>(n);
        return m * m * m;
    }

    std::size_t index(int i, int j, int k) const noexcept {
        return (static_cast<std::size_t>(wrap(i)) * static_cast<std::size_t>(n) +
                static_cast<std::size_t>(wrap(j))) *
                   static_cast<std::size_t>(n) +
               static_cast<std::size_t>(wrap(k));
    }

    int wrap(int i) const noexcept {
        const int r = i % n;
        return r < 0 ? r + n : r;
    }

    bool operator==(const GridSpec&) const = default;
};

enum class Location { Edge, Face };

/// Three component arrays sharing one grid. `L` only distinguishes where the
/// values live so an edge field cannot be passed where a face field belongs.
template <typename Real, Location L>
struct VectorField {
    using value_type = Real;

    GridSpec spec;
    std::array<std::vector<Real>, 3> comp;

    VectorField() = default;
    explicit VectorField(const GridSpec& s) : spec(s) {
        s.validate();
        for (auto& c : comp) c.assign(s.cells(), Real(0));
    }

    Real& at(int c, int i, int j, int k) { return comp[c][spec.index(i, j, k)]; }
    Real at(int c, int i, int j, int k) const { return comp[c][spec.index(i, j, k)]; }

    /// Throws ShapeError if the arrays do not match `s`.
    void check(const GridSpec& s) const;

    double max_abs() const;

    template <typename Other>
    VectorField<Other, L> cast() const {
        VectorField<Other, L> out;
        out.spec = spec;
        for (int c = 0; c < 3; ++c) out.comp[c].assign(comp[c].begin(), comp[c].end());
        return out;
    }
};

template <typename Real>
using EdgeField = VectorField<Real, Location::Edge>;
template <typename Real>
using FaceField = VectorField<Real, Location::Face>;

template <typename Real>
struct CellField {
    GridSpec spec;
    std::vector<Real> values;

    CellField() = default;
    explicit CellField(const GridSpec& s) : spec(s) {
        s.validate();
        values.assign(s.cells(), Real(0));
    }

    Real& at(int i, int j, int k) { return values[spec.index(i, j, k)]; }
    Real at(int i, int j, int k) const { return values[spec.index(i, j, k)]; }

    void check(const GridSpec& s) const;
};

/// Uniform flow, the only harmonic field on a periodic torus.
struct HarmonicComponent {
    std::array<double, 3> v{0.0, 0.0, 0.0};
};

/// Selects the difference orientation of `divergence`. `Mismatched` uses forward
/// differences, which no longer cancel against the curl; negative control only.
enum class Stencil { Conjugate, Mismatched };

struct DivergenceNorms {
    double max_abs = 0.0;
    double rms = 0.0;
};

/// Backward-difference curl (edge -> face):
///   ux[i,j,k] = (Az[i,j,k] - Az[i,j-1,k])/h - (Ay[i,j,k] - Ay[i,j,k-1])/h, cyclic.
template <typename Real>
FaceField<Real> curl(const EdgeField<Real>& a, const GridSpec& spec);

/// Transpose of `curl` (forward-difference curl, face -> edge). Used to
/// backpropagate through the decoder's curl.
template <typename Real>
EdgeField<Real> curl_adjoint(const FaceField<Real>& u, const GridSpec& spec);

template <typename Real>
CellField<Real> divergence(const FaceField<Real>& u, const GridSpec& spec,
                           Stencil stencil = Stencil::Conjugate);

/// Forward-difference gradient (cell -> face); the negative adjoint of `divergence`.
template <typename Real>
FaceField<Real> gradient(const CellField<Real>& p, const GridSpec& spec);

/// u = curl(a) + harmonic.
template <typename Real>
FaceField<Real> decode_velocity(const EdgeField<Real>& a, const HarmonicComponent& harm,
                                const GridSpec& spec);

/// L-infinity and RMS of divergence(u), always evaluated in FP64.
template <typename Real>
DivergenceNorms divergence_norms(const FaceField<Real>& u, const GridSpec& spec,
                                 Stencil stencil = Stencil::Conjugate);

/// Cyclic shift by (di, dj, dk) cells: out(i+di, j+dj, k+dk) = in(i, j, k).
template <typename Real, Location L>
VectorField<Real, L> shifted(const VectorField<Real, L>& f, int di, int dj, int dk);

template <typename Real>
double inner(const CellField<Real>& a, const CellField<Real>& b);
template <typename Real, Location L>
double inner(const VectorField<Real, L>& a, const VectorField<Real, L>& b);

}  // namespace curlmoe::fieldgrid
