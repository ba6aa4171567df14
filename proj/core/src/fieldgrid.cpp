#include "curlmoe/fieldgrid.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace curlmoe::fieldgrid {

void GridSpec::validate() const {
    if (n < 2) throw ShapeError("GridSpec: n must be >= 2, got " + std::to_string(n));
    if (!(h > 0.0)) throw ShapeError("GridSpec: h must be > 0");
}

template <typename Real, Location L>
void VectorField<Real, L>::check(const GridSpec& s) const {
    if (!(spec == s)) throw ShapeError("vector field grid does not match spec");
    for (const auto& c : comp) {
        if (c.size() != s.cells()) throw ShapeError("vector field component has wrong size");
    }
}

template <typename Real, Location L>
double VectorField<Real, L>::max_abs() const {
    double m = 0.0;
    for (const auto& c : comp)
        for (Real v : c) m = std::max(m, std::abs(static_cast<double>(v)));
    return m;
}

template <typename Real>
void CellField<Real>::check(const GridSpec& s) const {
    if (!(spec == s) || values.size() != s.cells())
        throw ShapeError("cell field grid does not match spec");
}

namespace {

// Precomputed periodic neighbour tables for one axis.
struct Neighbours {
    std::vector<int> next, prev;
    explicit Neighbours(int n) : next(n), prev(n) {
        for (int i = 0; i < n; ++i) {
            next[i] = (i + 1) % n;
            prev[i] = (i + n - 1) % n;
        }
    }
};

}  // namespace

template <typename Real>
FaceField<Real> curl(const EdgeField<Real>& a, const GridSpec& spec) {
    a.check(spec);
    const int n = spec.n;
    const Real h = static_cast<Real>(spec.h);
    const Neighbours nb(n);
    FaceField<Real> u(spec);
    const auto& ax = a.comp[0];
    const auto& ay = a.comp[1];
    const auto& az = a.comp[2];
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            for (int k = 0; k < n; ++k) {
                const std::size_t c = spec.index(i, j, k);
                const std::size_t im = spec.index(nb.prev[i], j, k);
                const std::size_t jm = spec.index(i, nb.prev[j], k);
                const std::size_t km = spec.index(i, j, nb.prev[k]);
                u.comp[0][c] = (az[c] - az[jm]) / h - (ay[c] - ay[km]) / h;
                u.comp[1][c] = (ax[c] - ax[km]) / h - (az[c] - az[im]) / h;
                u.comp[2][c] = (ay[c] - ay[im]) / h - (ax[c] - ax[jm]) / h;
            }
        }
    }
    return u;
}

template <typename Real>
EdgeField<Real> curl_adjoint(const FaceField<Real>& g, const GridSpec& spec) {
    g.check(spec);
    const int n = spec.n;
    const Real h = static_cast<Real>(spec.h);
    const Neighbours nb(n);
    EdgeField<Real> a(spec);
    const auto& gx = g.comp[0];
    const auto& gy = g.comp[1];
    const auto& gz = g.comp[2];
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            for (int k = 0; k < n; ++k) {
                const std::size_t c = spec.index(i, j, k);
                const std::size_t ip = spec.index(nb.next[i], j, k);
                const std::size_t jp = spec.index(i, nb.next[j], k);
                const std::size_t kp = spec.index(i, j, nb.next[k]);
                a.comp[0][c] = (gz[jp] - gz[c]) / h - (gy[kp] - gy[c]) / h;
                a.comp[1][c] = (gx[kp] - gx[c]) / h - (gz[ip] - gz[c]) / h;
                a.comp[2][c] = (gy[ip] - gy[c]) / h - (gx[jp] - gx[c]) / h;
            }
        }
    }
    return a;
}

template <typename Real>
CellField<Real> divergence(const FaceField<Real>& u, const GridSpec& spec, Stencil stencil) {
    u.check(spec);
    const int n = spec.n;
    const Real h = static_cast<Real>(spec.h);
    const Neighbours nb(n);
    CellField<Real> d(spec);
    const auto& ux = u.comp[0];
    const auto& uy = u.comp[1];
    const auto& uz = u.comp[2];
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            for (int k = 0; k < n; ++k) {
                const std::size_t c = spec.index(i, j, k);
                if (stencil == Stencil::Conjugate) {
                    const std::size_t im = spec.index(nb.prev[i], j, k);
                    const std::size_t jm = spec.index(i, nb.prev[j], k);
                    const std::size_t km = spec.index(i, j, nb.prev[k]);
                    d.values[c] = (ux[c] - ux[im]) / h + (uy[c] - uy[jm]) / h + (uz[c] - uz[km]) / h;
                } else {
                    const std::size_t ip = spec.index(nb.next[i], j, k);
                    const std::size_t jp = spec.index(i, nb.next[j], k);
                    const std::size_t kp = spec.index(i, j, nb.next[k]);
                    d.values[c] = (ux[ip] - ux[c]) / h + (uy[jp] - uy[c]) / h + (uz[kp] - uz[c]) / h;
                }
            }
        }
    }
    return d;
}

template <typename Real>
FaceField<Real> gradient(const CellField<Real>& p, const GridSpec& spec) {
    p.check(spec);
    const int n = spec.n;
    const Real h = static_cast<Real>(spec.h);
    const Neighbours nb(n);
    FaceField<Real> g(spec);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            for (int k = 0; k < n; ++k) {
                const std::size_t c = spec.index(i, j, k);
                g.comp[0][c] = (p.values[spec.index(nb.next[i], j, k)] - p.values[c]) / h;
                g.comp[1][c] = (p.values[spec.index(i, nb.next[j], k)] - p.values[c]) / h;
                g.comp[2][c] = (p.values[spec.index(i, j, nb.next[k])] - p.values[c]) / h;
            }
        }
    }
    return g;
}

template <typename Real>
FaceField<Real> decode_velocity(const EdgeField<Real>& a, const HarmonicComponent& harm,
                                const GridSpec& spec) {
    FaceField<Real> u = curl(a, spec);
    for (int c = 0; c < 3; ++c) {
        const Real v = static_cast<Real>(harm.v[c]);
        if (v == Real(0)) continue;
        for (auto& x : u.comp[c]) x += v;
    }
    return u;
}

template <typename Real>
DivergenceNorms divergence_norms(const FaceField<Real>& u, const GridSpec& spec, Stencil stencil) {
    u.check(spec);
    const FaceField<double> u64 = u.template cast<double>();
    const CellField<double> d = divergence(u64, spec, stencil);
    DivergenceNorms out;
    double sumsq = 0.0;
    for (double v : d.values) {
        out.max_abs = std::max(out.max_abs, std::abs(v));
        sumsq += v * v;
    }
    out.rms = std::sqrt(sumsq / static_cast<double>(d.values.size()));
    return out;
}

template <typename Real, Location L>
VectorField<Real, L> shifted(const VectorField<Real, L>& f, int di, int dj, int dk) {
    VectorField<Real, L> out(f.spec);
    const int n = f.spec.n;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                for (int k = 0; k < n; ++k)
                    out.at(c, i + di, j + dj, k + dk) = f.at(c, i, j, k);
    return out;
}

template <typename Real>
double inner(const CellField<Real>& a, const CellField<Real>& b) {
    if (a.values.size() != b.values.size()) throw ShapeError("inner: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i)
        s += static_cast<double>(a.values[i]) * static_cast<double>(b.values[i]);
    return s;
}

template <typename Real, Location L>
double inner(const VectorField<Real, L>& a, const VectorField<Real, L>& b) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) {
        if (a.comp[c].size() != b.comp[c].size()) throw ShapeError("inner: size mismatch");
        for (std::size_t i = 0; i < a.comp[c].size(); ++i)
            s += static_cast<double>(a.comp[c][i]) * static_cast<double>(b.comp[c][i]);
    }
    return s;
}

#define CURLMOE_INSTANTIATE(Real)                                                                \
    template struct VectorField<Real, Location::Edge>;                                           \
    template struct VectorField<Real, Location::Face>;                                           \
    template struct CellField<Real>;                                                             \
    template FaceField<Real> curl(const EdgeField<Real>&, const GridSpec&);                      \
    template EdgeField<Real> curl_adjoint(const FaceField<Real>&, const GridSpec&);              \
    template CellField<Real> divergence(const FaceField<Real>&, const GridSpec&, Stencil);       \
    template FaceField<Real> gradient(const CellField<Real>&, const GridSpec&);                  \
    template FaceField<Real> decode_velocity(const EdgeField<Real>&, const HarmonicComponent&,   \
                                             const GridSpec&);                                   \
    template DivergenceNorms divergence_norms(const FaceField<Real>&, const GridSpec&, Stencil); \
    template EdgeField<Real> shifted(const EdgeField<Real>&, int, int, int);                     \
    template FaceField<Real> shifted(const FaceField<Real>&, int, int, int);                     \
    template double inner(const CellField<Real>&, const CellField<Real>&);                       \
    template double inner(const EdgeField<Real>&, const EdgeField<Real>&);                       \
    template double inner(const FaceField<Real>&, const FaceField<Real>&);

CURLMOE_INSTANTIATE(float)
CURLMOE_INSTANTIATE(double)

#undef CURLMOE_INSTANTIATE

}  // namespace curlmoe::fieldgrid
