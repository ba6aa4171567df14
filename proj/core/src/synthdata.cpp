#include "curlmoe/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

#include "curlmoe/checkpoint.hpp"

namespace curlmoe::synth {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

EdgeField<double> quantize_potential(const EdgeField<double>& a) {
    EdgeField<double> q = a;
    for (auto& comp : q.comp) {
        for (auto& v : comp) {
            if (!(std::abs(v) < 64.0)) throw InvariantViolation("vector potential entry outside (-64, 64)");
            v = std::nearbyint(v / kPotentialQuantum) * kPotentialQuantum;
        }
    }
    return q;
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double rms(const FaceField<double>& u) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& c : u.comp) {
        for (double v : c) s += v * v;
        n += c.size();
    }
    return std::sqrt(s / static_cast<double>(n));
}

void scale(EdgeField<double>& a, double f) {
    for (auto& c : a.comp)
        for (auto& v : c) v *= f;
}

// Adds `modes` random Fourier modes to every component of `a`. Mode m sits on
// shell 1 + (m mod k_max) with amplitude shell^-beta.
void add_modes(EdgeField<double>& a, int modes, int k_max, double beta, nn::Rng& rng) {
    const int n = a.spec.n;
    std::uniform_real_distribution<double> phase_dist(0.0, kTwoPi);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::complex<double>> ex(n), ey(n), ez(n);
    for (int m = 0; m < modes; ++m) {
        const int shell = 1 + m % k_max;
        std::uniform_int_distribution<int> kd(-shell, shell);
        int kx = 0, ky = 0, kz = 0;
        for (;;) {
            kx = kd(rng);
            ky = kd(rng);
            kz = kd(rng);
            const double r = std::sqrt(static_cast<double>(kx * kx + ky * ky + kz * kz));
            if (std::lround(r) == shell) break;
        }
        const double envelope = std::pow(static_cast<double>(shell), -beta);
        std::array<double, 3> amp{};
        for (auto& x : amp) x = envelope * normal(rng);
        const std::complex<double> phase = std::polar(1.0, phase_dist(rng));
        for (int i = 0; i < n; ++i) {
            ex[i] = std::polar(1.0, kTwoPi * kx * i / n);
            ey[i] = std::polar(1.0, kTwoPi * ky * i / n);
            ez[i] = std::polar(1.0, kTwoPi * kz * i / n);
        }
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                const std::complex<double> pij = phase * ex[i] * ey[j];
                const std::size_t base = a.spec.index(i, j, 0);
                for (int k = 0; k < n; ++k) {
                    const double w = (pij * ez[k]).real();
                    for (int c = 0; c < 3; ++c) a.comp[c][base + k] += amp[c] * w;
                }
            }
    }
}

}  // namespace

FaceField<double> gen_regime_a(const RegimeAConfig& cfg, const GridSpec& spec) {
    spec.validate();
    const int k_max = cfg.k_max > 0 ? cfg.k_max : std::max(1, spec.n / 4);
    if (cfg.modes < 1) throw ConfigError("regime A: modes must be positive");
    if (cfg.sigma < 0.0) throw ConfigError("regime A: sigma must be >= 0");
    if (cfg.sigma == 0.0) return FaceField<double>(spec);

    nn::Rng rng(cfg.seed);
    EdgeField<double> a(spec);
    add_modes(a, cfg.modes, k_max, cfg.beta, rng);
    const double r = rms(fieldgrid::curl(a, spec));
    if (r == 0.0) return FaceField<double>(spec);
    scale(a, cfg.sigma / r);
    return fieldgrid::curl(quantize_potential(a), spec);
}

CellField<double> box_smooth(const CellField<double>& f, int r) {
    if (r <= 0) return f;
    const GridSpec& s = f.spec;
    const int n = s.n;
    const double w = 1.0 / (2 * r + 1);
    CellField<double> cur = f, next(s);
    for (int axis = 0; axis < 3; ++axis) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                for (int k = 0; k < n; ++k) {
                    double acc = 0.0;
                    for (int o = -r; o <= r; ++o) {
                        acc += axis == 0   ? cur.at(i + o, j, k)
                               : axis == 1 ? cur.at(i, j + o, k)
                                           : cur.at(i, j, k + o);
                    }
                    next.at(i, j, k) = acc * w;
                }
        std::swap(cur, next);
    }
    return cur;
}

RegimeBSample gen_regime_b(const RegimeBConfig& cfg, const GridSpec& spec) {
    spec.validate();
    if (!(cfg.solid_fraction > 0.0 && cfg.solid_fraction < 1.0))
        throw ConfigError("regime B: solid fraction must lie in (0, 1)");
    if (!(cfg.damping >= 0.0 && cfg.damping <= 1.0)) throw ConfigError("regime B: damping must lie in [0, 1]");
    if (cfg.smoothing < 0) throw ConfigError("regime B: smoothing must be >= 0");
    const int n = spec.n;
    const std::size_t N = spec.cells();

    // Obstacle mask; degenerate draws move on to the next substream.
    CellField<double> mask(spec);
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        nn::Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(attempt)));
        std::normal_distribution<double> normal(0.0, 1.0);
        CellField<double> noise(spec);
        for (auto& v : noise.values) v = normal(rng);
        noise = box_smooth(noise, cfg.smoothing);
        std::vector<double> sorted = noise.values;
        const auto cut = static_cast<std::size_t>(std::floor(cfg.solid_fraction * static_cast<double>(N)));
        std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(std::min(cut, N - 1)),
                         sorted.end());
        const double threshold = sorted[std::min(cut, N - 1)];
        std::size_t solid = 0;
        for (std::size_t c = 0; c < N; ++c) {
            mask.values[c] = noise.values[c] < threshold ? 1.0 : 0.0;
            solid += static_cast<std::size_t>(mask.values[c]);
        }
        ok = solid > 0 && solid < N;
    }
    if (!ok) throw InvariantViolation("regime B: degenerate obstacle mask after 100 attempts");

    // Smoothed fluid indicator, times `damping` inside solids.
    CellField<double> fluid(spec);
    for (std::size_t c = 0; c < N; ++c) fluid.values[c] = 1.0 - mask.values[c];
    const CellField<double> smooth_fluid = box_smooth(fluid, cfg.smoothing);
    CellField<double> chi(spec);
    for (std::size_t c = 0; c < N; ++c)
        chi.values[c] = smooth_fluid.values[c] * (mask.values[c] > 0.5 ? cfg.damping : 1.0);

    // Every edge touched by a solid cell's faces lies within one index of that
    // cell, so the minimum over the 27-neighbourhood caps those edges at the
    // solid cell's factor.
    CellField<double> chi_edge(spec);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) {
                double m = 1.0;
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj)
                        for (int dk = -1; dk <= 1; ++dk) m = std::min(m, chi.at(i + di, j + dj, k + dk));
                chi_edge.at(i, j, k) = m;
            }

    EdgeField<double> a(spec);
    if (cfg.noise > 0.0) {
        nn::Rng rng(derive_seed(cfg.seed, 1000));
        add_modes(a, 8 * std::max(1, cfg.noise_k_max), std::max(1, cfg.noise_k_max), 2.0, rng);
        const double r = rms(fieldgrid::curl(a, spec));
        if (r > 0.0) scale(a, cfg.noise / r);
    }
    // Shear base flow u_x ~ base_flow * cos(2 pi y / n), the longest periodic mode.
    const double amp = cfg.base_flow * n * spec.h / kTwoPi;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) a.at(2, i, j, k) += amp * std::sin(kTwoPi * j / n);

    for (int c = 0; c < 3; ++c)
        for (std::size_t e = 0; e < N; ++e) a.comp[c][e] *= chi_edge.values[e];

    RegimeBSample out;
    out.u = fieldgrid::curl(quantize_potential(a), spec);
    out.mask = std::move(mask);
    return out;
}

ConfinementStats confinement_stats(const FaceField<double>& u, const CellField<double>& mask) {
    const GridSpec& s = u.spec;
    mask.check(s);
    const int n = s.n;
    double solid_sum = 0.0, fluid_sum = 0.0;
    std::size_t solid = 0, fluid = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) {
                const double vx = 0.5 * (u.at(0, i, j, k) + u.at(0, i - 1, j, k));
                const double vy = 0.5 * (u.at(1, i, j, k) + u.at(1, i, j - 1, k));
                const double vz = 0.5 * (u.at(2, i, j, k) + u.at(2, i, j, k - 1));
                const double speed = std::sqrt(vx * vx + vy * vy + vz * vz);
                if (mask.at(i, j, k) > 0.5) {
                    solid_sum += speed;
                    ++solid;
                } else {
                    fluid_sum += speed;
                    ++fluid;
                }
            }
    ConfinementStats st;
    st.solid_speed = solid ? solid_sum / static_cast<double>(solid) : 0.0;
    st.fluid_speed = fluid ? fluid_sum / static_cast<double>(fluid) : 0.0;
    st.solid_fraction = static_cast<double>(solid) / static_cast<double>(s.cells());
    return st;
}

template <typename Real>
std::vector<double> patch_variances(const FaceField<Real>& u, int patch) {
    const int n = u.spec.n;
    if (patch < 1 || n % patch != 0) throw ShapeError("patch_variances: patch does not divide n");
    const int m = n / patch;
    const double count = static_cast<double>(patch) * patch * patch;
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(m) * m * m);
    for (int I = 0; I < m; ++I)
        for (int J = 0; J < m; ++J)
            for (int K = 0; K < m; ++K) {
                double var = 0.0;
                for (int c = 0; c < 3; ++c) {
                    double s = 0.0, s2 = 0.0;
                    for (int a = 0; a < patch; ++a)
                        for (int b = 0; b < patch; ++b)
                            for (int d = 0; d < patch; ++d) {
                                const double v = u.at(c, I * patch + a, J * patch + b, K * patch + d);
                                s += v;
                                s2 += v * v;
                            }
                    const double mean = s / count;
                    var += s2 / count - mean * mean;
                }
                out.push_back(var / 3.0);
            }
    return out;
}

double threshold_separability(std::span<const double> a, std::span<const double> b) {
    std::vector<std::pair<double, int>> all;
    all.reserve(a.size() + b.size());
    for (double v : a) all.emplace_back(v, 0);
    for (double v : b) all.emplace_back(v, 1);
    if (all.empty()) return 0.0;
    std::sort(all.begin(), all.end());
    // Classifier "below threshold -> A": correct = A below + B above.
    std::size_t a_below = 0, b_below = 0;
    const std::size_t total = all.size();
    std::size_t best = std::max(b.size(), a.size());  // threshold below everything
    for (std::size_t i = 0; i < total; ++i) {
        (all[i].second == 0 ? a_below : b_below) += 1;
        if (i + 1 < total && all[i + 1].first == all[i].first) continue;
        const std::size_t dir1 = a_below + (b.size() - b_below);
        const std::size_t dir2 = b_below + (a.size() - a_below);
        best = std::max({best, dir1, dir2});
    }
    return static_cast<double>(best) / static_cast<double>(total);
}

TransportTargets TransportTargets::generate(int channels, std::uint64_t seed) {
    if (channels < 1) throw ConfigError("transport targets: channels must be positive");
    const auto C = static_cast<std::size_t>(channels);
    nn::Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    TransportTargets t;
    t.channels = channels;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        for (auto& map : t.maps) {
            map.assign(C * C, 0.0);
            for (auto& v : map) v = normal(rng);
            // Modified Gram-Schmidt over rows.
            for (std::size_t r = 0; r < C; ++r) {
                double* row = map.data() + r * C;
                for (std::size_t q = 0; q < r; ++q) {
                    const double* prev = map.data() + q * C;
                    double d = 0.0;
                    for (std::size_t k = 0; k < C; ++k) d += row[k] * prev[k];
                    for (std::size_t k = 0; k < C; ++k) row[k] -= d * prev[k];
                }
                double norm = 0.0;
                for (std::size_t k = 0; k < C; ++k) norm += row[k] * row[k];
                norm = std::sqrt(norm);
                for (std::size_t k = 0; k < C; ++k) row[k] /= norm;
            }
            for (auto& v : map) v *= 0.9;
        }
        if (t.frobenius_distance() > 0.5) return t;
    }
    throw InvariantViolation("transport targets: could not draw distinct maps");
}

double TransportTargets::frobenius_distance() const {
    double s = 0.0;
    for (std::size_t i = 0; i < maps[0].size(); ++i) {
        const double d = maps[0][i] - maps[1][i];
        s += d * d;
    }
    return std::sqrt(s);
}

template <typename Real>
nn::Matrix<Real> TransportTargets::apply(const nn::Matrix<Real>& x, std::span<const int> labels) const {
    const auto C = static_cast<std::size_t>(channels);
    if (x.cols != C) throw ShapeError("TransportTargets::apply: width mismatch");
    if (labels.size() != x.rows) throw ShapeError("TransportTargets::apply: labels do not align with tokens");
    nn::Matrix<Real> out(x.rows, C);
    for (std::size_t t = 0; t < x.rows; ++t) {
        const int d = labels[t];
        if (d < 0 || d > 1) throw ShapeError("TransportTargets::apply: label out of range");
        const auto& T = maps[static_cast<std::size_t>(d)];
        for (std::size_t i = 0; i < C; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < C; ++j) s += T[i * C + j] * static_cast<double>(x(t, j));
            out(t, i) = static_cast<Real>(s);
        }
    }
    return out;
}

void TransportTargets::save(const std::filesystem::path& path) const {
    nn::Checkpoint ckpt;
    const char* names[2] = {"targets/A", "targets/B"};
    for (int d = 0; d < 2; ++d) {
        nn::CheckpointRecord r;
        r.name = names[d];
        r.dims = {static_cast<std::uint32_t>(channels), static_cast<std::uint32_t>(channels)};
        r.dtype = DType::F64;
        r.values = maps[d];
        ckpt.records.push_back(std::move(r));
    }
    nn::write_checkpoint(path, ckpt);
}

TransportTargets TransportTargets::load(const std::filesystem::path& path) {
    const nn::Checkpoint ckpt = nn::read_checkpoint(path);
    TransportTargets t;
    const char* names[2] = {"targets/A", "targets/B"};
    for (int d = 0; d < 2; ++d) {
        const nn::CheckpointRecord* r = ckpt.find(names[d]);
        if (r == nullptr) throw FormatError(FormatErrorKind::MissingEntry, path.string() + ": " + names[d]);
        if (r->dims.size() != 2 || r->dims[0] != r->dims[1])
            throw FormatError(FormatErrorKind::ShapeMismatch, path.string() + ": " + names[d]);
        if (d == 0) t.channels = static_cast<int>(r->dims[0]);
        if (static_cast<int>(r->dims[0]) != t.channels)
            throw FormatError(FormatErrorKind::ShapeMismatch, path.string() + ": target sizes differ");
        t.maps[d] = r->values;
    }
    return t;
}

template std::vector<double> patch_variances(const FaceField<float>&, int);
template std::vector<double> patch_variances(const FaceField<double>&, int);
template nn::Matrix<float> TransportTargets::apply(const nn::Matrix<float>&, std::span<const int>) const;
template nn::Matrix<double> TransportTargets::apply(const nn::Matrix<double>&, std::span<const int>) const;

}  // namespace curlmoe::synth
