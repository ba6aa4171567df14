#include "curlmoe/tokenizer.hpp"

#include <string>

namespace curlmoe::tokenizer {

void TokenizerConfig::validate() const {
    grid().validate();
    if (patch < 1) throw ConfigError("tokenizer: patch must be positive");
    if (n % patch != 0)
        throw ShapeError("tokenizer: patch " + std::to_string(patch) + " does not divide n " + std::to_string(n));
    if (channels < 1 || hidden < 1) throw ConfigError("tokenizer: channels and hidden must be positive");
}

template <typename Real>
fieldgrid::DivergenceNorms DecodedState<Real>::verify(fieldgrid::Stencil stencil) const {
    const EdgeField<double> a64 = a.template cast<double>();
    const FaceField<double> u64 = fieldgrid::decode_velocity(a64, harm, a.spec);
    return fieldgrid::divergence_norms(u64, a.spec, stencil);
}

template <typename Real, fieldgrid::Location L>
nn::Matrix<Real> patchify(const fieldgrid::VectorField<Real, L>& f, int patch) {
    const int n = f.spec.n;
    if (patch < 1 || n % patch != 0) throw ShapeError("patchify: patch does not divide n");
    const int m = n / patch;
    const std::size_t p3 = static_cast<std::size_t>(patch) * patch * patch;
    nn::Matrix<Real> rows(static_cast<std::size_t>(m) * m * m, 3 * p3);
    for (int I = 0; I < m; ++I)
        for (int J = 0; J < m; ++J)
            for (int K = 0; K < m; ++K) {
                Real* row = rows.row(static_cast<std::size_t>((I * m + J) * m + K)).data();
                for (int c = 0; c < 3; ++c) {
                    std::size_t col = c * p3;
                    for (int a = 0; a < patch; ++a)
                        for (int b = 0; b < patch; ++b) {
                            const std::size_t base = f.spec.index(I * patch + a, J * patch + b, K * patch);
                            for (int d = 0; d < patch; ++d) row[col++] = f.comp[c][base + d];
                        }
                }
            }
    return rows;
}

template <typename Real, fieldgrid::Location L>
fieldgrid::VectorField<Real, L> unpatchify(const nn::Matrix<Real>& rows, const GridSpec& spec, int patch) {
    const int n = spec.n;
    if (patch < 1 || n % patch != 0) throw ShapeError("unpatchify: patch does not divide n");
    const int m = n / patch;
    const std::size_t p3 = static_cast<std::size_t>(patch) * patch * patch;
    if (rows.rows != static_cast<std::size_t>(m) * m * m || rows.cols != 3 * p3)
        throw ShapeError("unpatchify: row matrix has wrong shape");
    fieldgrid::VectorField<Real, L> f(spec);
    for (int I = 0; I < m; ++I)
        for (int J = 0; J < m; ++J)
            for (int K = 0; K < m; ++K) {
                const Real* row = rows.row(static_cast<std::size_t>((I * m + J) * m + K)).data();
                for (int c = 0; c < 3; ++c) {
                    std::size_t col = c * p3;
                    for (int a = 0; a < patch; ++a)
                        for (int b = 0; b < patch; ++b) {
                            const std::size_t base = spec.index(I * patch + a, J * patch + b, K * patch);
                            for (int d = 0; d < patch; ++d) f.comp[c][base + d] = row[col++];
                        }
                }
            }
    return f;
}

template <typename Real>
double tokenizer_loss(const FaceField<Real>& u_true, const FaceField<Real>& u_hat) {
    u_hat.check(u_true.spec);
    // Neumaier summation: the plain running sum over ~1e5 terms loses enough
    // bits to swamp FP64 finite-difference checks on small gradients.
    double s = 0.0, comp = 0.0;
    std::size_t count = 0;
    for (int c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < u_true.comp[c].size(); ++i) {
            const double d = static_cast<double>(u_hat.comp[c][i]) - static_cast<double>(u_true.comp[c][i]);
            const double x = d * d;
            const double t = s + x;
            comp += std::abs(s) >= x ? (s - t) + x : (x - t) + s;
            s = t;
        }
        count += u_true.comp[c].size();
    }
    return (s + comp) / static_cast<double>(count);
}

template <typename Real>
Tokenizer<Real>::Tokenizer(const TokenizerConfig& cfg, const std::string& prefix) : cfg_(cfg) {
    cfg_.validate();
    const auto pv = cfg_.patch_values();
    const auto c = static_cast<std::size_t>(cfg_.channels);
    const auto h = static_cast<std::size_t>(cfg_.hidden);
    encoder_ = nn::Mlp<Real>(store_, prefix + "enc", pv, h, c);
    decoder_ = nn::Mlp<Real>(store_, prefix + "dec", c, h, pv);
    harmonic_head_ = nn::LinearLayer<Real>(store_, prefix + "harmonic", c, 3);
}

template <typename Real>
void Tokenizer<Real>::init(std::uint64_t seed) {
    nn::Rng rng(seed);
    encoder_.init(store_, rng);
    decoder_.init(store_, rng);
    harmonic_head_.init(store_, rng);
}

template <typename Real>
LatentGrid<Real> Tokenizer<Real>::encode(const FaceField<Real>& u) const {
    u.check(cfg_.grid());
    const nn::Matrix<Real> x = patchify(u, cfg_.patch);
    nn::MlpCache<Real> cache;
    LatentGrid<Real> z;
    z.side = cfg_.latent_side();
    encoder_.forward(store_, x, cache, z.tokens);
    return z;
}

template <typename Real>
nn::Matrix<Real> Tokenizer<Real>::encode_batch(std::span<const FaceField<Real>> batch) const {
    const std::size_t t = cfg_.tokens();
    nn::Matrix<Real> out(batch.size() * t, static_cast<std::size_t>(cfg_.channels));
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const LatentGrid<Real> z = encode(batch[s]);
        std::copy(z.tokens.data.begin(), z.tokens.data.end(), out.data.begin() + s * t * out.cols);
    }
    return out;
}

template <typename Real>
DecodedState<Real> Tokenizer<Real>::decode(const LatentGrid<Real>& z) const {
    const auto c = static_cast<std::size_t>(cfg_.channels);
    if (z.tokens.rows != cfg_.tokens() || z.tokens.cols != c)
        throw ShapeError("Tokenizer::decode: latent grid has wrong shape");
    const GridSpec spec = cfg_.grid();

    nn::MlpCache<Real> cache;
    nn::Matrix<Real> apatch;
    decoder_.forward(store_, z.tokens, cache, apatch);

    nn::Matrix<Real> pooled(1, c);
    for (std::size_t t = 0; t < z.tokens.rows; ++t)
        for (std::size_t k = 0; k < c; ++k) pooled(0, k) += z.tokens(t, k);
    for (std::size_t k = 0; k < c; ++k) pooled(0, k) /= static_cast<Real>(z.tokens.rows);
    nn::Matrix<Real> harm;
    harmonic_head_.forward(store_, pooled, harm);

    DecodedState<Real> out;
    out.a = unpatchify<Real, fieldgrid::Location::Edge>(apatch, spec, cfg_.patch);
    for (int k = 0; k < 3; ++k) out.harm.v[k] = static_cast<double>(harm(0, k));
    out.u = fieldgrid::decode_velocity(out.a, out.harm, spec);
    return out;
}

template <typename Real>
double Tokenizer<Real>::loss(std::span<const FaceField<Real>> batch, bool grads,
                             std::vector<double>* per_sample) {
    if (batch.empty()) throw ShapeError("Tokenizer::loss: empty batch");
    const GridSpec spec = cfg_.grid();
    const std::size_t S = batch.size();
    const std::size_t T = cfg_.tokens();
    const std::size_t C = static_cast<std::size_t>(cfg_.channels);
    const std::size_t PV = cfg_.patch_values();

    nn::Matrix<Real> x(S * T, PV);
    for (std::size_t s = 0; s < S; ++s) {
        batch[s].check(spec);
        const nn::Matrix<Real> rows = patchify(batch[s], cfg_.patch);
        std::copy(rows.data.begin(), rows.data.end(), x.data.begin() + s * T * PV);
    }

    nn::MlpCache<Real> enc_cache, dec_cache;
    nn::Matrix<Real> z, apatch;
    encoder_.forward(store_, x, enc_cache, z);
    decoder_.forward(store_, z, dec_cache, apatch);

    nn::Matrix<Real> pooled(S, C);
    for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t k = 0; k < C; ++k) pooled(s, k) += z(s * T + t, k);
        for (std::size_t k = 0; k < C; ++k) pooled(s, k) /= static_cast<Real>(T);
    }
    nn::Matrix<Real> harm;
    harmonic_head_.forward(store_, pooled, harm);

    if (per_sample) per_sample->assign(S, 0.0);
    double total = 0.0;
    nn::Matrix<Real> dapatch(S * T, PV);
    nn::Matrix<Real> dharm(S, 3);
    const Real scale = static_cast<Real>(2.0 / (3.0 * static_cast<double>(spec.cells()) * static_cast<double>(S)));

    for (std::size_t s = 0; s < S; ++s) {
        nn::Matrix<Real> rows(T, PV);
        std::copy(apatch.data.begin() + s * T * PV, apatch.data.begin() + (s + 1) * T * PV, rows.data.begin());
        const EdgeField<Real> a = unpatchify<Real, fieldgrid::Location::Edge>(rows, spec, cfg_.patch);
        FaceField<Real> u_hat = fieldgrid::curl(a, spec);
        for (int c = 0; c < 3; ++c)
            for (auto& v : u_hat.comp[c]) v += harm(s, c);
        const double ls = tokenizer_loss(batch[s], u_hat);
        total += ls;
        if (per_sample) (*per_sample)[s] = ls;
        if (!grads) continue;

        FaceField<Real> du(spec);
        for (int c = 0; c < 3; ++c) {
            Real acc = 0;
            for (std::size_t i = 0; i < du.comp[c].size(); ++i) {
                du.comp[c][i] = scale * (u_hat.comp[c][i] - batch[s].comp[c][i]);
                acc += du.comp[c][i];
            }
            dharm(s, c) = acc;
        }
        const EdgeField<Real> da = fieldgrid::curl_adjoint(du, spec);
        const nn::Matrix<Real> drows = patchify(da, cfg_.patch);
        std::copy(drows.data.begin(), drows.data.end(), dapatch.data.begin() + s * T * PV);
    }
    const double mean_loss = total / static_cast<double>(S);
    if (!grads) return mean_loss;

    nn::Matrix<Real> dz;
    decoder_.backward(store_, z, dec_cache, dapatch, &dz);
    nn::Matrix<Real> dpooled;
    harmonic_head_.backward(store_, pooled, dharm, &dpooled);
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t k = 0; k < C; ++k) dz(s * T + t, k) += dpooled(s, k) / static_cast<Real>(T);
    encoder_.backward(store_, x, enc_cache, dz, nullptr);
    return mean_loss;
}

#define CURLMOE_INSTANTIATE(Real)                                                                      \
    template struct DecodedState<Real>;                                                                \
    template nn::Matrix<Real> patchify(const EdgeField<Real>&, int);                                   \
    template nn::Matrix<Real> patchify(const FaceField<Real>&, int);                                   \
    template EdgeField<Real> unpatchify<Real, fieldgrid::Location::Edge>(const nn::Matrix<Real>&,      \
                                                                         const GridSpec&, int);        \
    template FaceField<Real> unpatchify<Real, fieldgrid::Location::Face>(const nn::Matrix<Real>&,      \
                                                                         const GridSpec&, int);        \
    template double tokenizer_loss(const FaceField<Real>&, const FaceField<Real>&);                    \
    template class Tokenizer<Real>;

CURLMOE_INSTANTIATE(float)
CURLMOE_INSTANTIATE(double)

#undef CURLMOE_INSTANTIATE

}  // namespace curlmoe::tokenizer
