#include "curlmoe/nn.hpp"

#include <cmath>

namespace curlmoe::nn {

template <typename Real>
ParamId ParamStore<Real>::add(const std::string& name, std::vector<std::uint32_t> shape) {
    if (name.empty()) throw ConfigError("parameter name must not be empty");
    if (index_.count(name) != 0) throw ConfigError("duplicate parameter name: " + name);
    const auto ends_with = [&](const char* suffix) {
        const std::string s(suffix);
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with("/m") || ends_with("/v"))
        throw ConfigError("parameter name uses a reserved suffix: " + name);
    std::size_t count = 1;
    for (auto d : shape) count *= d;
    Entry e;
    e.name = name;
    e.shape = std::move(shape);
    e.value.assign(count, Real(0));
    e.grad.assign(count, Real(0));
    e.m.assign(count, Real(0));
    e.v.assign(count, Real(0));
    const ParamId id = entries_.size();
    entries_.push_back(std::move(e));
    index_.emplace(name, id);
    return id;
}

template <typename Real>
std::optional<ParamId> ParamStore<Real>::find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

template <typename Real>
std::size_t ParamStore<Real>::total_values() const noexcept {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
}

template <typename Real>
void ParamStore<Real>::zero_grad() {
    for (auto& e : entries_) std::fill(e.grad.begin(), e.grad.end(), Real(0));
}

template <typename Real>
void adam_step(ParamStore<Real>& store, const AdamConfig& cfg) {
    const std::uint64_t t = store.step() + 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (auto& e : store.entries()) {
        for (std::size_t i = 0; i < e.value.size(); ++i) {
            const double g = e.grad[i];
            const double m = cfg.beta1 * static_cast<double>(e.m[i]) + (1.0 - cfg.beta1) * g;
            const double v = cfg.beta2 * static_cast<double>(e.v[i]) + (1.0 - cfg.beta2) * g * g;
            e.m[i] = static_cast<Real>(m);
            e.v[i] = static_cast<Real>(v);
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            const double w = static_cast<double>(e.value[i]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            e.value[i] = static_cast<Real>(w);
        }
    }
    store.set_step(t);
}

namespace {
template <typename Real>
constexpr Real kGeluC = Real(0.7978845608028654);  // sqrt(2/pi)
template <typename Real>
constexpr Real kGeluA = Real(0.044715);
}  // namespace

template <typename Real>
Real gelu(Real x) {
    const Real t = std::tanh(kGeluC<Real> * (x + kGeluA<Real> * x * x * x));
    return Real(0.5) * x * (Real(1) + t);
}

template <typename Real>
Real gelu_grad(Real x) {
    const Real inner = kGeluC<Real> * (x + kGeluA<Real> * x * x * x);
    const Real t = std::tanh(inner);
    const Real dinner = kGeluC<Real> * (Real(1) + Real(3) * kGeluA<Real> * x * x);
    return Real(0.5) * (Real(1) + t) + Real(0.5) * x * (Real(1) - t * t) * dinner;
}

template <typename Real>
void gelu_forward(std::span<const Real> x, std::span<Real> y) {
    if (x.size() != y.size()) throw ShapeError("gelu_forward: size mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu(x[i]);
}

template <typename Real>
void gelu_backward(std::span<const Real> x, std::span<const Real> dy, std::span<Real> dx) {
    if (x.size() != dy.size() || x.size() != dx.size()) throw ShapeError("gelu_backward: size mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * gelu_grad(x[i]);
}

template <typename Real>
Real dot(const Real* a, const Real* b, std::size_t n) {
    Real acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
    Real s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <typename Real>
LinearLayer<Real>::LinearLayer(ParamStore<Real>& store, const std::string& name, std::size_t in,
                               std::size_t out)
    : in_(in), out_(out) {
    if (in == 0 || out == 0) throw ShapeError("LinearLayer: zero dimension in " + name);
    weight_ = store.add(name + ".weight", {static_cast<std::uint32_t>(out), static_cast<std::uint32_t>(in)});
    bias_ = store.add(name + ".bias", {static_cast<std::uint32_t>(out)});
}

template <typename Real>
void LinearLayer<Real>::init(ParamStore<Real>& store, Rng& rng) const {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& w : store[weight_].value) w = static_cast<Real>(dist(rng));
    for (auto& b : store[bias_].value) b = static_cast<Real>(dist(rng));
}

template <typename Real>
void LinearLayer<Real>::forward(const ParamStore<Real>& store, const Matrix<Real>& x,
                                Matrix<Real>& y) const {
    if (x.cols != in_) throw ShapeError("LinearLayer::forward: input width mismatch");
    const Real* w = store[weight_].value.data();
    const Real* b = store[bias_].value.data();
    if (y.rows != x.rows || y.cols != out_) y.resize(x.rows, out_);
    for (std::size_t t = 0; t < x.rows; ++t) {
        const Real* xr = x.data.data() + t * in_;
        Real* yr = y.data.data() + t * out_;
        for (std::size_t o = 0; o < out_; ++o) yr[o] = dot(xr, w + o * in_, in_) + b[o];
    }
}

template <typename Real>
void LinearLayer<Real>::backward(ParamStore<Real>& store, const Matrix<Real>& x,
                                 const Matrix<Real>& dy, Matrix<Real>* dx) const {
    if (x.cols != in_ || dy.cols != out_ || x.rows != dy.rows)
        throw ShapeError("LinearLayer::backward: shape mismatch");
    const Real* w = store[weight_].value.data();
    Real* gw = store[weight_].grad.data();
    Real* gb = store[bias_].grad.data();
    for (std::size_t t = 0; t < x.rows; ++t) {
        const Real* xr = x.data.data() + t * in_;
        const Real* dyr = dy.data.data() + t * out_;
        for (std::size_t o = 0; o < out_; ++o) {
            const Real g = dyr[o];
            if (g == Real(0)) continue;
            Real* gwr = gw + o * in_;
            for (std::size_t i = 0; i < in_; ++i) gwr[i] += g * xr[i];
            gb[o] += g;
        }
    }
    if (dx == nullptr) return;
    if (dx->rows != x.rows || dx->cols != in_) dx->resize(x.rows, in_);
    for (std::size_t t = 0; t < x.rows; ++t) {
        Real* dxr = dx->data.data() + t * in_;
        std::fill(dxr, dxr + in_, Real(0));
        const Real* dyr = dy.data.data() + t * out_;
        for (std::size_t o = 0; o < out_; ++o) {
            const Real g = dyr[o];
            const Real* wr = w + o * in_;
            for (std::size_t i = 0; i < in_; ++i) dxr[i] += g * wr[i];
        }
    }
}

template <typename Real>
Mlp<Real>::Mlp(ParamStore<Real>& store, const std::string& name, std::size_t in, std::size_t hidden,
               std::size_t out)
    : fc1_(store, name + ".fc1", in, hidden), fc2_(store, name + ".fc2", hidden, out) {}

template <typename Real>
void Mlp<Real>::init(ParamStore<Real>& store, Rng& rng) const {
    fc1_.init(store, rng);
    fc2_.init(store, rng);
}

template <typename Real>
void Mlp<Real>::forward(const ParamStore<Real>& store, const Matrix<Real>& x, MlpCache<Real>& cache,
                        Matrix<Real>& y) const {
    fc1_.forward(store, x, cache.pre);
    if (cache.hidden.rows != cache.pre.rows || cache.hidden.cols != cache.pre.cols)
        cache.hidden.resize(cache.pre.rows, cache.pre.cols);
    gelu_forward<Real>(cache.pre.data, cache.hidden.data);
    fc2_.forward(store, cache.hidden, y);
}

template <typename Real>
void Mlp<Real>::backward(ParamStore<Real>& store, const Matrix<Real>& x, const MlpCache<Real>& cache,
                         const Matrix<Real>& dy, Matrix<Real>* dx) const {
    Matrix<Real> dhidden;
    fc2_.backward(store, cache.hidden, dy, &dhidden);
    gelu_backward<Real>(cache.pre.data, dhidden.data, dhidden.data);
    fc1_.backward(store, x, dhidden, dx);
}

template <typename Real>
double mse(std::span<const Real> a, std::span<const Real> b) {
    if (a.size() != b.size()) throw ShapeError("mse: size mismatch");
    if (a.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

#define CURLMOE_INSTANTIATE(Real)                                                              \
    template class ParamStore<Real>;                                                           \
    template void adam_step(ParamStore<Real>&, const AdamConfig&);                             \
    template Real gelu(Real);                                                                  \
    template Real gelu_grad(Real);                                                             \
    template void gelu_forward(std::span<const Real>, std::span<Real>);                        \
    template void gelu_backward(std::span<const Real>, std::span<const Real>, std::span<Real>); \
    template Real dot(const Real*, const Real*, std::size_t);                                  \
    template class LinearLayer<Real>;                                                          \
    template class Mlp<Real>;                                                                  \
    template double mse(std::span<const Real>, std::span<const Real>);

CURLMOE_INSTANTIATE(float)
CURLMOE_INSTANTIATE(double)

#undef CURLMOE_INSTANTIATE

}  // namespace curlmoe::nn
