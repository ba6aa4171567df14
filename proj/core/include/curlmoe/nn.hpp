#pragma once

// Minimal dense-layer toolkit: flat parameter storage with Adam state, linear
// layers, tanh-GELU, and two-layer MLPs with hand-written backward passes.
//
// Every matrix product reduces each output row with the same fixed-order dot
// kernel, so a row's result does not depend on which other rows share the
// batch. The MoE dispatch relies on this for bitwise equivalence with a
// per-token evaluation.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "curlmoe/errors.hpp"

namespace curlmoe::nn {

using Rng = std::mt19937_64;

template <typename Real>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<Real> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, Real(0)) {}

    void resize(std::size_t r, std::size_t c) {
        rows = r;
        cols = c;
        data.assign(r * c, Real(0));
    }

    Real& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    Real operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<Real> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const Real> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

using ParamId = std::size_t;

/// Ordered named parameters. Registration order is the iteration order and is
/// what checkpoints preserve.
template <typename Real>
class ParamStore {
public:
    struct Entry {
        std::string name;
        std::vector<std::uint32_t> shape;
        std::vector<Real> value;
        std::vector<Real> grad;
        std::vector<Real> m;
        std::vector<Real> v;
    };

    /// Registers a zero-initialised parameter. Names must be unique and must not
    /// end in "/m" or "/v" (reserved for optimiser state in checkpoints).
    ParamId add(const std::string& name, std::vector<std::uint32_t> shape);

    Entry& operator[](ParamId id) { return entries_.at(id); }
    const Entry& operator[](ParamId id) const { return entries_.at(id); }

    std::optional<ParamId> find(const std::string& name) const;
    std::size_t size() const noexcept { return entries_.size(); }
    const std::vector<Entry>& entries() const noexcept { return entries_; }
    std::vector<Entry>& entries() noexcept { return entries_; }

    std::size_t total_values() const noexcept;
    void zero_grad();

    std::uint64_t step() const noexcept { return step_; }
    void set_step(std::uint64_t s) noexcept { step_ = s; }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, ParamId> index_;
    std::uint64_t step_ = 0;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update over every parameter; increments the step
/// counter. Gradients are left as they are.
template <typename Real>
void adam_step(ParamStore<Real>& store, const AdamConfig& cfg);

template <typename Real>
Real gelu(Real x);
template <typename Real>
Real gelu_grad(Real x);

template <typename Real>
void gelu_forward(std::span<const Real> x, std::span<Real> y);
/// dx = dy * gelu'(x).
template <typename Real>
void gelu_backward(std::span<const Real> x, std::span<const Real> dy, std::span<Real> dx);

/// Fixed-order dot product shared by every matrix kernel.
template <typename Real>
Real dot(const Real* a, const Real* b, std::size_t n);

/// y = x W^T + b with W stored out x in (row-major).
template <typename Real>
class LinearLayer {
public:
    LinearLayer() = default;
    LinearLayer(ParamStore<Real>& store, const std::string& name, std::size_t in, std::size_t out);

    /// uniform(-1/sqrt(in), 1/sqrt(in)) for weight and bias.
    void init(ParamStore<Real>& store, Rng& rng) const;

    void forward(const ParamStore<Real>& store, const Matrix<Real>& x, Matrix<Real>& y) const;

    /// Accumulates dW += dy^T x and db += colsum(dy). Writes dx = dy W when dx is non-null.
    void backward(ParamStore<Real>& store, const Matrix<Real>& x, const Matrix<Real>& dy,
                  Matrix<Real>* dx) const;

    std::size_t in() const noexcept { return in_; }
    std::size_t out() const noexcept { return out_; }
    ParamId weight() const noexcept { return weight_; }
    ParamId bias() const noexcept { return bias_; }

private:
    std::size_t in_ = 0;
    std::size_t out_ = 0;
    ParamId weight_ = 0;
    ParamId bias_ = 0;
};

/// Activations a two-layer MLP keeps for its backward pass.
template <typename Real>
struct MlpCache {
    Matrix<Real> pre;     // hidden pre-activation
    Matrix<Real> hidden;  // gelu(pre)
};

/// in -> hidden (GELU) -> out.
template <typename Real>
class Mlp {
public:
    Mlp() = default;
    Mlp(ParamStore<Real>& store, const std::string& name, std::size_t in, std::size_t hidden,
        std::size_t out);

    void init(ParamStore<Real>& store, Rng& rng) const;
    void forward(const ParamStore<Real>& store, const Matrix<Real>& x, MlpCache<Real>& cache,
                 Matrix<Real>& y) const;
    void backward(ParamStore<Real>& store, const Matrix<Real>& x, const MlpCache<Real>& cache,
                  const Matrix<Real>& dy, Matrix<Real>* dx) const;

    const LinearLayer<Real>& fc1() const noexcept { return fc1_; }
    const LinearLayer<Real>& fc2() const noexcept { return fc2_; }

private:
    LinearLayer<Real> fc1_;
    LinearLayer<Real> fc2_;
};

/// Mean of squared differences over all entries, accumulated in FP64.
template <typename Real>
double mse(std::span<const Real> a, std::span<const Real> b);

}  // namespace curlmoe::nn
