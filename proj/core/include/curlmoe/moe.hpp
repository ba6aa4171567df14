#pragma once

// Sparse latent transport block: a shared expert applied to every token plus
// E routed experts, of which each token visits exactly one (Top-1).
//
//   out[t] = x[t] + shared(x[t]) + gate[t] * expert_{sel[t]}(x[t])
//
// sel[t] is the argmax of the router logits (ties -> lowest index) and gate[t]
// the softmax probability of that expert. The selection itself is treated as a
// constant in the backward pass; the router learns through the gate and the
// load-balance term. Domain labels never enter the forward pass.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "curlmoe/nn.hpp"
#include "curlmoe/telemetry.hpp"

namespace curlmoe::moe {

struct MoEConfig {
    int channels = 16;
    int experts = 2;
    int hidden = 64;
    int shared_hidden = 64;
    double lambda_lb = 0.01;
    int blocks = 2;

    void validate() const;
};

template <typename Real>
struct RoutingDecision {
    std::vector<int> selected;
    std::vector<Real> gate;
};

/// Row-wise softmax of `logits` into `probs`, then Top-1 selection.
template <typename Real>
RoutingDecision<Real> route(const nn::Matrix<Real>& logits, nn::Matrix<Real>& probs);

/// E * sum_e f_e * P_e with f_e the fraction of tokens selecting e and P_e the
/// mean router probability of e.
template <typename Real>
double load_balance_loss(std::span<const int> selected, const nn::Matrix<Real>& probs);

/// d(load_balance_loss)/d(probs) = E * f_e / T, written into `dprobs` (added).
template <typename Real>
void load_balance_backward(std::span<const int> selected, Real weight, nn::Matrix<Real>& dprobs);

/// Accumulates one block's routing statistics. `labels[t]` is the domain of token t.
template <typename Real>
void record_telemetry(const RoutingDecision<Real>& decision, std::span<const int> labels,
                      const nn::Matrix<Real>& shared_out, const std::vector<nn::Matrix<Real>>& expert_out,
                      RoutingRecord& record);

template <typename Real>
struct BlockCache {
    nn::Matrix<Real> logits;
    nn::Matrix<Real> probs;
    RoutingDecision<Real> decision;
    nn::MlpCache<Real> shared_cache;
    nn::Matrix<Real> shared_out;
    std::vector<std::vector<std::size_t>> members;  // token indices per expert, ascending
    std::vector<nn::Matrix<Real>> expert_in;
    std::vector<nn::MlpCache<Real>> expert_cache;
    std::vector<nn::Matrix<Real>> expert_out;
    double load_balance = 0.0;
};

template <typename Real>
class MoEBlock {
public:
    MoEBlock() = default;
    MoEBlock(nn::ParamStore<Real>& store, const std::string& prefix, const MoEConfig& cfg);

    /// With `zero_output`, the last layer of the shared and routed experts
    /// starts at zero so the block is the identity.
    void init(nn::ParamStore<Real>& store, nn::Rng& rng, bool zero_output = false) const;

    /// Router logits, softmax and Top-1 decision. `frozen`, when given, pins
    /// the selected experts (the gate stays the softmax probability).
    void route_tokens(const nn::ParamStore<Real>& store, const nn::Matrix<Real>& x, BlockCache<Real>& cache,
                      const std::vector<int>* frozen) const;

    /// Boolean-mask gather per expert, expert MLP on its subset, scatter back.
    void dispatch_and_combine(const nn::ParamStore<Real>& store, const nn::Matrix<Real>& x,
                              BlockCache<Real>& cache, nn::Matrix<Real>& y) const;

    void forward(const nn::ParamStore<Real>& store, const nn::Matrix<Real>& x, BlockCache<Real>& cache,
                 nn::Matrix<Real>& y, const std::vector<int>* frozen = nullptr) const;

    /// `lb_weight` is d(total loss)/d(this block's load-balance loss).
    void backward(nn::ParamStore<Real>& store, const nn::Matrix<Real>& x, const BlockCache<Real>& cache,
                  const nn::Matrix<Real>& dy, Real lb_weight, nn::Matrix<Real>& dx) const;

    const nn::LinearLayer<Real>& router() const noexcept { return router_; }
    const nn::Mlp<Real>& shared() const noexcept { return shared_; }
    const nn::Mlp<Real>& expert(int e) const { return experts_.at(static_cast<std::size_t>(e)); }
    int experts() const noexcept { return static_cast<int>(experts_.size()); }

private:
    nn::LinearLayer<Real> router_;
    nn::Mlp<Real> shared_;
    std::vector<nn::Mlp<Real>> experts_;
};

template <typename Real>
struct MoEForward {
    std::vector<nn::Matrix<Real>> inputs;  // input of each block
    std::vector<BlockCache<Real>> blocks;
    nn::Matrix<Real> output;
};

struct MoELoss {
    double total = 0.0;
    double recon = 0.0;
    double load_balance = 0.0;  // mean over blocks
};

template <typename Real>
class MoEModel {
public:
    explicit MoEModel(const MoEConfig& cfg, const std::string& prefix = "moe/");

    /// Zero-output init (identity map) by default.
    void init(std::uint64_t seed, bool zero_output = true);

    /// `frozen[b]` pins block b's selection when non-null.
    void forward(const nn::Matrix<Real>& x, MoEForward<Real>& fwd,
                 const std::vector<std::vector<int>>* frozen = nullptr) const;

    /// MSE(model(x), target) + lambda_lb * mean_b L_lb. With `grads`, accumulates
    /// gradients (caller zeroes). Block routing statistics are appended to
    /// `per_block` (size = blocks) when non-null.
    MoELoss loss(const nn::Matrix<Real>& x, const nn::Matrix<Real>& target, bool grads,
                 std::span<const int> labels = {}, std::vector<RoutingRecord>* per_block = nullptr,
                 const std::vector<std::vector<int>>* frozen = nullptr);

    /// Selections of every block for input x.
    std::vector<std::vector<int>> routing(const nn::Matrix<Real>& x) const;

    const MoEConfig& config() const noexcept { return cfg_; }
    const MoEBlock<Real>& block(int b) const { return blocks_.at(static_cast<std::size_t>(b)); }
    nn::ParamStore<Real>& store() noexcept { return store_; }
    const nn::ParamStore<Real>& store() const noexcept { return store_; }

private:
    MoEConfig cfg_;
    nn::ParamStore<Real> store_;
    std::vector<MoEBlock<Real>> blocks_;
};

}  // namespace curlmoe::moe
