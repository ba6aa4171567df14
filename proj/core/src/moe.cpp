#include "curlmoe/moe.hpp"

#include <algorithm>
#include <cmath>

namespace curlmoe::moe {

void MoEConfig::validate() const {
    if (channels < 1) throw ConfigError("moe: channels must be positive");
    if (experts < 1) throw ConfigError("moe: experts must be >= 1");
    if (hidden < 1 || shared_hidden < 1) throw ConfigError("moe: hidden widths must be positive");
    if (!(lambda_lb >= 0.0)) throw ConfigError("moe: lambda_lb must be >= 0");
    if (blocks < 1) throw ConfigError("moe: blocks must be >= 1");
}

template <typename Real>
RoutingDecision<Real> route(const nn::Matrix<Real>& logits, nn::Matrix<Real>& probs) {
    const std::size_t T = logits.rows;
    const std::size_t E = logits.cols;
    if (probs.rows != T || probs.cols != E) probs.resize(T, E);
    RoutingDecision<Real> d;
    d.selected.resize(T);
    d.gate.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
        const Real* l = logits.row(t).data();
        Real* p = probs.row(t).data();
        std::size_t best = 0;
        for (std::size_t e = 1; e < E; ++e)
            if (l[e] > l[best]) best = e;
        Real sum = 0;
        for (std::size_t e = 0; e < E; ++e) {
            p[e] = std::exp(l[e] - l[best]);
            sum += p[e];
        }
        for (std::size_t e = 0; e < E; ++e) p[e] /= sum;
        d.selected[t] = static_cast<int>(best);
        d.gate[t] = p[best];
    }
    return d;
}

template <typename Real>
double load_balance_loss(std::span<const int> selected, const nn::Matrix<Real>& probs) {
    const std::size_t T = probs.rows;
    const std::size_t E = probs.cols;
    if (T == 0) throw ShapeError("load_balance_loss: no tokens");
    if (selected.size() != T) throw ShapeError("load_balance_loss: selection/probability mismatch");
    std::vector<double> f(E, 0.0), P(E, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        f[static_cast<std::size_t>(selected[t])] += 1.0;
        for (std::size_t e = 0; e < E; ++e) P[e] += static_cast<double>(probs(t, e));
    }
    double s = 0.0;
    for (std::size_t e = 0; e < E; ++e) s += (f[e] / static_cast<double>(T)) * (P[e] / static_cast<double>(T));
    return static_cast<double>(E) * s;
}

template <typename Real>
void load_balance_backward(std::span<const int> selected, Real weight, nn::Matrix<Real>& dprobs) {
    const std::size_t T = dprobs.rows;
    const std::size_t E = dprobs.cols;
    if (selected.size() != T) throw ShapeError("load_balance_backward: size mismatch");
    if (T == 0 || weight == Real(0)) return;
    std::vector<double> f(E, 0.0);
    for (int s : selected) f[static_cast<std::size_t>(s)] += 1.0;
    std::vector<Real> g(E);
    for (std::size_t e = 0; e < E; ++e)
        g[e] = static_cast<Real>(static_cast<double>(weight) * static_cast<double>(E) * f[e] /
                                 (static_cast<double>(T) * static_cast<double>(T)));
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t e = 0; e < E; ++e) dprobs(t, e) += g[e];
}

template <typename Real>
void record_telemetry(const RoutingDecision<Real>& decision, std::span<const int> labels,
                      const nn::Matrix<Real>& shared_out, const std::vector<nn::Matrix<Real>>& expert_out,
                      RoutingRecord& record) {
    const std::size_t T = decision.selected.size();
    if (labels.size() != T) throw ShapeError("record_telemetry: labels do not align with tokens");
    if (static_cast<int>(expert_out.size()) != record.experts)
        throw ShapeError("record_telemetry: expert count mismatch");
    for (std::size_t t = 0; t < T; ++t) {
        const int d = labels[t];
        if (d < 0 || d >= kNumDomains) throw ShapeError("record_telemetry: label out of range");
        const int e = decision.selected[t];
        record.counts[d][e] += 1;
        record.gate_sum[e] += static_cast<double>(decision.gate[t]);
    }
    for (Real v : shared_out.data) record.shared_sumsq += static_cast<double>(v) * static_cast<double>(v);
    record.shared_entries += shared_out.data.size();
    for (int e = 0; e < record.experts; ++e) {
        for (Real v : expert_out[e].data) record.expert_sumsq[e] += static_cast<double>(v) * static_cast<double>(v);
        record.expert_entries[e] += expert_out[e].data.size();
    }
}

template <typename Real>
MoEBlock<Real>::MoEBlock(nn::ParamStore<Real>& store, const std::string& prefix, const MoEConfig& cfg) {
    const auto C = static_cast<std::size_t>(cfg.channels);
    router_ = nn::LinearLayer<Real>(store, prefix + "router", C, static_cast<std::size_t>(cfg.experts));
    shared_ = nn::Mlp<Real>(store, prefix + "shared", C, static_cast<std::size_t>(cfg.shared_hidden), C);
    for (int e = 0; e < cfg.experts; ++e)
        experts_.emplace_back(store, prefix + "expert" + std::to_string(e), C,
                              static_cast<std::size_t>(cfg.hidden), C);
}

template <typename Real>
void MoEBlock<Real>::init(nn::ParamStore<Real>& store, nn::Rng& rng, bool zero_output) const {
    router_.init(store, rng);
    shared_.init(store, rng);
    for (const auto& e : experts_) e.init(store, rng);
    if (!zero_output) return;
    auto clear = [&](const nn::Mlp<Real>& m) {
        std::fill(store[m.fc2().weight()].value.begin(), store[m.fc2().weight()].value.end(), Real(0));
        std::fill(store[m.fc2().bias()].value.begin(), store[m.fc2().bias()].value.end(), Real(0));
    };
    clear(shared_);
    for (const auto& e : experts_) clear(e);
}

template <typename Real>
void MoEBlock<Real>::route_tokens(const nn::ParamStore<Real>& store, const nn::Matrix<Real>& x,
                                  BlockCache<Real>& cache, const std::vector<int>* frozen) const {
    router_.forward(store, x, cache.logits);
    cache.decision = route(cache.logits, cache.probs);
    if (frozen != nullptr) {
        if (frozen->size() != x.rows) throw ShapeError("frozen routing does not match token count");
        for (std::size_t t = 0; t < x.rows; ++t) {
            const int e = (*frozen)[t];
            if (e < 0 || e >= experts()) throw ShapeError("frozen routing names an unknown expert");
            cache.decision.selected[t] = e;
            cache.decision.gate[t] = cache.probs(t, static_cast<std::size_t>(e));
        }
    }
    cache.load_balance = load_balance_loss<Real>(cache.decision.selected, cache.probs);
}

template <typename Real>
void MoEBlock<Real>::dispatch_and_combine(const nn::ParamStore<Real>& store, const nn::Matrix<Real>& x,
                                          BlockCache<Real>& cache, nn::Matrix<Real>& y) const {
    const std::size_t T = x.rows;
    const std::size_t C = x.cols;
    const auto E = static_cast<std::size_t>(experts());

    shared_.forward(store, x, cache.shared_cache, cache.shared_out);
    y.resize(T, C);
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = x.data[i] + cache.shared_out.data[i];

    cache.members.assign(E, {});
    cache.expert_in.assign(E, {});
    cache.expert_cache.assign(E, {});
    cache.expert_out.assign(E, {});
    for (std::size_t e = 0; e < E; ++e) {
        // Boolean mask over tokens, then gather the selected rows.
        std::vector<bool> mask(T);
        for (std::size_t t = 0; t < T; ++t) mask[t] = (cache.decision.selected[t] == static_cast<int>(e));
        auto& idx = cache.members[e];
        for (std::size_t t = 0; t < T; ++t)
            if (mask[t]) idx.push_back(t);

        auto& in = cache.expert_in[e];
        in.resize(idx.size(), C);
        for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(x.row(idx[r]).data(), C, in.row(r).data());
        experts_[e].forward(store, in, cache.expert_cache[e], cache.expert_out[e]);

        const auto& out = cache.expert_out[e];
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const Real g = cache.decision.gate[idx[r]];
            Real* yr = y.row(idx[r]).data();
            const Real* orow = out.row(r).data();
            for (std::size_t c = 0; c < C; ++c) yr[c] += g * orow[c];
        }
    }
}

template <typename Real>
void MoEBlock<Real>::forward(const nn::ParamStore<Real>& store, const nn::Matrix<Real>& x,
                             BlockCache<Real>& cache, nn::Matrix<Real>& y, const std::vector<int>* frozen) const {
    route_tokens(store, x, cache, frozen);
    dispatch_and_combine(store, x, cache, y);
}

template <typename Real>
void MoEBlock<Real>::backward(nn::ParamStore<Real>& store, const nn::Matrix<Real>& x,
                              const BlockCache<Real>& cache, const nn::Matrix<Real>& dy, Real lb_weight,
                              nn::Matrix<Real>& dx) const {
    const std::size_t T = x.rows;
    const std::size_t C = x.cols;
    const auto E = static_cast<std::size_t>(experts());
    if (dy.rows != T || dy.cols != C) throw ShapeError("MoEBlock::backward: dy shape mismatch");

    dx = dy;  // residual path

    nn::Matrix<Real> tmp;
    shared_.backward(store, x, cache.shared_cache, dy, &tmp);
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += tmp.data[i];

    nn::Matrix<Real> dprobs(T, E);
    for (std::size_t e = 0; e < E; ++e) {
        const auto& idx = cache.members[e];
        const auto& out = cache.expert_out[e];
        nn::Matrix<Real> dout(idx.size(), C);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const std::size_t t = idx[r];
            const Real g = cache.decision.gate[t];
            const Real* dyr = dy.row(t).data();
            Real dg = 0;
            for (std::size_t c = 0; c < C; ++c) {
                dout(r, c) = g * dyr[c];
                dg += dyr[c] * out(r, c);
            }
            dprobs(t, e) += dg;
        }
        experts_[e].backward(store, cache.expert_in[e], cache.expert_cache[e], dout, &tmp);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            Real* dxr = dx.row(idx[r]).data();
            const Real* tr = tmp.row(r).data();
            for (std::size_t c = 0; c < C; ++c) dxr[c] += tr[c];
        }
    }

    load_balance_backward<Real>(cache.decision.selected, lb_weight, dprobs);

    nn::Matrix<Real> dlogits(T, E);
    for (std::size_t t = 0; t < T; ++t) {
        Real s = 0;
        for (std::size_t e = 0; e < E; ++e) s += cache.probs(t, e) * dprobs(t, e);
        for (std::size_t e = 0; e < E; ++e) dlogits(t, e) = cache.probs(t, e) * (dprobs(t, e) - s);
    }
    router_.backward(store, x, dlogits, &tmp);
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += tmp.data[i];
}

template <typename Real>
MoEModel<Real>::MoEModel(const MoEConfig& cfg, const std::string& prefix) : cfg_(cfg) {
    cfg_.validate();
    for (int b = 0; b < cfg_.blocks; ++b)
        blocks_.emplace_back(store_, prefix + "block" + std::to_string(b) + ".", cfg_);
}

template <typename Real>
void MoEModel<Real>::init(std::uint64_t seed, bool zero_output) {
    nn::Rng rng(seed);
    for (const auto& b : blocks_) b.init(store_, rng, zero_output);
}

template <typename Real>
void MoEModel<Real>::forward(const nn::Matrix<Real>& x, MoEForward<Real>& fwd,
                             const std::vector<std::vector<int>>* frozen) const {
    if (x.cols != static_cast<std::size_t>(cfg_.channels)) throw ShapeError("MoEModel: token width mismatch");
    if (frozen != nullptr && frozen->size() != blocks_.size())
        throw ShapeError("MoEModel: frozen routing needs one selection per block");
    const std::size_t L = blocks_.size();
    fwd.inputs.resize(L);
    fwd.blocks.resize(L);
    fwd.inputs[0] = x;
    for (std::size_t b = 0; b < L; ++b) {
        nn::Matrix<Real>& y = (b + 1 < L) ? fwd.inputs[b + 1] : fwd.output;
        blocks_[b].forward(store_, fwd.inputs[b], fwd.blocks[b], y, frozen ? &(*frozen)[b] : nullptr);
    }
}

template <typename Real>
std::vector<std::vector<int>> MoEModel<Real>::routing(const nn::Matrix<Real>& x) const {
    MoEForward<Real> fwd;
    forward(x, fwd);
    std::vector<std::vector<int>> out;
    for (const auto& c : fwd.blocks) out.push_back(c.decision.selected);
    return out;
}

template <typename Real>
MoELoss MoEModel<Real>::loss(const nn::Matrix<Real>& x, const nn::Matrix<Real>& target, bool grads,
                             std::span<const int> labels, std::vector<RoutingRecord>* per_block,
                             const std::vector<std::vector<int>>* frozen) {
    if (target.rows != x.rows || target.cols != x.cols) throw ShapeError("MoEModel::loss: target shape mismatch");
    MoEForward<Real> fwd;
    forward(x, fwd, frozen);

    MoELoss out;
    out.recon = nn::mse<Real>(fwd.output.data, target.data);
    for (const auto& c : fwd.blocks) out.load_balance += c.load_balance;
    out.load_balance /= static_cast<double>(blocks_.size());
    out.total = out.recon + cfg_.lambda_lb * out.load_balance;

    if (per_block != nullptr && !labels.empty()) {
        per_block->assign(blocks_.size(), RoutingRecord(cfg_.experts));
        for (std::size_t b = 0; b < blocks_.size(); ++b)
            record_telemetry(fwd.blocks[b].decision, labels, fwd.blocks[b].shared_out,
                             fwd.blocks[b].expert_out, (*per_block)[b]);
    }
    if (!grads) return out;

    const Real scale = static_cast<Real>(2.0 / static_cast<double>(x.data.size()));
    nn::Matrix<Real> dy(x.rows, x.cols);
    for (std::size_t i = 0; i < dy.data.size(); ++i) dy.data[i] = scale * (fwd.output.data[i] - target.data[i]);
    const Real lb_weight = static_cast<Real>(cfg_.lambda_lb / static_cast<double>(blocks_.size()));
    nn::Matrix<Real> dx;
    for (std::size_t b = blocks_.size(); b-- > 0;) {
        blocks_[b].backward(store_, fwd.inputs[b], fwd.blocks[b], dy, lb_weight, dx);
        std::swap(dy, dx);
    }
    return out;
}

#define CURLMOE_INSTANTIATE(Real)                                                                           \
    template RoutingDecision<Real> route(const nn::Matrix<Real>&, nn::Matrix<Real>&);                       \
    template double load_balance_loss(std::span<const int>, const nn::Matrix<Real>&);                       \
    template void load_balance_backward(std::span<const int>, Real, nn::Matrix<Real>&);                     \
    template void record_telemetry(const RoutingDecision<Real>&, std::span<const int>,                      \
                                   const nn::Matrix<Real>&, const std::vector<nn::Matrix<Real>>&,           \
                                   RoutingRecord&);                                                         \
    template class MoEBlock<Real>;                                                                          \
    template class MoEModel<Real>;

CURLMOE_INSTANTIATE(float)
CURLMOE_INSTANTIATE(double)

#undef CURLMOE_INSTANTIATE

}  // namespace curlmoe::moe
