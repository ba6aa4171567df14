#include <doctest.h>

#include <algorithm>
#include <array>
#include <cstring>
#include <cmath>
#include <numeric>

#include "curlmoe/gradcheck.hpp"
#include "curlmoe/moe.hpp"
#include "support.hpp"

using namespace curlmoe;
using namespace curlmoe::moe;
using nn::Matrix;
using testing::fill_random;

namespace {

MoEConfig tiny(int experts = 2, int blocks = 1) {
    MoEConfig c;
    c.channels = 4;
    c.experts = experts;
    c.hidden = 5;
    c.shared_hidden = 6;
    c.blocks = blocks;
    return c;
}

// Per-token reference: no masks, no gathering.
template <typename Real>
Matrix<Real> token_loop(const MoEBlock<Real>& blk, const nn::ParamStore<Real>& store, const Matrix<Real>& x) {
    Matrix<Real> y(x.rows, x.cols);
    for (std::size_t t = 0; t < x.rows; ++t) {
        Matrix<Real> xt(1, x.cols);
        std::copy_n(x.row(t).data(), x.cols, xt.row(0).data());
        Matrix<Real> logits, probs;
        blk.router().forward(store, xt, logits);
        // softmax and argmax by hand
        std::size_t best = 0;
        for (std::size_t e = 1; e < logits.cols; ++e)
            if (logits(0, e) > logits(0, best)) best = e;
        Real denom = 0;
        for (std::size_t e = 0; e < logits.cols; ++e) denom += std::exp(logits(0, e) - logits(0, best));
        const Real gate = Real(1) / denom;

        nn::MlpCache<Real> c1, c2;
        Matrix<Real> sh, ex;
        blk.shared().forward(store, xt, c1, sh);
        blk.expert(static_cast<int>(best)).forward(store, xt, c2, ex);
        for (std::size_t c = 0; c < x.cols; ++c) {
            Real v = xt(0, c) + sh(0, c);
            v += gate * ex(0, c);
            y(t, c) = v;
        }
    }
    return y;
}

}  // namespace

TEST_SUITE("moe") {

TEST_CASE("route: logits (2, 1) pick expert 0 with gate e^2/(e^2+e)") {
    Matrix<double> logits(1, 2), probs;
    logits.data = {2.0, 1.0};
    const auto d = route(logits, probs);
    CHECK(d.selected[0] == 0);
    const double expect = std::exp(2.0) / (std::exp(2.0) + std::exp(1.0));
    CHECK(d.gate[0] == doctest::Approx(expect).epsilon(1e-15));
    CHECK(d.gate[0] == doctest::Approx(0.7311).epsilon(1e-4));
    CHECK(probs(0, 1) == doctest::Approx(1.0 - expect).epsilon(1e-14));
}

TEST_CASE("route: ties go to the lowest index") {
    Matrix<float> logits(2, 3), probs;
    logits.data = {0.5f, 0.5f, 0.5f, -1.0f, 3.0f, 3.0f};
    const auto d = route(logits, probs);
    CHECK(d.selected[0] == 0);
    CHECK(d.selected[1] == 1);
    CHECK(d.gate[0] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("route: shifting all logits changes neither selection nor gate") {
    Matrix<double> logits(20, 4), probs;
    fill_random(logits, 3);
    const auto a = route(logits, probs);
    for (auto& v : logits.data) v += 7.25;
    const auto b = route(logits, probs);
    CHECK(a.selected == b.selected);
    for (std::size_t t = 0; t < 20; ++t) {
        CHECK(b.gate[t] == doctest::Approx(a.gate[t]).epsilon(1e-14));
        CHECK(b.gate[t] > 0.0);
        CHECK(b.gate[t] <= 1.0);
    }
}

TEST_CASE("load balance is exactly 1 at uniform routing") {
    for (int E : {2, 4, 8}) {
        const std::size_t T = 16;
        Matrix<float> probs(T, static_cast<std::size_t>(E));
        std::fill(probs.data.begin(), probs.data.end(), 1.0f / float(E));
        std::vector<int> sel(T);
        for (std::size_t t = 0; t < T; ++t) sel[t] = static_cast<int>(t % static_cast<std::size_t>(E));
        CHECK(load_balance_loss<float>(sel, probs) == 1.0);
    }
    // E = 3: 1/3 is inexact in binary
    Matrix<double> probs(9, 3);
    std::fill(probs.data.begin(), probs.data.end(), 1.0 / 3.0);
    std::vector<int> sel{0, 1, 2, 0, 1, 2, 0, 1, 2};
    CHECK(load_balance_loss<double>(sel, probs) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("load balance equals E under full collapse") {
    for (int E : {2, 3, 5}) {
        Matrix<float> probs(10, static_cast<std::size_t>(E));
        for (std::size_t t = 0; t < 10; ++t) probs(t, 0) = 1.0f;
        std::vector<int> sel(10, 0);
        CHECK(load_balance_loss<float>(sel, probs) == double(E));
    }
}

TEST_CASE("load balance never exceeds E for routed random batches") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 300; ++trial) {
        const int E = 2 + trial % 4;
        Matrix<double> logits(1 + trial % 37, static_cast<std::size_t>(E)), probs;
        std::normal_distribution<double> n(0.0, 0.5 + trial % 5);
        for (auto& v : logits.data) v = n(rng);
        const auto d = route(logits, probs);
        const double l = load_balance_loss<double>(d.selected, probs);
        CHECK(l > 0.0);
        CHECK(l <= double(E) + 1e-12);
    }
}

TEST_CASE("load balance can drop below 1 when f differs from P") {
    // two ties resolved to expert 0, one confident token on expert 1:
    // f = (2/3, 1/3), P = (1/3, 2/3), L = 2 * (2/9 + 2/9) = 8/9
    Matrix<double> probs(3, 2);
    probs.data = {0.5, 0.5, 0.5, 0.5, 0.0, 1.0};
    const std::vector<int> sel{0, 0, 1};
    CHECK(load_balance_loss<double>(sel, probs) == doctest::Approx(8.0 / 9.0).epsilon(1e-15));
}

TEST_CASE("on the diagonal f = P the load balance is smallest at uniform") {
    // enumerate the simplex for E = 3 on a 1/60 lattice
    const int N = 60;
    double best = 1e9;
    std::array<int, 3> arg{};
    for (int a = 0; a <= N; ++a)
        for (int b = 0; a + b <= N; ++b) {
            const int c = N - a - b;
            const double f[3] = {double(a) / N, double(b) / N, double(c) / N};
            const double l = 3.0 * (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]);
            if (l < best) {
                best = l;
                arg = {a, b, c};
            }
        }
    CHECK(arg == std::array<int, 3>{20, 20, 20});
    CHECK(best == doctest::Approx(1.0));
}

TEST_CASE("load balance backward is E f_e / T") {
    Matrix<double> logits(12, 3), probs;
    fill_random(logits, 8);
    const auto d = route(logits, probs);
    Matrix<double> dprobs(12, 3);
    load_balance_backward<double>(d.selected, 2.0, dprobs);
    std::array<double, 3> f{};
    for (int s : d.selected) f[static_cast<std::size_t>(s)] += 1.0 / 12.0;
    for (std::size_t t = 0; t < 12; ++t)
        for (std::size_t e = 0; e < 3; ++e) {
            CHECK(dprobs(t, e) == doctest::Approx(2.0 * 3.0 * f[e] / 12.0).epsilon(1e-14));
            // L is linear in probs, so a one-sided difference is exact up to rounding
            auto p2 = probs;
            p2(t, e) += 1e-3;
            const double fd = (load_balance_loss<double>(d.selected, p2) - load_balance_loss<double>(d.selected, probs)) / 1e-3;
            CHECK(2.0 * fd == doctest::Approx(dprobs(t, e)).epsilon(1e-9));
        }
}

TEST_CASE("zero expert and shared weights give the identity") {
    MoEModel<float> m(tiny(3, 2));
    m.init(4);  // zero-output init
    Matrix<float> x(30, 4);
    fill_random(x, 5);
    MoEForward<float> fwd;
    m.forward(x, fwd);
    CHECK(fwd.output.data == x.data);

    // same with every parameter zero
    for (auto& e : m.store().entries()) std::fill(e.value.begin(), e.value.end(), 0.0f);
    m.forward(x, fwd);
    CHECK(fwd.output.data == x.data);
}

TEST_CASE("masked dispatch equals the per-token loop bitwise in FP32 (50 batches)") {
    const auto cfg = tiny(3, 1);
    for (std::uint64_t b = 0; b < 50; ++b) {
        MoEModel<float> m(cfg);
        m.init(100 + b, false);
        Matrix<float> x(5 + b % 40, 4);
        fill_random(x, 200 + b, 1.5);
        MoEForward<float> fwd;
        m.forward(x, fwd);
        const auto ref = token_loop(m.block(0), m.store(), x);
        REQUIRE(ref.data.size() == fwd.output.data.size());
        CHECK(std::memcmp(ref.data.data(), fwd.output.data.data(), 4 * ref.data.size()) == 0);
    }
}

TEST_CASE("E = 1 is a dense block with gate 1") {
    MoEModel<double> m(tiny(1, 1));
    m.init(6, false);
    Matrix<double> x(9, 4);
    fill_random(x, 7);
    MoEForward<double> fwd;
    m.forward(x, fwd);
    const auto& blk = m.block(0);
    nn::MlpCache<double> c1, c2;
    Matrix<double> sh, ex;
    blk.shared().forward(m.store(), x, c1, sh);
    blk.expert(0).forward(m.store(), x, c2, ex);
    for (std::size_t i = 0; i < x.data.size(); ++i) CHECK(fwd.output.data[i] == x.data[i] + sh.data[i] + ex.data[i]);
    for (double g : fwd.blocks[0].decision.gate) CHECK(g == 1.0);
}

TEST_CASE("permuting tokens permutes the output") {
    MoEModel<float> m(tiny(2, 2));
    m.init(8, false);
    Matrix<float> x(24, 4);
    fill_random(x, 9);
    std::vector<std::size_t> perm(24);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(3));
    Matrix<float> xp(24, 4);
    for (std::size_t t = 0; t < 24; ++t) std::copy_n(x.row(perm[t]).data(), 4, xp.row(t).data());
    MoEForward<float> a, b;
    m.forward(x, a);
    m.forward(xp, b);
    for (std::size_t t = 0; t < 24; ++t)
        for (std::size_t c = 0; c < 4; ++c) CHECK(b.output(t, c) == a.output(perm[t], c));
}

TEST_CASE("empty expert subsets are legal") {
    MoEModel<float> m(tiny(3, 1));
    m.init(1, false);
    // push every token to expert 2
    auto& bias = m.store()[m.block(0).router().bias()].value;
    bias = {-50.0f, -50.0f, 50.0f};
    Matrix<float> x(6, 4);
    fill_random(x, 2, 0.1);
    MoEForward<float> fwd;
    m.forward(x, fwd);
    CHECK(fwd.blocks[0].members[0].empty());
    CHECK(fwd.blocks[0].members[1].empty());
    CHECK(fwd.blocks[0].members[2].size() == 6);
    std::vector<int> labels(6, 0);
    Matrix<float> target = x;
    m.store().zero_grad();
    CHECK_NOTHROW(m.loss(x, target, true, labels));
}

TEST_CASE("frozen-routing gradient check passes in FP64") {
    auto cfg = tiny(2, 2);
    cfg.lambda_lb = 0.1;
    MoEModel<double> m(cfg);
    m.init(11, false);
    Matrix<double> x(10, 4), target(10, 4);
    fill_random(x, 12);
    fill_random(target, 13);
    const auto frozen = m.routing(x);
    std::vector<int> labels(10, 0);
    const auto rep = nn::grad_check<double>(
        [&](bool g) { return m.loss(x, target, g, labels, nullptr, &frozen).total; }, m.store(),
        nn::GradCheckOptions::defaults_for<double>());
    CHECK(rep.deterministic);
    CHECK(rep.coordinates >= 200);
    CHECK(rep.max_rel_error <= 1e-6);
    CHECK(rep.passed);
}

TEST_CASE("saturated gate without load balance leaves the router almost untouched") {
    auto cfg = tiny(2, 1);
    cfg.lambda_lb = 0.0;
    MoEModel<double> m(cfg);
    m.init(14, false);
    const auto& r = m.block(0).router();
    std::fill(m.store()[r.weight()].value.begin(), m.store()[r.weight()].value.end(), 0.0);
    m.store()[r.bias()].value = {30.0, 0.0};
    Matrix<double> x(8, 4), target(8, 4);
    fill_random(x, 15);
    fill_random(target, 16);
    m.store().zero_grad();
    m.loss(x, target, true);
    double router = 0.0, expert = 0.0;
    for (double g : m.store()[r.weight()].grad) router = std::max(router, std::abs(g));
    for (double g : m.store()[m.block(0).expert(0).fc1().weight()].grad) expert = std::max(expert, std::abs(g));
    CHECK(router < 1e-10);
    CHECK(expert > 1e-4);
}

TEST_CASE("load balance alone moves a collapsed router") {
    auto cfg = tiny(2, 1);
    MoEModel<double> m(cfg);
    m.init(17, false);
    const auto& blk = m.block(0);
    auto& w = m.store()[blk.router().weight()];
    std::fill(w.value.begin(), w.value.end(), 0.0);
    m.store()[blk.router().bias()].value = {2.0, 0.0};
    Matrix<double> x(16, 4);
    fill_random(x, 18);

    BlockCache<double> cache;
    Matrix<double> y, dx;
    blk.forward(m.store(), x, cache, y);
    const std::vector<int> frozen = cache.decision.selected;
    CHECK(std::all_of(frozen.begin(), frozen.end(), [](int s) { return s == 0; }));
    m.store().zero_grad();
    blk.backward(m.store(), x, cache, Matrix<double>(16, 4), 1.0, dx);

    double maxg = 0.0;
    for (std::size_t i = 0; i < w.value.size(); ++i) {
        const double orig = w.value[i];
        const auto lb_at = [&](double v) {
            w.value[i] = v;
            BlockCache<double> c;
            blk.route_tokens(m.store(), x, c, &frozen);
            return c.load_balance;
        };
        const double fd = (lb_at(orig + 1e-5) - lb_at(orig - 1e-5)) / 2e-5;
        w.value[i] = orig;
        CHECK(w.grad[i] == doctest::Approx(fd).epsilon(1e-6));
        maxg = std::max(maxg, std::abs(w.grad[i]));
    }
    CHECK(maxg > 1e-3);
}

TEST_CASE("telemetry: counts, fractions and RMS") {
    Matrix<float> probs;
    RoutingDecision<float> d;
    d.selected = {0, 0, 1, 1};
    d.gate = {0.75f, 0.5f, 1.0f, 0.25f};
    const std::vector<int> labels{0, 0, 1, 1};
    Matrix<float> shared(4, 2);
    shared.data = {1, 1, 1, 1, 1, 1, 1, 1};
    std::vector<Matrix<float>> experts(2);
    experts[0].resize(2, 2);
    experts[0].data = {3, 4, 0, 0};
    experts[1].resize(2, 2);  // zeros
    RoutingRecord rec(2);
    record_telemetry(d, labels, shared, experts, rec);
    CHECK(rec.fractions(0) == std::vector<double>{1.0, 0.0});
    CHECK(rec.fractions(1) == std::vector<double>{0.0, 1.0});
    CHECK(rec.dominant_expert(0) == 0);
    CHECK(rec.dominant_expert(1) == 1);
    CHECK(rec.tokens(0) + rec.tokens(1) == 4);
    CHECK(rec.shared_rms() == doctest::Approx(1.0));
    CHECK(rec.expert_rms(0) == doctest::Approx(std::sqrt(25.0 / 4.0)));
    CHECK(rec.expert_rms(1) == 0.0);
    CHECK(rec.mean_gate() == doctest::Approx(0.625));

    RoutingRecord one(2);
    d.selected = {1, 1, 1, 1};
    const std::vector<int> same{0, 0, 0, 0};
    experts[0].resize(0, 2);
    experts[1].resize(4, 2);
    record_telemetry(d, same, shared, experts, one);
    CHECK(one.fractions(0) == std::vector<double>{0.0, 1.0});
    CHECK(one.fractions(1) == std::vector<double>{0.0, 0.0});

    rec.merge(one);
    CHECK(rec.counts[0][0] == 2);
    CHECK(rec.counts[0][1] == 4);
    CHECK(rec.tokens() == 8);

    std::vector<int> short_labels{0};
    CHECK_THROWS_AS(record_telemetry(d, short_labels, shared, experts, one), ShapeError);
}

TEST_CASE("telemetry conservation over a model pass") {
    MoEModel<float> m(tiny(3, 2));
    m.init(21, false);
    Matrix<float> x(40, 4), target(40, 4);
    fill_random(x, 22);
    std::vector<int> labels(40);
    for (std::size_t t = 0; t < 40; ++t) labels[t] = t < 25 ? 0 : 1;
    std::vector<RoutingRecord> per_block;
    m.loss(x, target, false, labels, &per_block);
    REQUIRE(per_block.size() == 2);
    for (const auto& r : per_block) {
        CHECK(r.tokens(0) == 25);
        CHECK(r.tokens(1) == 15);
        std::uint64_t sum = 0;
        for (auto c : r.counts[0]) sum += c;
        CHECK(sum == 25);
    }
}

TEST_CASE("telemetry CSV header and formatting") {
    CHECK(telemetry_header(2) ==
          "step,loss_total,loss_recon,loss_lb,frac_A_0,frac_A_1,frac_B_0,frac_B_1,rms_shared,rms_expert_0,"
          "rms_expert_1,mean_gate");
    CHECK(format_real(1.0 / 3.0) == "0.333333333");
    CHECK(format_real(0.0) == "0");
    TelemetryRow row;
    row.step = 3;
    row.loss_total = 0.5;
    row.record = RoutingRecord(2);
    row.record.counts[0] = {3, 1};
    const auto line = telemetry_line(row);
    CHECK(line.rfind("3,0.5,0,0,0.75,0.25,0,0,", 0) == 0);
}

TEST_CASE("config validation") {
    MoEConfig c;
    CHECK_NOTHROW(c.validate());
    c.lambda_lb = -1.0;
    CHECK_THROWS(c.validate());
    c = MoEConfig{};
    c.experts = 0;
    CHECK_THROWS(c.validate());
}

}  // TEST_SUITE
