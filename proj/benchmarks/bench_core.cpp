#include <benchmark/benchmark.h>

#include <random>

#include "curlmoe/fieldgrid.hpp"
#include "curlmoe/moe.hpp"
#include "curlmoe/nn.hpp"
#include "curlmoe/tokenizer.hpp"

using namespace curlmoe;

namespace {

template <typename Field>
Field random_field(const fieldgrid::GridSpec& s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Field f(s);
    for (auto& c : f.comp)
        for (auto& v : c) v = static_cast<typename Field::value_type>(u(rng));
    return f;
}

template <typename Real>
nn::Matrix<Real> random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    nn::Matrix<Real> m(rows, cols);
    for (auto& v : m.data) v = static_cast<Real>(n(rng));
    return m;
}

void BM_Curl(benchmark::State& state) {
    const fieldgrid::GridSpec s{static_cast<int>(state.range(0)), 1.0};
    const auto a = random_field<fieldgrid::EdgeField<float>>(s, 1);
    for (auto _ : state) benchmark::DoNotOptimize(fieldgrid::curl(a, s));
    state.SetItemsProcessed(state.iterations() * s.n * s.n * s.n);
}
BENCHMARK(BM_Curl)->Arg(16)->Arg(32)->Arg(64);

void BM_DivergenceNormsFP64(benchmark::State& state) {
    const fieldgrid::GridSpec s{static_cast<int>(state.range(0)), 1.0};
    const auto u = random_field<fieldgrid::FaceField<double>>(s, 2);
    for (auto _ : state) benchmark::DoNotOptimize(fieldgrid::divergence_norms(u, s));
    state.SetItemsProcessed(state.iterations() * s.n * s.n * s.n);
}
BENCHMARK(BM_DivergenceNormsFP64)->Arg(32)->Arg(64);

void BM_TokenizerEncode(benchmark::State& state) {
    tokenizer::TokenizerConfig c;
    tokenizer::Tokenizer<float> tok(c);
    tok.init(3);
    const auto u = random_field<fieldgrid::FaceField<float>>(c.grid(), 4);
    for (auto _ : state) benchmark::DoNotOptimize(tok.encode(u));
}
BENCHMARK(BM_TokenizerEncode);

void BM_TokenizerDecode(benchmark::State& state) {
    tokenizer::TokenizerConfig c;
    tokenizer::Tokenizer<float> tok(c);
    tok.init(5);
    tokenizer::LatentGrid<float> z;
    z.side = c.latent_side();
    z.tokens = random_matrix<float>(c.tokens(), static_cast<std::size_t>(c.channels), 6);
    for (auto _ : state) benchmark::DoNotOptimize(tok.decode(z));
}
BENCHMARK(BM_TokenizerDecode);

void BM_TokenizerTrainStep(benchmark::State& state) {
    tokenizer::TokenizerConfig c;
    tokenizer::Tokenizer<float> tok(c);
    tok.init(7);
    std::vector<fieldgrid::FaceField<float>> batch;
    for (int i = 0; i < 8; ++i) batch.push_back(random_field<fieldgrid::FaceField<float>>(c.grid(), 10 + i));
    for (auto _ : state) {
        tok.store().zero_grad();
        benchmark::DoNotOptimize(tok.loss(batch, true));
        nn::adam_step(tok.store(), nn::AdamConfig{});
    }
}
BENCHMARK(BM_TokenizerTrainStep)->Unit(benchmark::kMillisecond);

void BM_MoEForward(benchmark::State& state) {
    moe::MoEConfig c;
    c.experts = static_cast<int>(state.range(1));
    moe::MoEModel<float> m(c);
    m.init(8, false);
    const auto x = random_matrix<float>(static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(c.channels), 9);
    moe::MoEForward<float> fwd;
    for (auto _ : state) {
        m.forward(x, fwd);
        benchmark::DoNotOptimize(fwd.output.data.data());
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_MoEForward)->Args({512, 2})->Args({512, 8})->Args({4096, 2});

void BM_MoETrainStep(benchmark::State& state) {
    moe::MoEConfig c;
    moe::MoEModel<float> m(c);
    m.init(11, false);
    const std::size_t T = 512;
    const auto x = random_matrix<float>(T, static_cast<std::size_t>(c.channels), 12);
    const auto target = random_matrix<float>(T, static_cast<std::size_t>(c.channels), 13);
    std::vector<int> labels(T);
    for (std::size_t t = 0; t < T; ++t) labels[t] = static_cast<int>(t % 2);
    for (auto _ : state) {
        m.store().zero_grad();
        benchmark::DoNotOptimize(m.loss(x, target, true, labels).total);
        nn::adam_step(m.store(), nn::AdamConfig{});
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(T));
}
BENCHMARK(BM_MoETrainStep);

}  // namespace

BENCHMARK_MAIN();
