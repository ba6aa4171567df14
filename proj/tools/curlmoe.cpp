// curlmoe: data generation, training, evaluation and divergence checks.
//
// Exit codes: 0 success, 1 threshold or validation failure, 2 usage, 3 I/O.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>

#include "curlmoe/checkpoint.hpp"
#include "curlmoe/config.hpp"
#include "curlmoe/dataset.hpp"
#include "curlmoe/errors.hpp"
#include "curlmoe/tokenizer.hpp"
#include "curlmoe/train.hpp"

namespace fs = std::filesystem;
using namespace curlmoe;

namespace {

enum Exit { kOk = 0, kThreshold = 1, kUsage = 2, kIo = 3 };

constexpr double kDivergenceBound = 1e-10;
constexpr double kSeparabilityBound = 0.9;

struct Common {
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string config;
    std::string out = "curlmoe_out";
    std::string data;  // defaults to <out>/data

    fs::path data_dir() const { return data.empty() ? fs::path(out) / "data" : fs::path(data); }
};

void add_common(CLI::App* cmd, Common& c, bool with_data) {
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&c](std::uint64_t s) { c.seed = s, c.seed_set = true; }, "Master seed");
    cmd->add_option("--config", c.config, "Config file (key = value, [section] headers); default <out>/config.txt if present");
    cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
    if (with_data) cmd->add_option("--data", c.data, "Dataset directory (default <out>/data)");
}

template <typename T>
void override(std::optional<T>& flag, T& field) {
    if (flag) field = *flag;
}

// Without --config, stages after gen-data pick up <out>/config.txt so that
// overrides given to earlier stages carry through.
RunConfig make_config(const Common& c, bool inherit = true) {
    RunConfig cfg;
    const fs::path previous = fs::path(c.out) / "config.txt";
    if (!c.config.empty())
        cfg.load(c.config);
    else if (inherit && fs::exists(previous))
        cfg.load(previous);
    if (c.seed_set) cfg.train.seed = c.seed;
    return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::trunc);
    if (!out || !(out << text)) throw FormatError(FormatErrorKind::WriteFailed, p.string());
}

void print_report(const train::EvalReport& r) {
    for (int d = 0; d < 2; ++d) {
        const char L = moe::domain_letter(d);
        std::printf("domain %c  latent_mse %.6g  decoded_mse %.6g  dominant expert %d  fractions", L,
                    r.latent_mse[d], r.decoded_mse[d], r.dominant[d]);
        for (double f : r.fractions[d]) std::printf(" %.4f", f);
        std::printf("\n");
    }
    for (int b = 0; b < r.blocks; ++b)
        std::printf("block %d  A->%d (%.4f)  B->%d (%.4f)\n", b, r.block_dominant[b][0],
                    r.block_fractions[b][0][r.block_dominant[b][0]], r.block_dominant[b][1],
                    r.block_fractions[b][1][r.block_dominant[b][1]]);
    std::printf("rms shared %.6g  experts", r.rms_shared);
    for (double v : r.rms_expert) std::printf(" %.6g", v);
    std::printf("  routed/shared %.4f  mean gate %.4f  decoded max|div| %.3g\n", r.routed_to_shared, r.mean_gate,
                r.decoded_max_divergence);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Divergence-free field tokenizer and sparse latent transport"};
    app.require_subcommand(1);

    // gen-data
    Common gen;
    std::optional<int> gen_n, gen_train, gen_val;
    auto* gen_cmd = app.add_subcommand("gen-data", "Generate the two-regime dataset");
    add_common(gen_cmd, gen, true);
    gen_cmd->add_option("--n", gen_n, "Grid size");
    gen_cmd->add_option("--train-per-domain", gen_train, "Training samples per domain");
    gen_cmd->add_option("--val-per-domain", gen_val, "Validation samples per domain");

    // train-tokenizer
    Common tok;
    std::optional<int> tok_steps, tok_batch, tok_eval;
    std::optional<double> tok_lr;
    auto* tok_cmd = app.add_subcommand("train-tokenizer", "Train the field tokenizer");
    add_common(tok_cmd, tok, true);
    tok_cmd->add_option("--steps", tok_steps, "Training steps");
    tok_cmd->add_option("--batch", tok_batch, "Samples per batch (even)");
    tok_cmd->add_option("--lr", tok_lr, "Adam learning rate");
    tok_cmd->add_option("--eval-interval", tok_eval, "Steps between validation passes");

    // train-moe
    Common moe_c;
    std::optional<int> moe_steps, moe_batch, moe_eval, moe_experts;
    std::optional<double> moe_lr, moe_lambda;
    bool collapsed = false;
    auto* moe_cmd = app.add_subcommand("train-moe", "Train the MoE transport stack on frozen latents");
    add_common(moe_cmd, moe_c, true);
    moe_cmd->add_option("--steps", moe_steps, "Training steps");
    moe_cmd->add_option("--batch", moe_batch, "Samples per batch (even)");
    moe_cmd->add_option("--lr", moe_lr, "Adam learning rate");
    moe_cmd->add_option("--eval-interval", moe_eval, "Steps between validation passes");
    moe_cmd->add_option("--lambda-lb", moe_lambda, "Load-balance coefficient");
    moe_cmd->add_option("--experts", moe_experts, "Routed experts per block");
    moe_cmd->add_flag("--collapsed-router", collapsed, "Start with every token routed to expert 0");

    // eval
    Common ev;
    auto* ev_cmd = app.add_subcommand("eval", "Evaluate checkpoints on the validation split");
    add_common(ev_cmd, ev, true);

    // verify-div
    Common vd;
    std::string vd_checkpoint;
    bool vd_random = false, vd_break = false;
    int vd_samples = 8;
    auto* vd_cmd = app.add_subcommand("verify-div", "FP64 divergence of stored or decoded fields");
    add_common(vd_cmd, vd, true);
    vd_cmd->add_option("--checkpoint", vd_checkpoint, "Tokenizer checkpoint; decodes random latents");
    vd_cmd->add_flag("--random-tokenizer", vd_random, "Decode random latents through a random-weight tokenizer");
    vd_cmd->add_option("--samples", vd_samples, "Number of fields to check")->capture_default_str();
    vd_cmd->add_flag("--break-stencil", vd_break, "Test hook: measure with a mismatched divergence stencil");

    // bifurcation
    Common bf;
    std::string bf_telemetry;
    double bf_half_life = 50.0;
    auto* bf_cmd = app.add_subcommand("bifurcation", "Smoothed routing fractions from MoE telemetry");
    add_common(bf_cmd, bf, false);
    bf_cmd->add_option("--telemetry", bf_telemetry, "Telemetry CSV (default <out>/moe_telemetry.csv)");
    bf_cmd->add_option("--half-life", bf_half_life, "EMA half-life in steps")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (gen_cmd->parsed()) {
            RunConfig cfg = make_config(gen, false);
            override(gen_n, cfg.data.n);
            override(gen_train, cfg.data.train_per_domain);
            override(gen_val, cfg.data.val_per_domain);
            cfg.resolve();
            fs::create_directories(gen.out);
            const synth::DataReport r = synth::generate_dataset(cfg.data, gen.data_dir());
            write_text(fs::path(gen.out) / "config.txt", cfg.dump());
            std::printf("samples %zu  max|div| %.3g  separability %.4f  solid fraction %.4f  "
                        "solid/fluid speed %.4f  target distance %.4f\n",
                        r.samples, r.max_divergence, r.separability, r.solid_fraction, r.solid_speed_ratio,
                        r.target_distance);
            if (!(r.max_divergence <= kDivergenceBound)) return kThreshold;
            if (!(r.separability >= kSeparabilityBound)) {
                std::fprintf(stderr, "regime separability %.4f below %.2f\n", r.separability, kSeparabilityBound);
                return kThreshold;
            }
            return kOk;
        }
        if (tok_cmd->parsed()) {
            RunConfig cfg = make_config(tok);
            override(tok_steps, cfg.train.tokenizer.steps);
            override(tok_batch, cfg.train.tokenizer.batch);
            override(tok_lr, cfg.train.tokenizer.lr);
            override(tok_eval, cfg.train.tokenizer.eval_interval);
            cfg.resolve();
            fs::create_directories(tok.out);
            write_text(fs::path(tok.out) / "config.txt", cfg.dump());
            const auto run = train::train_tokenizer(cfg, tok.data_dir(), tok.out, &std::cout);
            const auto& first = run.history.front();
            const auto& last = run.history.back();
            std::printf("decoded mse A %.6g -> %.6g   B %.6g -> %.6g\n", first.decoded_mse[0], last.decoded_mse[0],
                        first.decoded_mse[1], last.decoded_mse[1]);
            return kOk;
        }
        if (moe_cmd->parsed()) {
            RunConfig cfg = make_config(moe_c);
            override(moe_steps, cfg.train.moe.steps);
            override(moe_batch, cfg.train.moe.batch);
            override(moe_lr, cfg.train.moe.lr);
            override(moe_eval, cfg.train.moe.eval_interval);
            override(moe_lambda, cfg.moe.lambda_lb);
            override(moe_experts, cfg.moe.experts);
            cfg.resolve();
            fs::create_directories(moe_c.out);
            write_text(fs::path(moe_c.out) / "config.txt", cfg.dump());
            train::MoEOptions opts;
            opts.collapsed_router = collapsed;
            const auto run = train::train_moe(cfg, moe_c.data_dir(), moe_c.out, opts, &std::cout);
            print_report(run.report);
            return kOk;
        }
        if (ev_cmd->parsed()) {
            RunConfig cfg = make_config(ev);
            cfg.resolve();
            const auto r = train::evaluate(cfg, ev.data_dir(), ev.out);
            r.write_csv(fs::path(ev.out) / "eval_report.csv");
            print_report(r);
            return kOk;
        }
        if (vd_cmd->parsed()) {
            const int sources = (vd_cmd->count("--data") > 0) + !vd_checkpoint.empty() + vd_random;
            if (sources != 1) {
                std::fprintf(stderr, "verify-div: give exactly one of --data, --checkpoint, --random-tokenizer\n");
                return kUsage;
            }
            if (vd_samples <= 0) {
                std::fprintf(stderr, "verify-div: --samples must be positive\n");
                return kUsage;
            }
            RunConfig cfg = make_config(vd);
            cfg.resolve();
            const auto stencil = vd_break ? fieldgrid::Stencil::Mismatched : fieldgrid::Stencil::Conjugate;
            fieldgrid::DivergenceNorms worst;
            double sumsq = 0.0;
            int checked = 0;
            auto account = [&](const fieldgrid::DivergenceNorms& n) {
                worst.max_abs = std::max(worst.max_abs, n.max_abs);
                sumsq += n.rms * n.rms;
                ++checked;
            };
            if (!vd.data.empty()) {
                const auto manifest = synth::Manifest::read(fs::path(vd.data) / "manifest.csv");
                for (const auto& r : manifest.records) {
                    if (checked == vd_samples) break;
                    const auto u = synth::load_sample(vd.data, r, cfg.data.h).cast<double>();
                    account(fieldgrid::divergence_norms(u, cfg.tokenizer.grid(), stencil));
                }
            } else {
                tokenizer::Tokenizer<float> t(cfg.tokenizer);
                if (vd_random)
                    t.init(cfg.train.seed);
                else
                    nn::load_params(vd_checkpoint, t.store(), false);
                nn::Rng rng(cfg.train.seed);
                std::normal_distribution<float> normal(0.0f, 1.0f);
                tokenizer::LatentGrid<float> z;
                z.side = cfg.tokenizer.latent_side();
                for (int s = 0; s < vd_samples; ++s) {
                    z.tokens.resize(cfg.tokenizer.tokens(), static_cast<std::size_t>(cfg.tokenizer.channels));
                    for (auto& v : z.tokens.data) v = normal(rng);
                    account(t.decode(z).verify(stencil));
                }
            }
            worst.rms = checked ? std::sqrt(sumsq / checked) : 0.0;
            const bool pass = worst.max_abs <= kDivergenceBound;
            std::printf("samples %d  max|div| %.6g  rms %.6g  %s\n", checked, worst.max_abs, worst.rms,
                        pass ? "PASS" : "FAIL");
            fs::create_directories(vd.out);
            char line[128];
            std::snprintf(line, sizeof line, "samples,max_div,rms_div\n%d,%.9g,%.9g\n", checked, worst.max_abs,
                          worst.rms);
            write_text(fs::path(vd.out) / "verify_div.csv", line);
            return pass ? kOk : kThreshold;
        }
        if (bf_cmd->parsed()) {
            const fs::path in = bf_telemetry.empty() ? fs::path(bf.out) / "moe_telemetry.csv" : fs::path(bf_telemetry);
            const auto curve = train::bifurcation_curve(in, bf_half_life);
            fs::create_directories(bf.out);
            train::write_curve(fs::path(bf.out) / "bifurcation.csv", curve);
            std::printf("rows %zu  onset step %ld (pooled over blocks)\n", curve.steps.size(),
                        train::bifurcation_onset(curve));
            const fs::path blocks = fs::path(bf.out) / "moe_block_routing.csv";
            if (bf_telemetry.empty() && fs::exists(blocks)) {
                const auto per_block = train::bifurcation_curve(blocks, bf_half_life);
                train::write_curve(fs::path(bf.out) / "bifurcation_blocks.csv", per_block);
                std::printf("per-block onset step %ld (every block split)", train::bifurcation_onset(per_block));
                for (const auto& [block, step] : train::bifurcation_onsets(per_block))
                    std::printf("  %.*s %ld", static_cast<int>(block.size() - 1), block.c_str(), step);
                std::printf("\n");
            }
            return kOk;
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kIo;
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kIo;
    } catch (const InvariantViolation& e) {
        std::fprintf(stderr, "invariant violated: %s\n", e.what());
        return kThreshold;
    }
    return kUsage;
}
