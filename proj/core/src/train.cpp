#include "curlmoe/train.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "curlmoe/checkpoint.hpp"
#include "curlmoe/errors.hpp"
#include "curlmoe/telemetry.hpp"
#include "curlmoe/tensor_io.hpp"

namespace curlmoe::train {

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kTokenizerInit = 0x10;
constexpr std::uint64_t kTokenizerBatches = 0x11;
constexpr std::uint64_t kMoEInit = 0x20;
constexpr std::uint64_t kMoEBatches = 0x21;

constexpr double kDivergenceBound = 1e-10;

std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw FormatError(FormatErrorKind::OpenFailed, p.string());
    return out;
}

synth::Manifest load_manifest(const std::filesystem::path& data_dir) {
    synth::Manifest m = synth::Manifest::read(data_dir / "manifest.csv");
    m.validate();
    return m;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& s, const std::string& where) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != s.size()) throw FormatError(FormatErrorKind::Malformed, where + ": bad number '" + s + "'");
    return v;
}

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void load_tokenizer(tokenizer::Tokenizer<Real>& tok, const std::filesystem::path& out_dir) {
    nn::load_params(out_dir / "tokenizer.ckpt", tok.store(), false);
}

struct ValFields {
    std::vector<fieldgrid::FaceField<Real>> fields;
    std::vector<int> labels;
};

ValFields load_split(const synth::Manifest& m, const std::filesystem::path& root, synth::Split split, double h) {
    ValFields v;
    for (const auto& r : m.records) {
        if (r.split != split) continue;
        v.fields.push_back(synth::load_sample(root, r, h));
        v.labels.push_back(moe::domain_index(r.domain));
    }
    if (v.fields.empty()) throw ConfigError(std::string("empty ") + synth::to_string(split) + " split");
    return v;
}

TokenizerEvalPoint eval_tokenizer(const tokenizer::Tokenizer<Real>& tok, const ValFields& val, int step) {
    TokenizerEvalPoint p;
    p.step = step;
    std::array<double, 2> sum{};
    std::array<std::size_t, 2> count{};
    for (std::size_t s = 0; s < val.fields.size(); ++s) {
        const auto d = tok.decode(tok.encode(val.fields[s]));
        const int l = val.labels[s];
        sum[l] += tokenizer::tokenizer_loss(val.fields[s], d.u);
        ++count[l];
        p.max_divergence = std::max(p.max_divergence, d.verify().max_abs);
    }
    for (int d = 0; d < 2; ++d) p.decoded_mse[d] = count[d] ? sum[d] / static_cast<double>(count[d]) : 0.0;
    if (!(p.max_divergence <= kDivergenceBound))
        throw InvariantViolation("decoded divergence " + fmt17(p.max_divergence) + " exceeds bound at step " +
                                 std::to_string(step));
    return p;
}

MoEEvalPoint eval_point(const EvalReport& r, int step) {
    MoEEvalPoint p;
    p.step = step;
    p.latent_mse = r.latent_mse;
    p.dominant = r.dominant;
    for (int d = 0; d < 2; ++d) p.dominant_fraction[d] = r.fractions[d][static_cast<std::size_t>(r.dominant[d])];
    return p;
}

}  // namespace

TokenizerRun train_tokenizer(const RunConfig& cfg, const std::filesystem::path& data_dir,
                             const std::filesystem::path& out_dir, std::ostream* log) {
    const PhaseConfig& phase = cfg.train.tokenizer;
    const synth::Manifest manifest = load_manifest(data_dir);
    std::filesystem::create_directories(out_dir);

    tokenizer::Tokenizer<Real> tok(cfg.tokenizer);
    tok.init(synth::derive_seed(cfg.train.seed, kTokenizerInit));
    synth::BatchStream stream(manifest, synth::Split::Train, static_cast<std::size_t>(phase.batch),
                              synth::derive_seed(cfg.train.seed, kTokenizerBatches));
    const ValFields val = load_split(manifest, data_dir, synth::Split::Val, cfg.data.h);

    std::ofstream telemetry = open_out(out_dir / "tokenizer_telemetry.csv");
    std::ofstream evals = open_out(out_dir / "tokenizer_eval.csv");
    telemetry << "step,loss\n";
    evals << "step,decoded_mse_A,decoded_mse_B,max_div\n";

    TokenizerRun run;
    const nn::AdamConfig adam{phase.lr};
    auto evaluate_now = [&](int step) {
        const TokenizerEvalPoint p = eval_tokenizer(tok, val, step);
        run.history.push_back(p);
        evals << step << ',' << moe::format_real(p.decoded_mse[0]) << ',' << moe::format_real(p.decoded_mse[1])
              << ',' << moe::format_real(p.max_divergence) << '\n';
        nn::save_params(out_dir / "tokenizer.ckpt", tok.store());
        if (log)
            *log << "tokenizer step " << step << "  decoded_mse A " << moe::format_real(p.decoded_mse[0]) << "  B "
                 << moe::format_real(p.decoded_mse[1]) << "  max|div| " << moe::format_real(p.max_divergence)
                 << std::endl;
    };

    std::vector<fieldgrid::FaceField<Real>> batch;
    for (int step = 0; step < phase.steps; ++step) {
        if (step % phase.eval_interval == 0) evaluate_now(step);
        const synth::Batch b = stream.next();
        batch.clear();
        for (std::size_t r : b.records) batch.push_back(synth::load_sample(data_dir, manifest.records[r], cfg.data.h));
        tok.store().zero_grad();
        const double loss = tok.loss(batch, true);
        nn::adam_step(tok.store(), adam);
        run.losses.push_back(loss);
        telemetry << step << ',' << moe::format_real(loss) << '\n';
    }
    evaluate_now(phase.steps);
    if (!telemetry || !evals) throw FormatError(FormatErrorKind::WriteFailed, out_dir.string());
    return run;
}

nn::Matrix<Real> LatentSet::gather(const std::vector<std::size_t>& samples) const {
    const std::size_t T = tokens_per_sample;
    nn::Matrix<Real> out(samples.size() * T, tokens.cols);
    for (std::size_t i = 0; i < samples.size(); ++i)
        std::copy_n(tokens.row(samples[i] * T).data(), T * tokens.cols, out.row(i * T).data());
    return out;
}

LatentSet encode_split(const tokenizer::Tokenizer<Real>& tok, const synth::Manifest& manifest,
                       const std::filesystem::path& root, synth::Split split) {
    LatentSet set;
    const std::size_t T = tok.config().tokens();
    const auto C = static_cast<std::size_t>(tok.config().channels);
    set.tokens_per_sample = T;
    std::vector<Real> data;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        const auto& r = manifest.records[i];
        if (r.split != split) continue;
        const auto z = tok.encode(synth::load_sample(root, r, tok.config().h));
        data.insert(data.end(), z.tokens.data.begin(), z.tokens.data.end());
        const int l = moe::domain_index(r.domain);
        set.sample_labels.push_back(l);
        set.records.push_back(i);
        set.token_labels.insert(set.token_labels.end(), T, l);
    }
    if (set.sample_labels.empty()) throw ConfigError(std::string("empty ") + synth::to_string(split) + " split");
    set.tokens.rows = set.sample_labels.size() * T;
    set.tokens.cols = C;
    set.tokens.data = std::move(data);
    return set;
}

bool EvalReport::bifurcated(double threshold) const {
    if (block_dominant.empty()) return false;
    for (std::size_t b = 0; b < block_dominant.size(); ++b) {
        const auto& dom = block_dominant[b];
        if (dom[0] == dom[1]) return false;
        for (int d = 0; d < 2; ++d)
            if (!(block_fractions[b][d][static_cast<std::size_t>(dom[d])] >= threshold)) return false;
    }
    return true;
}

namespace {

// Every report field as (name, value) pairs in a fixed order; sizes must be set.
template <typename Report, typename Visit>
void visit_fields(Report& r, Visit&& visit) {
    auto visit_int = [&](const std::string& name, auto& v) {
        double x = static_cast<double>(v);
        visit(name, x);
        v = static_cast<std::remove_reference_t<decltype(v)>>(x);
    };
    for (int d = 0; d < 2; ++d) {
        const std::string L(1, moe::domain_letter(d));
        visit("latent_mse_" + L, r.latent_mse[d]);
        visit("decoded_mse_" + L, r.decoded_mse[d]);
        visit_int("dominant_" + L, r.dominant[d]);
        for (int e = 0; e < r.experts; ++e) visit("frac_" + L + "_" + std::to_string(e), r.fractions[d][e]);
    }
    visit("rms_shared", r.rms_shared);
    for (int e = 0; e < r.experts; ++e) visit("rms_expert_" + std::to_string(e), r.rms_expert[e]);
    visit("mean_gate", r.mean_gate);
    visit("routed_to_shared", r.routed_to_shared);
    visit("decoded_max_div", r.decoded_max_divergence);
    for (int b = 0; b < r.blocks; ++b) {
        const std::string B = "block" + std::to_string(b) + "_";
        for (int d = 0; d < 2; ++d) {
            const std::string L(1, moe::domain_letter(d));
            visit_int(B + "dominant_" + L, r.block_dominant[b][d]);
            for (int e = 0; e < r.experts; ++e)
                visit(B + "frac_" + L + "_" + std::to_string(e), r.block_fractions[b][d][e]);
        }
    }
}

void size_report(EvalReport& r) {
    for (auto& f : r.fractions) f.assign(static_cast<std::size_t>(r.experts), 0.0);
    r.rms_expert.assign(static_cast<std::size_t>(r.experts), 0.0);
    r.block_dominant.assign(static_cast<std::size_t>(r.blocks), {0, 0});
    r.block_fractions.assign(static_cast<std::size_t>(r.blocks), {});
    for (auto& bf : r.block_fractions)
        for (auto& f : bf) f.assign(static_cast<std::size_t>(r.experts), 0.0);
}

}  // namespace

void EvalReport::write_csv(const std::filesystem::path& path) const {
    std::ofstream out = open_out(path);
    out << "field,value\n";
    out << "experts," << experts << "\nblocks," << blocks << '\n';
    EvalReport copy = *this;
    visit_fields(copy, [&](const std::string& name, double& v) { out << name << ',' << fmt17(v) << '\n'; });
    if (!out) throw FormatError(FormatErrorKind::WriteFailed, path.string());
}

EvalReport EvalReport::read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError(FormatErrorKind::OpenFailed, path.string());
    std::string line;
    if (!std::getline(in, line) || line != "field,value")
        throw FormatError(FormatErrorKind::Malformed, path.string() + ": expected header field,value");
    std::map<std::string, double> values;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cols = split_csv(line);
        if (cols.size() != 2) throw FormatError(FormatErrorKind::Malformed, path.string() + ": " + line);
        values[cols[0]] = parse_double(cols[1], path.string());
    }
    auto take = [&](const std::string& name) {
        const auto it = values.find(name);
        if (it == values.end()) throw FormatError(FormatErrorKind::MissingEntry, path.string() + ": " + name);
        const double v = it->second;
        values.erase(it);
        return v;
    };
    EvalReport r;
    r.experts = static_cast<int>(take("experts"));
    r.blocks = static_cast<int>(take("blocks"));
    if (r.experts < 1 || r.blocks < 0) throw FormatError(FormatErrorKind::Malformed, path.string() + ": bad sizes");
    size_report(r);
    visit_fields(r, [&](const std::string& name, double& v) { v = take(name); });
    if (!values.empty())
        throw FormatError(FormatErrorKind::Malformed, path.string() + ": unexpected field " + values.begin()->first);
    return r;
}

EvalReport evaluate(const tokenizer::Tokenizer<Real>& tok, const moe::MoEModel<Real>& model,
                    const synth::TransportTargets& targets, const LatentSet& val, bool decode) {
    const auto& mc = model.config();
    if (val.samples() == 0) throw ConfigError("evaluate: empty validation split");
    for (int d = 0; d < 2; ++d)
        if (std::count(val.sample_labels.begin(), val.sample_labels.end(), d) == 0)
            throw ConfigError(std::string("evaluate: validation split has no domain ") + moe::domain_letter(d));

    moe::MoEForward<Real> fwd;
    model.forward(val.tokens, fwd);
    const nn::Matrix<Real> target = targets.apply(val.tokens, val.token_labels);

    EvalReport r;
    r.experts = mc.experts;
    r.blocks = mc.blocks;
    size_report(r);

    const std::size_t C = val.tokens.cols;
    std::array<double, 2> sq{};
    std::array<std::size_t, 2> n{};
    for (std::size_t t = 0; t < val.tokens.rows; ++t) {
        const int d = val.token_labels[t];
        for (std::size_t c = 0; c < C; ++c) {
            const double diff = static_cast<double>(fwd.output(t, c)) - static_cast<double>(target(t, c));
            sq[d] += diff * diff;
        }
        n[d] += C;
    }
    for (int d = 0; d < 2; ++d) r.latent_mse[d] = sq[d] / static_cast<double>(n[d]);

    moe::RoutingRecord pooled(mc.experts);
    for (int b = 0; b < mc.blocks; ++b) {
        moe::RoutingRecord rec(mc.experts);
        const auto& c = fwd.blocks[static_cast<std::size_t>(b)];
        moe::record_telemetry(c.decision, val.token_labels, c.shared_out, c.expert_out, rec);
        for (int d = 0; d < 2; ++d) {
            r.block_fractions[b][d] = rec.fractions(d);
            r.block_dominant[b][d] = rec.dominant_expert(d);
        }
        pooled.merge(rec);
    }
    double routed = 0.0;
    for (int d = 0; d < 2; ++d) {
        r.fractions[d] = pooled.fractions(d);
        r.dominant[d] = pooled.dominant_expert(d);
    }
    r.rms_shared = pooled.shared_rms();
    for (int e = 0; e < mc.experts; ++e) {
        r.rms_expert[e] = pooled.expert_rms(e);
        routed += r.rms_expert[e];
    }
    r.mean_gate = pooled.mean_gate();
    r.routed_to_shared = r.rms_shared > 0.0 ? routed / mc.experts / r.rms_shared : 0.0;

    if (decode) {
        const std::size_t T = val.tokens_per_sample;
        std::array<double, 2> sum{};
        std::array<std::size_t, 2> count{};
        tokenizer::LatentGrid<Real> zhat, ztar;
        zhat.side = ztar.side = tok.config().latent_side();
        for (std::size_t s = 0; s < val.samples(); ++s) {
            zhat.tokens.resize(T, C);
            ztar.tokens.resize(T, C);
            std::copy_n(fwd.output.row(s * T).data(), T * C, zhat.tokens.data.data());
            std::copy_n(target.row(s * T).data(), T * C, ztar.tokens.data.data());
            const auto uh = tok.decode(zhat);
            const auto ut = tok.decode(ztar);
            const int d = val.sample_labels[s];
            sum[d] += tokenizer::tokenizer_loss(ut.u, uh.u);
            ++count[d];
            r.decoded_max_divergence = std::max(r.decoded_max_divergence, uh.verify().max_abs);
        }
        for (int d = 0; d < 2; ++d) r.decoded_mse[d] = sum[d] / static_cast<double>(count[d]);
    }
    return r;
}

EvalReport evaluate(const RunConfig& cfg, const std::filesystem::path& data_dir,
                    const std::filesystem::path& out_dir) {
    const synth::Manifest manifest = load_manifest(data_dir);
    tokenizer::Tokenizer<Real> tok(cfg.tokenizer);
    load_tokenizer(tok, out_dir);
    moe::MoEModel<Real> model(cfg.moe);
    nn::load_params(out_dir / "moe.ckpt", model.store(), false);
    const synth::TransportTargets targets = synth::TransportTargets::load(data_dir / "targets.ckpt");
    if (targets.channels != cfg.tokenizer.channels)
        throw FormatError(FormatErrorKind::ShapeMismatch, "target maps do not match the latent width");
    const LatentSet val = encode_split(tok, manifest, data_dir, synth::Split::Val);
    return evaluate(tok, model, targets, val, true);
}

MoERun train_moe(const RunConfig& cfg, const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                 const MoEOptions& opts, std::ostream* log) {
    const PhaseConfig& phase = cfg.train.moe;
    const synth::Manifest manifest = load_manifest(data_dir);
    std::filesystem::create_directories(out_dir);

    tokenizer::Tokenizer<Real> tok(cfg.tokenizer);
    load_tokenizer(tok, out_dir);
    const synth::TransportTargets targets = synth::TransportTargets::load(data_dir / "targets.ckpt");
    if (targets.channels != cfg.tokenizer.channels)
        throw FormatError(FormatErrorKind::ShapeMismatch, "target maps do not match the latent width");

    const LatentSet train = encode_split(tok, manifest, data_dir, synth::Split::Train);
    const LatentSet val = encode_split(tok, manifest, data_dir, synth::Split::Val);
    std::map<std::size_t, std::size_t> sample_of;
    for (std::size_t s = 0; s < train.samples(); ++s) sample_of[train.records[s]] = s;

    // The tokenizer is frozen for this phase; keep a copy to prove it.
    std::vector<std::vector<Real>> frozen;
    for (const auto& e : tok.store().entries()) frozen.push_back(e.value);

    moe::MoEModel<Real> model(cfg.moe);
    model.init(synth::derive_seed(cfg.train.seed, kMoEInit));
    if (opts.collapsed_router) {
        for (int b = 0; b < cfg.moe.blocks; ++b) {
            const auto& router = model.block(b).router();
            auto& w = model.store()[router.weight()].value;
            auto& bias = model.store()[router.bias()].value;
            std::fill(w.begin(), w.end(), Real(0));
            std::fill(bias.begin(), bias.end(), Real(0));
            bias[0] = Real(4);
        }
    }

    synth::BatchStream stream(manifest, synth::Split::Train, static_cast<std::size_t>(phase.batch),
                              synth::derive_seed(cfg.train.seed, kMoEBatches));
    moe::TelemetryWriter telemetry(out_dir / "moe_telemetry.csv", cfg.moe.experts);
    // moe_telemetry.csv pools blocks; blocks may assign experts differently, so
    // keep the per-block fractions too.
    std::ofstream block_routing = open_out(out_dir / "moe_block_routing.csv");
    block_routing << "step";
    for (int b = 0; b < cfg.moe.blocks; ++b)
        for (int d = 0; d < 2; ++d)
            for (int e = 0; e < cfg.moe.experts; ++e)
                block_routing << ",b" << b << "_frac_" << moe::domain_letter(d) << '_' << e;
    block_routing << '\n';
    std::ofstream evals = open_out(out_dir / "moe_eval.csv");
    evals << "step,latent_mse_A,latent_mse_B,dominant_A,dominant_B,frac_A,frac_B\n";

    MoERun run;
    const nn::AdamConfig adam{phase.lr};
    auto evaluate_now = [&](int step, bool final) {
        const EvalReport r = evaluate(tok, model, targets, val, final);
        const MoEEvalPoint p = eval_point(r, step);
        run.history.push_back(p);
        if (final) run.report = r;
        evals << step << ',' << moe::format_real(p.latent_mse[0]) << ',' << moe::format_real(p.latent_mse[1]) << ','
              << p.dominant[0] << ',' << p.dominant[1] << ',' << moe::format_real(p.dominant_fraction[0]) << ','
              << moe::format_real(p.dominant_fraction[1]) << '\n';
        nn::save_params(out_dir / "moe.ckpt", model.store());
        if (log)
            *log << "moe step " << step << "  latent_mse A " << moe::format_real(p.latent_mse[0]) << "  B "
                 << moe::format_real(p.latent_mse[1]) << "  routing A->" << p.dominant[0] << " ("
                 << moe::format_real(p.dominant_fraction[0]) << ")  B->" << p.dominant[1] << " ("
                 << moe::format_real(p.dominant_fraction[1]) << ")" << std::endl;
    };

    std::vector<std::size_t> samples;
    std::vector<int> labels;
    std::vector<moe::RoutingRecord> per_block;
    for (int step = 0; step < phase.steps; ++step) {
        if (step % phase.eval_interval == 0) evaluate_now(step, false);
        const synth::Batch b = stream.next();
        samples.clear();
        labels.clear();
        for (std::size_t i = 0; i < b.records.size(); ++i) {
            samples.push_back(sample_of.at(b.records[i]));
            labels.insert(labels.end(), train.tokens_per_sample, b.labels[i]);
        }
        const nn::Matrix<Real> x = train.gather(samples);
        const nn::Matrix<Real> target = targets.apply(x, labels);
        model.store().zero_grad();
        const moe::MoELoss loss = model.loss(x, target, true, labels, &per_block);
        nn::adam_step(model.store(), adam);

        moe::TelemetryRow row;
        row.step = static_cast<std::uint64_t>(step);
        row.loss_total = loss.total;
        row.loss_recon = loss.recon;
        row.loss_lb = loss.load_balance;
        row.record = moe::RoutingRecord(cfg.moe.experts);
        for (const auto& rec : per_block) row.record.merge(rec);
        telemetry.write(row);
        block_routing << step;
        for (const auto& rec : per_block)
            for (int d = 0; d < 2; ++d)
                for (double f : rec.fractions(d)) block_routing << ',' << moe::format_real(f);
        block_routing << '\n';
    }
    evaluate_now(phase.steps, true);
    run.report.write_csv(out_dir / "eval_report.csv");
    if (!evals) throw FormatError(FormatErrorKind::WriteFailed, (out_dir / "moe_eval.csv").string());
    if (!block_routing)
        throw FormatError(FormatErrorKind::WriteFailed, (out_dir / "moe_block_routing.csv").string());

    for (std::size_t i = 0; i < frozen.size(); ++i)
        if (frozen[i] != tok.store().entries()[i].value)
            throw InvariantViolation("tokenizer parameters changed during MoE training");
    return run;
}

ConvergenceCheck check_convergence(const std::vector<MoEEvalPoint>& history, double ratio, double tail, double rise) {
    ConvergenceCheck c;
    if (history.size() < 2) return c;
    const int last = history.back().step;
    const double window_start = static_cast<double>(last) * (1.0 - tail);
    std::size_t w = 0;
    while (w < history.size() && static_cast<double>(history[w].step) < window_start) ++w;
    c.passed = true;
    for (int d = 0; d < 2; ++d) {
        const double first = history.front().latent_mse[d];
        c.reduction[d] = first > 0.0 ? history.back().latent_mse[d] / first : 0.0;
        const double base = history[w].latent_mse[d];
        double peak = base;
        for (std::size_t i = w; i < history.size(); ++i) peak = std::max(peak, history[i].latent_mse[d]);
        c.tail_rise[d] = base > 0.0 ? history.back().latent_mse[d] / base : 1.0;
        c.tail_peak[d] = base > 0.0 ? peak / base : 1.0;
        if (!(c.reduction[d] <= ratio) || !(c.tail_rise[d] <= 1.0 + rise)) c.passed = false;
    }
    return c;
}

double ema_alpha(double half_life) {
    if (!(half_life > 0.0)) throw ConfigError("half-life must be positive");
    return 1.0 - std::exp2(-1.0 / half_life);
}

namespace {

// "frac_A_0" -> "", "b1_frac_A_0" -> "b1_"; nullopt for anything else.
std::optional<std::string> routing_group(const std::string& column) {
    const auto at = column.find("frac_");
    if (at == std::string::npos) return std::nullopt;
    if (at == 0) return std::string();
    if (column[0] != 'b' || at < 3 || column[at - 1] != '_') return std::nullopt;
    for (std::size_t i = 1; i + 1 < at; ++i)
        if (!std::isdigit(static_cast<unsigned char>(column[i]))) return std::nullopt;
    return column.substr(0, at);
}

}  // namespace

BifurcationCurve bifurcation_curve(const std::filesystem::path& telemetry_csv, double half_life) {
    const double alpha = ema_alpha(half_life);
    std::ifstream in(telemetry_csv);
    if (!in) throw FormatError(FormatErrorKind::OpenFailed, telemetry_csv.string());
    std::string line;
    if (!std::getline(in, line)) throw FormatError(FormatErrorKind::TruncatedHeader, telemetry_csv.string());
    const auto header = split_csv(line);
    if (header.empty() || header[0] != "step")
        throw FormatError(FormatErrorKind::Malformed, telemetry_csv.string() + ": first column must be step");
    BifurcationCurve curve;
    std::vector<std::size_t> cols;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (routing_group(header[i])) {
            cols.push_back(i);
            curve.columns.push_back(header[i]);
        }
    }
    if (cols.empty()) throw FormatError(FormatErrorKind::Malformed, telemetry_csv.string() + ": no frac_ columns");
    std::size_t lineno = 1;
    std::vector<double> state;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto cells = split_csv(line);
        const std::string where = telemetry_csv.string() + ":" + std::to_string(lineno);
        if (cells.size() != header.size())
            throw FormatError(FormatErrorKind::Malformed, where + ": expected " + std::to_string(header.size()) +
                                                              " columns, got " + std::to_string(cells.size()));
        const double step = parse_double(cells[0], where);
        std::vector<double> x(cols.size());
        for (std::size_t j = 0; j < cols.size(); ++j) x[j] = parse_double(cells[cols[j]], where);
        if (state.empty())
            state = x;
        else
            for (std::size_t j = 0; j < x.size(); ++j) state[j] += alpha * (x[j] - state[j]);
        curve.steps.push_back(static_cast<std::uint64_t>(step));
        curve.values.push_back(state);
    }
    return curve;
}

void write_curve(const std::filesystem::path& path, const BifurcationCurve& curve) {
    std::ofstream out = open_out(path);
    out << "step";
    for (const auto& c : curve.columns) out << ",ema_" << c;
    out << '\n';
    for (std::size_t r = 0; r < curve.steps.size(); ++r) {
        out << curve.steps[r];
        for (double v : curve.values[r]) out << ',' << moe::format_real(v);
        out << '\n';
    }
    if (!out) throw FormatError(FormatErrorKind::WriteFailed, path.string());
}

namespace {

using ColumnGroups = std::map<std::string, std::array<std::vector<std::size_t>, 2>>;

// group -> per-domain column indices, in expert order
ColumnGroups column_groups(const BifurcationCurve& curve) {
    ColumnGroups groups;
    for (std::size_t j = 0; j < curve.columns.size(); ++j) {
        const auto g = routing_group(curve.columns[j]);
        if (!g) continue;
        const std::string rest = curve.columns[j].substr(g->size());
        if (rest.rfind("frac_A_", 0) == 0) groups[*g][0].push_back(j);
        if (rest.rfind("frac_B_", 0) == 0) groups[*g][1].push_back(j);
    }
    if (groups.empty())
        throw FormatError(FormatErrorKind::Malformed, "bifurcation curve lacks frac_A_/frac_B_ columns");
    for (const auto& [name, cols] : groups)
        if (cols[0].empty() || cols[0].size() != cols[1].size())
            throw FormatError(FormatErrorKind::Malformed,
                              "bifurcation curve lacks matching " + name + "frac_A_/" + name + "frac_B_ columns");
    return groups;
}

bool group_split(const std::array<std::vector<std::size_t>, 2>& cols, const std::vector<double>& row,
                 double threshold) {
    std::array<std::size_t, 2> dom{};
    for (int d = 0; d < 2; ++d) {
        for (std::size_t e = 1; e < cols[d].size(); ++e)
            if (row[cols[d][e]] > row[cols[d][dom[d]]]) dom[d] = e;
        if (!(row[cols[d][dom[d]]] >= threshold)) return false;
    }
    return dom[0] != dom[1];
}

template <typename Pred>
long last_run_start(const BifurcationCurve& curve, Pred split) {
    long onset = -1;
    for (std::size_t r = curve.steps.size(); r-- > 0;) {
        if (!split(curve.values[r])) break;
        onset = static_cast<long>(curve.steps[r]);
    }
    return onset;
}

}  // namespace

long bifurcation_onset(const BifurcationCurve& curve, double threshold) {
    const ColumnGroups groups = column_groups(curve);
    return last_run_start(curve, [&](const std::vector<double>& row) {
        for (const auto& [name, cols] : groups)
            if (!group_split(cols, row, threshold)) return false;
        return true;
    });
}

std::map<std::string, long> bifurcation_onsets(const BifurcationCurve& curve, double threshold) {
    std::map<std::string, long> out;
    for (const auto& [name, cols] : column_groups(curve))
        out[name] = last_run_start(curve, [&](const std::vector<double>& row) { return group_split(cols, row, threshold); });
    return out;
}

}  // namespace curlmoe::train
