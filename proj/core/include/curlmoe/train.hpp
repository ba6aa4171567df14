#pragma once

// Two-phase training: the tokenizer first, then the MoE transport stack on the
// frozen tokenizer's latents. Everything is single-threaded and a pure function
// of (config, seed), so telemetry files are byte-reproducible.
//
// Files written under the output directory:
//   tokenizer.ckpt, tokenizer_telemetry.csv, tokenizer_eval.csv
//   moe.ckpt, moe_telemetry.csv, moe_block_routing.csv, moe_eval.csv, eval_report.csv

#include <array>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "curlmoe/config.hpp"
#include "curlmoe/dataset.hpp"
#include "curlmoe/moe.hpp"
#include "curlmoe/synthdata.hpp"
#include "curlmoe/tokenizer.hpp"

namespace curlmoe::train {

using Real = float;

struct TokenizerEvalPoint {
    int step = 0;
    std::array<double, 2> decoded_mse{};
    double max_divergence = 0.0;
};

struct TokenizerRun {
    std::vector<double> losses;  // training loss per step
    std::vector<TokenizerEvalPoint> history;
};

/// Trains the tokenizer on mixed train batches. Evaluates on the full
/// validation split at step 0 and every eval_interval steps; throws
/// InvariantViolation if any decoded validation field breaks the FP64
/// divergence bound.
TokenizerRun train_tokenizer(const RunConfig& cfg, const std::filesystem::path& data_dir,
                             const std::filesystem::path& out_dir, std::ostream* log = nullptr);

/// Latents of one split. Rows [s*T, (s+1)*T) belong to sample s.
struct LatentSet {
    nn::Matrix<Real> tokens;
    std::vector<int> sample_labels;  // per sample
    std::vector<std::size_t> records;  // manifest index per sample
    std::vector<int> token_labels;   // per token
    std::size_t tokens_per_sample = 0;

    std::size_t samples() const noexcept { return sample_labels.size(); }
    /// Gathers the rows of the given samples.
    nn::Matrix<Real> gather(const std::vector<std::size_t>& samples) const;
};

LatentSet encode_split(const tokenizer::Tokenizer<Real>& tok, const synth::Manifest& manifest,
                       const std::filesystem::path& root, synth::Split split);

struct EvalReport {
    int experts = 0;
    int blocks = 0;
    std::array<double, 2> latent_mse{};
    std::array<double, 2> decoded_mse{};
    std::array<std::vector<double>, 2> fractions;  // pooled over blocks
    std::array<int, 2> dominant{};
    std::vector<std::array<std::vector<double>, 2>> block_fractions;
    std::vector<std::array<int, 2>> block_dominant;
    double rms_shared = 0.0;
    std::vector<double> rms_expert;
    double mean_gate = 0.0;
    double routed_to_shared = 0.0;  // mean routed RMS / shared RMS
    double decoded_max_divergence = 0.0;

    /// Dominant experts differ between domains and each holds at least
    /// `threshold` of its domain's tokens, in every block.
    bool bifurcated(double threshold) const;

    /// Two-column CSV "field,value", values printed with 17 significant digits.
    void write_csv(const std::filesystem::path& path) const;
    static EvalReport read_csv(const std::filesystem::path& path);

    bool operator==(const EvalReport&) const = default;
};

/// One deterministic pass over the validation latents. With `decode`, also
/// decodes prediction and target of every sample for the decoded MSE.
EvalReport evaluate(const tokenizer::Tokenizer<Real>& tok, const moe::MoEModel<Real>& model,
                    const synth::TransportTargets& targets, const LatentSet& val, bool decode = true);

/// Loads checkpoints from `out_dir` and evaluates on the validation split of `data_dir`.
EvalReport evaluate(const RunConfig& cfg, const std::filesystem::path& data_dir,
                    const std::filesystem::path& out_dir);

struct MoEEvalPoint {
    int step = 0;
    std::array<double, 2> latent_mse{};
    std::array<int, 2> dominant{};
    std::array<double, 2> dominant_fraction{};
};

struct MoEOptions {
    /// Router starts collapsed onto expert 0 (zero weights, large bias).
    bool collapsed_router = false;
};

struct MoERun {
    std::vector<MoEEvalPoint> history;
    EvalReport report;
};

/// Trains the MoE stack on latents of the frozen tokenizer in `out_dir`.
MoERun train_moe(const RunConfig& cfg, const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                 const MoEOptions& opts = {}, std::ostream* log = nullptr);

/// True when, for both domains, final latent MSE <= ratio * step-0 MSE and the
/// final MSE is at most (1 + rise) times the MSE at the first evaluation of
/// the last `tail` fraction of steps.
struct ConvergenceCheck {
    std::array<double, 2> reduction{};  // final / initial
    std::array<double, 2> tail_rise{};  // final / window start
    std::array<double, 2> tail_peak{};  // max over window / window start; reported only
    bool passed = false;
};
ConvergenceCheck check_convergence(const std::vector<MoEEvalPoint>& history, double ratio = 0.05,
                                   double tail = 0.1, double rise = 0.1);

/// EMA of every routing-fraction column of a telemetry CSV: frac_d_e (pooled,
/// moe_telemetry.csv) or b<k>_frac_d_e (per block, moe_block_routing.csv).
/// `alpha` follows from the half-life.
struct BifurcationCurve {
    std::vector<std::string> columns;
    std::vector<std::uint64_t> steps;
    std::vector<std::vector<double>> values;  // [row][column]
};
double ema_alpha(double half_life);
BifurcationCurve bifurcation_curve(const std::filesystem::path& telemetry_csv, double half_life = 50.0);
void write_curve(const std::filesystem::path& path, const BifurcationCurve& curve);

/// First step from which, in every column group (pooled or per block), the
/// smoothed dominant experts of the two domains differ and both fractions stay
/// >= threshold; -1 if never.
long bifurcation_onset(const BifurcationCurve& curve, double threshold = 0.9);

/// The same onset for each column group separately, keyed by group prefix
/// ("" for pooled columns, "b0_", "b1_", ... per block).
std::map<std::string, long> bifurcation_onsets(const BifurcationCurve& curve, double threshold = 0.9);

}  // namespace curlmoe::train
