#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace curlmoe::moe {

inline constexpr int kNumDomains = 2;  // A (open-channel analogue), B (porous analogue)

char domain_letter(int d);
/// 'A' -> 0, 'B' -> 1; throws ConfigError otherwise.
int domain_index(char letter);

/// Per-batch routing statistics. Every field is a plain sum so records merge
/// associatively.
struct RoutingRecord {
    int experts = 0;
    std::vector<std::vector<std::uint64_t>> counts;  // [domain][expert]
    std::vector<double> gate_sum;                    // [expert]
    std::vector<double> expert_sumsq;                // [expert], raw expert output
    std::vector<std::uint64_t> expert_entries;       // [expert]
    double shared_sumsq = 0.0;
    std::uint64_t shared_entries = 0;

    explicit RoutingRecord(int e = 0);

    void merge(const RoutingRecord& other);
    std::uint64_t tokens(int domain) const;
    std::uint64_t tokens() const;
    /// count[d][e] / tokens(d); all zeros when the domain saw no tokens.
    std::vector<double> fractions(int domain) const;
    /// Expert with the largest count for `domain`; ties resolve to the lowest index.
    int dominant_expert(int domain) const;
    double mean_gate() const;
    double expert_rms(int e) const;
    double shared_rms() const;
};

struct TelemetryRow {
    std::uint64_t step = 0;
    double loss_total = 0.0;
    double loss_recon = 0.0;
    double loss_lb = 0.0;
    RoutingRecord record;
};

/// Header: step,loss_total,loss_recon,loss_lb,frac_A_0..frac_B_{E-1},rms_shared,
/// rms_expert_0..rms_expert_{E-1},mean_gate.
std::string telemetry_header(int experts);
std::string telemetry_line(const TelemetryRow& row);

/// "%.9g"
std::string format_real(double v);

class TelemetryWriter {
public:
    TelemetryWriter(const std::filesystem::path& path, int experts);
    void write(const TelemetryRow& row);

private:
    std::ofstream out_;
    int experts_;
};

}  // namespace curlmoe::moe
