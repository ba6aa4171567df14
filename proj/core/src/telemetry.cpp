#include "curlmoe/telemetry.hpp"

#include <cmath>
#include <cstdio>

#include "curlmoe/errors.hpp"

namespace curlmoe::moe {

char domain_letter(int d) { return static_cast<char>('A' + d); }

int domain_index(char letter) {
    if (letter == 'A') return 0;
    if (letter == 'B') return 1;
    throw ConfigError(std::string("unknown domain tag: ") + letter);
}

RoutingRecord::RoutingRecord(int e)
    : experts(e),
      counts(kNumDomains, std::vector<std::uint64_t>(static_cast<std::size_t>(e), 0)),
      gate_sum(static_cast<std::size_t>(e), 0.0),
      expert_sumsq(static_cast<std::size_t>(e), 0.0),
      expert_entries(static_cast<std::size_t>(e), 0) {}

void RoutingRecord::merge(const RoutingRecord& o) {
    if (o.experts != experts) throw ShapeError("RoutingRecord::merge: expert count mismatch");
    for (int d = 0; d < kNumDomains; ++d)
        for (int e = 0; e < experts; ++e) counts[d][e] += o.counts[d][e];
    for (int e = 0; e < experts; ++e) {
        gate_sum[e] += o.gate_sum[e];
        expert_sumsq[e] += o.expert_sumsq[e];
        expert_entries[e] += o.expert_entries[e];
    }
    shared_sumsq += o.shared_sumsq;
    shared_entries += o.shared_entries;
}

std::uint64_t RoutingRecord::tokens(int domain) const {
    std::uint64_t s = 0;
    for (auto c : counts.at(domain)) s += c;
    return s;
}

std::uint64_t RoutingRecord::tokens() const {
    std::uint64_t s = 0;
    for (int d = 0; d < kNumDomains; ++d) s += tokens(d);
    return s;
}

std::vector<double> RoutingRecord::fractions(int domain) const {
    std::vector<double> f(static_cast<std::size_t>(experts), 0.0);
    const auto total = tokens(domain);
    if (total == 0) return f;
    for (int e = 0; e < experts; ++e)
        f[e] = static_cast<double>(counts[domain][e]) / static_cast<double>(total);
    return f;
}

int RoutingRecord::dominant_expert(int domain) const {
    int best = 0;
    for (int e = 1; e < experts; ++e)
        if (counts[domain][e] > counts[domain][best]) best = e;
    return best;
}

double RoutingRecord::mean_gate() const {
    const auto t = tokens();
    if (t == 0) return 0.0;
    double s = 0.0;
    for (double g : gate_sum) s += g;
    return s / static_cast<double>(t);
}

double RoutingRecord::expert_rms(int e) const {
    if (expert_entries[e] == 0) return 0.0;
    return std::sqrt(expert_sumsq[e] / static_cast<double>(expert_entries[e]));
}

double RoutingRecord::shared_rms() const {
    if (shared_entries == 0) return 0.0;
    return std::sqrt(shared_sumsq / static_cast<double>(shared_entries));
}

std::string format_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::string telemetry_header(int experts) {
    std::string h = "step,loss_total,loss_recon,loss_lb";
    for (int d = 0; d < kNumDomains; ++d)
        for (int e = 0; e < experts; ++e) h += std::string(",frac_") + domain_letter(d) + "_" + std::to_string(e);
    h += ",rms_shared";
    for (int e = 0; e < experts; ++e) h += ",rms_expert_" + std::to_string(e);
    h += ",mean_gate";
    return h;
}

std::string telemetry_line(const TelemetryRow& row) {
    const auto& r = row.record;
    std::string s = std::to_string(row.step);
    for (double v : {row.loss_total, row.loss_recon, row.loss_lb}) s += "," + format_real(v);
    for (int d = 0; d < kNumDomains; ++d)
        for (double f : r.fractions(d)) s += "," + format_real(f);
    s += "," + format_real(r.shared_rms());
    for (int e = 0; e < r.experts; ++e) s += "," + format_real(r.expert_rms(e));
    s += "," + format_real(r.mean_gate());
    return s;
}

TelemetryWriter::TelemetryWriter(const std::filesystem::path& path, int experts)
    : out_(path, std::ios::trunc), experts_(experts) {
    if (!out_) throw FormatError(FormatErrorKind::OpenFailed, path.string());
    out_ << telemetry_header(experts_) << '\n';
}

void TelemetryWriter::write(const TelemetryRow& row) {
    if (row.record.experts != experts_) throw ShapeError("TelemetryWriter: expert count mismatch");
    out_ << telemetry_line(row) << '\n';
    if (!out_) throw FormatError(FormatErrorKind::WriteFailed, "telemetry");
}

}  // namespace curlmoe::moe
