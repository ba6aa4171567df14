#include "curlmoe/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "curlmoe/tensor_io.hpp"

namespace curlmoe::synth {

const char* to_string(Split s) { return s == Split::Train ? "train" : "val"; }

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    throw FormatError(FormatErrorKind::Malformed, "unknown split: " + s);
}

Manifest Manifest::read(const std::filesystem::path& csv) {
    std::ifstream in(csv);
    if (!in) throw FormatError(FormatErrorKind::OpenFailed, csv.string());
    std::string line;
    if (!std::getline(in, line) || line != "path,domain,split")
        throw FormatError(FormatErrorKind::Malformed, csv.string() + ": expected header path,domain,split");
    Manifest m;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cols.push_back(cell);
        if (cols.size() != 3 || cols[1].size() != 1 || (cols[1][0] != 'A' && cols[1][0] != 'B'))
            throw FormatError(FormatErrorKind::Malformed, csv.string() + ":" + std::to_string(lineno));
        m.records.push_back({cols[0], cols[1][0], parse_split(cols[2])});
    }
    return m;
}

void Manifest::write(const std::filesystem::path& csv) const {
    std::ofstream out(csv, std::ios::trunc);
    if (!out) throw FormatError(FormatErrorKind::OpenFailed, csv.string());
    out << "path,domain,split\n";
    for (const auto& r : records) out << r.path << ',' << r.domain << ',' << to_string(r.split) << '\n';
    if (!out) throw FormatError(FormatErrorKind::WriteFailed, csv.string());
}

std::vector<std::size_t> Manifest::select(Split split, char domain) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (records[i].split == split && records[i].domain == domain) idx.push_back(i);
    return idx;
}

void Manifest::validate() const {
    const auto ta = count(Split::Train, 'A');
    const auto tb = count(Split::Train, 'B');
    if (ta != tb)
        throw FormatError(FormatErrorKind::Malformed,
                          "manifest train split is unbalanced: " + std::to_string(ta) + " A vs " + std::to_string(tb) + " B");
    if (count(Split::Val, 'A') == 0 || count(Split::Val, 'B') == 0)
        throw FormatError(FormatErrorKind::Malformed, "manifest validation split lacks a domain");
}

BalancedBatcher::BalancedBatcher(const Manifest& manifest, Split split, std::size_t batch, std::uint64_t seed)
    : a_(manifest.select(split, 'A')), b_(manifest.select(split, 'B')), batch_(batch), seed_(seed) {
    if (batch == 0 || batch % 2 != 0) throw ConfigError("batch size must be even and positive");
    if (a_.empty() || b_.empty()) throw ConfigError(std::string("empty ") + to_string(split) + " split");
    per_epoch_ = std::min(a_.size(), b_.size()) / (batch / 2);
    if (per_epoch_ == 0) throw ConfigError("batch size exceeds the available samples per domain");
}

std::vector<Batch> BalancedBatcher::epoch(std::uint64_t e) const {
    nn::Rng rng(derive_seed(seed_, e));
    std::vector<std::size_t> a = a_, b = b_;
    std::shuffle(a.begin(), a.end(), rng);
    std::shuffle(b.begin(), b.end(), rng);
    const std::size_t half = batch_ / 2;
    std::vector<Batch> out(per_epoch_);
    for (std::size_t i = 0; i < per_epoch_; ++i) {
        std::vector<std::pair<std::size_t, int>> items;
        for (std::size_t k = 0; k < half; ++k) {
            items.emplace_back(a[i * half + k], 0);
            items.emplace_back(b[i * half + k], 1);
        }
        std::shuffle(items.begin(), items.end(), rng);
        for (const auto& [r, l] : items) {
            out[i].records.push_back(r);
            out[i].labels.push_back(l);
        }
    }
    return out;
}

BatchStream::BatchStream(const Manifest& manifest, Split split, std::size_t batch, std::uint64_t seed)
    : batcher_(manifest, split, batch, seed) {}

Batch BatchStream::next() {
    if (pos_ == current_.size()) {
        current_ = batcher_.epoch(epoch_++);
        pos_ = 0;
    }
    return current_[pos_++];
}

fieldgrid::FaceField<float> load_sample(const std::filesystem::path& root, const ManifestRecord& r, double h) {
    return read_face_tensor<float>(root / r.path, h);
}

DataReport generate_dataset(const DataConfig& cfg, const std::filesystem::path& dir) {
    const GridSpec spec{cfg.n, cfg.h};
    spec.validate();
    if (cfg.train_per_domain < 1 || cfg.val_per_domain < 1)
        throw ConfigError("data: sample counts must be positive");
    std::filesystem::create_directories(dir / "train");
    std::filesystem::create_directories(dir / "val");

    DataReport report;
    Manifest manifest;
    std::vector<double> var_a, var_b;
    double ratio_sum = 0.0, solid_sum = 0.0;
    std::size_t b_samples = 0;

    for (Split split : {Split::Train, Split::Val}) {
        const int count = split == Split::Train ? cfg.train_per_domain : cfg.val_per_domain;
        for (int domain = 0; domain < 2; ++domain) {
            for (int i = 0; i < count; ++i) {
                const std::uint64_t tag = (static_cast<std::uint64_t>(domain) << 40) |
                                          (static_cast<std::uint64_t>(split == Split::Val) << 32) |
                                          static_cast<std::uint64_t>(i);
                const std::uint64_t sample_seed = derive_seed(cfg.seed, tag);
                fieldgrid::FaceField<double> u;
                if (domain == 0) {
                    RegimeAConfig a = cfg.regime_a;
                    a.seed = sample_seed;
                    u = gen_regime_a(a, spec);
                } else {
                    RegimeBConfig b = cfg.regime_b;
                    b.seed = sample_seed;
                    RegimeBSample s = gen_regime_b(b, spec);
                    const ConfinementStats st = confinement_stats(s.u, s.mask);
                    ratio_sum += st.fluid_speed > 0.0 ? st.solid_speed / st.fluid_speed : 0.0;
                    solid_sum += st.solid_fraction;
                    ++b_samples;
                    u = std::move(s.u);
                }
                const fieldgrid::FaceField<float> stored = u.cast<float>();
                report.max_divergence =
                    std::max(report.max_divergence, fieldgrid::divergence_norms(stored, spec).max_abs);
                auto vars = patch_variances(stored, cfg.patch);
                auto& sink = domain == 0 ? var_a : var_b;
                sink.insert(sink.end(), vars.begin(), vars.end());

                char name[64];
                std::snprintf(name, sizeof name, "%s/%c_%05d.shd", to_string(split), domain == 0 ? 'A' : 'B', i);
                write_tensor(dir / name, stored);
                manifest.records.push_back({name, domain == 0 ? 'A' : 'B', split});
                ++report.samples;
            }
        }
    }
    manifest.write(dir / "manifest.csv");

    const TransportTargets targets = TransportTargets::generate(cfg.channels, derive_seed(cfg.seed, 0x7A7A));
    targets.save(dir / "targets.ckpt");

    report.separability = threshold_separability(var_a, var_b);
    report.solid_fraction = b_samples ? solid_sum / static_cast<double>(b_samples) : 0.0;
    report.solid_speed_ratio = b_samples ? ratio_sum / static_cast<double>(b_samples) : 0.0;
    report.target_distance = targets.frobenius_distance();
    return report;
}

}  // namespace curlmoe::synth
