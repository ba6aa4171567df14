#include "curlmoe/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "curlmoe/errors.hpp"
#include "curlmoe/telemetry.hpp"

namespace curlmoe {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const char* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) throw ConfigError(key + ": cannot parse '" + v + "'");
    return out;
}

// g++ 11 lacks from_chars for double.
template <>
double parse_number<double>(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError(key + ": cannot parse '" + v + "'");
    return out;
}

struct Key {
    const char* section;
    const char* name;
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename T, typename Access>
Key make_key(const char* section, const char* name, Access access) {
    return Key{section, name,
               [access](RunConfig& c, const std::string& full, const std::string& v) {
                   access(c) = parse_number<T>(full, v);
               },
               [access](const RunConfig& c) {
                   if constexpr (std::is_floating_point_v<T>)
                       return moe::format_real(access(c));
                   else
                       return std::to_string(access(c));
               }};
}

#define CURLMOE_KEY(T, section, name, expr) \
    make_key<T>(section, name, [](auto& c) -> auto& { return expr; })

const std::vector<Key>& keys() {
    static const std::vector<Key> table = {
        CURLMOE_KEY(int, "data", "n", c.data.n),
        CURLMOE_KEY(double, "data", "h", c.data.h),
        CURLMOE_KEY(int, "data", "train_per_domain", c.data.train_per_domain),
        CURLMOE_KEY(int, "data", "val_per_domain", c.data.val_per_domain),
        CURLMOE_KEY(double, "data", "beta", c.data.regime_a.beta),
        CURLMOE_KEY(int, "data", "k_max", c.data.regime_a.k_max),
        CURLMOE_KEY(double, "data", "sigma", c.data.regime_a.sigma),
        CURLMOE_KEY(int, "data", "modes", c.data.regime_a.modes),
        CURLMOE_KEY(double, "data", "solid_fraction", c.data.regime_b.solid_fraction),
        CURLMOE_KEY(int, "data", "smoothing", c.data.regime_b.smoothing),
        CURLMOE_KEY(double, "data", "base_flow", c.data.regime_b.base_flow),
        CURLMOE_KEY(double, "data", "noise", c.data.regime_b.noise),
        CURLMOE_KEY(int, "data", "noise_k_max", c.data.regime_b.noise_k_max),
        CURLMOE_KEY(double, "data", "damping", c.data.regime_b.damping),
        CURLMOE_KEY(int, "tokenizer", "patch", c.tokenizer.patch),
        CURLMOE_KEY(int, "tokenizer", "channels", c.tokenizer.channels),
        CURLMOE_KEY(int, "tokenizer", "hidden", c.tokenizer.hidden),
        CURLMOE_KEY(int, "moe", "experts", c.moe.experts),
        CURLMOE_KEY(int, "moe", "hidden", c.moe.hidden),
        CURLMOE_KEY(int, "moe", "shared_hidden", c.moe.shared_hidden),
        CURLMOE_KEY(double, "moe", "lambda_lb", c.moe.lambda_lb),
        CURLMOE_KEY(int, "moe", "blocks", c.moe.blocks),
        CURLMOE_KEY(std::uint64_t, "train", "seed", c.train.seed),
        CURLMOE_KEY(int, "train", "tokenizer_steps", c.train.tokenizer.steps),
        CURLMOE_KEY(int, "train", "tokenizer_batch", c.train.tokenizer.batch),
        CURLMOE_KEY(double, "train", "tokenizer_lr", c.train.tokenizer.lr),
        CURLMOE_KEY(int, "train", "tokenizer_eval_interval", c.train.tokenizer.eval_interval),
        CURLMOE_KEY(int, "train", "moe_steps", c.train.moe.steps),
        CURLMOE_KEY(int, "train", "moe_batch", c.train.moe.batch),
        CURLMOE_KEY(double, "train", "moe_lr", c.train.moe.lr),
        CURLMOE_KEY(int, "train", "moe_eval_interval", c.train.moe.eval_interval),
    };
    return table;
}

#undef CURLMOE_KEY

}  // namespace

void PhaseConfig::validate(const char* phase) const {
    const std::string p(phase);
    if (steps < 0) throw ConfigError(p + ": steps must be >= 0");
    if (batch < 2 || batch % 2 != 0) throw ConfigError(p + ": batch must be even and >= 2");
    if (!(lr >= 0.0)) throw ConfigError(p + ": lr must be >= 0");
    if (eval_interval < 1) throw ConfigError(p + ": eval_interval must be positive");
    if (steps % eval_interval != 0)
        throw ConfigError(p + ": eval_interval " + std::to_string(eval_interval) + " does not divide steps " +
                          std::to_string(steps));
}

void TrainConfig::validate() const {
    tokenizer.validate("tokenizer");
    moe.validate("moe");
}

void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
    const std::string full = section + "." + key;
    for (const auto& k : keys()) {
        if (section == k.section && key == k.name) {
            k.set(*this, full, value);
            return;
        }
    }
    throw ConfigError("unknown config key: " + full);
}

void RunConfig::parse(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = origin + ":" + std::to_string(lineno) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + "unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section != "data" && section != "tokenizer" && section != "moe" && section != "train")
                throw ConfigError(where + "unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
        if (section.empty()) throw ConfigError(where + "key outside of a section");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            set(section, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
}

void RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError(FormatErrorKind::OpenFailed, path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    parse(ss.str(), path.string());
}

void RunConfig::resolve() {
    tokenizer.n = data.n;
    tokenizer.h = data.h;
    data.channels = tokenizer.channels;
    data.patch = tokenizer.patch;
    data.seed = train.seed;
    moe.channels = tokenizer.channels;
    tokenizer.validate();
    moe.validate();
    if (moe.experts < 2) throw ConfigError("moe: experts must be >= 2");
    train.validate();
    if (data.train_per_domain < 1 || data.val_per_domain < 1)
        throw ConfigError("data: sample counts must be positive");
    if (!(data.regime_b.solid_fraction > 0.0 && data.regime_b.solid_fraction < 1.0))
        throw ConfigError("data: solid_fraction must lie in (0, 1)");
}

std::string RunConfig::dump() const {
    std::string out;
    std::string section;
    for (const auto& k : keys()) {
        if (section != k.section) {
            if (!section.empty()) out += "\n";
            section = k.section;
            out += "[" + section + "]\n";
        }
        out += std::string(k.name) + " = " + k.get(*this) + "\n";
    }
    return out;
}

}  // namespace curlmoe
