#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "curlmoe/fieldgrid.hpp"
#include "curlmoe/nn.hpp"

namespace testing {

using curlmoe::fieldgrid::CellField;
using curlmoe::fieldgrid::EdgeField;
using curlmoe::fieldgrid::FaceField;
using curlmoe::fieldgrid::GridSpec;

template <typename Field>
Field random_vector(const GridSpec& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Field f(s);
    for (auto& c : f.comp)
        for (auto& v : c) v = static_cast<typename Field::value_type>(u(rng));
    return f;
}

template <typename Real>
CellField<Real> random_cell(const GridSpec& s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    CellField<Real> f(s);
    for (auto& v : f.values) v = static_cast<Real>(u(rng));
    return f;
}

template <typename Real>
void fill_random(curlmoe::nn::Matrix<Real>& m, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    for (auto& v : m.data) v = static_cast<Real>(n(rng));
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("curlmoe_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

}  // namespace testing
