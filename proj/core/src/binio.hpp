#pragma once

// Little-endian byte packing shared by the tensor and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "curlmoe/dtype.hpp"
#include "curlmoe/errors.hpp"

namespace curlmoe::binio {

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    template <typename U>
    void uint(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    template <typename Real>
    void reals(std::span<const Real> xs) {
        using Bits = std::conditional_t<sizeof(Real) == 4, std::uint32_t, std::uint64_t>;
        buf_.reserve(buf_.size() + xs.size() * sizeof(Real));
        for (Real x : xs) uint(std::bit_cast<Bits>(x));
    }
    const std::vector<std::uint8_t>& buffer() const { return buf_; }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError(FormatErrorKind::OpenFailed, path.string());
        out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
        if (!out) throw FormatError(FormatErrorKind::WriteFailed, path.string());
    }

private:
    std::vector<std::uint8_t> buf_;
};

inline std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatErrorKind::OpenFailed, path.string());
    std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

class Reader {
public:
    Reader(std::span<const std::uint8_t> data, std::string origin, FormatErrorKind short_kind)
        : data_(data), origin_(std::move(origin)), short_kind_(short_kind) {}

    /// Errors raised for running out of bytes use this kind from now on.
    void set_short_kind(FormatErrorKind k) { short_kind_ = k; }

    std::size_t remaining() const { return data_.size() - pos_; }

    void need(std::size_t n) const {
        if (remaining() < n) throw FormatError(short_kind_, origin_);
    }
    std::span<const std::uint8_t> bytes(std::size_t n) {
        need(n);
        auto s = data_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    template <typename U>
    U uint() {
        auto b = bytes(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b[i]) << (8 * i));
        return v;
    }
    template <typename Real>
    void reals(std::span<Real> out) {
        using Bits = std::conditional_t<sizeof(Real) == 4, std::uint32_t, std::uint64_t>;
        need(out.size() * sizeof(Real));
        for (auto& x : out) x = std::bit_cast<Real>(uint<Bits>());
    }
    const std::string& origin() const { return origin_; }

private:
    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
    std::string origin_;
    FormatErrorKind short_kind_;
};

}  // namespace curlmoe::binio
