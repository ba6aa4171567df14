#include "curlmoe/checkpoint.hpp"

#include <cstring>

#include "binio.hpp"

namespace curlmoe::nn {

std::size_t CheckpointRecord::count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

const CheckpointRecord* Checkpoint::find(const std::string& name) const {
    for (const auto& r : records)
        if (r.name == name) return &r;
    return nullptr;
}

namespace {

bool is_optimizer_record(const std::string& name) {
    return name.size() > 2 && (name.ends_with("/m") || name.ends_with("/v"));
}

void put_record(binio::Writer& w, const CheckpointRecord& r) {
    if (r.name.size() > 0xFFFF) throw FormatError(FormatErrorKind::Malformed, "record name too long");
    if (r.values.size() != r.count()) throw FormatError(FormatErrorKind::ShapeMismatch, r.name);
    w.uint<std::uint16_t>(static_cast<std::uint16_t>(r.name.size()));
    w.bytes(r.name.data(), r.name.size());
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) w.uint<std::uint32_t>(d);
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(r.dtype));
    if (r.dtype == DType::F64) {
        w.reals<double>(r.values);
    } else {
        std::vector<float> narrow(r.values.begin(), r.values.end());
        w.reals<float>(narrow);
    }
}

}  // namespace

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    const auto data = binio::slurp(path);
    binio::Reader rd(data, path.string(), FormatErrorKind::TruncatedHeader);
    rd.need(4 + 4 + 8);
    const auto magic = rd.bytes(4);
    if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0)
        throw FormatError(FormatErrorKind::BadMagic, path.string());
    const auto version = rd.uint<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw FormatError(FormatErrorKind::UnsupportedVersion, path.string() + " version " + std::to_string(version));

    rd.set_short_kind(FormatErrorKind::TruncatedData);
    Checkpoint ckpt;
    while (rd.remaining() > 8) {
        CheckpointRecord r;
        const auto len = rd.uint<std::uint16_t>();
        const auto name = rd.bytes(len);
        r.name.assign(name.begin(), name.end());
        const auto rank = rd.uint<std::uint32_t>();
        if (rank > 8) throw FormatError(FormatErrorKind::Malformed, "implausible rank in " + r.name);
        for (std::uint32_t i = 0; i < rank; ++i) r.dims.push_back(rd.uint<std::uint32_t>());
        const auto code = rd.uint<std::uint8_t>();
        if (code > 1) throw FormatError(FormatErrorKind::DtypeMismatch, "unknown dtype code in " + r.name);
        r.dtype = static_cast<DType>(code);
        const std::size_t n = r.count();
        r.values.resize(n);
        if (r.dtype == DType::F64) {
            rd.reals<double>(r.values);
        } else {
            std::vector<float> tmp(n);
            rd.reals<float>(tmp);
            r.values.assign(tmp.begin(), tmp.end());
        }
        ckpt.records.push_back(std::move(r));
    }
    if (rd.remaining() != 8) throw FormatError(FormatErrorKind::TruncatedData, path.string());
    ckpt.step = rd.uint<std::uint64_t>();
    return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    binio::Writer w;
    w.bytes(kCheckpointMagic, 4);
    w.uint<std::uint32_t>(kCheckpointVersion);
    for (const auto& r : ckpt.records) put_record(w, r);
    w.uint<std::uint64_t>(ckpt.step);
    w.save(path);
}

template <typename Real>
void save_params(const std::filesystem::path& path, const ParamStore<Real>& store) {
    Checkpoint ckpt;
    const auto make = [](const std::string& name, const std::vector<std::uint32_t>& dims,
                         const std::vector<Real>& xs) {
        CheckpointRecord r;
        r.name = name;
        r.dims = dims;
        r.dtype = dtype_of<Real>();
        r.values.assign(xs.begin(), xs.end());
        return r;
    };
    for (const auto& e : store.entries()) ckpt.records.push_back(make(e.name, e.shape, e.value));
    for (const auto& e : store.entries()) {
        ckpt.records.push_back(make(e.name + "/m", e.shape, e.m));
        ckpt.records.push_back(make(e.name + "/v", e.shape, e.v));
    }
    ckpt.step = store.step();
    write_checkpoint(path, ckpt);
}

template <typename Real>
void load_params(const std::filesystem::path& path, ParamStore<Real>& store, bool with_optimizer) {
    const Checkpoint ckpt = read_checkpoint(path);
    for (const auto& r : ckpt.records) {
        if (!is_optimizer_record(r.name) && !store.find(r.name))
            throw FormatError(FormatErrorKind::ShapeMismatch,
                              path.string() + ": unexpected parameter " + r.name);
    }
    const auto fetch = [&](const std::string& name, const std::vector<std::uint32_t>& shape,
                           std::vector<Real>& dst) {
        const CheckpointRecord* r = ckpt.find(name);
        if (r == nullptr) throw FormatError(FormatErrorKind::MissingEntry, path.string() + ": " + name);
        if (r->dtype != dtype_of<Real>()) throw FormatError(FormatErrorKind::DtypeMismatch, name);
        if (r->dims != shape) throw FormatError(FormatErrorKind::ShapeMismatch, name);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(r->values[i]);
    };
    for (auto& e : store.entries()) {
        fetch(e.name, e.shape, e.value);
        if (with_optimizer) {
            fetch(e.name + "/m", e.shape, e.m);
            fetch(e.name + "/v", e.shape, e.v);
        }
    }
    if (with_optimizer) store.set_step(ckpt.step);
}

template void save_params(const std::filesystem::path&, const ParamStore<float>&);
template void save_params(const std::filesystem::path&, const ParamStore<double>&);
template void load_params(const std::filesystem::path&, ParamStore<float>&, bool);
template void load_params(const std::filesystem::path&, ParamStore<double>&, bool);

}  // namespace curlmoe::nn
