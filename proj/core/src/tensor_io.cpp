#include "curlmoe/tensor_io.hpp"

#include <cstring>
#include <string>

#include "binio.hpp"

namespace curlmoe {

const char* to_string(FormatErrorKind kind) {
    switch (kind) {
        case FormatErrorKind::OpenFailed: return "cannot open file";
        case FormatErrorKind::WriteFailed: return "write failed";
        case FormatErrorKind::TruncatedHeader: return "truncated header";
        case FormatErrorKind::BadMagic: return "bad magic";
        case FormatErrorKind::UnsupportedVersion: return "unsupported version";
        case FormatErrorKind::TruncatedData: return "truncated data";
        case FormatErrorKind::DtypeMismatch: return "dtype mismatch";
        case FormatErrorKind::ShapeMismatch: return "shape mismatch";
        case FormatErrorKind::MissingEntry: return "missing entry";
        case FormatErrorKind::Malformed: return "malformed";
    }
    return "unknown format error";
}

}  // namespace curlmoe

namespace curlmoe::synth {

namespace {

TensorHeader parse_header(binio::Reader& rd) {
    rd.need(4);
    const auto magic = rd.bytes(4);
    if (std::memcmp(magic.data(), kTensorMagic, 4) != 0)
        throw FormatError(FormatErrorKind::BadMagic, rd.origin());
    const auto version = rd.uint<std::uint32_t>();
    if (version != kTensorVersion)
        throw FormatError(FormatErrorKind::UnsupportedVersion, rd.origin());
    TensorHeader h;
    const auto rank = rd.uint<std::uint32_t>();
    if (rank > 8) throw FormatError(FormatErrorKind::Malformed, rd.origin() + ": implausible rank");
    for (std::uint32_t i = 0; i < rank; ++i) h.dims.push_back(rd.uint<std::uint32_t>());
    const auto code = rd.uint<std::uint8_t>();
    if (code > 1) throw FormatError(FormatErrorKind::DtypeMismatch, rd.origin() + ": unknown dtype code");
    h.dtype = static_cast<DType>(code);
    h.components = rd.uint<std::uint8_t>();
    return h;
}

template <typename Real>
void write_components(const std::filesystem::path& path, int n,
                      const std::vector<const std::vector<Real>*>& comps) {
    binio::Writer w;
    w.bytes(kTensorMagic, 4);
    w.uint<std::uint32_t>(kTensorVersion);
    w.uint<std::uint32_t>(3);
    for (int i = 0; i < 3; ++i) w.uint<std::uint32_t>(static_cast<std::uint32_t>(n));
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(dtype_of<Real>()));
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(comps.size()));
    for (const auto* c : comps) w.reals<Real>(*c);
    w.save(path);
}

template <typename Real>
std::vector<std::vector<Real>> read_components(const std::filesystem::path& path,
                                               std::uint8_t expected_components, int& n_out) {
    const auto data = binio::slurp(path);
    binio::Reader rd(data, path.string(), FormatErrorKind::TruncatedHeader);
    const TensorHeader h = parse_header(rd);
    rd.set_short_kind(FormatErrorKind::TruncatedData);
    if (h.dtype != dtype_of<Real>()) throw FormatError(FormatErrorKind::DtypeMismatch, path.string());
    if (h.components != expected_components)
        throw FormatError(FormatErrorKind::ShapeMismatch,
                          path.string() + ": expected " + std::to_string(expected_components) + " components");
    if (h.dims.size() != 3 || h.dims[0] != h.dims[1] || h.dims[1] != h.dims[2])
        throw FormatError(FormatErrorKind::ShapeMismatch, path.string() + ": expected an n^3 grid");
    n_out = static_cast<int>(h.dims[0]);
    const std::size_t count = static_cast<std::size_t>(h.dims[0]) * h.dims[1] * h.dims[2];
    std::vector<std::vector<Real>> out(h.components, std::vector<Real>(count));
    for (auto& c : out) rd.reals<Real>(c);
    if (rd.remaining() != 0) throw FormatError(FormatErrorKind::Malformed, path.string() + ": trailing bytes");
    return out;
}

}  // namespace

TensorHeader read_tensor_header(const std::filesystem::path& path) {
    const auto data = binio::slurp(path);
    binio::Reader rd(data, path.string(), FormatErrorKind::TruncatedHeader);
    return parse_header(rd);
}

template <typename Real>
void write_tensor(const std::filesystem::path& path, const fieldgrid::FaceField<Real>& u) {
    write_components<Real>(path, u.spec.n, {&u.comp[0], &u.comp[1], &u.comp[2]});
}

template <typename Real>
void write_tensor(const std::filesystem::path& path, const fieldgrid::CellField<Real>& p) {
    write_components<Real>(path, p.spec.n, {&p.values});
}

template <typename Real>
fieldgrid::FaceField<Real> read_face_tensor(const std::filesystem::path& path, double h) {
    int n = 0;
    auto comps = read_components<Real>(path, 3, n);
    fieldgrid::FaceField<Real> u;
    u.spec = fieldgrid::GridSpec{n, h};
    u.spec.validate();
    for (int c = 0; c < 3; ++c) u.comp[c] = std::move(comps[c]);
    return u;
}

template <typename Real>
fieldgrid::CellField<Real> read_cell_tensor(const std::filesystem::path& path, double h) {
    int n = 0;
    auto comps = read_components<Real>(path, 1, n);
    fieldgrid::CellField<Real> p;
    p.spec = fieldgrid::GridSpec{n, h};
    p.spec.validate();
    p.values = std::move(comps[0]);
    return p;
}

template void write_tensor(const std::filesystem::path&, const fieldgrid::FaceField<float>&);
template void write_tensor(const std::filesystem::path&, const fieldgrid::FaceField<double>&);
template void write_tensor(const std::filesystem::path&, const fieldgrid::CellField<float>&);
template void write_tensor(const std::filesystem::path&, const fieldgrid::CellField<double>&);
template fieldgrid::FaceField<float> read_face_tensor(const std::filesystem::path&, double);
template fieldgrid::FaceField<double> read_face_tensor(const std::filesystem::path&, double);
template fieldgrid::CellField<float> read_cell_tensor(const std::filesystem::path&, double);
template fieldgrid::CellField<double> read_cell_tensor(const std::filesystem::path&, double);

}  // namespace curlmoe::synth
