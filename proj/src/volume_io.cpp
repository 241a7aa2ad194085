#include "dsl/volume_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include "json.hpp"

namespace dsl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum class SampleType { UInt8, Int8, Int16, UInt16, Int32, Float32, Float64 };

struct RawVolume {
    Dims dims;
    Vec3 spacing{0, 0, 0};
    Vec3 origin{0, 0, 0};
    std::vector<double> values;  // slope/intercept already applied
    std::string tag;
};

int sample_bytes(SampleType t) {
    switch (t) {
        case SampleType::UInt8:
        case SampleType::Int8: return 1;
        case SampleType::Int16:
        case SampleType::UInt16: return 2;
        case SampleType::Int32:
        case SampleType::Float32: return 4;
        case SampleType::Float64: return 8;
    }
    return 0;
}

std::string dtype_name(SampleType t) {
    switch (t) {
        case SampleType::UInt8: return "uint8";
        case SampleType::Int8: return "int8";
        case SampleType::Int16: return "int16";
        case SampleType::UInt16: return "uint16";
        case SampleType::Int32: return "int32";
        case SampleType::Float32: return "float32";
        case SampleType::Float64: return "float64";
    }
    return "?";
}

SampleType dtype_from_name(const std::string& s) {
    for (auto t : {SampleType::UInt8, SampleType::Int8, SampleType::Int16, SampleType::UInt16, SampleType::Int32,
                   SampleType::Float32, SampleType::Float64})
        if (dtype_name(t) == s) return t;
    throw IoError("unreadable file: unsupported dtype '" + s + "'");
}

short nifti_code(SampleType t) {
    switch (t) {
        case SampleType::UInt8: return 2;
        case SampleType::Int16: return 4;
        case SampleType::Int32: return 8;
        case SampleType::Float32: return 16;
        case SampleType::Float64: return 64;
        case SampleType::Int8: return 256;
        case SampleType::UInt16: return 512;
    }
    return 0;
}

SampleType from_nifti_code(short code) {
    switch (code) {
        case 2: return SampleType::UInt8;
        case 4: return SampleType::Int16;
        case 8: return SampleType::Int32;
        case 16: return SampleType::Float32;
        case 64: return SampleType::Float64;
        case 256: return SampleType::Int8;
        case 512: return SampleType::UInt16;
        default: throw IoError("unreadable file: unsupported NIfTI datatype " + std::to_string(code));
    }
}

template <class T>
T byteswap_value(T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
    return v;
}

double decode_sample(const unsigned char* p, SampleType t, bool swap) {
    auto rd = [&](auto tag) {
        using T = decltype(tag);
        T v;
        std::memcpy(&v, p, sizeof(T));
        if (swap) v = byteswap_value(v);
        return static_cast<double>(v);
    };
    switch (t) {
        case SampleType::UInt8: return rd(std::uint8_t{});
        case SampleType::Int8: return rd(std::int8_t{});
        case SampleType::Int16: return rd(std::int16_t{});
        case SampleType::UInt16: return rd(std::uint16_t{});
        case SampleType::Int32: return rd(std::int32_t{});
        case SampleType::Float32: return rd(float{});
        case SampleType::Float64: return rd(double{});
    }
    return 0.0;
}

template <class T>
void put(std::vector<unsigned char>& buf, std::size_t off, T v) {
    if constexpr (std::endian::native == std::endian::big) v = byteswap_value(v);
    std::memcpy(buf.data() + off, &v, sizeof(T));
}

template <class T>
T get(const unsigned char* buf, std::size_t off, bool swap) {
    T v;
    std::memcpy(&v, buf + off, sizeof(T));
    return swap ? byteswap_value(v) : v;
}

std::vector<unsigned char> encode_samples(const std::vector<double>& values, SampleType t) {
    std::vector<unsigned char> out(values.size() * sample_bytes(t));
    for (std::size_t i = 0; i < values.size(); ++i) {
        const std::size_t off = i * sample_bytes(t);
        switch (t) {
            case SampleType::UInt8: put(out, off, static_cast<std::uint8_t>(values[i])); break;
            case SampleType::Int8: put(out, off, static_cast<std::int8_t>(values[i])); break;
            case SampleType::Int16: put(out, off, static_cast<std::int16_t>(values[i])); break;
            case SampleType::UInt16: put(out, off, static_cast<std::uint16_t>(values[i])); break;
            case SampleType::Int32: put(out, off, static_cast<std::int32_t>(values[i])); break;
            case SampleType::Float32: put(out, off, static_cast<float>(values[i])); break;
            case SampleType::Float64: put(out, off, values[i]); break;
        }
    }
    return out;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

constexpr int kNiftiHeaderSize = 348;
constexpr int kNiftiDataOffset = 352;

// gzread handles both compressed and plain files.
std::vector<unsigned char> read_all(const std::string& path) {
    if (!fs::exists(path)) throw IoError("unreadable file: '" + path + "' does not exist");
    gzFile f = gzopen(path.c_str(), "rb");
    if (f == nullptr) throw IoError("unreadable file: cannot open '" + path + "'");
    std::vector<unsigned char> out;
    unsigned char chunk[1 << 16];
    for (;;) {
        int n = gzread(f, chunk, sizeof(chunk));
        if (n < 0) {
            gzclose(f);
            throw IoError("unreadable file: corrupt stream in '" + path + "'");
        }
        if (n == 0) break;
        out.insert(out.end(), chunk, chunk + n);
    }
    gzclose(f);
    return out;
}

void write_all(const std::string& path, const std::vector<unsigned char>& bytes, bool compress) {
    if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
    if (compress) {
        // zlib's default gzip header carries mtime 0, so output is byte-stable.
        gzFile f = gzopen(path.c_str(), "wb6");
        if (f == nullptr) throw IoError("cannot write '" + path + "'");
        if (!bytes.empty() && gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size())) == 0) {
            gzclose(f);
            throw IoError("cannot write '" + path + "'");
        }
        gzclose(f);
        return;
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write '" + path + "'");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("cannot write '" + path + "'");
}

RawVolume read_nifti(const std::string& path) {
    auto bytes = read_all(path);
    if (bytes.size() < kNiftiHeaderSize) throw IoError("unreadable file: '" + path + "' is truncated (no header)");
    const unsigned char* h = bytes.data();
    bool swap = false;
    int hdr = get<std::int32_t>(h, 0, false);
    if (hdr != kNiftiHeaderSize) {
        if (byteswap_value(hdr) != kNiftiHeaderSize) throw IoError("unreadable file: '" + path + "' is not NIfTI-1");
        swap = true;
    }
    if (std::memcmp(h + 344, "n+1", 3) != 0) throw IoError("unreadable file: '" + path + "' is not single-file NIfTI");
    short dim[8];
    for (int i = 0; i < 8; ++i) dim[i] = get<std::int16_t>(h, 40 + 2 * i, swap);
    if (dim[0] < 3 || dim[1] <= 0 || dim[2] <= 0 || dim[3] <= 0)
        throw IoError("unreadable file: '" + path + "' is not a 3D volume");
    for (int i = 4; i <= dim[0] && i < 8; ++i)
        if (dim[i] > 1) throw IoError("unreadable file: '" + path + "' has more than 3 non-singleton dimensions");
    const SampleType type = from_nifti_code(get<std::int16_t>(h, 70, swap));
    float pixdim[8];
    for (int i = 0; i < 8; ++i) pixdim[i] = get<float>(h, 76 + 4 * i, swap);
    const float vox_offset = get<float>(h, 108, swap);
    float slope = get<float>(h, 112, swap);
    const float inter = get<float>(h, 116, swap);
    if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;

    RawVolume out;
    out.dims = {dim[3], dim[2], dim[1]};
    out.spacing = {std::fabs(pixdim[3]), std::fabs(pixdim[2]), std::fabs(pixdim[1])};
    for (double s : out.spacing)
        if (!(s > 0.0) || !std::isfinite(s)) throw IoError("missing spacing metadata in '" + path + "'");
    out.tag.assign(reinterpret_cast<const char*>(h + 148), strnlen(reinterpret_cast<const char*>(h + 148), 80));
    if (get<std::int16_t>(h, 252, swap) > 0)
        out.origin = {get<float>(h, 276, swap), get<float>(h, 272, swap), get<float>(h, 268, swap)};

    const std::size_t n = out.dims.size();
    const std::size_t off = static_cast<std::size_t>(vox_offset);
    const std::size_t need = off + n * sample_bytes(type);
    if (off < kNiftiHeaderSize || bytes.size() < need) throw IoError("unreadable file: '" + path + "' is truncated");
    out.values.resize(n);
    const double fslope = slope, finter = std::isfinite(inter) ? inter : 0.0f;
    for (std::size_t i = 0; i < n; ++i)
        out.values[i] = decode_sample(h + off + i * sample_bytes(type), type, swap) * fslope + finter;
    return out;
}

void write_nifti(const std::string& path, const Dims& d, const Vec3& spacing, const Vec3& origin,
                 const std::vector<double>& values, SampleType type, const std::string& tag, bool compress) {
    std::vector<unsigned char> buf(kNiftiDataOffset, 0);
    put<std::int32_t>(buf, 0, kNiftiHeaderSize);
    const std::int16_t dims[8] = {3, static_cast<std::int16_t>(d.x), static_cast<std::int16_t>(d.y),
                                  static_cast<std::int16_t>(d.z), 1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) put<std::int16_t>(buf, 40 + 2 * i, dims[i]);
    put<std::int16_t>(buf, 70, nifti_code(type));
    put<std::int16_t>(buf, 72, static_cast<std::int16_t>(8 * sample_bytes(type)));
    const float pix[8] = {1.0f, float(spacing[2]), float(spacing[1]), float(spacing[0]), 1.0f, 1.0f, 1.0f, 1.0f};
    for (int i = 0; i < 8; ++i) put<float>(buf, 76 + 4 * i, pix[i]);
    put<float>(buf, 108, float(kNiftiDataOffset));
    put<float>(buf, 112, 1.0f);
    put<float>(buf, 116, 0.0f);
    put<std::uint8_t>(buf, 123, 2);  // mm
    std::memcpy(buf.data() + 148, tag.data(), std::min<std::size_t>(tag.size(), 79));
    put<std::int16_t>(buf, 252, 1);  // qform: scanner, identity rotation
    put<float>(buf, 268, float(origin[2]));
    put<float>(buf, 272, float(origin[1]));
    put<float>(buf, 276, float(origin[0]));
    std::memcpy(buf.data() + 344, "n+1\0", 4);
    auto data = encode_samples(values, type);
    buf.insert(buf.end(), data.begin(), data.end());
    write_all(path, buf, compress);
}

fs::path sidecar_path(const std::string& raw_path) { return fs::path(raw_path).replace_extension(".json"); }

RawVolume read_raw(const std::string& path) {
    const auto side = sidecar_path(path);
    if (!fs::exists(side)) throw IoError("missing spacing metadata: sidecar '" + side.string() + "' not found");
    json meta;
    try {
        std::ifstream is(side);
        meta = json::parse(is);
    } catch (const std::exception& e) {
        throw IoError("unreadable file: sidecar '" + side.string() + "': " + e.what());
    }
    RawVolume out;
    try {
        auto shape = meta.at("shape").get<std::vector<int>>();
        if (shape.size() != 3) throw IoError("unreadable file: sidecar shape must have 3 entries");
        out.dims = {shape[0], shape[1], shape[2]};
        if (!meta.contains("spacing")) throw IoError("missing spacing metadata in '" + side.string() + "'");
        auto sp = meta.at("spacing").get<std::vector<double>>();
        if (sp.size() != 3) throw IoError("missing spacing metadata in '" + side.string() + "'");
        out.spacing = {sp[0], sp[1], sp[2]};
        out.tag = meta.value("config_hash", std::string());
        if (meta.contains("origin")) {
            auto o = meta.at("origin").get<std::vector<double>>();
            if (o.size() == 3) out.origin = {o[0], o[1], o[2]};
        }
    } catch (const json::exception& e) {
        throw IoError("unreadable file: sidecar '" + side.string() + "': " + e.what());
    }
    for (double s : out.spacing)
        if (!(s > 0.0)) throw IoError("missing spacing metadata in '" + side.string() + "'");
    const SampleType type = dtype_from_name(meta.value("dtype", std::string("int16")));
    auto bytes = read_all(path);
    const std::size_t n = out.dims.size();
    if (bytes.size() != n * sample_bytes(type))
        throw IoError("unreadable file: '" + path + "' has " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(n * sample_bytes(type)));
    const bool swap = std::endian::native == std::endian::big;
    out.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.values[i] = decode_sample(bytes.data() + i * sample_bytes(type), type, swap);
    return out;
}

void write_raw(const std::string& path, const Dims& d, const Vec3& spacing, const Vec3& origin,
               const std::vector<double>& values, SampleType type, const std::string& tag) {
    json meta;
    meta["shape"] = {d.z, d.y, d.x};
    meta["spacing"] = {spacing[0], spacing[1], spacing[2]};
    meta["origin"] = {origin[0], origin[1], origin[2]};
    meta["dtype"] = dtype_name(type);
    if (!tag.empty()) meta["config_hash"] = tag;
    write_all(path, encode_samples(values, type), false);
    std::ofstream os(sidecar_path(path));
    os << meta.dump(2) << "\n";
    if (!os) throw IoError("cannot write sidecar for '" + path + "'");
}

RawVolume read_any(const std::string& path) {
    return format_from_path(path) == VolumeFormat::Raw ? read_raw(path) : read_nifti(path);
}

void write_any(const std::string& path, const Dims& d, const Vec3& spacing, const Vec3& origin,
               const std::vector<double>& values, SampleType type, const std::string& tag) {
    switch (format_from_path(path)) {
        case VolumeFormat::Raw: write_raw(path, d, spacing, origin, values, type, tag); break;
        case VolumeFormat::Nifti: write_nifti(path, d, spacing, origin, values, type, tag, false); break;
        case VolumeFormat::NiftiGz: write_nifti(path, d, spacing, origin, values, type, tag, true); break;
    }
}

template <class T>
std::vector<double> as_doubles(const Grid<T>& g) {
    return std::vector<double>(g.data().begin(), g.data().end());
}

}  // namespace

VolumeFormat format_from_path(const std::string& path) {
    if (ends_with(path, ".nii.gz")) return VolumeFormat::NiftiGz;
    if (ends_with(path, ".nii")) return VolumeFormat::Nifti;
    if (ends_with(path, ".raw")) return VolumeFormat::Raw;
    throw IoError("unsupported volume format: '" + path + "' (expected .nii, .nii.gz or .raw)");
}

CtVolume load_volume(const std::string& path) {
    RawVolume raw = read_any(path);
    CtVolume v;
    v.spacing = raw.spacing;
    v.origin = raw.origin;
    v.hu = Grid<std::int16_t>(raw.dims);
    std::size_t bad = 0;
    double lo = 1e300, hi = -1e300;
    for (std::size_t i = 0; i < raw.values.size(); ++i) {
        const double h = std::round(raw.values[i]);
        lo = std::min(lo, h);
        hi = std::max(hi, h);
        if (h < kMinHu || h > kMaxHu || !std::isfinite(h)) {
            ++bad;
            continue;
        }
        v.hu[i] = static_cast<std::int16_t>(h);
    }
    if (bad > 0)
        throw IoError("HU out of range [-1024, 3071] in '" + path + "': " + std::to_string(bad) + " voxels, observed [" +
                      std::to_string(lo) + ", " + std::to_string(hi) + "]");
    return v;
}

LabelVolume load_labels(const std::string& path, Vec3* spacing) {
    RawVolume raw = read_any(path);
    LabelVolume out(raw.dims);
    for (std::size_t i = 0; i < raw.values.size(); ++i) {
        const double l = raw.values[i];
        if (l < 0 || l >= kNumLabels || l != std::floor(l))
            throw IoError("label volume '" + path + "' contains invalid label value " + std::to_string(l));
        out[i] = static_cast<std::uint8_t>(l);
    }
    if (spacing != nullptr) *spacing = raw.spacing;
    return out;
}

void save_volume(const std::string& path, const CtVolume& v, const std::string& tag) {
    v.validate();
    write_any(path, v.dims(), v.spacing, v.origin, as_doubles(v.hu), SampleType::Int16, tag);
}

void save_labels(const std::string& path, const LabelVolume& labels, const Vec3& spacing, const Vec3& origin,
                 const std::string& tag) {
    write_any(path, labels.dims(), spacing, origin, as_doubles(labels), SampleType::UInt8, tag);
}

void save_float_volume(const std::string& path, const Grid<float>& values, const Vec3& spacing, const Vec3& origin,
                       const std::string& tag) {
    write_any(path, values.dims(), spacing, origin, as_doubles(values), SampleType::Float32, tag);
}

Grid<float> load_float_volume(const std::string& path) {
    RawVolume raw = read_any(path);
    Grid<float> out(raw.dims);
    for (std::size_t i = 0; i < raw.values.size(); ++i) out[i] = static_cast<float>(raw.values[i]);
    return out;
}

std::string read_volume_tag(const std::string& path) { return read_any(path).tag; }

}  // namespace dsl
