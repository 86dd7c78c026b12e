#include "msunlearn/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <type_traits>
#include <vector>

namespace msu::nifti {
namespace {

#pragma pack(push, 1)
struct Header {
    std::int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    std::int32_t extents;
    std::int16_t session_error;
    char regular;
    char dim_info;
    std::int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    std::int16_t intent_code;
    std::int16_t datatype;
    std::int16_t bitpix;
    std::int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    std::int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    std::int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    std::int16_t qform_code;
    std::int16_t sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Header) == 348);

constexpr std::int16_t kUInt8 = 2, kInt16 = 4, kInt32 = 8, kFloat32 = 16, kFloat64 = 64;
constexpr std::int16_t kInt8 = 256, kUInt16 = 512, kUInt32 = 768;

template <typename T>
T byteswap_value(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<unsigned char, sizeof(T)> b;
    std::memcpy(b.data(), &v, sizeof(T));
    std::reverse(b.begin(), b.end());
    std::memcpy(&v, b.data(), sizeof(T));
    return v;
}

template <typename T, std::size_t N>
void swap_array(T (&a)[N]) {
    for (auto& x : a) x = byteswap_value(x);
}

void swap_header(Header& h) {
    h.sizeof_hdr = byteswap_value(h.sizeof_hdr);
    swap_array(h.dim);
    h.datatype = byteswap_value(h.datatype);
    h.bitpix = byteswap_value(h.bitpix);
    swap_array(h.pixdim);
    h.vox_offset = byteswap_value(h.vox_offset);
    h.scl_slope = byteswap_value(h.scl_slope);
    h.scl_inter = byteswap_value(h.scl_inter);
}

struct GzCloser {
    void operator()(gzFile_s* f) const {
        if (f) gzclose(f);
    }
};
using GzFile = std::unique_ptr<gzFile_s, GzCloser>;

GzFile open_read(const std::filesystem::path& path) {
    // gzread transparently handles uncompressed input as well.
    GzFile f(gzopen(path.c_str(), "rb"));
    if (!f) throw NiftiError("cannot open " + path.string());
    return f;
}

void read_exact(gzFile_s* f, void* dst, std::size_t n, const std::filesystem::path& path) {
    auto* p = static_cast<unsigned char*>(dst);
    while (n > 0) {
        const auto chunk = static_cast<unsigned>(std::min<std::size_t>(n, 1u << 30));
        const int got = gzread(f, p, chunk);
        if (got <= 0) throw NiftiError("truncated NIfTI file " + path.string());
        p += got;
        n -= static_cast<std::size_t>(got);
    }
}

template <typename T>
void convert(const std::vector<unsigned char>& raw, bool swap, std::vector<float>& out) {
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) {
        T v;
        std::memcpy(&v, raw.data() + i * sizeof(T), sizeof(T));
        if (swap) v = byteswap_value(v);
        out[i] = static_cast<float>(v);
    }
}

Image read_raw(const std::filesystem::path& path, std::array<float, 3>* spacing) {
    auto f = open_read(path);
    Header h{};
    read_exact(f.get(), &h, sizeof(h), path);
    bool swap = false;
    if (h.sizeof_hdr != 348) {
        swap_header(h);
        swap = true;
        if (h.sizeof_hdr != 348) throw NiftiError(path.string() + " is not a NIfTI-1 file");
    }
    if (std::memcmp(h.magic, "n+1", 4) != 0) throw NiftiError(path.string() + ": only single-file n+1 NIfTI is supported");
    const int ndim = h.dim[0];
    if (ndim < 3 || ndim > 7) throw NiftiError(path.string() + ": unsupported dimensionality");
    for (int d = 4; d <= ndim; ++d) {
        if (h.dim[d] > 1) throw NiftiError(path.string() + ": only 3D scalar volumes are supported");
    }
    const Shape3 shape{h.dim[3], h.dim[2], h.dim[1]};
    if (shape[0] <= 0 || shape[1] <= 0 || shape[2] <= 0) throw NiftiError(path.string() + ": invalid dimensions");
    if (spacing) *spacing = {h.pixdim[1], h.pixdim[2], h.pixdim[3]};

    std::size_t bytes_per_voxel = 0;
    switch (h.datatype) {
        case kUInt8: case kInt8: bytes_per_voxel = 1; break;
        case kInt16: case kUInt16: bytes_per_voxel = 2; break;
        case kInt32: case kUInt32: case kFloat32: bytes_per_voxel = 4; break;
        case kFloat64: bytes_per_voxel = 8; break;
        default: throw NiftiError(path.string() + ": unsupported datatype " + std::to_string(h.datatype));
    }

    const auto offset = static_cast<long>(h.vox_offset);
    if (offset < static_cast<long>(sizeof(Header))) throw NiftiError(path.string() + ": bad vox_offset");
    std::vector<unsigned char> skip(static_cast<std::size_t>(offset) - sizeof(Header));
    if (!skip.empty()) read_exact(f.get(), skip.data(), skip.size(), path);

    Image img(shape);
    std::vector<unsigned char> raw(img.size() * bytes_per_voxel);
    read_exact(f.get(), raw.data(), raw.size(), path);
    switch (h.datatype) {
        case kUInt8: convert<std::uint8_t>(raw, false, img.data); break;
        case kInt8: convert<std::int8_t>(raw, false, img.data); break;
        case kInt16: convert<std::int16_t>(raw, swap, img.data); break;
        case kUInt16: convert<std::uint16_t>(raw, swap, img.data); break;
        case kInt32: convert<std::int32_t>(raw, swap, img.data); break;
        case kUInt32: convert<std::uint32_t>(raw, swap, img.data); break;
        case kFloat32: convert<float>(raw, swap, img.data); break;
        case kFloat64: convert<double>(raw, swap, img.data); break;
    }

    const float slope = h.scl_slope;
    const float inter = h.scl_inter;
    if (slope != 0.0f && std::isfinite(slope) && !(slope == 1.0f && inter == 0.0f)) {
        for (auto& v : img.data) v = v * slope + inter;
    }
    return img;
}

Header make_header(const Shape3& shape, std::int16_t datatype, std::int16_t bitpix, std::array<float, 3> spacing) {
    Header h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = 3;
    h.dim[1] = static_cast<std::int16_t>(shape[2]);
    h.dim[2] = static_cast<std::int16_t>(shape[1]);
    h.dim[3] = static_cast<std::int16_t>(shape[0]);
    for (int d = 4; d < 8; ++d) h.dim[d] = 1;
    h.datatype = datatype;
    h.bitpix = bitpix;
    h.pixdim[0] = 1.0f;
    h.pixdim[1] = spacing[0];
    h.pixdim[2] = spacing[1];
    h.pixdim[3] = spacing[2];
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.xyzt_units = 2;  // mm
    h.sform_code = 1;
    h.srow_x[0] = spacing[0];
    h.srow_y[1] = spacing[1];
    h.srow_z[2] = spacing[2];
    std::memcpy(h.magic, "n+1", 4);
    return h;
}

void write_raw(const std::filesystem::path& path, const Header& h, const void* data, std::size_t bytes) {
    if (std::endian::native != std::endian::little) throw NiftiError("big-endian hosts are not supported for writing");
    for (int d = 1; d <= 3; ++d) {
        if (h.dim[d] <= 0) throw NiftiError("volume extent does not fit a NIfTI-1 header");
    }
    const char ext[4] = {0, 0, 0, 0};
    const bool gz = path.extension() == ".gz";
    auto tmp = path;
    tmp += ".tmp";
    if (gz) {
        GzFile f(gzopen(tmp.c_str(), "wb6"));
        if (!f) throw NiftiError("cannot write " + path.string());
        bool ok = gzwrite(f.get(), &h, sizeof(h)) == static_cast<int>(sizeof(h));
        ok = ok && gzwrite(f.get(), ext, 4) == 4;
        ok = ok && gzwrite(f.get(), data, static_cast<unsigned>(bytes)) == static_cast<int>(bytes);
        if (!ok) throw NiftiError("write failed for " + path.string());
    } else {
        std::FILE* f = std::fopen(tmp.c_str(), "wb");
        if (!f) throw NiftiError("cannot write " + path.string());
        bool ok = std::fwrite(&h, sizeof(h), 1, f) == 1;
        ok = ok && std::fwrite(ext, 4, 1, f) == 1;
        ok = ok && std::fwrite(data, 1, bytes, f) == bytes;
        ok = (std::fclose(f) == 0) && ok;
        if (!ok) throw NiftiError("write failed for " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace

Image read_image(const std::filesystem::path& path, std::array<float, 3>* spacing) {
    return read_raw(path, spacing);
}

Mask read_mask(const std::filesystem::path& path) {
    const Image raw = read_raw(path, nullptr);
    Mask m(raw.shape);
    for (std::size_t i = 0; i < raw.size(); ++i) m.data[i] = raw.data[i] > 0.5f ? 1 : 0;
    return m;
}

void write_image(const std::filesystem::path& path, const Image& img, std::array<float, 3> spacing) {
    const Header h = make_header(img.shape, kFloat32, 32, spacing);
    write_raw(path, h, img.data.data(), img.size() * sizeof(float));
}

void write_mask(const std::filesystem::path& path, const Mask& mask, std::array<float, 3> spacing) {
    const Header h = make_header(mask.shape, kUInt8, 8, spacing);
    write_raw(path, h, mask.data.data(), mask.size());
}

bool has_nifti_extension(const std::filesystem::path& path) {
    const auto name = path.filename().string();
    auto ends_with = [&](const std::string& s) {
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    return ends_with(".nii") || ends_with(".nii.gz");
}

std::string stem(const std::filesystem::path& path) {
    auto name = path.filename().string();
    for (const std::string ext : {".nii.gz", ".nii"}) {
        if (name.size() > ext.size() && name.compare(name.size() - ext.size(), ext.size(), ext) == 0)
            return name.substr(0, name.size() - ext.size());
    }
    return name;
}

}  // namespace msu::nifti
