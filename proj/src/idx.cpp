#include "csl/idx.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "csl/error.hpp"

namespace csl {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::uint32_t read_u32_be(std::span<const std::uint8_t> bytes, std::size_t offset) {
    if (offset + 4 > bytes.size())
        throw FormatError("IDX header truncated", bytes.size());
    return (std::uint32_t(bytes[offset]) << 24) | (std::uint32_t(bytes[offset + 1]) << 16) |
           (std::uint32_t(bytes[offset + 2]) << 8) | std::uint32_t(bytes[offset + 3]);
}

void append_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> bytes) {
    z_stream zs{};
    if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) throw IoError("zlib: inflateInit2 failed");
    std::vector<std::uint8_t> out;
    out.reserve(bytes.size() * 4);
    std::uint8_t buf[1 << 16];
    zs.next_in = const_cast<Bytef*>(bytes.data());
    zs.avail_in = static_cast<uInt>(bytes.size());
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        zs.next_out = buf;
        zs.avail_out = sizeof(buf);
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw FormatError("gzip stream is corrupt", zs.total_in);
        }
        out.insert(out.end(), buf, buf + (sizeof(buf) - zs.avail_out));
    }
    inflateEnd(&zs);
    return out;
}

}  // namespace

Tensor parse_idx(std::span<const std::uint8_t> bytes) {
    const std::uint32_t magic = read_u32_be(bytes, 0);
    std::size_t ndims;
    if (magic == kImagesMagic)
        ndims = 3;
    else if (magic == kLabelsMagic)
        ndims = 1;
    else
        throw FormatError("bad IDX magic 0x" + [magic] {
            char b[16];
            std::snprintf(b, sizeof(b), "%08x", magic);
            return std::string(b);
        }(), 0);

    std::vector<std::size_t> extents(ndims);
    std::size_t payload = 1;
    for (std::size_t i = 0; i < ndims; ++i) {
        extents[i] = read_u32_be(bytes, 4 + 4 * i);
        payload *= extents[i];
    }
    const std::size_t header = 4 + 4 * ndims;
    if (bytes.size() < header + payload)
        throw FormatError("IDX payload truncated, expected " + std::to_string(header + payload) + " bytes",
                          bytes.size());
    if (bytes.size() > header + payload)
        throw FormatError("IDX file has trailing bytes past the declared payload", header + payload);

    std::vector<double> data(payload);
    for (std::size_t i = 0; i < payload; ++i) data[i] = static_cast<double>(bytes[header + i]);

    if (magic == kImagesMagic) return Tensor({extents[0], 1, extents[1], extents[2]}, std::move(data));
    return Tensor({extents[0]}, std::move(data));
}

std::vector<std::uint8_t> serialize_idx_images(const Tensor& images) {
    Shape s = images.shape();
    if (s.size() == 4) {
        if (s[1] != 1) throw DimensionError("serialize_idx_images: IDX stores single-channel images");
        s = {s[0], s[2], s[3]};
    }
    if (s.size() != 3) throw DimensionError("serialize_idx_images: expected [N,1,H,W] or [N,H,W]");
    std::vector<std::uint8_t> out;
    out.reserve(16 + images.numel());
    append_u32_be(out, kImagesMagic);
    for (std::size_t d : s) append_u32_be(out, static_cast<std::uint32_t>(d));
    for (double v : images.data()) {
        if (v < 0.0 || v > 255.0) throw Error("serialize_idx_images: pixel value outside [0,255]");
        out.push_back(static_cast<std::uint8_t>(v + 0.5));
    }
    return out;
}

std::vector<std::uint8_t> serialize_idx_labels(std::span<const int> labels) {
    std::vector<std::uint8_t> out;
    out.reserve(8 + labels.size());
    append_u32_be(out, kLabelsMagic);
    append_u32_be(out, static_cast<std::uint32_t>(labels.size()));
    for (int v : labels) {
        if (v < 0 || v > 255) throw Error("serialize_idx_labels: label outside byte range");
        out.push_back(static_cast<std::uint8_t>(v));
    }
    return out;
}

Tensor load_idx(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) bytes = gunzip(bytes);
    return parse_idx(bytes);
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
}

}  // namespace csl
