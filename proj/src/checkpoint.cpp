#include "csl/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "csl/error.hpp"

namespace csl {

namespace {

constexpr char kMagic[8] = {'C', 'S', 'L', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::ofstream& out, std::uint32_t v) {
    std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                         static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ofstream& out, std::uint64_t v) {
    std::uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::ifstream& in) {
    std::uint8_t b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("checkpoint truncated while reading u32");
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

std::uint64_t get_u64(std::ifstream& in) {
    std::uint8_t b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw FormatError("checkpoint truncated while reading u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t.tensor;
    return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(kMagic, 8);
    put_u32(out, static_cast<std::uint32_t>(ckpt.descriptor.size()));
    out.write(ckpt.descriptor.data(), static_cast<std::streamsize>(ckpt.descriptor.size()));
    put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, tensor] : ckpt.tensors) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(out, static_cast<std::uint32_t>(tensor.ndim()));
        for (std::size_t d : tensor.shape()) put_u64(out, d);
        for (double v : tensor.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    if (!out) throw IoError("short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw FormatError(path.string() + " is not a checkpoint file", 0);

    Checkpoint ckpt;
    const std::uint32_t desc_len = get_u32(in);
    ckpt.descriptor.resize(desc_len);
    in.read(ckpt.descriptor.data(), desc_len);
    const std::uint32_t count = get_u32(in);
    ckpt.tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = get_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const std::uint32_t rank = get_u32(in);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(get_u64(in));
        std::vector<double> data(shape_numel(shape));
        for (double& v : data) v = std::bit_cast<double>(get_u64(in));
        if (!in) throw FormatError("checkpoint truncated inside tensor '" + name + "'");
        ckpt.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
    }
    return ckpt;
}

std::string descriptor_get(const std::string& descriptor, const std::string& key) {
    std::istringstream in(descriptor);
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string k = line.substr(0, eq);
        k.erase(0, k.find_first_not_of(" \t"));
        k.erase(k.find_last_not_of(" \t") + 1);
        if (k != key) continue;
        std::string v = line.substr(eq + 1);
        v.erase(0, v.find_first_not_of(" \t"));
        v.erase(v.find_last_not_of(" \t\r") + 1);
        return v;
    }
    throw FormatError("descriptor is missing key '" + key + "'");
}

}  // namespace csl
