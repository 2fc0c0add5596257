#ifndef CSL_IDX_HPP
#define CSL_IDX_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "csl/tensor.hpp"

// IDX container support (the MNIST-family on-disk format): a big-endian
// header of [magic, extents...] followed by the raw payload. Only the two
// unsigned-byte layouts are accepted: 0x00000803 image files (N,H,W) and
// 0x00000801 label files (N).

namespace csl {

// Images come back as [N,1,H,W], labels as [N]; byte values are promoted to
// doubles in [0,255]. The buffer must be consumed exactly.
Tensor parse_idx(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> serialize_idx_images(const Tensor& images);  // [N,1,H,W] or [N,H,W]
std::vector<std::uint8_t> serialize_idx_labels(std::span<const int> labels);

// Reads a raw or gzip-compressed IDX file.
Tensor load_idx(const std::filesystem::path& path);

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace csl

#endif
