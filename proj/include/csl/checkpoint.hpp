#ifndef CSL_CHECKPOINT_HPP
#define CSL_CHECKPOINT_HPP

#include <filesystem>
#include <string>
#include <vector>

#include "csl/optim.hpp"
#include "csl/tensor.hpp"

// Checkpoint container: a little-endian binary file holding named f64
// tensors plus a free-form text descriptor (architecture, hyper-parameters).
//
// Layout:
//   bytes 0..7   magic "CSLCKPT1"
//   u32          descriptor length, followed by that many UTF-8 bytes
//   u32          tensor count
//   per tensor:  u32 name length, name bytes,
//                u32 rank, u64 extents[rank],
//                f64 data[numel]  (IEEE-754 bit patterns, little-endian)
//
// Round-trips are bitwise: the stored doubles are the exact in-memory values.

namespace csl {

struct Checkpoint {
    std::string descriptor;
    std::vector<NamedParam> tensors;

    const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// descriptor helpers: flat "key = value" lines
std::string descriptor_get(const std::string& descriptor, const std::string& key);

}  // namespace csl

#endif
