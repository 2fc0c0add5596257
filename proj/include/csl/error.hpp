#ifndef CSL_ERROR_HPP
#define CSL_ERROR_HPP

#include <stdexcept>
#include <string>

namespace csl {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/extent mismatches between tensors or layers.
struct DimensionError : Error {
    using Error::Error;
};

// Malformed on-disk data (IDX containers, checkpoints, store manifests).
struct FormatError : Error {
    FormatError(const std::string& msg, std::size_t offset)
        : Error(msg + " (at byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
    explicit FormatError(const std::string& msg) : Error(msg), byte_offset(0) {}
    std::size_t byte_offset;
};

// Invalid or inconsistent experiment configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Filesystem failures, always carrying the offending path.
struct IoError : Error {
    using Error::Error;
};

// Training diverged or produced non-finite values.
struct TrainingAbort : Error {
    using Error::Error;
};

}  // namespace csl

#endif
