#pragma once

// Binary tensor dump format used by checkpoints and density exports:
//   magic "MAFT", version byte 0x01, dtype byte (0x01 = 32-bit float),
//   rank byte, rank little-endian uint32 extents, row-major LE payload.

#include <string>

#include "mafnet/tensor.hpp"

namespace mafnet {

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

void save_tensor(const Tensor<float>& t, const std::string& path);
Tensor<float> load_tensor(const std::string& path);

}  // namespace mafnet
