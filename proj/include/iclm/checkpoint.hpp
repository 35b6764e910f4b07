#pragma once

#include <string>
#include <utility>
#include <vector>

#include "iclm/tensor.hpp"

namespace iclm {

// Parameter checkpoint: 16-byte magic header, a manifest of named tensors
// (name, shape, byte offset into the payload), then raw little-endian
// float64 data. Round trips are bit-exact.
namespace checkpoint {

constexpr char kMagic[16] = {'I', 'C', 'L', 'M', '-', 'C', 'K', 'P',
                             'T', '-', 'v', '1', '\0', '\0', '\0', '\0'};

void save(const std::string& path, const std::vector<std::pair<std::string, Tensor>>& tensors);

// Returns detached tensors in manifest order.
std::vector<std::pair<std::string, Tensor>> load(const std::string& path);

// Copies values into an existing named tensor set; throws on missing or
// mismatched entries.
void load_into(const std::string& path, std::vector<std::pair<std::string, Tensor>>& tensors);

}  // namespace checkpoint
}  // namespace iclm
