#pragma once

#include <string>

#include "lmliqa/model.hpp"

namespace lmliqa {

// Archive layout, all integers little-endian:
//   magic "LMLQCKPT", uint32 format version (1)
//   uint64 config length, config JSON bytes (ModelConfig)
//   uint64 model version
//   uint64 array count, then per array:
//     uint32 name length, name bytes, uint32 rank, rank x uint64 dims,
//     prod(dims) float64 values
// Array names and order follow parameter_layout().
void save_checkpoint(const std::string& path, const ModelState& state);
ModelState load_checkpoint(const std::string& path);

}  // namespace lmliqa
