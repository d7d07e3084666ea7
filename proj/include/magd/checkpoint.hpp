#pragma once
// Binary model checkpoint: magic "ATGD", version, config, named tensors, step counter, crc32.

#include <string>

#include "magd/model.hpp"

namespace magd {

inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Model& model);
Model decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& what = "checkpoint");

void save_checkpoint(const std::string& path, const Model& model);
Model load_checkpoint(const std::string& path);

}  // namespace magd
