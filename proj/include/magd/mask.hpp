#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace magd {

/// N binary regions at full image resolution, stored row-major with 0/1 bytes.
struct SemanticMask {
  int height = 0;
  int width = 0;
  std::vector<std::vector<std::uint8_t>> regions;
  std::vector<std::string> labels;
  bool allow_overlap = false;

  int count() const { return static_cast<int>(regions.size()); }
  std::size_t pixels(int region) const;

  // N >= 1, sizes match, regions nonempty, pairwise disjoint unless allow_overlap.
  void validate() const;

  friend bool operator==(const SemanticMask&, const SemanticMask&) = default;
};

/// Word positions (into the padded prompt) bound to each region.
struct Correspondence {
  std::vector<std::vector<int>> words;

  int count() const { return static_cast<int>(words.size()); }
  // Each set nonempty, indices < prompt.size(), never pointing at PAD or NULL.
  void validate(std::span<const int> padded_prompt) const;

  friend bool operator==(const Correspondence&, const Correspondence&) = default;
};

}  // namespace magd
