#include "magd/mask.hpp"

#include <algorithm>
#include <numeric>

#include "magd/errors.hpp"
#include "magd/model.hpp"

namespace magd {

std::size_t SemanticMask::pixels(int region) const {
  const auto& r = regions.at(static_cast<std::size_t>(region));
  return static_cast<std::size_t>(std::count(r.begin(), r.end(), std::uint8_t{1}));
}

void SemanticMask::validate() const {
  if (regions.empty()) throw ConfigError("semantic mask needs at least one region");
  if (height <= 0 || width <= 0) throw ConfigError("semantic mask has non-positive size");
  if (!labels.empty() && labels.size() != regions.size()) throw ConfigError("one label per region required");
  const std::size_t n = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  std::vector<std::uint8_t> seen(n, 0);
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const auto& r = regions[i];
    if (r.size() != n) throw DimensionError("region " + std::to_string(i) + " has wrong raster size");
    bool any = false;
    for (std::size_t p = 0; p < n; ++p) {
      if (r[p] > 1) throw ConfigError("region " + std::to_string(i) + " is not binary");
      if (!r[p]) continue;
      any = true;
      if (seen[p] && !allow_overlap) {
        throw ConfigError("regions overlap at pixel " + std::to_string(p) + " (overlap not permitted)");
      }
      seen[p] = 1;
    }
    if (!any) throw ConfigError("region " + std::to_string(i) + " is empty");
  }
}

void Correspondence::validate(std::span<const int> padded_prompt) const {
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i].empty()) throw ConfigError("correspondence set " + std::to_string(i) + " is empty");
    for (int w : words[i]) {
      if (w < 0 || w >= static_cast<int>(padded_prompt.size())) {
        throw ConfigError("word index " + std::to_string(w) + " outside prompt of length " +
                          std::to_string(padded_prompt.size()));
      }
      const int tok = padded_prompt[static_cast<std::size_t>(w)];
      if (tok == Vocabulary::kPad || tok == Vocabulary::kNull) {
        throw ConfigError("word index " + std::to_string(w) + " points at a reserved token");
      }
    }
  }
}

}  // namespace magd
