#include "droppatch/patching.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "droppatch/error.hpp"

namespace droppatch::patch {

std::size_t patch_count(std::size_t length, const PatchConfig& cfg) {
  if (cfg.patch_len == 0) throw ConfigError("patch length must be >= 1");
  return length / cfg.patch_len;
}

PatchSet patchify(std::span<const double> window, const PatchConfig& cfg) {
  const std::size_t count = patch_count(window.size(), cfg);
  if (count == 0) {
    throw DataError("window of length " + std::to_string(window.size()) +
                    " is shorter than the patch length " + std::to_string(cfg.patch_len));
  }
  const std::size_t skip = window.size() - count * cfg.patch_len;
  PatchSet ps;
  ps.patches = Matrix(count, cfg.patch_len);
  std::copy(window.begin() + static_cast<long>(skip), window.end(), ps.patches.values.begin());
  ps.original_positions.resize(count);
  std::iota(ps.original_positions.begin(), ps.original_positions.end(), std::size_t{0});
  ps.source_len = window.size();
  return ps;
}

std::vector<double> unpatchify(const PatchSet& ps) {
  std::vector<std::size_t> order(ps.count());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return ps.original_positions[a] < ps.original_positions[b];
  });
  std::vector<double> out;
  out.reserve(ps.patches.values.size());
  for (std::size_t r : order) {
    auto row = ps.patches.row(r);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

}  // namespace droppatch::patch
