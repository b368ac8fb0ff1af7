#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "droppatch/matrix.hpp"

namespace droppatch::patch {

/// Non-overlapping patching: stride equals the patch length.
struct PatchConfig {
  std::size_t patch_len = 12;
};

/// P x L_P patches of one univariate window, plus the patch index of each row.
struct PatchSet {
  Matrix patches;
  std::vector<std::size_t> original_positions;
  std::size_t source_len = 0;  // window length before the remainder was cut

  std::size_t count() const { return patches.rows; }
  std::size_t patch_len() const { return patches.cols; }
  // Content equality; source_len is bookkeeping and not recoverable from patches.
  bool operator==(const PatchSet& o) const {
    return patches == o.patches && original_positions == o.original_positions;
  }
};

/// floor(L / L_P).
std::size_t patch_count(std::size_t length, const PatchConfig& cfg);

/// Cuts P = floor(L / L_P) patches from the most recent P * L_P steps; the
/// oldest L mod L_P steps are discarded.
PatchSet patchify(std::span<const double> window, const PatchConfig& cfg);

/// Patches concatenated in original_positions order.
std::vector<double> unpatchify(const PatchSet& ps);

}  // namespace droppatch::patch
