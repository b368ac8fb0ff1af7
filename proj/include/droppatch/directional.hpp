#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "droppatch/diagnostics.hpp"
#include "droppatch/model.hpp"
#include "droppatch/patching.hpp"
#include "droppatch/pretrain.hpp"

namespace droppatch::diag {

struct DirectionalOptions {
  model::ModelConfig model;
  pretrain::PretrainConfig pretrain;  // drop_ratio is the "with" arm; the other arm uses 0
  std::vector<std::uint64_t> seeds = {1, 2, 3};
};

/// Pre-trains one model per arm and seed on identical data, then compares the
/// mean last-layer KL-to-uniform on the probe set.
DirectionalReport compare_drop_ratios(std::span<const patch::PatchSet> train,
                                      std::span<const patch::PatchSet> val,
                                      std::span<const patch::PatchSet> probe,
                                      const DirectionalOptions& options);

}  // namespace droppatch::diag
