#include "droppatch/directional.hpp"

#include "droppatch/error.hpp"

namespace droppatch::diag {

DirectionalReport compare_drop_ratios(std::span<const patch::PatchSet> train,
                                      std::span<const patch::PatchSet> val,
                                      std::span<const patch::PatchSet> probe,
                                      const DirectionalOptions& options) {
  if (options.seeds.empty()) throw ConfigError("directional comparison needs at least one seed");
  DirectionalReport report;
  report.drop_ratio = options.pretrain.drop_ratio;
  for (std::uint64_t seed : options.seeds) {
    DirectionalEntry entry;
    entry.seed = seed;
    for (int arm = 0; arm < 2; ++arm) {
      pretrain::PretrainConfig cfg = options.pretrain;
      cfg.seed = seed;
      if (arm == 1) cfg.drop_ratio = 0.0;
      model::PatchTransformer m(options.model, derive_seed(seed, 1));
      pretrain::pretrain_run(train, val, m, cfg);
      const auto stats = diagnose_model(m, probe);
      const double kl = stats.mean_kl_uniform(stats.layers - 1);
      (arm == 0 ? entry.kl_with_drop : entry.kl_without_drop) = kl;
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace droppatch::diag
