#ifndef CFBEAM_MMD_HPP
#define CFBEAM_MMD_HPP

#include <vector>

#include "cfbeam/tensor.hpp"

namespace cfbeam::metrics {

/// RBF kernel two-sample configuration. bandwidth <= 0 selects the median
/// heuristic over the pooled sample; the kernel is
/// k(x, y) = exp(-||x - y||^2 / (2 * bandwidth^2)).
struct MMDConfig {
  double bandwidth = 0.0;
  bool unbiased = false;
};

/// Squared kernel MMD estimate, clamped at zero. Identical multisets give
/// exactly zero under the biased estimator.
double rbf_mmd(const std::vector<std::vector<double>>& x,
               const std::vector<std::vector<double>>& y, const MMDConfig& cfg = {});

/// Per-feature-plane average of rbf_mmd over the channel axis. Each sample
/// is a W x H x C activation; plane c is flattened to a W*H vector.
double gmmd(const std::vector<Tensor>& features_a, const std::vector<Tensor>& features_b,
            const MMDConfig& cfg = {});

/// Largest pairwise gmmd over all unordered source pairs; the measurable
/// source-gap term of the generalization diagnostics.
double source_gap_diag(const std::vector<std::vector<Tensor>>& per_source_features,
                       const MMDConfig& cfg = {});

}  // namespace cfbeam::metrics

#endif  // CFBEAM_MMD_HPP
