#ifndef CFBEAM_METRICS_HPP
#define CFBEAM_METRICS_HPP

#include "cfbeam/beam.hpp"
#include "cfbeam/tensor.hpp"

namespace cfbeam::metrics {

/// Per-AP power cap enforcement. Projection is the Euclidean-ball
/// projection (amplitude scale sqrt(P/p)); PowerRatio scales by P/p, which
/// lands strictly inside the ball at P^2/p. Both keep per-AP power <= P.
enum class PowerScaling { Projection, PowerRatio };

/// Achievable rate of one user in bits/s/Hz:
/// log2 det(I + H v_i v_i^H H^H (sum_{j != i} H v_j v_j^H H^H + s2 I)^-1).
/// `h` is the full (I*N) x (Q*M) channel; the user's N rows are sliced out.
double user_rate(const CTensor& h, const BeamTensor& beams, int user, double noise_power);

double sum_rate(const CTensor& h, const BeamTensor& beams, double noise_power);

/// sum_i ||v_i^q||^2 for AP q.
double per_ap_power(const BeamTensor& beams, int q);

BeamTensor project_power(const BeamTensor& beams, double p_max,
                         PowerScaling mode = PowerScaling::Projection);

}  // namespace cfbeam::metrics

#endif  // CFBEAM_METRICS_HPP
