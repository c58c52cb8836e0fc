#ifndef CFBEAM_WMMSE_HPP
#define CFBEAM_WMMSE_HPP

#include <vector>

#include "cfbeam/beam.hpp"
#include "cfbeam/tensor.hpp"

namespace cfbeam::wmmse {

struct WmmseConfig {
  int max_iters = 200;
  double rate_tol = 1e-5;        // relative sum-rate change termination
  double bisection_tol = 1e-9;   // relative per-AP power tolerance
  int bisection_max_steps = 200;
};

struct WmmseResult {
  BeamTensor beams;
  std::vector<double> rate_trace;  // sum rate after each outer iteration
  int iterations = 0;
};

/// Block-coordinate weighted-MMSE ascent on the sum rate under per-AP power
/// caps. Receive filters, MSE weights and beamformers alternate; the
/// beamformer update solves the weighted least-squares system with a
/// block-diagonal per-AP multiplier, each multiplier found by bisection.
WmmseResult wmmse_solve(const CTensor& h, int ap_antennas, int user_antennas, double p_max,
                        double noise_power, const WmmseConfig& cfg = {});

/// Maximum-ratio reference: each user's beam along the dominant right
/// singular direction of its channel, powers capped by exact projection.
BeamTensor mrt_baseline(const CTensor& h, int ap_antennas, int user_antennas, double p_max);

}  // namespace cfbeam::wmmse

#endif  // CFBEAM_WMMSE_HPP
