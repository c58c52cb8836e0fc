#ifndef CFBEAM_OAU_HPP
#define CFBEAM_OAU_HPP

#include <vector>

#include "cfbeam/beam.hpp"
#include "cfbeam/hgnet.hpp"

namespace cfbeam::oau {

// Online adaptive updating: at test time, only the BN affine parameters
// (gamma, beta) of every layer move, driven by the information-entropy loss
// of the emitted beams. Everything else stays bit-identical. The update path
// contains no matrix inversion.

enum class ResetPolicy { PerSample, Persistent };

struct OAUConfig {
  int iterations = 15;          // H
  double learning_rate = 1e-3;  // R
  ResetPolicy reset = ResetPolicy::PerSample;
  bool record_rates = true;  // per-iteration sum rate in the report
};

struct AdaptationStep {
  int iteration = 0;
  double entropy = 0.0;
  double sum_rate_bits = 0.0;  // NaN when rate recording is off
  double wall_ms = 0.0;
};

struct AdaptationReport {
  std::vector<AdaptationStep> steps;
  double touched_fraction = 0.0;
  bool aborted = false;
  int abort_iteration = 0;
  double wall_ms_total = 0.0;
};

struct AdaptResult {
  BeamTensor beams;
  AdaptationReport report;
  hgnet::HGNetParams params;  // adapted copy; non-affine groups untouched
};

/// Sum over entries of |x log x| with x the entry magnitude; contributions
/// of magnitudes at or below 1e-12 are zero. Phase-invariant and free of
/// matrix operations.
double entropy_loss(const BeamTensor& beams);

/// Same loss as a tape head over the batched Q x I x 2M real view (mean over
/// the batch); records zero matrix inversions in the census.
Tape::NodeId entropy_loss_node(Tape& tape, Tape::NodeId projected);

/// Runs H adaptation iterations on a copy of the trained parameters:
/// forward with frozen running statistics, entropy loss on the projected
/// output, adaptive-moment steps on the BN affine groups only. A non-finite
/// loss aborts and returns the last finite state with the error flag set.
AdaptResult adapt(const hgnet::HGNetParams& trained, const hgnet::HGNetConfig& cfg,
                  const OAUConfig& oau_cfg, const CTensor& h, double noise_power);

struct ParamDeltaReport {
  struct GroupDelta {
    std::string id;
    double max_abs_delta = 0.0;
  };
  std::vector<GroupDelta> groups;
  double touched_fraction = 0.0;  // values in changed groups / total values

  double max_delta_outside_affine() const;
};

/// Exact per-group comparison of two parameter sets of the same shape.
ParamDeltaReport param_delta_report(const hgnet::HGNetParams& before,
                                    const hgnet::HGNetParams& after);

}  // namespace cfbeam::oau

#endif  // CFBEAM_OAU_HPP
