#ifndef CFBEAM_HGNET_HPP
#define CFBEAM_HGNET_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "cfbeam/autodiff.hpp"
#include "cfbeam/beam.hpp"
#include "cfbeam/channel.hpp"
#include "cfbeam/metrics.hpp"
#include "cfbeam/rng.hpp"
#include "cfbeam/tensor.hpp"

namespace cfbeam::hgnet {

// HGNet: a dimension-preserving convolutional beamformer. The modulus of the
// CSI matrix enters as a Q x I x (M*N) tensor, runs through L conv+BN+act
// layers whose kernel/stride/padding keep the spatial size fixed, and leaves
// as a Q x I x 2M tensor that is residual-coupled with the input, squashed,
// assembled into complex beams and projected onto the per-AP power caps.
// During training each hidden layer feeds a per-layer channel-class
// discriminator through a gradient reversal layer; discriminator-derived
// scores drive a weighted random selection that drops the most
// class-sensitive feature planes.

struct LayerSpec {
  int kernel_w = 3, kernel_h = 3;
  int stride_w = 1, stride_h = 1;
  int pad_w = 1, pad_h = 1;
  int channels = 4;
};

struct TrainConfig {
  int batch_size = 64;
  double learning_rate = 1e-3;
  int epochs = 30;
  std::uint64_t seed = 1;
};

struct HGNetConfig {
  std::vector<LayerSpec> layers;
  int num_classes = 3;       // T, distinct channel models in the training mix
  int features_dropped = 1;  // C_dis planes discarded per hidden layer
  double grl_lambda = 1.0;
  double adv_weight = 0.1;
  int ap_antennas = 2;    // M
  int user_antennas = 2;  // N
  double p_max = 1.0;
  double bn_eps = 1e-5;
  metrics::PowerScaling projection = metrics::PowerScaling::Projection;
  TrainConfig train;
  // Declared spatial size; required to check stride > 1 layers, whose
  // padding formula depends on the input width/height.
  int ref_width = 0, ref_height = 0;

  int layer_count() const { return static_cast<int>(layers.size()); }
  int input_channels() const { return ap_antennas * user_antennas; }
};

struct ArchitectureReport {
  struct Violation {
    int layer;  // 1-based; 0 for config-level conditions
    std::string condition;
  };
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
  std::string describe() const;
};

/// Checks the dimension-preservation conditions layer by layer plus the
/// final channel-count rule (c_L == 2M). Reports, never throws.
ArchitectureReport validate_architecture(const HGNetConfig& cfg, int ap_antennas);

/// |H| rearranged to Q x I x (M*N): output[q, i, n*M + m] is the modulus of
/// entry (n, m) of the N x M block of AP q to user i.
Tensor input_transform(const CTensor& h, int ap_antennas, int user_antennas);

/// Identity branch of the residual output. Returns the input unchanged when
/// M*N == 2M; otherwise a fixed (non-learned) channel pooling maps the M*N
/// input channels onto 2M output channels.
Tensor residual_identity(const Tensor& h_mod, int ap_antennas);

struct LayerParams {
  ParamGroup kernels, bias;  // conv
  ParamGroup gamma, beta;    // BN affine
  BnStats stats;
};

struct DiscriminatorParams {
  ParamGroup weights, bias;  // T x C and T
};

struct ParamCensus {
  std::size_t total = 0;
  std::size_t affine = 0;
  double affine_fraction() const {
    return total == 0 ? 0.0 : static_cast<double>(affine) / static_cast<double>(total);
  }
};

struct HGNetParams {
  std::vector<LayerParams> layers;
  std::vector<DiscriminatorParams> discriminators;  // layers 1..L-1

  static HGNetParams init(const HGNetConfig& cfg, Rng& rng);

  /// Declared serialization order: per layer kernels, bias, gamma, beta,
  /// then per hidden layer discriminator weights, bias.
  std::vector<ParamGroup*> all_groups();
  std::vector<const ParamGroup*> all_groups() const;
  std::vector<ParamGroup*> affine_groups();
  ParamCensus census() const;

  void set_trainable(bool trainable);
  /// Freezes everything except the BN affine groups.
  void set_trainable_affine_only();
  void reset_running_stats();
  bool stats_populated() const;
};

enum class ForwardMode { Train, Infer };

struct LayerTrace {
  Tensor conv_out;    // C_l
  Tensor masked_out;  // G_l (equals conv_out outside train mode)
  Tensor pooled;      // g_l
  Tensor logits;      // discriminator output (train mode, hidden layers)
  Tensor scores;      // s_l
  Tensor drop_probs;  // p_l
  Tensor mask;        // m_l (all ones outside train mode)
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  Tensor v_real;  // projected Q x I x 2M real view
  BeamTensor beams;
};

/// Single-sample forward pass. Normalization uses running statistics (batch
/// statistics exist only inside training batches), so infer mode is a pure
/// function of the inputs. Train mode additionally samples the per-layer
/// discard masks from `rng` and fills the discriminator trace entries;
/// `label` is the sample's channel-class id, ignored in infer mode.
ForwardTrace forward(const HGNetParams& params, const HGNetConfig& cfg, const CTensor& h,
                     ForwardMode mode, Rng* rng = nullptr, int label = 0);

// --- high-generalization module pieces (per sample) ----------------------

/// Cross-entropy of softmax(W g + b) against the true channel-class label.
double discriminator_loss(const Tensor& pooled, const Tensor& fc_weights, const Tensor& fc_bias,
                          int label, Tensor* logits_out = nullptr);

/// s = w_row(label) * g elementwise; the contribution of each feature plane
/// to the correct class logit.
Tensor feature_scores(const Tensor& pooled, const Tensor& fc_weights, int label);

/// Rectifies scores (max(s, 0) + delta) and normalizes them to a discard
/// distribution; sums to one, all entries positive.
Tensor drop_probs(const Tensor& scores);

/// Selection keys r^(1/p) in log space: key_c = log(r_c)/p_c, order-
/// equivalent to the power form and immune to underflow for tiny p.
Tensor wrs_keys(const Tensor& probs, Rng& rng);

/// Zeroes the drop_count largest-key entries, ties broken by index.
Tensor mask_from_keys(const Tensor& keys, int drop_count);

Tensor wrs_mask(const Tensor& probs, int drop_count, Rng& rng);

Tensor apply_mask(const Tensor& features, const Tensor& mask);

/// tanh(conv_last + identity_branch), complex assembly of the 2M channels,
/// per-AP power enforcement.
BeamTensor assemble_output(const Tensor& conv_last, const Tensor& identity_branch, double p_max,
                           metrics::PowerScaling mode = metrics::PowerScaling::Projection);

struct RateLossResult {
  double loss = 0.0;  // -sum_rate, bits/s/Hz
  Tensor grad;        // d(loss)/dV over the Q x I x 2M real view
};

/// Negative sum rate and its gradient with respect to every beam entry,
/// via the log-det differential of the rate expression.
RateLossResult rate_loss_grad(const CTensor& h, const BeamTensor& beams, double noise_power);

// --- tape builders shared by training and online adaptation --------------

struct PipelineSpec {
  BnMode bn_mode = BnMode::Infer;
  bool masks_on = false;
  bool discriminators_on = false;
  std::vector<int> labels;                // one per sample when the module is on
  std::vector<std::uint64_t> mask_seeds;  // one per sample when masks_on
};

struct PipelineNodes {
  Tape::NodeId projected = 0;              // B x Q x I x 2M after power cap
  std::vector<Tape::NodeId> logits;        // per hidden layer
  std::vector<Tensor> masks;               // per hidden layer, B x C
  std::vector<Tape::NodeId> conv_outputs;  // per layer
};

/// Builds the batched conv pipeline on a tape. All samples must share one
/// (Q, I) shape.
PipelineNodes build_pipeline(Tape& tape, HGNetParams& params, const HGNetConfig& cfg,
                             const std::vector<const CTensor*>& batch, const PipelineSpec& spec);

/// Scalar head: mean over the batch of -sum_rate(sample). Counts the rate
/// expression's matrix inversions in the tape census.
Tape::NodeId rate_loss_node(Tape& tape, Tape::NodeId projected,
                            const std::vector<const CTensor*>& batch,
                            const std::vector<double>& noise_powers);

struct EpochStats {
  double mean_loss = 0.0;
  double mean_rate_loss = 0.0;
  double mean_adv_loss = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> epochs;
};

/// Unsupervised training: minimizes -sum_rate plus the weighted mean of the
/// per-layer discriminator losses, shuffling the dataset across channel
/// classes each epoch. Deterministic for a fixed seed. Finishes with a
/// calibration sweep that populates the running BN statistics.
TrainResult train(HGNetParams& params, const HGNetConfig& cfg,
                  const std::vector<channel::CSISample>& data);

}  // namespace cfbeam::hgnet

#endif  // CFBEAM_HGNET_HPP
