#ifndef CFBEAM_AUTODIFF_HPP
#define CFBEAM_AUTODIFF_HPP

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cfbeam/tensor.hpp"

namespace cfbeam {

/// A named block of learnable values with a matching gradient buffer.
struct ParamGroup {
  std::string id;
  Tensor values;
  Tensor grad;
  bool trainable = true;

  ParamGroup() = default;
  ParamGroup(std::string name, Tensor v)
      : id(std::move(name)), values(std::move(v)), grad(Tensor::zeros_like(values)) {}

  std::size_t size() const { return values.size(); }
  void zero_grad() { grad.fill(0.0); }
};

/// Running batch-normalization statistics, accumulated as a uniform average
/// over the batches seen since the last reset. The stored variance carries
/// the unbiased correction factor B/(B-1), applied per batch.
struct BnStats {
  Tensor mean_sum;
  Tensor var_sum;
  std::size_t batches = 0;

  BnStats() = default;
  explicit BnStats(std::size_t channels)
      : mean_sum({channels}, 0.0), var_sum({channels}, 0.0) {}

  bool populated() const { return batches > 0; }
  std::size_t channels() const { return mean_sum.size(); }

  void reset() {
    mean_sum.fill(0.0);
    var_sum.fill(0.0);
    batches = 0;
  }

  void accumulate(const Tensor& batch_mean, const Tensor& batch_var_biased, std::size_t batch_size);

  Tensor mean() const;
  Tensor variance() const;
};

enum class BnMode { Train, Infer };

/// Records executed operations and replays them in exact reverse order to
/// accumulate gradients. One tape is owned by exactly one training or
/// adaptation step; nodes are append-only.
class Tape {
 public:
  using NodeId = std::uint32_t;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Constant or differentiable leaf holding raw data.
  NodeId input(Tensor value, bool needs_grad = false);

  /// Leaf bound to a parameter group; gradients accumulate into the group
  /// if it is trainable. Repeated calls for the same group return the same
  /// node.
  NodeId param(ParamGroup& group);

  // --- forward/backward operation set ---------------------------------
  NodeId conv2d(NodeId x, NodeId kernels, NodeId bias, int stride_w, int stride_h, int pad_w,
                int pad_h);
  NodeId batchnorm(NodeId x, NodeId gamma, NodeId beta, BnStats* stats, double eps, BnMode mode);
  NodeId relu(NodeId x);
  NodeId tanh_act(NodeId x);
  /// Identity forward; backward multiplies the upstream gradient by -lambda.
  NodeId grl(NodeId x, double lambda);
  /// Global average pooling over the spatial plane of each channel.
  NodeId gap(NodeId x);
  NodeId fc(NodeId x, NodeId weights, NodeId bias);
  NodeId add(NodeId a, NodeId b);
  /// Per-channel binary mask; mask shape C for rank-3 input, B x C for rank-4.
  NodeId channel_mask(NodeId x, Tensor mask);
  /// Mean over the batch of -log softmax(logits)[label].
  NodeId softmax_cross_entropy(NodeId logits, std::vector<int> labels);
  /// out = sum_k coeff_k * scalar_k.
  NodeId scaled_sum(const std::vector<std::pair<NodeId, double>>& terms);

  /// Extension point for ops defined by higher-level modules. `backward`
  /// receives the tape and the output node; it reads grad(out) and calls
  /// accumulate_grad on the inputs it captured.
  NodeId custom(const char* kind, Tensor value, const std::vector<NodeId>& inputs,
                std::function<void(Tape&, NodeId)> backward, std::size_t matrix_inversions = 0);

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  const Tensor& grad(NodeId id) const { return nodes_[id].grad; }
  bool needs_grad(NodeId id) const { return nodes_[id].needs_grad; }

  /// Seeds d(root)=1 and replays every recorded op exactly once in reverse
  /// execution order. Root must be scalar. Gradients of trainable parameter
  /// groups touched by this tape are zeroed first, then accumulated.
  void backward(NodeId root);

  void accumulate_grad(NodeId id, const Tensor& g);
  void accumulate_grad_at(NodeId id, std::size_t flat_index, double g);

  struct Census {
    std::size_t ops = 0;
    std::size_t matrix_inversions = 0;
    std::map<std::string, std::size_t> by_kind;
  };
  Census census() const;

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
  };
  struct OpRecord {
    const char* kind;
    NodeId out;
    std::function<void(Tape&, NodeId)> backward;
    std::size_t matrix_inversions = 0;
  };

  NodeId push_node(Tensor value, bool needs_grad);
  void push_op(const char* kind, NodeId out, std::function<void(Tape&, NodeId)> bw,
               std::size_t inversions = 0);

  std::vector<Node> nodes_;
  std::vector<OpRecord> ops_;
  std::map<ParamGroup*, NodeId> param_nodes_;
};

/// Shape of a convolution output plane: (in + 2p - k) / s + 1 per axis.
/// Throws ArchitectureError when the division is not exact or the result is
/// not positive.
std::pair<std::size_t, std::size_t> conv_output_dims(std::size_t in_w, std::size_t in_h,
                                                     int k_w, int k_h, int s_w, int s_h, int p_w,
                                                     int p_h);

/// Compares reverse-mode gradients against central finite differences.
struct GradCheckReport {
  struct Arg {
    std::string name;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
  };
  std::vector<Arg> args;

  double worst_rel_err() const;
  bool pass(double tol) const { return worst_rel_err() < tol; }
};

/// `build` constructs a scalar-valued graph from differentiable input leaves
/// (already registered on the tape, ids supplied in order). Finite
/// differences use the central formula with the given step at every input
/// component; failures are reported, not thrown.
GradCheckReport grad_check(
    const std::function<Tape::NodeId(Tape&, const std::vector<Tape::NodeId>&)>& build,
    const std::vector<Tensor>& inputs, const std::vector<std::string>& names,
    double step = 1e-5);

}  // namespace cfbeam

#endif  // CFBEAM_AUTODIFF_HPP
