#include "cfbeam/hgnet.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfbeam/errors.hpp"
#include "cfbeam/optim.hpp"

namespace cfbeam::hgnet {

namespace {

using Eigen::MatrixXcd;
using Eigen::VectorXcd;

constexpr double kScoreFloor = 1e-8;  // delta added after rectifying scores

std::string layer_tag(int layer_1based) { return "layer " + std::to_string(layer_1based); }

}  // namespace

std::string ArchitectureReport::describe() const {
  std::string out;
  for (const auto& v : violations) {
    if (!out.empty()) out += "; ";
    out += (v.layer > 0 ? layer_tag(v.layer) + ": " : "") + v.condition;
  }
  return out.empty() ? "ok" : out;
}

ArchitectureReport validate_architecture(const HGNetConfig& cfg, int ap_antennas) {
  ArchitectureReport report;
  auto fail = [&](int layer, std::string cond) {
    report.violations.push_back({layer, std::move(cond)});
  };

  if (cfg.layer_count() < 2) fail(0, "at least two layers required");
  int min_hidden_channels = INT32_MAX;
  for (int l = 0; l < cfg.layer_count(); ++l) {
    const LayerSpec& s = cfg.layers[l];
    const int tag = l + 1;
    if (s.kernel_w < 1 || s.kernel_h < 1) fail(tag, "kernel sizes must be positive");
    if (s.channels < 1) fail(tag, "channel count must be positive");
    if (s.pad_w < 0 || s.pad_h < 0) fail(tag, "padding must be non-negative");
    if (s.stride_w < 1 || s.stride_h < 1) {
      fail(tag, "strides must be positive");
      continue;
    }
    if (s.stride_w == 1 && s.stride_h == 1) {
      // Unit stride: padding must equal (k - 1) / 2 exactly on both axes.
      if ((s.kernel_w - 1) % 2 != 0 || s.pad_w * 2 != s.kernel_w - 1)
        fail(tag, "stride 1 requires pad_w == (kernel_w - 1) / 2 with odd kernel");
      if ((s.kernel_h - 1) % 2 != 0 || s.pad_h * 2 != s.kernel_h - 1)
        fail(tag, "stride 1 requires pad_h == (kernel_h - 1) / 2 with odd kernel");
    } else if (s.stride_w > 1 && s.stride_h > 1) {
      // Strided: padding formula depends on the declared input size.
      if (cfg.ref_width < 1 || cfg.ref_height < 1) {
        fail(tag, "stride > 1 requires a declared input size");
      } else {
        const long long num_w = static_cast<long long>(cfg.ref_width) * s.stride_w -
                                cfg.ref_width - s.stride_w + s.kernel_w;
        const long long num_h = static_cast<long long>(cfg.ref_height) * s.stride_h -
                                cfg.ref_height - s.stride_h + s.kernel_h;
        if (num_w < 0 || num_w % 2 != 0 || s.pad_w != num_w / 2)
          fail(tag, "pad_w does not satisfy the strided dimension-preserving formula");
        if (num_h < 0 || num_h % 2 != 0 || s.pad_h != num_h / 2)
          fail(tag, "pad_h does not satisfy the strided dimension-preserving formula");
      }
    } else {
      fail(tag, "strides must both equal 1 or both exceed 1");
    }
    if (l + 1 < cfg.layer_count()) min_hidden_channels = std::min(min_hidden_channels, s.channels);
  }
  if (cfg.layer_count() >= 1 && cfg.layers.back().channels != 2 * ap_antennas)
    fail(cfg.layer_count(), "final layer must emit 2M channels");
  if (cfg.features_dropped < 0) fail(0, "features_dropped must be non-negative");
  if (cfg.layer_count() >= 2 && min_hidden_channels != INT32_MAX &&
      cfg.features_dropped >= min_hidden_channels)
    fail(0, "features_dropped must stay below the smallest hidden channel count");
  if (cfg.num_classes < 1) fail(0, "at least one channel class required");
  return report;
}

Tensor input_transform(const CTensor& h, int ap_antennas, int user_antennas) {
  if (h.rank() != 2) throw ShapeError("input_transform: channel must be rank 2");
  if (h.dim(0) % user_antennas != 0 || h.dim(1) % ap_antennas != 0)
    throw ShapeError("input_transform: dims not divisible by antenna counts");
  const std::size_t users = h.dim(0) / user_antennas;
  const std::size_t aps = h.dim(1) / ap_antennas;
  const std::size_t m = static_cast<std::size_t>(ap_antennas);
  const std::size_t n = static_cast<std::size_t>(user_antennas);
  Tensor out({aps, users, m * n});
  for (std::size_t q = 0; q < aps; ++q)
    for (std::size_t i = 0; i < users; ++i)
      for (std::size_t rn = 0; rn < n; ++rn)
        for (std::size_t cm = 0; cm < m; ++cm)
          out.at3(q, i, rn * m + cm) = std::abs(h.at2(i * n + rn, q * m + cm));
  return out;
}

Tensor residual_identity(const Tensor& h_mod, int ap_antennas) {
  if (h_mod.rank() != 3) throw ShapeError("residual_identity: expected Q x I x C tensor");
  const std::size_t in_c = h_mod.dim(2);
  const std::size_t out_c = static_cast<std::size_t>(2 * ap_antennas);
  if (in_c == out_c) return h_mod;
  Tensor out({h_mod.dim(0), h_mod.dim(1), out_c});
  for (std::size_t q = 0; q < h_mod.dim(0); ++q)
    for (std::size_t i = 0; i < h_mod.dim(1); ++i)
      for (std::size_t c = 0; c < out_c; ++c) {
        // Even channel pooling; replicates when the input is narrower.
        std::size_t lo = c * in_c / out_c;
        std::size_t hi = (c + 1) * in_c / out_c;
        if (hi <= lo) hi = lo + 1;
        double acc = 0.0;
        for (std::size_t k = lo; k < hi; ++k) acc += h_mod.at3(q, i, std::min(k, in_c - 1));
        out.at3(q, i, c) = acc / static_cast<double>(hi - lo);
      }
  return out;
}

HGNetParams HGNetParams::init(const HGNetConfig& cfg, Rng& rng) {
  HGNetParams p;
  int in_c = cfg.input_channels();
  for (int l = 0; l < cfg.layer_count(); ++l) {
    const LayerSpec& s = cfg.layers[l];
    LayerParams lp;
    const std::size_t kw = static_cast<std::size_t>(s.kernel_w);
    const std::size_t kh = static_cast<std::size_t>(s.kernel_h);
    const std::size_t ci = static_cast<std::size_t>(in_c);
    const std::size_t co = static_cast<std::size_t>(s.channels);
    Tensor kernels({kw, kh, ci, co});
    const double bound = std::sqrt(6.0 / static_cast<double>(kw * kh * ci));
    for (std::size_t k = 0; k < kernels.size(); ++k) kernels[k] = rng.uniform(-bound, bound);
    const std::string tag = std::to_string(l + 1);
    lp.kernels = ParamGroup("conv" + tag + ".kernels", std::move(kernels));
    lp.bias = ParamGroup("conv" + tag + ".bias", Tensor({co}, 0.0));
    lp.gamma = ParamGroup("bn" + tag + ".gamma", Tensor({co}, 1.0));
    lp.beta = ParamGroup("bn" + tag + ".beta", Tensor({co}, 0.0));
    lp.stats = BnStats(co);
    p.layers.push_back(std::move(lp));
    in_c = s.channels;
  }
  for (int l = 0; l + 1 < cfg.layer_count(); ++l) {
    const std::size_t c = static_cast<std::size_t>(cfg.layers[l].channels);
    const std::size_t t = static_cast<std::size_t>(cfg.num_classes);
    Tensor w({t, c});
    const double bound = std::sqrt(6.0 / static_cast<double>(t + c));
    for (std::size_t k = 0; k < w.size(); ++k) w[k] = rng.uniform(-bound, bound);
    DiscriminatorParams dp;
    const std::string tag = std::to_string(l + 1);
    dp.weights = ParamGroup("disc" + tag + ".weights", std::move(w));
    dp.bias = ParamGroup("disc" + tag + ".bias", Tensor({t}, 0.0));
    p.discriminators.push_back(std::move(dp));
  }
  return p;
}

std::vector<ParamGroup*> HGNetParams::all_groups() {
  std::vector<ParamGroup*> out;
  for (auto& l : layers) {
    out.push_back(&l.kernels);
    out.push_back(&l.bias);
    out.push_back(&l.gamma);
    out.push_back(&l.beta);
  }
  for (auto& d : discriminators) {
    out.push_back(&d.weights);
    out.push_back(&d.bias);
  }
  return out;
}

std::vector<const ParamGroup*> HGNetParams::all_groups() const {
  std::vector<const ParamGroup*> out;
  for (const auto& l : layers) {
    out.push_back(&l.kernels);
    out.push_back(&l.bias);
    out.push_back(&l.gamma);
    out.push_back(&l.beta);
  }
  for (const auto& d : discriminators) {
    out.push_back(&d.weights);
    out.push_back(&d.bias);
  }
  return out;
}

std::vector<ParamGroup*> HGNetParams::affine_groups() {
  std::vector<ParamGroup*> out;
  for (auto& l : layers) {
    out.push_back(&l.gamma);
    out.push_back(&l.beta);
  }
  return out;
}

ParamCensus HGNetParams::census() const {
  ParamCensus c;
  for (const ParamGroup* g : all_groups()) c.total += g->size();
  for (const auto& l : layers) c.affine += l.gamma.size() + l.beta.size();
  return c;
}

void HGNetParams::set_trainable(bool trainable) {
  for (ParamGroup* g : all_groups()) g->trainable = trainable;
}

void HGNetParams::set_trainable_affine_only() {
  set_trainable(false);
  for (ParamGroup* g : affine_groups()) g->trainable = true;
}

void HGNetParams::reset_running_stats() {
  for (auto& l : layers) l.stats.reset();
}

bool HGNetParams::stats_populated() const {
  for (const auto& l : layers)
    if (!l.stats.populated()) return false;
  return !layers.empty();
}

double discriminator_loss(const Tensor& pooled, const Tensor& fc_weights, const Tensor& fc_bias,
                          int label, Tensor* logits_out) {
  if (fc_weights.rank() != 2 || fc_weights.dim(1) != pooled.size())
    throw ShapeError("discriminator_loss: weight shape does not match features");
  const std::size_t classes = fc_weights.dim(0);
  if (label < 0 || static_cast<std::size_t>(label) >= classes)
    throw ArgumentError("discriminator_loss: label out of range");
  Tensor logits({classes});
  for (std::size_t t = 0; t < classes; ++t) {
    double acc = fc_bias[t];
    for (std::size_t c = 0; c < pooled.size(); ++c)
      acc += fc_weights.at2(t, c) * pooled[c];
    logits[t] = acc;
  }
  double mx = logits[0];
  for (std::size_t t = 1; t < classes; ++t) mx = std::max(mx, logits[t]);
  double z = 0.0;
  for (std::size_t t = 0; t < classes; ++t) z += std::exp(logits[t] - mx);
  const double loss = -(logits[static_cast<std::size_t>(label)] - mx - std::log(z));
  if (logits_out != nullptr) *logits_out = logits;
  return loss;
}

Tensor feature_scores(const Tensor& pooled, const Tensor& fc_weights, int label) {
  if (fc_weights.rank() != 2 || fc_weights.dim(1) != pooled.size())
    throw ShapeError("feature_scores: weight shape does not match features");
  Tensor s({pooled.size()});
  for (std::size_t c = 0; c < pooled.size(); ++c)
    s[c] = fc_weights.at2(static_cast<std::size_t>(label), c) * pooled[c];
  return s;
}

Tensor drop_probs(const Tensor& scores) {
  Tensor p({scores.size()});
  double sum = 0.0;
  for (std::size_t c = 0; c < scores.size(); ++c) {
    p[c] = std::max(scores[c], 0.0) + kScoreFloor;
    sum += p[c];
  }
  for (std::size_t c = 0; c < p.size(); ++c) p[c] /= sum;
  return p;
}

Tensor wrs_keys(const Tensor& probs, Rng& rng) {
  Tensor keys({probs.size()});
  for (std::size_t c = 0; c < probs.size(); ++c)
    keys[c] = std::log(rng.uniform_open()) / probs[c];
  return keys;
}

Tensor mask_from_keys(const Tensor& keys, int drop_count) {
  const int c = static_cast<int>(keys.size());
  if (drop_count < 0 || drop_count >= c)
    throw ArgumentError("mask_from_keys: drop count must lie in [0, C)");
  Tensor mask({keys.size()}, 1.0);
  if (drop_count == 0) return mask;
  std::vector<int> order(keys.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + drop_count, order.end(),
                    [&](int a, int b) { return keys[a] != keys[b] ? keys[a] > keys[b] : a < b; });
  for (int k = 0; k < drop_count; ++k) mask[order[k]] = 0.0;
  return mask;
}

Tensor wrs_mask(const Tensor& probs, int drop_count, Rng& rng) {
  return mask_from_keys(wrs_keys(probs, rng), drop_count);
}

Tensor apply_mask(const Tensor& features, const Tensor& mask) {
  if (features.rank() != 3 || mask.rank() != 1 || mask.dim(0) != features.dim(2))
    throw ShapeError("apply_mask: mask length must equal channel count");
  Tensor out(features.dims());
  const std::size_t plane = features.dim(0) * features.dim(1);
  const std::size_t c = features.dim(2);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t k = 0; k < c; ++k) out[i * c + k] = features[i * c + k] * mask[k];
  return out;
}

BeamTensor assemble_output(const Tensor& conv_last, const Tensor& identity_branch, double p_max,
                           metrics::PowerScaling mode) {
  if (!conv_last.same_shape(identity_branch))
    throw ShapeError("assemble_output: residual shapes must agree");
  if (conv_last.rank() != 3 || conv_last.dim(2) % 2 != 0)
    throw ShapeError("assemble_output: expected Q x I x 2M tensor");
  Tensor v_rea(conv_last.dims());
  for (std::size_t k = 0; k < conv_last.size(); ++k)
    v_rea[k] = std::tanh(conv_last[k] + identity_branch[k]);
  return metrics::project_power(BeamTensor::from_real(v_rea), p_max, mode);
}

RateLossResult rate_loss_grad(const CTensor& h, const BeamTensor& beams, double noise_power) {
  if (noise_power <= 0.0) throw ArgumentError("rate_loss_grad: noise power must be positive");
  if (!h.all_finite() || !beams.v.all_finite())
    throw NumericError("rate_loss_grad: non-finite input");
  const int users = beams.user_count();
  const int aps = beams.ap_count();
  const int m = beams.antennas();
  const int n = static_cast<int>(h.dim(0)) / users;
  const int qm = aps * m;
  if (h.dim(0) % users != 0 || h.dim(1) != static_cast<std::size_t>(qm))
    throw ShapeError("rate_loss_grad: channel does not match beam tensor");

  std::vector<MatrixXcd> hs(users);
  for (int u = 0; u < users; ++u) {
    hs[u] = MatrixXcd(n, qm);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < qm; ++c)
        hs[u](r, c) = h.at2(static_cast<std::size_t>(u * n + r), static_cast<std::size_t>(c));
  }
  MatrixXcd v(qm, users);
  for (int u = 0; u < users; ++u) {
    const auto stacked = beams.user_vector(u);
    for (int k = 0; k < qm; ++k) v(k, u) = stacked[static_cast<std::size_t>(k)];
  }

  const double ln2 = std::log(2.0);
  double rate_bits = 0.0;
  MatrixXcd sum_full = MatrixXcd::Zero(qm, qm);   // sum_i H^H A^-1 H
  MatrixXcd sum_intf = MatrixXcd::Zero(qm, qm);   // sum_i H^H J^-1 H
  std::vector<MatrixXcd> intf_terms(users);       // per-user H^H J^-1 H

  for (int u = 0; u < users; ++u) {
    MatrixXcd intf = noise_power * MatrixXcd::Identity(n, n);
    MatrixXcd full;
    const VectorXcd ui = hs[u] * v.col(u);
    for (int j = 0; j < users; ++j) {
      if (j == u) continue;
      const VectorXcd uj = hs[u] * v.col(j);
      intf += uj * uj.adjoint();
    }
    full = intf + ui * ui.adjoint();

    Eigen::LLT<MatrixXcd> llt_full(full), llt_intf(intf);
    if (llt_full.info() != Eigen::Success || llt_intf.info() != Eigen::Success)
      throw NumericError("rate_loss_grad: covariance not positive definite");
    double logdet_full = 0.0, logdet_intf = 0.0;
    for (int k = 0; k < n; ++k) {
      logdet_full += std::log(llt_full.matrixLLT()(k, k).real());
      logdet_intf += std::log(llt_intf.matrixLLT()(k, k).real());
    }
    rate_bits += 2.0 * (logdet_full - logdet_intf) / ln2;

    const MatrixXcd full_inv = llt_full.solve(MatrixXcd::Identity(n, n));
    const MatrixXcd intf_inv = llt_intf.solve(MatrixXcd::Identity(n, n));
    sum_full += hs[u].adjoint() * full_inv * hs[u];
    intf_terms[u] = hs[u].adjoint() * intf_inv * hs[u];
    sum_intf += intf_terms[u];
  }

  RateLossResult result;
  result.loss = -rate_bits;
  result.grad = Tensor({static_cast<std::size_t>(aps), static_cast<std::size_t>(users),
                        static_cast<std::size_t>(2 * m)});
  const MatrixXcd diff = sum_full - sum_intf;
  for (int u = 0; u < users; ++u) {
    // d(sum rate)/d conj(v_u) = (diff + own-interference term) v_u / ln 2.
    const VectorXcd g = (diff * v.col(u) + intf_terms[u] * v.col(u)) / ln2;
    for (int q = 0; q < aps; ++q)
      for (int a = 0; a < m; ++a) {
        const std::complex<double> gv = g(q * m + a);
        result.grad.at3(q, u, a) = -2.0 * gv.real();
        result.grad.at3(q, u, a + m) = -2.0 * gv.imag();
      }
  }
  return result;
}

namespace {

/// Per-AP power cap as a tape op over the B x Q x I x 2M real view.
Tape::NodeId project_node(Tape& tape, Tape::NodeId x, double p_max, metrics::PowerScaling mode) {
  const Tensor& in = tape.value(x);
  if (in.rank() != 4) throw ShapeError("project_node: expected batched rank-4 input");
  const std::size_t b = in.dim(0), q = in.dim(1), i = in.dim(2), c = in.dim(3);
  const std::size_t block = i * c;

  Tensor out(in.dims());
  Tensor scales({b, q}, 1.0);
  Tensor powers({b, q}, 0.0);
  for (std::size_t bb = 0; bb < b; ++bb)
    for (std::size_t qq = 0; qq < q; ++qq) {
      const double* src = in.data() + (bb * q + qq) * block;
      double power = 0.0;
      for (std::size_t k = 0; k < block; ++k) power += src[k] * src[k];
      powers.at2(bb, qq) = power;
      double scale = 1.0;
      if (power > p_max)
        scale = mode == metrics::PowerScaling::Projection ? std::sqrt(p_max / power)
                                                          : p_max / power;
      scales.at2(bb, qq) = scale;
      double* dst = out.data() + (bb * q + qq) * block;
      for (std::size_t k = 0; k < block; ++k) dst[k] = src[k] * scale;
    }

  return tape.custom(
      "project_per_ap", std::move(out), {x},
      [x, scales = std::move(scales), powers = std::move(powers), b, q, block, p_max, mode](
          Tape& t, Tape::NodeId out_node) {
        const Tensor& gout = t.grad(out_node);
        const Tensor& in = t.value(x);
        Tensor gin(in.dims());
        for (std::size_t bb = 0; bb < b; ++bb)
          for (std::size_t qq = 0; qq < q; ++qq) {
            const double scale = scales.at2(bb, qq);
            const double power = powers.at2(bb, qq);
            const double* gsrc = gout.data() + (bb * q + qq) * block;
            const double* xsrc = in.data() + (bb * q + qq) * block;
            double* dst = gin.data() + (bb * q + qq) * block;
            if (power <= p_max) {
              for (std::size_t k = 0; k < block; ++k) dst[k] = gsrc[k];
              continue;
            }
            // y = s(p) x with p = sum x^2; dy_j/dx_k = s d_jk + s'(p) 2 x_k x_j.
            double dot = 0.0;
            for (std::size_t k = 0; k < block; ++k) dot += gsrc[k] * xsrc[k];
            const double dscale =
                mode == metrics::PowerScaling::Projection ? -scale / (2.0 * power) : -scale / power;
            for (std::size_t k = 0; k < block; ++k)
              dst[k] = scale * gsrc[k] + 2.0 * xsrc[k] * dscale * dot;
          }
        t.accumulate_grad(x, gin);
      });
}

Tensor slice_sample(const Tensor& batched, std::size_t index) {
  const std::size_t stride = batched.size() / batched.dim(0);
  Tensor out({batched.dim(1), batched.dim(2), batched.dim(3)});
  for (std::size_t k = 0; k < stride; ++k) out[k] = batched[index * stride + k];
  return out;
}

Tensor pooled_values(const Tensor& batched, std::size_t index) {
  const std::size_t plane = batched.dim(1) * batched.dim(2);
  const std::size_t c = batched.dim(3);
  Tensor out({c});
  const double* base = batched.data() + index * plane * c;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t k = 0; k < c; ++k) out[k] += base[i * c + k];
  for (std::size_t k = 0; k < c; ++k) out[k] /= static_cast<double>(plane);
  return out;
}

}  // namespace

PipelineNodes build_pipeline(Tape& tape, HGNetParams& params, const HGNetConfig& cfg,
                             const std::vector<const CTensor*>& batch, const PipelineSpec& spec) {
  if (batch.empty()) throw ArgumentError("build_pipeline: empty batch");
  if (static_cast<int>(params.layers.size()) != cfg.layer_count())
    throw ArgumentError("build_pipeline: parameter/config layer mismatch");
  if (spec.masks_on && spec.mask_seeds.size() != batch.size())
    throw ArgumentError("build_pipeline: one mask seed per sample required");
  if ((spec.masks_on || spec.discriminators_on) && spec.labels.size() != batch.size())
    throw ArgumentError("build_pipeline: one label per sample required");

  const std::size_t b = batch.size();
  const Tensor first = input_transform(*batch[0], cfg.ap_antennas, cfg.user_antennas);
  const std::size_t w = first.dim(0), hgt = first.dim(1), in_c = first.dim(2);
  const std::size_t out_c = static_cast<std::size_t>(2 * cfg.ap_antennas);

  Tensor in0({b, w, hgt, in_c});
  Tensor vim({b, w, hgt, out_c});
  for (std::size_t s = 0; s < b; ++s) {
    const Tensor mod =
        s == 0 ? first : input_transform(*batch[s], cfg.ap_antennas, cfg.user_antennas);
    if (mod.dim(0) != w || mod.dim(1) != hgt)
      throw ShapeError("build_pipeline: samples in a batch must share (Q, I)");
    const Tensor res = residual_identity(mod, cfg.ap_antennas);
    for (std::size_t k = 0; k < mod.size(); ++k) in0[s * mod.size() + k] = mod[k];
    for (std::size_t k = 0; k < res.size(); ++k) vim[s * res.size() + k] = res[k];
  }

  PipelineNodes out;
  Tape::NodeId x = tape.input(std::move(in0));
  const int layer_count = cfg.layer_count();
  for (int l = 0; l < layer_count; ++l) {
    LayerParams& lp = params.layers[l];
    const LayerSpec& ls = cfg.layers[l];
    Tape::NodeId conv = tape.conv2d(x, tape.param(lp.kernels), tape.param(lp.bias), ls.stride_w,
                                    ls.stride_h, ls.pad_w, ls.pad_h);
    Tape::NodeId bn = tape.batchnorm(conv, tape.param(lp.gamma), tape.param(lp.beta), &lp.stats,
                                     cfg.bn_eps, spec.bn_mode);
    Tape::NodeId act = l + 1 == layer_count ? tape.tanh_act(bn) : tape.relu(bn);
    out.conv_outputs.push_back(act);

    if (l + 1 == layer_count) {
      x = act;
      break;
    }

    if (spec.discriminators_on) {
      Tape::NodeId rev = tape.grl(act, cfg.grl_lambda);
      Tape::NodeId pooled = tape.gap(rev);
      DiscriminatorParams& dp = params.discriminators[l];
      out.logits.push_back(tape.fc(pooled, tape.param(dp.weights), tape.param(dp.bias)));
    }

    const std::size_t channels = static_cast<std::size_t>(ls.channels);
    Tensor mask({b, channels}, 1.0);
    if (spec.masks_on && cfg.features_dropped > 0) {
      const Tensor& act_value = tape.value(act);
      const Tensor& fc_w = params.discriminators[l].weights.values;
      for (std::size_t s = 0; s < b; ++s) {
        const Tensor pooled = pooled_values(act_value, s);
        const Tensor scores = feature_scores(pooled, fc_w, spec.labels[s]);
        Rng mask_rng(derive_stream(spec.mask_seeds[s], static_cast<std::uint64_t>(l)));
        const Tensor m = wrs_mask(drop_probs(scores), cfg.features_dropped, mask_rng);
        for (std::size_t c = 0; c < channels; ++c) mask.at2(s, c) = m[c];
      }
    }
    out.masks.push_back(mask);
    x = spec.masks_on && cfg.features_dropped > 0 ? tape.channel_mask(act, std::move(mask)) : act;
  }

  Tape::NodeId pre = tape.add(x, tape.input(std::move(vim)));
  Tape::NodeId v_rea = tape.tanh_act(pre);
  out.projected = project_node(tape, v_rea, cfg.p_max, cfg.projection);
  return out;
}

Tape::NodeId rate_loss_node(Tape& tape, Tape::NodeId projected,
                            const std::vector<const CTensor*>& batch,
                            const std::vector<double>& noise_powers) {
  const Tensor& value = tape.value(projected);
  if (value.rank() != 4) throw ShapeError("rate_loss_node: expected batched rank-4 input");
  const std::size_t b = value.dim(0);
  if (batch.size() != b || noise_powers.size() != b)
    throw ArgumentError("rate_loss_node: one channel and noise power per sample required");

  std::size_t total_users = 0;
  double loss = 0.0;
  for (std::size_t s = 0; s < b; ++s) {
    const BeamTensor beams = BeamTensor::from_real(slice_sample(value, s));
    total_users += static_cast<std::size_t>(beams.user_count());
    loss += rate_loss_grad(*batch[s], beams, noise_powers[s]).loss;
  }
  loss /= static_cast<double>(b);

  std::vector<const CTensor*> hs = batch;
  std::vector<double> noise = noise_powers;
  return tape.custom(
      "rate_loss", Tensor::scalar(loss), {projected},
      [projected, hs, noise, b](Tape& t, Tape::NodeId out_node) {
        const double g = t.grad(out_node)[0] / static_cast<double>(b);
        const Tensor& value = t.value(projected);
        Tensor gin(value.dims());
        const std::size_t stride = value.size() / b;
        for (std::size_t s = 0; s < b; ++s) {
          const BeamTensor beams = BeamTensor::from_real(slice_sample(value, s));
          const RateLossResult r = rate_loss_grad(*hs[s], beams, noise[s]);
          for (std::size_t k = 0; k < stride; ++k) gin[s * stride + k] = r.grad[k] * g;
        }
        t.accumulate_grad(projected, gin);
      },
      /*matrix_inversions=*/2 * total_users);
}

ForwardTrace forward(const HGNetParams& params, const HGNetConfig& cfg, const CTensor& h,
                     ForwardMode mode, Rng* rng, int label) {
  const bool train = mode == ForwardMode::Train;
  if (train && rng == nullptr)
    throw ArgumentError("forward: train mode needs a random source for the discard masks");
  if (!params.stats_populated())
    throw ArgumentError("forward: running statistics not populated; train or calibrate first");

  PipelineSpec spec;
  spec.bn_mode = BnMode::Infer;
  spec.masks_on = train;
  spec.discriminators_on = train;
  if (train) {
    spec.labels = {label};
    spec.mask_seeds = {rng->raw()};
  }

  Tape tape;
  auto& mutable_params = const_cast<HGNetParams&>(params);  // values read, never written
  const std::vector<const CTensor*> batch{&h};
  PipelineNodes nodes = build_pipeline(tape, mutable_params, cfg, batch, spec);

  ForwardTrace trace;
  const int layer_count = cfg.layer_count();
  for (int l = 0; l < layer_count; ++l) {
    LayerTrace lt;
    lt.conv_out = slice_sample(tape.value(nodes.conv_outputs[l]), 0);
    if (l + 1 < layer_count) {
      const std::size_t channels = static_cast<std::size_t>(cfg.layers[l].channels);
      lt.mask = Tensor({channels}, 1.0);
      if (train && cfg.features_dropped > 0)
        for (std::size_t c = 0; c < channels; ++c) lt.mask[c] = nodes.masks[l].at2(0, c);
      lt.masked_out = apply_mask(lt.conv_out, lt.mask);
      lt.pooled = pooled_values(tape.value(nodes.conv_outputs[l]), 0);
      if (train) {
        lt.scores = feature_scores(lt.pooled, params.discriminators[l].weights.values, label);
        lt.drop_probs = drop_probs(lt.scores);
        lt.logits = tape.value(nodes.logits[l]);
      }
    } else {
      lt.masked_out = lt.conv_out;
      lt.mask = Tensor({static_cast<std::size_t>(cfg.layers[l].channels)}, 1.0);
    }
    trace.layers.push_back(std::move(lt));
  }
  trace.v_real = slice_sample(tape.value(nodes.projected), 0);
  trace.beams = BeamTensor::from_real(trace.v_real);
  return trace;
}

TrainResult train(HGNetParams& params, const HGNetConfig& cfg,
                  const std::vector<channel::CSISample>& data) {
  const ArchitectureReport arch = validate_architecture(cfg, cfg.ap_antennas);
  if (!arch.ok()) throw ArgumentError("train: invalid architecture: " + arch.describe());
  if (data.empty()) throw ArgumentError("train: empty dataset");
  if (cfg.train.batch_size < 2) throw ArgumentError("train: batch size must be >= 2");

  params.set_trainable(true);
  AdamOptimizer opt(params.all_groups(), cfg.train.learning_rate);

  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(derive_stream(cfg.train.seed, 0x51u));

  const int hidden = cfg.layer_count() - 1;
  TrainResult result;

  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    // Fisher-Yates shuffle across all channel classes.
    for (std::size_t i = n - 1; i > 0; --i) {
      const std::size_t j = shuffle_rng.below(i + 1);
      std::swap(order[i], order[j]);
    }
    params.reset_running_stats();

    EpochStats stats;
    int steps = 0;
    for (std::size_t start = 0; start < n; start += cfg.train.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.train.batch_size);
      if (stop - start < 2) break;  // degenerate tail batch carries no statistics

      std::vector<const CTensor*> batch;
      std::vector<int> labels;
      std::vector<double> noise;
      PipelineSpec spec;
      spec.bn_mode = BnMode::Train;
      spec.masks_on = cfg.features_dropped > 0;
      spec.discriminators_on = cfg.adv_weight != 0.0 && hidden > 0;
      for (std::size_t k = start; k < stop; ++k) {
        const auto& sample = data[order[k]];
        batch.push_back(&sample.h);
        labels.push_back(sample.label);
        noise.push_back(sample.noise_power);
        spec.mask_seeds.push_back(
            derive_stream(cfg.train.seed, static_cast<std::uint64_t>(epoch) + 1, order[k]));
      }
      spec.labels = labels;

      Tape tape;
      PipelineNodes nodes = build_pipeline(tape, params, cfg, batch, spec);
      Tape::NodeId rate = rate_loss_node(tape, nodes.projected, batch, noise);

      std::vector<std::pair<Tape::NodeId, double>> total_terms{{rate, 1.0}};
      double adv_value = 0.0;
      if (spec.discriminators_on) {
        std::vector<std::pair<Tape::NodeId, double>> adv_terms;
        const double per_layer = 1.0 / static_cast<double>(hidden);
        for (Tape::NodeId logits : nodes.logits)
          adv_terms.push_back({tape.softmax_cross_entropy(logits, labels), per_layer});
        Tape::NodeId adv = tape.scaled_sum(adv_terms);
        adv_value = tape.value(adv)[0];
        total_terms.push_back({adv, cfg.adv_weight});
      }
      Tape::NodeId total = tape.scaled_sum(total_terms);

      const double loss = tape.value(total)[0];
      if (!std::isfinite(loss)) throw TrainingError("train: non-finite loss", epoch + 1);

      opt.zero_grad();
      tape.backward(total);
      opt.step();

      stats.mean_loss += loss;
      stats.mean_rate_loss += tape.value(rate)[0];
      stats.mean_adv_loss += adv_value;
      ++steps;
    }
    if (steps == 0) throw TrainingError("train: no usable batches", epoch + 1);
    stats.mean_loss /= steps;
    stats.mean_rate_loss /= steps;
    stats.mean_adv_loss /= steps;
    result.epochs.push_back(stats);
  }

  // Calibration sweep: fresh running statistics under the final parameters,
  // masks and discriminators off, batch statistics for normalization.
  params.reset_running_stats();
  for (std::size_t start = 0; start < n; start += cfg.train.batch_size) {
    const std::size_t stop = std::min(n, start + cfg.train.batch_size);
    if (stop - start < 2) break;
    std::vector<const CTensor*> batch;
    for (std::size_t k = start; k < stop; ++k) batch.push_back(&data[k].h);
    PipelineSpec spec;
    spec.bn_mode = BnMode::Train;
    Tape tape;
    build_pipeline(tape, params, cfg, batch, spec);
  }
  if (!params.stats_populated())
    throw TrainingError("train: calibration produced no statistics", cfg.train.epochs);
  return result;
}

}  // namespace cfbeam::hgnet
