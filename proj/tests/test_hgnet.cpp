#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cfbeam/checkpoint.hpp"
#include "cfbeam/errors.hpp"
#include "cfbeam/hgnet.hpp"
#include "cfbeam/metrics.hpp"
#include "cfbeam/rng.hpp"

using namespace cfbeam;
using namespace cfbeam::hgnet;

namespace {

HGNetConfig small_config(int layer_count = 3, int channels = 6, int m = 2, int n = 2) {
  HGNetConfig cfg;
  cfg.layers.clear();
  for (int l = 0; l < layer_count; ++l) {
    LayerSpec s;
    s.channels = l + 1 == layer_count ? 2 * m : channels;
    cfg.layers.push_back(s);
  }
  cfg.num_classes = 3;
  cfg.features_dropped = 1;
  cfg.ap_antennas = m;
  cfg.user_antennas = n;
  cfg.p_max = 1.0;
  cfg.ref_width = 4;
  cfg.ref_height = 4;
  cfg.train.batch_size = 8;
  cfg.train.epochs = 2;
  cfg.train.seed = 11;
  return cfg;
}

CTensor random_csi(int users, int n, int aps, int m, Rng& rng, double scale = 1.0) {
  CTensor h({static_cast<std::size_t>(users * n), static_cast<std::size_t>(aps * m)});
  for (std::size_t k = 0; k < h.size(); ++k) h[k] = rng.cnormal() * scale;
  return h;
}

/// Populates running statistics by pushing a couple of random batches
/// through the pipeline in train mode.
void calibrate(HGNetParams& params, const HGNetConfig& cfg, int q, int i, Rng& rng) {
  std::vector<CTensor> keep;
  for (int k = 0; k < 8; ++k)
    keep.push_back(random_csi(i, cfg.user_antennas, q, cfg.ap_antennas, rng));
  std::vector<const CTensor*> batch;
  for (const auto& h : keep) batch.push_back(&h);
  PipelineSpec spec;
  spec.bn_mode = BnMode::Train;
  Tape tape;
  build_pipeline(tape, params, cfg, batch, spec);
}

}  // namespace

TEST_CASE("architecture validation accepts the reference layout") {
  const HGNetConfig cfg = small_config(5, 8);
  CHECK(validate_architecture(cfg, 2).ok());
}

TEST_CASE("architecture validation rejects the documented violations") {
  // Even kernel with unit stride: (k-1)/2 is not an integer.
  HGNetConfig cfg = small_config();
  cfg.layers[1].kernel_w = 4;
  cfg.layers[1].pad_w = 1;
  auto report = validate_architecture(cfg, 2);
  REQUIRE_FALSE(report.ok());
  CHECK(report.violations[0].layer == 2);

  // Final channel count off by one.
  cfg = small_config();
  cfg.layers.back().channels = 2 * 2 + 1;
  CHECK_FALSE(validate_architecture(cfg, 2).ok());

  // Mixed strides match neither dimension-preserving condition.
  cfg = small_config();
  cfg.layers[0].stride_w = 2;
  CHECK_FALSE(validate_architecture(cfg, 2).ok());

  // Too many dropped features.
  cfg = small_config(3, 4);
  cfg.features_dropped = 4;
  CHECK_FALSE(validate_architecture(cfg, 2).ok());

  // Strided layer with the correct derived padding is accepted.
  cfg = small_config();
  cfg.ref_width = 6;
  cfg.ref_height = 6;
  cfg.layers[1].stride_w = 2;
  cfg.layers[1].stride_h = 2;
  cfg.layers[1].kernel_w = 4;
  cfg.layers[1].kernel_h = 4;
  cfg.layers[1].pad_w = (6 * 2 - 6 - 2 + 4) / 2;  // = 4
  cfg.layers[1].pad_h = 4;
  CHECK(validate_architecture(cfg, 2).ok());
  // Same layer without the declared size is rejected.
  cfg.ref_width = 0;
  cfg.ref_height = 0;
  CHECK_FALSE(validate_architecture(cfg, 2).ok());
}

TEST_CASE("input transform takes moduli in block order") {
  CTensor h({1, 1});
  h[0] = {3.0, 4.0};
  const Tensor mod = input_transform(h, 1, 1);
  CHECK(mod.dims() == std::vector<std::size_t>{1, 1, 1});
  CHECK(mod[0] == doctest::Approx(5.0));

  const Tensor zero = input_transform(CTensor({4, 4}), 2, 2);
  for (std::size_t k = 0; k < zero.size(); ++k) CHECK(zero[k] == 0.0);
}

TEST_CASE("input transform index probe") {
  // Entry (n, m) of block (i, q) must land at [q, i, n*M + m].
  const int q_count = 2, i_count = 2, m = 2, n = 2;
  CTensor h({static_cast<std::size_t>(i_count * n), static_cast<std::size_t>(q_count * m)});
  for (int i = 0; i < i_count; ++i)
    for (int q = 0; q < q_count; ++q)
      for (int rn = 0; rn < n; ++rn)
        for (int cm = 0; cm < m; ++cm)
          h.at2(i * n + rn, q * m + cm) = {1000.0 * q + 100.0 * i + 10.0 * rn + cm, 0.0};
  const Tensor mod = input_transform(h, m, n);
  for (int q = 0; q < q_count; ++q)
    for (int i = 0; i < i_count; ++i)
      for (int rn = 0; rn < n; ++rn)
        for (int cm = 0; cm < m; ++cm)
          CHECK(mod.at3(q, i, rn * m + cm) ==
                doctest::Approx(1000.0 * q + 100.0 * i + 10.0 * rn + cm));
  CHECK_THROWS_AS(input_transform(h, 3, 2), ShapeError);
}

TEST_CASE("residual identity branch") {
  Rng rng(5);
  // M*N == 2M: untouched.
  Tensor same({2, 2, 4});
  for (std::size_t k = 0; k < same.size(); ++k) same[k] = rng.uniform();
  CHECK(residual_identity(same, 2) == same);

  // 8 channels pooled to 4: adjacent pairs averaged.
  Tensor wide({1, 1, 8});
  for (std::size_t k = 0; k < 8; ++k) wide[k] = static_cast<double>(k);
  const Tensor pooled = residual_identity(wide, 2);
  REQUIRE(pooled.dims() == std::vector<std::size_t>{1, 1, 4});
  CHECK(pooled[0] == doctest::Approx(0.5));
  CHECK(pooled[1] == doctest::Approx(2.5));
  CHECK(pooled[3] == doctest::Approx(6.5));
}

TEST_CASE("discriminator loss equals direct softmax arithmetic") {
  // Zero weights and bias: uniform logits over T = 3 -> log 3.
  Tensor pooled({4}, 0.3);
  Tensor w({3, 4}, 0.0), b({3}, 0.0);
  CHECK(discriminator_loss(pooled, w, b, 1) == doctest::Approx(std::log(3.0)));

  // A huge margin at the true class drives the loss to zero.
  b[2] = 50.0;
  CHECK(discriminator_loss(pooled, w, b, 2) < 1e-12);

  // Random case against independent arithmetic.
  Rng rng(9);
  Tensor wr({3, 4}), br({3}), g({4});
  for (std::size_t k = 0; k < wr.size(); ++k) wr[k] = rng.uniform(-1.0, 1.0);
  for (std::size_t k = 0; k < br.size(); ++k) br[k] = rng.uniform(-1.0, 1.0);
  for (std::size_t k = 0; k < g.size(); ++k) g[k] = rng.uniform(-1.0, 1.0);
  Tensor logits;
  const double loss = discriminator_loss(g, wr, br, 0, &logits);
  double z = 0.0;
  std::vector<double> direct(3);
  for (int t = 0; t < 3; ++t) {
    direct[t] = br[t];
    for (int c = 0; c < 4; ++c) direct[t] += wr.at2(t, c) * g[c];
    z += std::exp(direct[t]);
  }
  CHECK(logits[0] == doctest::Approx(direct[0]).epsilon(1e-12));
  CHECK(loss == doctest::Approx(-std::log(std::exp(direct[0]) / z)).epsilon(1e-12));
}

TEST_CASE("feature scores are the label row times the pooled features") {
  Tensor w({2, 2});
  w.at2(0, 0) = 1.0;
  w.at2(0, 1) = -1.0;
  w.at2(1, 0) = 5.0;
  w.at2(1, 1) = 5.0;
  Tensor g({2});
  g[0] = 2.0;
  g[1] = 3.0;
  const Tensor s = feature_scores(g, w, 0);
  CHECK(s[0] == doctest::Approx(2.0));
  CHECK(s[1] == doctest::Approx(-3.0));

  const Tensor zero = feature_scores(Tensor({2}, 0.0), w, 1);
  CHECK(zero[0] == 0.0);
  CHECK(zero[1] == 0.0);

  // Permuting features permutes the scores identically.
  Tensor gp({2});
  gp[0] = 3.0;
  gp[1] = 2.0;
  Tensor wp({2, 2});
  wp.at2(0, 0) = -1.0;
  wp.at2(0, 1) = 1.0;
  const Tensor sp = feature_scores(gp, wp, 0);
  CHECK(sp[0] == doctest::Approx(-3.0));
  CHECK(sp[1] == doctest::Approx(2.0));
}

TEST_CASE("drop probabilities rectify and normalize") {
  Tensor s({2});
  s[0] = 1.0;
  s[1] = 3.0;
  const Tensor p = drop_probs(s);
  CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-7));
  CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-7));

  const Tensor uniform = drop_probs(Tensor({4}, 2.0));
  for (std::size_t k = 0; k < 4; ++k) CHECK(uniform[k] == doctest::Approx(0.25));

  // Negative score is rectified to the floor delta.
  Tensor neg({2});
  neg[0] = -5.0;
  neg[1] = 5.0;
  const Tensor pr = drop_probs(neg);
  const double delta = 1e-8;
  CHECK(pr[0] == doctest::Approx(delta / (5.0 + 2 * delta)).epsilon(1e-9));
  CHECK(pr[1] == doctest::Approx((5.0 + delta) / (5.0 + 2 * delta)).epsilon(1e-12));
  CHECK(pr[0] + pr[1] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("mask selection zeroes the largest keys") {
  Tensor keys({3});
  keys[0] = 0.9;
  keys[1] = 0.1;
  keys[2] = 0.5;
  const Tensor mask = mask_from_keys(keys, 1);
  CHECK(mask[0] == 0.0);
  CHECK(mask[1] == 1.0);
  CHECK(mask[2] == 1.0);

  const Tensor all = mask_from_keys(keys, 0);
  for (std::size_t k = 0; k < 3; ++k) CHECK(all[k] == 1.0);
  CHECK_THROWS_AS(mask_from_keys(keys, 3), ArgumentError);

  Rng rng(3);
  const Tensor m2 = wrs_mask(drop_probs(Tensor({5}, 1.0)), 2, rng);
  int ones = 0;
  for (std::size_t k = 0; k < 5; ++k) ones += m2[k] == 1.0 ? 1 : 0;
  CHECK(ones == 3);
}

TEST_CASE("weighted selection matches enumerated inclusion probabilities") {
  // Sequential no-replacement oracle: P(drop j) over the top-2 key order.
  Tensor scores({5});
  for (std::size_t k = 0; k < 5; ++k) scores[k] = static_cast<double>(k + 1);
  const Tensor p = drop_probs(scores);

  std::vector<double> expect(5, 0.0);
  for (int j = 0; j < 5; ++j) {
    expect[j] += p[j];  // drawn first
    for (int a = 0; a < 5; ++a)
      if (a != j) expect[j] += p[a] * p[j] / (1.0 - p[a]);  // drawn second
  }

  const int trials = 20000;
  Rng rng(1234);
  std::vector<int> dropped(5, 0);
  for (int t = 0; t < trials; ++t) {
    const Tensor mask = wrs_mask(p, 2, rng);
    for (int k = 0; k < 5; ++k)
      if (mask[k] == 0.0) ++dropped[k];
  }
  for (int k = 0; k < 5; ++k) {
    const double freq = static_cast<double>(dropped[k]) / trials;
    const double sigma = std::sqrt(expect[k] * (1.0 - expect[k]) / trials);
    CHECK(std::abs(freq - expect[k]) < 4.0 * sigma);
  }
}

TEST_CASE("apply_mask zeroes exactly the masked planes") {
  Rng rng(6);
  Tensor f({2, 2, 3});
  for (std::size_t k = 0; k < f.size(); ++k) f[k] = rng.uniform(-1.0, 1.0);
  Tensor mask({3}, 1.0);
  CHECK(apply_mask(f, mask) == f);
  mask[1] = 0.0;
  const Tensor out = apply_mask(f, mask);
  for (std::size_t w = 0; w < 2; ++w)
    for (std::size_t h = 0; h < 2; ++h) {
      CHECK(out.at3(w, h, 0) == f.at3(w, h, 0));
      CHECK(out.at3(w, h, 1) == 0.0);
      CHECK(out.at3(w, h, 2) == f.at3(w, h, 2));
    }
  const Tensor zero = apply_mask(f, Tensor({3}, 0.0));
  for (std::size_t k = 0; k < zero.size(); ++k) CHECK(zero[k] == 0.0);
}

TEST_CASE("assemble_output residual, complex assembly and power cap") {
  // Zero conv branch: output is tanh of the identity branch.
  Tensor vim({1, 1, 2});
  vim[0] = 0.4;
  vim[1] = -0.2;
  const BeamTensor out = assemble_output(Tensor({1, 1, 2}, 0.0), vim, 10.0);
  CHECK(out.at(0, 0, 0).real() == doctest::Approx(std::tanh(0.4)));
  CHECK(out.at(0, 0, 0).imag() == doctest::Approx(std::tanh(-0.2)));

  // M = 1 assembly: real channel then imaginary channel.
  Tensor a({1, 1, 2});
  a[0] = 0.1;
  a[1] = 0.2;
  const BeamTensor pair = assemble_output(a, Tensor({1, 1, 2}, 0.0), 10.0);
  CHECK(pair.at(0, 0, 0).real() == doctest::Approx(std::tanh(0.1)));
  CHECK(pair.at(0, 0, 0).imag() == doctest::Approx(std::tanh(0.2)));

  // Tight cap: every AP lands at or below the cap.
  Rng rng(8);
  Tensor big({3, 4, 4});
  for (std::size_t k = 0; k < big.size(); ++k) big[k] = rng.uniform(-3.0, 3.0);
  const BeamTensor capped = assemble_output(big, Tensor({3, 4, 4}, 0.0), 0.5);
  for (int q = 0; q < 3; ++q) CHECK(metrics::per_ap_power(capped, q) <= 0.5 * (1.0 + 1e-12));
}

TEST_CASE("rate loss gradient matches central finite differences") {
  Rng rng(21);
  const CTensor h = random_csi(2, 2, 2, 2, rng);
  BeamTensor v(2, 2, 2);
  for (std::size_t k = 0; k < v.v.size(); ++k) v.v[k] = rng.cnormal() * 0.5;
  const double sigma2 = 0.3;

  const RateLossResult result = rate_loss_grad(h, v, sigma2);
  CHECK(result.loss == doctest::Approx(-metrics::sum_rate(h, v, sigma2)).epsilon(1e-12));

  const double step = 1e-5;
  Tensor real_view = v.to_real();
  double worst = 0.0;
  for (std::size_t k = 0; k < real_view.size(); ++k) {
    Tensor up = real_view, dn = real_view;
    up[k] += step;
    dn[k] -= step;
    const double fd = (-metrics::sum_rate(h, BeamTensor::from_real(up), sigma2) +
                       metrics::sum_rate(h, BeamTensor::from_real(dn), sigma2)) /
                      (2.0 * step);
    const double rel =
        std::abs(fd - result.grad[k]) / std::max({std::abs(fd), std::abs(result.grad[k]), 1.0});
    worst = std::max(worst, rel);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("rate loss gradient vanishes at the zero beamformer") {
  // The rate is quadratic in V near the origin, so both the analytic and
  // the finite-difference gradients are zero there.
  Rng rng(22);
  const CTensor h = random_csi(2, 2, 2, 2, rng);
  const BeamTensor zero(2, 2, 2);
  const RateLossResult result = rate_loss_grad(h, zero, 0.5);
  for (std::size_t k = 0; k < result.grad.size(); ++k)
    CHECK(std::abs(result.grad[k]) < 1e-12);
  // Slightly away from the origin the gradient is alive.
  BeamTensor nudged(2, 2, 2);
  nudged.at(0, 0, 0) = {0.05, 0.0};
  const RateLossResult alive = rate_loss_grad(h, nudged, 0.5);
  double mag = 0.0;
  for (std::size_t k = 0; k < alive.grad.size(); ++k) mag += std::abs(alive.grad[k]);
  CHECK(mag > 1e-3);
}

TEST_CASE("rate loss fades as noise dominates") {
  Rng rng(23);
  const CTensor h = random_csi(2, 2, 2, 2, rng);
  BeamTensor v(2, 2, 2);
  for (std::size_t k = 0; k < v.v.size(); ++k) v.v[k] = rng.cnormal() * 0.5;
  const RateLossResult lo = rate_loss_grad(h, v, 1.0);
  const RateLossResult hi = rate_loss_grad(h, v, 1e9);
  CHECK(std::abs(hi.loss) < 1e-6);
  CHECK(std::abs(hi.loss) < std::abs(lo.loss));
  double glo = 0.0, ghi = 0.0;
  for (std::size_t k = 0; k < lo.grad.size(); ++k) {
    glo += std::abs(lo.grad[k]);
    ghi += std::abs(hi.grad[k]);
  }
  CHECK(ghi < 1e-6);
  CHECK(ghi < glo);
}

TEST_CASE("forward runs unchanged across spatial sizes and stays feasible") {
  Rng rng(31);
  const HGNetConfig cfg = small_config(3, 6);
  HGNetParams params = HGNetParams::init(cfg, rng);
  calibrate(params, cfg, 4, 4, rng);

  for (int q : {3, 5, 8, 12}) {
    for (int i : {3, 6, 12}) {
      const CTensor h = random_csi(i, 2, q, 2, rng);
      const ForwardTrace trace = forward(params, cfg, h, ForwardMode::Infer);
      CHECK(trace.beams.ap_count() == q);
      CHECK(trace.beams.user_count() == i);
      CHECK(trace.beams.antennas() == 2);
      for (int a = 0; a < q; ++a)
        CHECK(metrics::per_ap_power(trace.beams, a) <= cfg.p_max * (1.0 + 1e-9));
    }
  }
}

TEST_CASE("infer forward is pure and train mode with the module off matches it") {
  Rng rng(37);
  HGNetConfig cfg = small_config(3, 6);
  cfg.features_dropped = 0;
  cfg.grl_lambda = 0.0;
  HGNetParams params = HGNetParams::init(cfg, rng);
  calibrate(params, cfg, 4, 4, rng);

  const CTensor h = random_csi(4, 2, 4, 2, rng);
  const ForwardTrace a = forward(params, cfg, h, ForwardMode::Infer);
  const ForwardTrace b = forward(params, cfg, h, ForwardMode::Infer);
  CHECK(a.v_real == b.v_real);

  Rng mask_rng(1);
  const ForwardTrace t = forward(params, cfg, h, ForwardMode::Train, &mask_rng, 1);
  CHECK(t.v_real == a.v_real);
  for (const auto& layer : t.layers)
    for (std::size_t k = 0; k < layer.mask.size(); ++k) CHECK(layer.mask[k] == 1.0);
}

TEST_CASE("train-mode forward drops exactly the configured planes") {
  Rng rng(41);
  HGNetConfig cfg = small_config(3, 6);
  cfg.features_dropped = 2;
  HGNetParams params = HGNetParams::init(cfg, rng);
  calibrate(params, cfg, 4, 4, rng);

  const CTensor h = random_csi(4, 2, 4, 2, rng);
  Rng mask_rng(7);
  const ForwardTrace t = forward(params, cfg, h, ForwardMode::Train, &mask_rng, 2);
  for (std::size_t l = 0; l + 1 < t.layers.size(); ++l) {
    int zeros = 0;
    for (std::size_t k = 0; k < t.layers[l].mask.size(); ++k)
      zeros += t.layers[l].mask[k] == 0.0 ? 1 : 0;
    CHECK(zeros == 2);
    // Masked planes are zero in G_l, the rest bit-identical to C_l.
    const auto& lt = t.layers[l];
    for (std::size_t w = 0; w < lt.conv_out.dim(0); ++w)
      for (std::size_t hh = 0; hh < lt.conv_out.dim(1); ++hh)
        for (std::size_t c = 0; c < lt.conv_out.dim(2); ++c) {
          if (lt.mask[c] == 0.0)
            CHECK(lt.masked_out.at3(w, hh, c) == 0.0);
          else
            CHECK(lt.masked_out.at3(w, hh, c) == lt.conv_out.at3(w, hh, c));
        }
  }
}

TEST_CASE("gradient reversal makes the adversarial branch fight the extractor") {
  // Hand-built graph: conv features -> (grl?) -> gap -> fc -> cross entropy.
  Rng rng(43);
  Tensor input({3, 3, 2});
  for (std::size_t k = 0; k < input.size(); ++k) input[k] = rng.uniform(-1.0, 1.0);
  ParamGroup kernels("k", Tensor({3, 3, 2, 4}));
  for (std::size_t k = 0; k < kernels.values.size(); ++k)
    kernels.values[k] = rng.uniform(-0.5, 0.5);
  ParamGroup bias("b", Tensor({4}, 0.0));
  ParamGroup fc_w("w", Tensor({3, 4}));
  for (std::size_t k = 0; k < fc_w.values.size(); ++k) fc_w.values[k] = rng.uniform(-0.5, 0.5);
  ParamGroup fc_b("fb", Tensor({3}, 0.0));

  auto run = [&](bool reversed) {
    Tape tape;
    auto feat = tape.relu(tape.conv2d(tape.input(input), tape.param(kernels), tape.param(bias),
                                      1, 1, 1, 1));
    auto branch = reversed ? tape.grl(feat, 1.0) : feat;
    auto loss = tape.softmax_cross_entropy(
        tape.fc(tape.gap(branch), tape.param(fc_w), tape.param(fc_b)), {1});
    tape.backward(loss);
    return std::make_tuple(kernels.grad, fc_w.grad, tape.value(loss)[0]);
  };

  const auto [g_rev, fcg_rev, loss0] = run(true);
  const auto [g_fwd, fcg_fwd, loss1] = run(false);
  CHECK(loss0 == loss1);
  // Discriminator gradients are identical; extractor gradients are negated.
  CHECK(fcg_rev == fcg_fwd);
  double dot = 0.0, norm = 0.0;
  for (std::size_t k = 0; k < g_rev.size(); ++k) {
    dot += g_rev[k] * g_fwd[k];
    norm += g_fwd[k] * g_fwd[k];
    CHECK(g_rev[k] == doctest::Approx(-g_fwd[k]).epsilon(1e-12));
  }
  CHECK(norm > 0.0);
  CHECK(dot < 0.0);

  // A plain gradient step on the discriminator parameters lowers its loss.
  const double lr = 1e-2;
  for (std::size_t k = 0; k < fc_w.size(); ++k) fc_w.values[k] -= lr * fcg_fwd[k];
  const auto [g2, fcg2, loss2] = run(false);
  CHECK(loss2 < loss1);
}

TEST_CASE("end-to-end rate loss gradient matches finite differences") {
  // The adversarial branch is excluded here: the reversal layer reports a
  // deliberately negated extractor gradient, so only the rate path is a
  // finite-difference target. The discriminator parameters themselves are
  // checked separately below; the reversal sign is covered by the
  // adversarial-direction test.
  Rng rng(47);
  HGNetConfig cfg = small_config(3, 6);
  cfg.features_dropped = 0;
  HGNetParams params = HGNetParams::init(cfg, rng);

  std::vector<CTensor> keep;
  std::vector<int> labels;
  for (int k = 0; k < 4; ++k) {
    keep.push_back(random_csi(4, 2, 4, 2, rng));
    labels.push_back(k % 3);
  }
  std::vector<const CTensor*> batch;
  for (const auto& h : keep) batch.push_back(&h);
  const std::vector<double> noise(4, 0.3);

  auto build_rate = [&](Tape& tape) {
    PipelineSpec spec;
    spec.bn_mode = BnMode::Train;
    PipelineNodes nodes = build_pipeline(tape, params, cfg, batch, spec);
    return rate_loss_node(tape, nodes.projected, batch, noise);
  };
  auto rate_value = [&]() {
    Tape tape;
    return tape.value(build_rate(tape))[0];
  };

  {
    Tape tape;
    tape.backward(build_rate(tape));
  }

  Rng probe_rng(99);
  auto groups = params.all_groups();
  const double step = 1e-5;
  double worst = 0.0;
  int probes = 0;
  while (probes < 10) {
    ParamGroup* g = groups[probe_rng.below(groups.size())];
    if (g->id.rfind("disc", 0) == 0) continue;  // not on the rate path
    const std::size_t idx = probe_rng.below(g->size());
    const double keep_v = g->values[idx];
    const double analytic = g->grad[idx];
    g->values[idx] = keep_v + step;
    const double up = rate_value();
    g->values[idx] = keep_v - step;
    const double dn = rate_value();
    g->values[idx] = keep_v;
    const double fd = (up - dn) / (2.0 * step);
    worst = std::max(worst,
                     std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1.0}));
    ++probes;
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("discriminator parameters match finite differences under the full loss") {
  // FC weights sit downstream of the reversal layer, so their gradients are
  // true derivatives even with the adversarial coupling active.
  Rng rng(48);
  HGNetConfig cfg = small_config(3, 6);
  cfg.features_dropped = 0;
  cfg.adv_weight = 0.3;
  HGNetParams params = HGNetParams::init(cfg, rng);

  std::vector<CTensor> keep;
  std::vector<int> labels;
  for (int k = 0; k < 3; ++k) {
    keep.push_back(random_csi(4, 2, 4, 2, rng));
    labels.push_back(k % 3);
  }
  std::vector<const CTensor*> batch;
  for (const auto& h : keep) batch.push_back(&h);
  const std::vector<double> noise(3, 0.3);

  auto build_total = [&](Tape& tape) {
    PipelineSpec spec;
    spec.bn_mode = BnMode::Train;
    spec.discriminators_on = true;
    spec.labels = labels;
    PipelineNodes nodes = build_pipeline(tape, params, cfg, batch, spec);
    auto rate = rate_loss_node(tape, nodes.projected, batch, noise);
    std::vector<std::pair<Tape::NodeId, double>> adv_terms;
    for (auto logits : nodes.logits)
      adv_terms.push_back({tape.softmax_cross_entropy(logits, labels), 0.5});
    return tape.scaled_sum({{rate, 1.0}, {tape.scaled_sum(adv_terms), cfg.adv_weight}});
  };
  auto loss_value = [&]() {
    Tape tape;
    return tape.value(build_total(tape))[0];
  };
  {
    Tape tape;
    tape.backward(build_total(tape));
  }

  const double step = 1e-5;
  double worst = 0.0;
  for (auto& disc : params.discriminators) {
    for (ParamGroup* g : {&disc.weights, &disc.bias}) {
      for (std::size_t idx = 0; idx < std::min<std::size_t>(g->size(), 4); ++idx) {
        const double keep_v = g->values[idx];
        const double analytic = g->grad[idx];
        g->values[idx] = keep_v + step;
        const double up = loss_value();
        g->values[idx] = keep_v - step;
        const double dn = loss_value();
        g->values[idx] = keep_v;
        const double fd = (up - dn) / (2.0 * step);
        worst = std::max(
            worst, std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1.0}));
      }
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("checkpoint round trip is byte-stable and preserves behavior") {
  Rng rng(53);
  const HGNetConfig cfg = small_config(3, 6);
  HGNetParams params = HGNetParams::init(cfg, rng);
  calibrate(params, cfg, 4, 4, rng);

  const auto dir = std::filesystem::temp_directory_path() / "cfbeam_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.ckpt";
  save_checkpoint(path, cfg, params);
  const Checkpoint loaded = load_checkpoint(path);

  const auto path2 = dir / "model2.ckpt";
  save_checkpoint(path2, loaded.config, loaded.params);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  const std::vector<char> ba((std::istreambuf_iterator<char>(a)),
                             std::istreambuf_iterator<char>());
  const std::vector<char> bb((std::istreambuf_iterator<char>(b)),
                             std::istreambuf_iterator<char>());
  CHECK(ba == bb);

  const CTensor h = random_csi(4, 2, 4, 2, rng);
  CHECK(forward(params, cfg, h, ForwardMode::Infer).v_real ==
        forward(loaded.params, loaded.config, h, ForwardMode::Infer).v_real);
  std::filesystem::remove_all(dir);
}

TEST_CASE("parameter census separates the affine group") {
  Rng rng(59);
  // Reference layout: L = 5, every layer 2M channels wide.
  HGNetConfig cfg = small_config(5, 4, 2, 2);
  const HGNetParams params = HGNetParams::init(cfg, rng);
  const ParamCensus census = params.census();
  // Affine parameters stay a small fraction of the total.
  CHECK(census.affine_fraction() < 0.05);
  CHECK(census.affine == 2u * (4 + 4 + 4 + 4 + 4));
  std::size_t conv = 0;
  for (int l = 0; l < 5; ++l) conv += 3 * 3 * 4 * 4 + 4;
  const std::size_t fc = 4u * (3 * 4 + 3);
  CHECK(census.total == conv + 2u * 20 + fc);
}
