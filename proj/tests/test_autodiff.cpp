#include <doctest.h>

#include <cmath>

#include "cfbeam/autodiff.hpp"
#include "cfbeam/errors.hpp"
#include "cfbeam/rng.hpp"

using namespace cfbeam;

namespace {

Tensor random_tensor(std::vector<std::size_t> dims, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(dims));
  for (std::size_t k = 0; k < t.size(); ++k) t[k] = rng.uniform(lo, hi);
  return t;
}

/// Scalar head for gradient checks: fixed random weighting of all outputs.
Tape::NodeId weighted_head(Tape& tape, Tape::NodeId out, std::uint64_t seed) {
  Rng rng(seed);
  const Tensor& v = tape.value(out);
  Tensor w(v.dims());
  for (std::size_t k = 0; k < w.size(); ++k) w[k] = rng.uniform(-1.0, 1.0);
  double acc = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) acc += v[k] * w[k];
  return tape.custom("weighted_head", Tensor::scalar(acc), {out},
                     [out, w](Tape& t, Tape::NodeId head) {
                       const double g = t.grad(head)[0];
                       Tensor gin(w.dims());
                       for (std::size_t k = 0; k < w.size(); ++k) gin[k] = g * w[k];
                       t.accumulate_grad(out, gin);
                     });
}

}  // namespace

TEST_CASE("conv2d direct oracle: 3x3 input, 2x2 ones kernel") {
  // Nested-loop hand evaluation of the valid convolution of 1..9.
  Tensor input({3, 3, 1});
  for (std::size_t k = 0; k < 9; ++k) input[k] = static_cast<double>(k + 1);
  Tensor kernel({2, 2, 1, 1}, 1.0);
  Tape tape;
  auto out = tape.conv2d(tape.input(input), tape.input(kernel), tape.input(Tensor({1}, 0.0)), 1,
                         1, 0, 0);
  const Tensor& v = tape.value(out);
  REQUIRE(v.dims() == std::vector<std::size_t>{2, 2, 1});
  CHECK(v[0] == 12.0);
  CHECK(v[1] == 16.0);
  CHECK(v[2] == 24.0);
  CHECK(v[3] == 28.0);
}

TEST_CASE("conv2d zero input gives zero output") {
  Rng rng(3);
  Tape tape;
  auto out = tape.conv2d(tape.input(Tensor({4, 4, 2}, 0.0)),
                         tape.input(random_tensor({3, 3, 2, 5}, rng)),
                         tape.input(Tensor({5}, 0.0)), 1, 1, 1, 1);
  for (std::size_t k = 0; k < tape.value(out).size(); ++k) CHECK(tape.value(out)[k] == 0.0);
}

TEST_CASE("conv2d paper-scale shape: 16x16x8, k=3, p=1, s=1") {
  Rng rng(4);
  Tape tape;
  auto out = tape.conv2d(tape.input(random_tensor({16, 16, 8}, rng)),
                         tape.input(random_tensor({3, 3, 8, 4}, rng)),
                         tape.input(Tensor({4}, 0.0)), 1, 1, 1, 1);
  CHECK(tape.value(out).dims() == std::vector<std::size_t>{16, 16, 4});
}

TEST_CASE("conv2d rejects non-integer output dimensions") {
  CHECK_THROWS_AS(conv_output_dims(5, 5, 2, 2, 2, 2, 0, 0), ArchitectureError);
  CHECK_THROWS_AS(conv_output_dims(3, 3, 5, 5, 1, 1, 0, 0), ArchitectureError);
  // 5x5, k=3, s=2, p=0: (5 - 3) / 2 + 1 = 2, fine.
  auto [w, h] = conv_output_dims(5, 5, 3, 3, 2, 2, 0, 0);
  CHECK(w == 2);
  CHECK(h == 2);
}

TEST_CASE("unit-stride dimension preservation across widths 1..64") {
  // s = 1, odd k, p = (k-1)/2 preserves the spatial size for every width.
  for (int k : {1, 3, 5, 7}) {
    for (std::size_t w = 1; w <= 64; ++w) {
      auto [ow, oh] = conv_output_dims(w, 65 - w, k, k, 1, 1, (k - 1) / 2, (k - 1) / 2);
      CHECK(ow == w);
      CHECK(oh == 65 - w);
    }
  }
}

TEST_CASE("strided dimension preservation follows the padding formula") {
  Rng rng(11);
  int tested = 0;
  while (tested < 200) {
    const std::size_t w = 2 + rng.below(30);
    const int s = 2 + static_cast<int>(rng.below(3));
    const int k = 1 + static_cast<int>(rng.below(6));
    const long long num = static_cast<long long>(w) * s - static_cast<long long>(w) - s + k;
    if (num < 0 || num % 2 != 0) continue;
    const int p = static_cast<int>(num / 2);
    auto [ow, oh] = conv_output_dims(w, w, k, k, s, s, p, p);
    CHECK(ow == w);
    CHECK(oh == w);
    ++tested;
  }
}

TEST_CASE("batchnorm normalizes {1,3} to {-1,+1} with eps 0") {
  Tensor input({2, 1, 1, 1});
  input[0] = 1.0;
  input[1] = 3.0;
  Tape tape;
  auto out = tape.batchnorm(tape.input(input), tape.input(Tensor({1}, 1.0)),
                            tape.input(Tensor({1}, 0.0)), nullptr, 0.0, BnMode::Train);
  CHECK(tape.value(out)[0] == doctest::Approx(-1.0));
  CHECK(tape.value(out)[1] == doctest::Approx(1.0));
}

TEST_CASE("batchnorm zero-variance channel returns beta everywhere") {
  Tensor input({3, 2, 2, 1}, 4.2);
  Tape tape;
  auto out = tape.batchnorm(tape.input(input), tape.input(Tensor({1}, 2.0)),
                            tape.input(Tensor({1}, 0.7)), nullptr, 1e-5, BnMode::Train);
  for (std::size_t k = 0; k < tape.value(out).size(); ++k)
    CHECK(tape.value(out)[k] == doctest::Approx(0.7));
}

TEST_CASE("running variance carries the B/(B-1) correction") {
  // Two batches of size 2, each with biased variance 1 -> stored 2.
  BnStats stats(1);
  Tensor mean({1}, 0.0), var({1}, 1.0);
  stats.accumulate(mean, var, 2);
  stats.accumulate(mean, var, 2);
  CHECK(stats.variance()[0] == doctest::Approx(2.0));
  CHECK(stats.mean()[0] == doctest::Approx(0.0));
  CHECK(stats.batches == 2);
}

TEST_CASE("batchnorm train mode rejects a single-sample batch") {
  Tape tape;
  auto x = tape.input(Tensor({1, 2, 2, 1}, 1.0));
  auto g = tape.input(Tensor({1}, 1.0));
  auto b = tape.input(Tensor({1}, 0.0));
  CHECK_THROWS_AS(tape.batchnorm(x, g, b, nullptr, 1e-5, BnMode::Train), DegenerateBatchError);
}

TEST_CASE("batchnorm infer mode is a pure function") {
  Rng rng(17);
  BnStats stats(3);
  stats.accumulate(random_tensor({3}, rng), random_tensor({3}, rng, 0.5, 2.0), 4);
  const Tensor input = random_tensor({5, 5, 3}, rng);
  const Tensor gamma = random_tensor({3}, rng, 0.5, 1.5);
  const Tensor beta = random_tensor({3}, rng);
  auto run = [&] {
    Tape tape;
    auto out = tape.batchnorm(tape.input(input), tape.input(gamma), tape.input(beta), &stats,
                              1e-5, BnMode::Infer);
    return tape.value(out);
  };
  CHECK(run() == run());
}

TEST_CASE("activation point values") {
  Tape tape;
  Tensor x({3});
  x[0] = -2.0;
  x[1] = 3.0;
  x[2] = 0.0;
  auto r = tape.relu(tape.input(x));
  CHECK(tape.value(r)[0] == 0.0);
  CHECK(tape.value(r)[1] == 3.0);
  auto t = tape.tanh_act(tape.input(x));
  CHECK(tape.value(t)[2] == 0.0);
}

TEST_CASE("tanh derivative at zero equals one") {
  auto build = [](Tape& tape, const std::vector<Tape::NodeId>& in) {
    return weighted_head(tape, tape.tanh_act(in[0]), 99);
  };
  Tensor x({1}, 0.0);
  const auto report = grad_check(build, {x}, {"x"}, 1e-5);
  CHECK(report.pass(1e-6));
}

TEST_CASE("grl is identity forward and negation backward") {
  Rng rng(23);
  const Tensor x = random_tensor({4, 4, 2}, rng);
  Tape tape;
  auto in = tape.input(x, true);
  auto out = tape.grl(in, 1.5);
  CHECK(tape.value(out) == x);
  auto head = weighted_head(tape, out, 7);
  tape.backward(head);
  // The same head applied directly to the input gives the un-negated grads.
  Tape ref;
  auto rin = ref.input(x, true);
  ref.backward(weighted_head(ref, rin, 7));
  for (std::size_t k = 0; k < x.size(); ++k)
    CHECK(tape.grad(in)[k] == doctest::Approx(-1.5 * ref.grad(rin)[k]));
}

TEST_CASE("grl with lambda zero blocks the gradient") {
  Rng rng(29);
  const Tensor x = random_tensor({2, 2, 1}, rng);
  Tape tape;
  auto in = tape.input(x, true);
  tape.backward(weighted_head(tape, tape.grl(in, 0.0), 3));
  for (std::size_t k = 0; k < x.size(); ++k) CHECK(tape.grad(in)[k] == 0.0);
}

TEST_CASE("gap mean and uniform backward") {
  Tensor x({2, 2, 1});
  x[0] = 1.0;
  x[1] = 2.0;
  x[2] = 3.0;
  x[3] = 4.0;
  Tape tape;
  auto in = tape.input(x, true);
  auto out = tape.gap(in);
  CHECK(tape.value(out)[0] == doctest::Approx(2.5));
  // Seed the head with gradient 1.0 on the single output.
  auto head = tape.scaled_sum({{out, 1.0}});
  tape.backward(head);
  for (std::size_t k = 0; k < 4; ++k) CHECK(tape.grad(in)[k] == doctest::Approx(0.25));

  Tape tape2;
  auto c = tape2.gap(tape2.input(Tensor({3, 5, 2}, 4.0)));
  CHECK(tape2.value(c)[0] == doctest::Approx(4.0));
  CHECK(tape2.value(c)[1] == doctest::Approx(4.0));
}

TEST_CASE("fc identity and dot product") {
  Tape tape;
  Tensor w({2, 2}, 0.0);
  w.at2(0, 0) = 1.0;
  w.at2(1, 1) = 1.0;
  Tensor x({2});
  x[0] = 0.3;
  x[1] = -0.8;
  auto out = tape.fc(tape.input(x), tape.input(w), tape.input(Tensor({2}, 0.0)));
  CHECK(tape.value(out)[0] == doctest::Approx(0.3));
  CHECK(tape.value(out)[1] == doctest::Approx(-0.8));

  Tensor row({1, 2});
  row.at2(0, 0) = 1.0;
  row.at2(0, 1) = -1.0;
  Tensor in2({2});
  in2[0] = 2.0;
  in2[1] = 3.0;
  auto dot = tape.fc(tape.input(in2), tape.input(row), tape.input(Tensor({1}, 0.0)));
  CHECK(tape.value(dot)[0] == doctest::Approx(-1.0));
}

TEST_CASE("softmax cross entropy equals direct arithmetic") {
  // Uniform logits over 3 classes -> log 3.
  Tape tape;
  auto loss = tape.softmax_cross_entropy(tape.input(Tensor({3}, 0.0)), {1});
  CHECK(tape.value(loss)[0] == doctest::Approx(std::log(3.0)));

  Rng rng(31);
  const Tensor logits = random_tensor({4}, rng, -2.0, 2.0);
  Tape tape2;
  auto l2 = tape2.softmax_cross_entropy(tape2.input(logits), {2});
  double z = 0.0;
  for (std::size_t k = 0; k < 4; ++k) z += std::exp(logits[k]);
  CHECK(tape2.value(l2)[0] == doctest::Approx(-(logits[2] - std::log(z))).epsilon(1e-12));
}

TEST_CASE("gradient suite: reverse mode matches finite differences") {
  // Seeded sweep across every differentiable op; inputs in [-1, 1].
  int cases = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);

    // conv2d, unit and non-unit stride
    {
      const std::size_t w = 3 + rng.below(4), h = 3 + rng.below(4);
      const std::size_t ci = 1 + rng.below(3), co = 1 + rng.below(3);
      auto build = [&](Tape& t, const std::vector<Tape::NodeId>& in) {
        return weighted_head(t, t.conv2d(in[0], in[1], in[2], 1, 1, 1, 1), seed);
      };
      const auto report = grad_check(
          build,
          {random_tensor({w, h, ci}, rng), random_tensor({3, 3, ci, co}, rng),
           random_tensor({co}, rng)},
          {"input", "kernels", "bias"});
      CHECK_MESSAGE(report.pass(1e-4), "conv2d seed ", seed, " err ", report.worst_rel_err());
      ++cases;
    }
    {
      auto build = [&](Tape& t, const std::vector<Tape::NodeId>& in) {
        return weighted_head(t, t.conv2d(in[0], in[1], in[2], 2, 2, 1, 1), seed + 50);
      };
      const auto report =
          grad_check(build,
                     {random_tensor({5, 5, 2}, rng), random_tensor({3, 3, 2, 2}, rng),
                      random_tensor({2}, rng)},
                     {"input", "kernels", "bias"});
      CHECK_MESSAGE(report.pass(1e-4), "strided conv2d seed ", seed);
      ++cases;
    }

    // batchnorm train mode, full backward
    {
      auto build = [&](Tape& t, const std::vector<Tape::NodeId>& in) {
        return weighted_head(t, t.batchnorm(in[0], in[1], in[2], nullptr, 1e-5, BnMode::Train),
                             seed + 100);
      };
      const auto report =
          grad_check(build,
                     {random_tensor({3, 2, 2, 2}, rng), random_tensor({2}, rng, 0.5, 1.5),
                      random_tensor({2}, rng)},
                     {"input", "gamma", "beta"});
      CHECK_MESSAGE(report.pass(1e-4), "batchnorm train seed ", seed);
      ++cases;
    }

    // batchnorm infer mode: affine parameters and the scaled input path
    {
      BnStats stats(2);
      stats.accumulate(random_tensor({2}, rng), random_tensor({2}, rng, 0.5, 2.0), 4);
      auto build = [&, stats](Tape& t, const std::vector<Tape::NodeId>& in) mutable {
        return weighted_head(t, t.batchnorm(in[0], in[1], in[2], &stats, 1e-5, BnMode::Infer),
                             seed + 150);
      };
      const auto report =
          grad_check(build,
                     {random_tensor({4, 3, 2}, rng), random_tensor({2}, rng, 0.5, 1.5),
                      random_tensor({2}, rng)},
                     {"input", "gamma", "beta"});
      CHECK_MESSAGE(report.pass(1e-4), "batchnorm infer seed ", seed);
      ++cases;
    }

    // fc
    {
      auto build = [&](Tape& t, const std::vector<Tape::NodeId>& in) {
        return weighted_head(t, t.fc(in[0], in[1], in[2]), seed + 200);
      };
      const auto report = grad_check(build,
                                     {random_tensor({2, 5}, rng), random_tensor({3, 5}, rng),
                                      random_tensor({3}, rng)},
                                     {"input", "weights", "bias"});
      CHECK_MESSAGE(report.pass(1e-4), "fc seed ", seed);
      ++cases;
    }

    // gap + tanh composition
    {
      auto build = [&](Tape& t, const std::vector<Tape::NodeId>& in) {
        return weighted_head(t, t.gap(t.tanh_act(in[0])), seed + 250);
      };
      const auto report = grad_check(build, {random_tensor({4, 4, 3}, rng)}, {"input"});
      CHECK_MESSAGE(report.pass(1e-4), "gap/tanh seed ", seed);
      ++cases;
    }

    // relu away from the kink
    {
      Tensor x = random_tensor({4, 4, 2}, rng);
      for (std::size_t k = 0; k < x.size(); ++k)
        if (std::abs(x[k]) < 0.05) x[k] = 0.1;
      auto build = [&](Tape& t, const std::vector<Tape::NodeId>& in) {
        return weighted_head(t, t.relu(in[0]), seed + 300);
      };
      const auto report = grad_check(build, {x}, {"input"});
      CHECK_MESSAGE(report.pass(1e-4), "relu seed ", seed);
      ++cases;
    }

    // residual-style composition: add + tanh
    {
      auto build = [&](Tape& t, const std::vector<Tape::NodeId>& in) {
        return weighted_head(t, t.tanh_act(t.add(in[0], in[1])), seed + 400);
      };
      const auto report = grad_check(
          build, {random_tensor({3, 3, 2}, rng), random_tensor({3, 3, 2}, rng)}, {"a", "b"});
      CHECK_MESSAGE(report.pass(1e-4), "add/tanh seed ", seed);
      ++cases;
    }
  }
  CHECK(cases >= 50);
}

TEST_CASE("channel mask gradients and masking") {
  Rng rng(41);
  Tensor mask({2, 3}, 1.0);
  mask.at2(0, 1) = 0.0;
  mask.at2(1, 2) = 0.0;
  auto build = [&](Tape& t, const std::vector<Tape::NodeId>& in) {
    return weighted_head(t, t.channel_mask(in[0], mask), 5);
  };
  const auto report = grad_check(build, {random_tensor({2, 2, 2, 3}, rng)}, {"input"});
  CHECK(report.pass(1e-6));
}

TEST_CASE("backward touches each op once and reproduces bit-identical grads") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    ParamGroup w("w", random_tensor({3, 4}, rng));
    ParamGroup b("b", random_tensor({3}, rng));
    Tape tape;
    auto out = tape.fc(tape.input(random_tensor({4}, rng)), tape.param(w), tape.param(b));
    auto head = weighted_head(tape, tape.tanh_act(out), seed);
    tape.backward(head);
    const auto census = tape.census();
    CHECK(census.ops == 3);  // fc, tanh, head
    return std::make_pair(w.grad, b.grad);
  };
  const auto a = run(77);
  const auto b = run(77);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("unused and frozen parameters receive exactly zero gradient") {
  Rng rng(51);
  ParamGroup used("used", random_tensor({2, 2}, rng));
  ParamGroup frozen("frozen", random_tensor({2, 2}, rng));
  frozen.trainable = false;
  ParamGroup untouched("untouched", random_tensor({4}, rng));
  untouched.grad.fill(3.0);  // stale garbage; tape never registers this group

  Tape tape;
  auto x = tape.input(random_tensor({2}, rng));
  auto h1 = tape.fc(x, tape.param(used), tape.input(Tensor({2}, 0.0)));
  auto h2 = tape.fc(h1, tape.param(frozen), tape.input(Tensor({2}, 0.0)));
  tape.backward(weighted_head(tape, h2, 9));

  bool used_nonzero = false;
  for (std::size_t k = 0; k < used.grad.size(); ++k) used_nonzero |= used.grad[k] != 0.0;
  CHECK(used_nonzero);
  for (std::size_t k = 0; k < frozen.grad.size(); ++k) CHECK(frozen.grad[k] == 0.0);
  // Unregistered groups are owned by their optimizer; zeroing is its job.
  for (std::size_t k = 0; k < untouched.grad.size(); ++k) CHECK(untouched.grad[k] == 3.0);
}

TEST_CASE("grad_check flags a broken backward implementation") {
  // A deliberately wrong backward: factor 2 too large.
  auto build = [](Tape& t, const std::vector<Tape::NodeId>& in) {
    const Tensor& v = t.value(in[0]);
    Tensor out = Tensor::scalar(2.0 * v[0]);
    return t.custom("bad_double", std::move(out), {in[0]},
                    [in](Tape& tt, Tape::NodeId head) {
                      Tensor g({1});
                      g[0] = 4.0 * tt.grad(head)[0];  // should be 2.0
                      tt.accumulate_grad(in[0], g);
                    });
  };
  const auto report = grad_check(build, {Tensor({1}, 0.5)}, {"x"});
  CHECK_FALSE(report.pass(1e-4));
  CHECK(report.args[0].max_rel_err > 0.1);
}
