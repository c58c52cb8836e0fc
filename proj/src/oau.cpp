#include "cfbeam/oau.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "cfbeam/errors.hpp"
#include "cfbeam/metrics.hpp"
#include "cfbeam/optim.hpp"

namespace cfbeam::oau {

namespace {

constexpr double kMagnitudeClamp = 1e-12;

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

/// Entropy head over the B x Q x I x 2M real view: mean over the batch of
/// sum |x log x|, x the complex entry magnitude.
Tape::NodeId entropy_loss_node(Tape& tape, Tape::NodeId projected) {
  const Tensor& value = tape.value(projected);
  if (value.rank() != 4 || value.dim(3) % 2 != 0)
    throw ShapeError("entropy_node: expected batched Q x I x 2M input");
  const std::size_t b = value.dim(0);
  const std::size_t cells = value.dim(1) * value.dim(2);
  const std::size_t m = value.dim(3) / 2;

  double loss = 0.0;
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t cell = 0; cell < cells; ++cell) {
      const double* row = value.data() + (s * cells + cell) * 2 * m;
      for (std::size_t c = 0; c < m; ++c) {
        const double mag = std::hypot(row[c], row[c + m]);
        if (mag <= kMagnitudeClamp) continue;
        loss += std::abs(mag * std::log(mag));
      }
    }
  loss /= static_cast<double>(b);

  return tape.custom("entropy_loss", Tensor::scalar(loss), {projected},
                     [projected, b, cells, m](Tape& t, Tape::NodeId out_node) {
                       const double g = t.grad(out_node)[0] / static_cast<double>(b);
                       const Tensor& value = t.value(projected);
                       Tensor gin(value.dims());
                       for (std::size_t s = 0; s < b; ++s)
                         for (std::size_t cell = 0; cell < cells; ++cell) {
                           const std::size_t base = (s * cells + cell) * 2 * m;
                           for (std::size_t c = 0; c < m; ++c) {
                             const double re = value[base + c];
                             const double im = value[base + c + m];
                             const double mag = std::hypot(re, im);
                             if (mag <= kMagnitudeClamp) continue;
                             const double h = mag * std::log(mag);
                             if (h == 0.0) continue;
                             // d|x log x|/dx = sign(x log x) (log x + 1).
                             const double dmag =
                                 (h > 0.0 ? 1.0 : -1.0) * (std::log(mag) + 1.0) * g;
                             gin[base + c] += dmag * re / mag;
                             gin[base + c + m] += dmag * im / mag;
                           }
                         }
                       t.accumulate_grad(projected, gin);
                     });
}

double entropy_loss(const BeamTensor& beams) {
  if (!beams.v.all_finite()) throw NumericError("entropy_loss: non-finite beams");
  double loss = 0.0;
  for (std::size_t k = 0; k < beams.v.size(); ++k) {
    const double mag = std::abs(beams.v[k]);
    if (mag <= kMagnitudeClamp) continue;
    loss += std::abs(mag * std::log(mag));
  }
  return loss;
}

AdaptResult adapt(const hgnet::HGNetParams& trained, const hgnet::HGNetConfig& cfg,
                  const OAUConfig& oau_cfg, const CTensor& h, double noise_power) {
  if (oau_cfg.iterations < 0) throw ArgumentError("adapt: iteration count must be >= 0");
  if (oau_cfg.learning_rate <= 0.0) throw ArgumentError("adapt: learning rate must be positive");
  if (!trained.stats_populated())
    throw ArgumentError("adapt: running statistics not populated; train first");

  AdaptResult result;
  result.params = trained;  // private copy; only affine groups will move
  result.params.set_trainable_affine_only();

  const auto census = result.params.census();
  result.report.touched_fraction =
      static_cast<double>(census.affine) / static_cast<double>(census.total);

  AdamOptimizer opt(result.params.affine_groups(), oau_cfg.learning_rate);
  const std::vector<const CTensor*> batch{&h};
  const double t_start = now_ms();

  hgnet::PipelineSpec spec;  // infer statistics, no masks, no discriminators

  for (int iter = 1; iter <= oau_cfg.iterations; ++iter) {
    const double t0 = now_ms();
    Tape tape;
    hgnet::PipelineNodes nodes = hgnet::build_pipeline(tape, result.params, cfg, batch, spec);
    Tape::NodeId loss_node = entropy_loss_node(tape, nodes.projected);
    const double loss = tape.value(loss_node)[0];
    if (!std::isfinite(loss)) {
      result.report.aborted = true;
      result.report.abort_iteration = iter;
      break;
    }
    opt.zero_grad();
    tape.backward(loss_node);
    opt.step();

    AdaptationStep step;
    step.iteration = iter;
    step.entropy = loss;
    step.sum_rate_bits = std::numeric_limits<double>::quiet_NaN();
    if (oau_cfg.record_rates) {
      const BeamTensor beams =
          hgnet::forward(result.params, cfg, h, hgnet::ForwardMode::Infer).beams;
      step.sum_rate_bits = metrics::sum_rate(h, beams, noise_power);
    }
    step.wall_ms = now_ms() - t0;
    result.report.steps.push_back(step);
  }

  result.beams = hgnet::forward(result.params, cfg, h, hgnet::ForwardMode::Infer).beams;
  result.report.wall_ms_total = now_ms() - t_start;
  return result;
}

double ParamDeltaReport::max_delta_outside_affine() const {
  double worst = 0.0;
  for (const auto& g : groups) {
    const bool affine = g.id.find(".gamma") != std::string::npos ||
                        g.id.find(".beta") != std::string::npos;
    if (!affine) worst = std::max(worst, g.max_abs_delta);
  }
  return worst;
}

ParamDeltaReport param_delta_report(const hgnet::HGNetParams& before,
                                    const hgnet::HGNetParams& after) {
  const auto ga = before.all_groups();
  const auto gb = after.all_groups();
  if (ga.size() != gb.size()) throw ArgumentError("param_delta_report: architecture mismatch");
  ParamDeltaReport report;
  std::size_t total = 0, touched = 0;
  for (std::size_t k = 0; k < ga.size(); ++k) {
    if (ga[k]->id != gb[k]->id || ga[k]->size() != gb[k]->size())
      throw ArgumentError("param_delta_report: group mismatch at " + ga[k]->id);
    ParamDeltaReport::GroupDelta d;
    d.id = ga[k]->id;
    for (std::size_t i = 0; i < ga[k]->size(); ++i)
      d.max_abs_delta = std::max(d.max_abs_delta, std::abs(ga[k]->values[i] - gb[k]->values[i]));
    total += ga[k]->size();
    if (d.max_abs_delta > 0.0) touched += ga[k]->size();
    report.groups.push_back(std::move(d));
  }
  report.touched_fraction = total == 0 ? 0.0 : static_cast<double>(touched) / total;
  return report;
}

}  // namespace cfbeam::oau
