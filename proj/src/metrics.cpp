#include "cfbeam/metrics.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "cfbeam/errors.hpp"

namespace cfbeam::metrics {

namespace {

using Eigen::MatrixXcd;
using Eigen::VectorXcd;

/// N x (Q*M) channel rows of one user.
MatrixXcd user_channel(const CTensor& h, int user, int n) {
  const std::size_t cols = h.dim(1);
  MatrixXcd out(n, cols);
  for (int r = 0; r < n; ++r)
    for (std::size_t c = 0; c < cols; ++c) out(r, static_cast<Eigen::Index>(c)) =
        h.at2(static_cast<std::size_t>(user * n + r), c);
  return out;
}

VectorXcd beam_vector(const BeamTensor& beams, int user) {
  const auto stacked = beams.user_vector(user);
  VectorXcd v(static_cast<Eigen::Index>(stacked.size()));
  for (std::size_t k = 0; k < stacked.size(); ++k) v(static_cast<Eigen::Index>(k)) = stacked[k];
  return v;
}

double logdet_hermitian(const MatrixXcd& a) {
  Eigen::LLT<MatrixXcd> llt(a);
  if (llt.info() != Eigen::Success) throw NumericError("log-det: matrix not positive definite");
  double acc = 0.0;
  const auto& l = llt.matrixLLT();
  for (Eigen::Index i = 0; i < a.rows(); ++i) acc += std::log(l(i, i).real());
  return 2.0 * acc;
}

}  // namespace

double user_rate(const CTensor& h, const BeamTensor& beams, int user, double noise_power) {
  if (noise_power <= 0.0) throw ArgumentError("user_rate: noise power must be positive");
  if (!h.all_finite()) throw NumericError("user_rate: non-finite channel");
  const int users = beams.user_count();
  if (user < 0 || user >= users) throw ArgumentError("user_rate: user index out of range");
  if (h.rank() != 2 || h.dim(0) % users != 0)
    throw ShapeError("user_rate: channel rows not divisible by user count");
  const int n = static_cast<int>(h.dim(0)) / users;
  const std::size_t qm = h.dim(1);
  if (qm != static_cast<std::size_t>(beams.ap_count()) * beams.antennas())
    throw ShapeError("user_rate: channel columns do not match beam tensor");

  const MatrixXcd hi = user_channel(h, user, n);
  MatrixXcd interference = noise_power * MatrixXcd::Identity(n, n);
  MatrixXcd full = interference;
  for (int j = 0; j < users; ++j) {
    const VectorXcd u = hi * beam_vector(beams, j);
    const MatrixXcd outer = u * u.adjoint();
    full += outer;
    if (j != user) interference += outer;
  }
  const double ln_ratio = logdet_hermitian(full) - logdet_hermitian(interference);
  const double bits = ln_ratio / std::log(2.0);
  return bits > 0.0 ? bits : 0.0;
}

double sum_rate(const CTensor& h, const BeamTensor& beams, double noise_power) {
  double acc = 0.0;
  for (int i = 0; i < beams.user_count(); ++i) acc += user_rate(h, beams, i, noise_power);
  return acc;
}

double per_ap_power(const BeamTensor& beams, int q) {
  if (q < 0 || q >= beams.ap_count()) throw ArgumentError("per_ap_power: AP index out of range");
  double acc = 0.0;
  for (int i = 0; i < beams.user_count(); ++i)
    for (int m = 0; m < beams.antennas(); ++m) acc += std::norm(beams.at(q, i, m));
  return acc;
}

BeamTensor project_power(const BeamTensor& beams, double p_max, PowerScaling mode) {
  if (p_max <= 0.0) throw ArgumentError("project_power: p_max must be positive");
  BeamTensor out = beams;
  for (int q = 0; q < beams.ap_count(); ++q) {
    const double power = per_ap_power(beams, q);
    if (power <= p_max) continue;
    const double scale =
        mode == PowerScaling::Projection ? std::sqrt(p_max / power) : p_max / power;
    for (int i = 0; i < beams.user_count(); ++i)
      for (int m = 0; m < beams.antennas(); ++m) out.at(q, i, m) *= scale;
  }
  return out;
}

}  // namespace cfbeam::metrics
