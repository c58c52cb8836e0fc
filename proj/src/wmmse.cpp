#include "cfbeam/wmmse.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "cfbeam/errors.hpp"
#include "cfbeam/metrics.hpp"

namespace cfbeam::wmmse {

namespace {

using Eigen::MatrixXcd;
using Eigen::VectorXcd;

struct Problem {
  int q, i, m, n;
  double p_max, sigma2;
  std::vector<MatrixXcd> h;  // per user: N x (Q*M)
};

Problem split_channel(const CTensor& h, int ap_antennas, int user_antennas, double p_max,
                      double noise_power) {
  if (h.rank() != 2) throw ShapeError("wmmse: channel must be rank 2");
  if (!h.all_finite()) throw NumericError("wmmse: non-finite channel");
  if (h.dim(0) % user_antennas != 0 || h.dim(1) % ap_antennas != 0)
    throw ShapeError("wmmse: channel dims not divisible by antenna counts");
  Problem p;
  p.n = user_antennas;
  p.m = ap_antennas;
  p.i = static_cast<int>(h.dim(0)) / user_antennas;
  p.q = static_cast<int>(h.dim(1)) / ap_antennas;
  p.p_max = p_max;
  p.sigma2 = noise_power;
  const Eigen::Index cols = static_cast<Eigen::Index>(h.dim(1));
  for (int u = 0; u < p.i; ++u) {
    MatrixXcd hu(p.n, cols);
    for (int r = 0; r < p.n; ++r)
      for (Eigen::Index c = 0; c < cols; ++c)
        hu(r, c) = h.at2(static_cast<std::size_t>(u * p.n + r), static_cast<std::size_t>(c));
    p.h.push_back(std::move(hu));
  }
  return p;
}

BeamTensor to_beams(const Problem& p, const MatrixXcd& v) {
  BeamTensor beams(p.q, p.i, p.m);
  for (int u = 0; u < p.i; ++u)
    for (int q = 0; q < p.q; ++q)
      for (int a = 0; a < p.m; ++a) beams.at(q, u, a) = v(q * p.m + a, u);
  return beams;
}

MatrixXcd from_beams(const Problem& p, const BeamTensor& beams) {
  MatrixXcd v(p.q * p.m, p.i);
  for (int u = 0; u < p.i; ++u)
    for (int q = 0; q < p.q; ++q)
      for (int a = 0; a < p.m; ++a) v(q * p.m + a, u) = beams.at(q, u, a);
  return v;
}

/// Exact minimizer of sum_i v_i^H Gqq v_i + 2 Re(v_i^H c_i) subject to
/// sum_i ||v_i||^2 <= p_max, via the eigen-basis of the block gram matrix
/// and bisection on the multiplier. Returns the M x I block.
MatrixXcd solve_block(const MatrixXcd& gqq, const MatrixXcd& c, double p_max, double tol,
                      int max_steps) {
  const Eigen::Index m = gqq.rows();
  const Eigen::Index users = c.cols();
  Eigen::SelfAdjointEigenSolver<MatrixXcd> eig(gqq);
  Eigen::VectorXd d = eig.eigenvalues().cwiseMax(0.0);
  const MatrixXcd chat = eig.eigenvectors().adjoint() * c;

  const double eig_floor = 1e-12 * std::max(d.maxCoeff(), 1.0);
  auto power_at = [&](double mu) {
    double acc = 0.0;
    for (Eigen::Index k = 0; k < m; ++k)
      for (Eigen::Index u = 0; u < users; ++u) {
        const double denom = d(k) + mu;
        const double num = std::norm(chat(k, u));
        if (denom <= eig_floor) {
          if (num > 1e-24) return std::numeric_limits<double>::infinity();
          continue;  // free direction, unused by the minimum-norm solution
        }
        acc += num / (denom * denom);
      }
    return acc;
  };

  double mu = 0.0;
  if (power_at(0.0) > p_max) {
    double lo = 0.0, hi = 1.0;
    for (int grow = 0; grow < 200 && power_at(hi) > p_max; ++grow) {
      lo = hi;
      hi *= 2.0;
    }
    for (int step = 0; step < max_steps; ++step) {
      const double mid = 0.5 * (lo + hi);
      const double pw = power_at(mid);
      if (pw > p_max)
        lo = mid;
      else
        hi = mid;
      if (std::isfinite(pw) && std::abs(pw - p_max) <= tol * p_max) {
        hi = mid;
        break;
      }
    }
    mu = hi;  // feasible side of the bracket
  }

  MatrixXcd vhat(m, users);
  for (Eigen::Index k = 0; k < m; ++k)
    for (Eigen::Index u = 0; u < users; ++u) {
      const double denom = d(k) + mu;
      vhat(k, u) = denom <= eig_floor ? std::complex<double>(0.0, 0.0) : -chat(k, u) / denom;
    }
  return eig.eigenvectors() * vhat;
}

}  // namespace

BeamTensor mrt_baseline(const CTensor& h, int ap_antennas, int user_antennas, double p_max) {
  Problem p = split_channel(h, ap_antennas, user_antennas, p_max, 1.0);
  MatrixXcd v = MatrixXcd::Zero(p.q * p.m, p.i);
  const double scale = std::sqrt(p_max * static_cast<double>(p.q) / static_cast<double>(p.i));
  for (int u = 0; u < p.i; ++u) {
    if (p.h[u].norm() == 0.0) continue;  // zero channel keeps a zero beam
    Eigen::JacobiSVD<MatrixXcd> svd(p.h[u], Eigen::ComputeThinV);
    v.col(u) = svd.matrixV().col(0) * scale;
  }
  return metrics::project_power(to_beams(p, v), p_max, metrics::PowerScaling::Projection);
}

WmmseResult wmmse_solve(const CTensor& h, int ap_antennas, int user_antennas, double p_max,
                        double noise_power, const WmmseConfig& cfg) {
  if (p_max <= 0.0 || noise_power <= 0.0)
    throw ArgumentError("wmmse: p_max and noise power must be positive");
  if (cfg.max_iters < 1) throw ArgumentError("wmmse: max_iters must be >= 1");
  Problem p = split_channel(h, ap_antennas, user_antennas, p_max, noise_power);

  BeamTensor beams = mrt_baseline(h, ap_antennas, user_antennas, p_max);
  MatrixXcd v = from_beams(p, beams);

  WmmseResult result;
  double prev_rate = metrics::sum_rate(h, beams, noise_power);
  result.rate_trace.push_back(prev_rate);

  std::vector<VectorXcd> w(p.i);
  std::vector<double> weights(p.i, 1.0);

  for (int iter = 1; iter <= cfg.max_iters; ++iter) {
    // (a) MMSE receive filters.
    for (int u = 0; u < p.i; ++u) {
      MatrixXcd cov = noise_power * MatrixXcd::Identity(p.n, p.n);
      for (int j = 0; j < p.i; ++j) {
        const VectorXcd hv = p.h[u] * v.col(j);
        cov += hv * hv.adjoint();
      }
      w[u] = cov.llt().solve(p.h[u] * v.col(u));
    }
    // (b) MSE weights.
    for (int u = 0; u < p.i; ++u) {
      const std::complex<double> tip = w[u].adjoint() * (p.h[u] * v.col(u));
      double mse = 1.0 - tip.real();
      mse = std::max(mse, 1e-12);
      weights[u] = 1.0 / mse;
    }
    // (c) Beamformers under per-AP caps: block-coordinate descent over AP
    // blocks, warm-started from the previous beams. Each block solve is the
    // exact constrained minimizer for that AP, so the surrogate objective
    // never increases and the sum-rate trace stays monotone even when the
    // coordinate sweep stops early.
    MatrixXcd gram = MatrixXcd::Zero(p.q * p.m, p.q * p.m);
    MatrixXcd rhs(p.q * p.m, p.i);
    for (int u = 0; u < p.i; ++u) {
      const VectorXcd f = p.h[u].adjoint() * w[u];
      gram += weights[u] * (f * f.adjoint());
      rhs.col(u) = weights[u] * f;
    }

    for (int pass = 0; pass < 8; ++pass) {
      double moved = 0.0;
      for (int q = 0; q < p.q; ++q) {
        const Eigen::Index row = static_cast<Eigen::Index>(q) * p.m;
        const MatrixXcd gqq = gram.block(row, row, p.m, p.m);
        // Linear term: coupling into the other blocks minus the data term.
        MatrixXcd c = gram.middleRows(row, p.m) * v - gqq * v.middleRows(row, p.m) -
                      rhs.middleRows(row, p.m);
        const MatrixXcd updated =
            solve_block(gqq, c, p_max, cfg.bisection_tol, cfg.bisection_max_steps);
        moved = std::max(moved, (updated - v.middleRows(row, p.m)).norm());
        v.middleRows(row, p.m) = updated;
      }
      if (moved < 1e-10) break;
    }

    if (!v.allFinite())
      throw NumericError("wmmse: non-finite beamformer at iteration " + std::to_string(iter));

    beams = to_beams(p, v);
    // Block solves land within bisection tolerance; trim any residual excess.
    beams = metrics::project_power(beams, p_max * (1.0 + cfg.bisection_tol),
                                   metrics::PowerScaling::Projection);
    const double rate = metrics::sum_rate(h, beams, noise_power);
    result.rate_trace.push_back(rate);
    result.iterations = iter;
    const double rel_change = std::abs(rate - prev_rate) / std::max(std::abs(prev_rate), 1e-12);
    prev_rate = rate;
    if (rel_change < cfg.rate_tol) break;
  }

  result.beams = metrics::project_power(beams, p_max, metrics::PowerScaling::Projection);
  return result;
}

}  // namespace cfbeam::wmmse
