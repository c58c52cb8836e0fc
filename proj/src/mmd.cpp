#include "cfbeam/mmd.hpp"

#include <algorithm>
#include <cmath>

#include "cfbeam/errors.hpp"

namespace cfbeam::metrics {

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    acc += d * d;
  }
  return acc;
}

/// Fixed argument order so the floating-point summation sequence, and hence
/// the estimate, is bitwise identical under argument swap.
bool canonical_before(const std::vector<std::vector<double>>& a,
                      const std::vector<std::vector<double>>& b) {
  if (a.size() != b.size()) return a.size() < b.size();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) continue;
    return a[i] < b[i];
  }
  return false;
}

/// Median pairwise Euclidean distance over the pooled sample.
double median_bandwidth(const std::vector<std::vector<double>>& x,
                        const std::vector<std::vector<double>>& y) {
  std::vector<const std::vector<double>*> pool;
  for (const auto& v : x) pool.push_back(&v);
  for (const auto& v : y) pool.push_back(&v);
  std::vector<double> dists;
  dists.reserve(pool.size() * (pool.size() - 1) / 2);
  for (std::size_t i = 0; i < pool.size(); ++i)
    for (std::size_t j = i + 1; j < pool.size(); ++j)
      dists.push_back(std::sqrt(sq_dist(*pool[i], *pool[j])));
  if (dists.empty()) return 1.0;
  std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
  const double med = dists[dists.size() / 2];
  return med > 0.0 ? med : 1.0;
}

}  // namespace

double rbf_mmd(const std::vector<std::vector<double>>& x_in,
               const std::vector<std::vector<double>>& y_in, const MMDConfig& cfg) {
  const bool swapped = canonical_before(y_in, x_in);
  const auto& x = swapped ? y_in : x_in;
  const auto& y = swapped ? x_in : y_in;
  const std::size_t n = x.size(), m = y.size();
  if (n == 0 || m == 0) throw ArgumentError("rbf_mmd: sample sets must be non-empty");
  if (cfg.unbiased && (n < 2 || m < 2))
    throw ArgumentError("rbf_mmd: unbiased estimator needs at least 2 samples per set");
  const std::size_t dim = x[0].size();
  for (const auto& v : x)
    if (v.size() != dim) throw ShapeError("rbf_mmd: inconsistent sample dimension in X");
  for (const auto& v : y)
    if (v.size() != dim) throw ShapeError("rbf_mmd: inconsistent sample dimension in Y");

  const double bw = cfg.bandwidth > 0.0 ? cfg.bandwidth : median_bandwidth(x, y);
  const double gamma = 1.0 / (2.0 * bw * bw);
  auto kernel = [gamma](const std::vector<double>& a, const std::vector<double>& b) {
    return std::exp(-gamma * sq_dist(a, b));
  };

  double kxx = 0.0, kyy = 0.0, kxy = 0.0;
  if (cfg.unbiased) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) kxx += kernel(x[i], x[j]);
    kxx /= static_cast<double>(n * (n - 1));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        if (i != j) kyy += kernel(y[i], y[j]);
    kyy /= static_cast<double>(m * (m - 1));
  } else {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) kxx += kernel(x[i], x[j]);
    kxx /= static_cast<double>(n * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) kyy += kernel(y[i], y[j]);
    kyy /= static_cast<double>(m * m);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) kxy += kernel(x[i], y[j]);
  kxy /= static_cast<double>(n * m);

  const double est = kxx + kyy - 2.0 * kxy;
  return est > 0.0 ? est : 0.0;
}

double gmmd(const std::vector<Tensor>& features_a, const std::vector<Tensor>& features_b,
            const MMDConfig& cfg) {
  if (features_a.empty() || features_b.empty())
    throw ArgumentError("gmmd: feature batches must be non-empty");
  const auto& dims = features_a[0].dims();
  if (dims.size() != 3) throw ShapeError("gmmd: features must be W x H x C tensors");
  for (const auto& f : features_a)
    if (f.dims() != dims) throw ShapeError("gmmd: inconsistent feature shapes in batch A");
  for (const auto& f : features_b)
    if (f.dims().size() != 3 || f.dim(2) != dims[2])
      throw ShapeError("gmmd: feature channel counts must match");

  const std::size_t channels = dims[2];
  auto planes = [](const std::vector<Tensor>& feats, std::size_t c) {
    std::vector<std::vector<double>> out;
    out.reserve(feats.size());
    for (const auto& f : feats) {
      const std::size_t plane = f.dim(0) * f.dim(1);
      std::vector<double> v(plane);
      for (std::size_t i = 0; i < plane; ++i) v[i] = f[i * f.dim(2) + c];
      out.push_back(std::move(v));
    }
    return out;
  };

  double acc = 0.0;
  for (std::size_t c = 0; c < channels; ++c)
    acc += rbf_mmd(planes(features_a, c), planes(features_b, c), cfg);
  return acc / static_cast<double>(channels);
}

double source_gap_diag(const std::vector<std::vector<Tensor>>& per_source_features,
                       const MMDConfig& cfg) {
  if (per_source_features.size() < 2)
    throw ArgumentError("source_gap_diag: at least two source domains required");
  double worst = 0.0;
  for (std::size_t a = 0; a < per_source_features.size(); ++a)
    for (std::size_t b = a + 1; b < per_source_features.size(); ++b)
      worst = std::max(worst, gmmd(per_source_features[a], per_source_features[b], cfg));
  return worst;
}

}  // namespace cfbeam::metrics
