#ifndef CFBEAM_BEAM_HPP
#define CFBEAM_BEAM_HPP

#include <complex>
#include <vector>

#include "cfbeam/tensor.hpp"

namespace cfbeam {

/// Complex beamforming tensor of shape Q x I x M; entry (q, i, :) is the
/// beam of AP q toward user i. Stacking over q gives the Q*M-dimensional
/// per-user beamforming vector.
struct BeamTensor {
  CTensor v;  // Q x I x M

  BeamTensor() = default;
  BeamTensor(int q, int i, int m)
      : v({static_cast<std::size_t>(q), static_cast<std::size_t>(i),
           static_cast<std::size_t>(m)}) {}

  int ap_count() const { return v.rank() == 3 ? static_cast<int>(v.dim(0)) : 0; }
  int user_count() const { return v.rank() == 3 ? static_cast<int>(v.dim(1)) : 0; }
  int antennas() const { return v.rank() == 3 ? static_cast<int>(v.dim(2)) : 0; }

  std::complex<double>& at(int q, int i, int m) { return v.at3(q, i, m); }
  const std::complex<double>& at(int q, int i, int m) const { return v.at3(q, i, m); }

  /// Per-user beam stacked over APs: [v^1; ...; v^Q].
  std::vector<std::complex<double>> user_vector(int i) const {
    std::vector<std::complex<double>> out;
    out.reserve(static_cast<std::size_t>(ap_count()) * antennas());
    for (int q = 0; q < ap_count(); ++q)
      for (int m = 0; m < antennas(); ++m) out.push_back(at(q, i, m));
    return out;
  }

  /// Real view used by the network output path: channels 0..M-1 are real
  /// parts, channels M..2M-1 imaginary parts.
  Tensor to_real() const {
    const int q = ap_count(), i = user_count(), m = antennas();
    Tensor out({static_cast<std::size_t>(q), static_cast<std::size_t>(i),
                static_cast<std::size_t>(2 * m)});
    for (int a = 0; a < q; ++a)
      for (int u = 0; u < i; ++u)
        for (int c = 0; c < m; ++c) {
          out.at3(a, u, c) = at(a, u, c).real();
          out.at3(a, u, c + m) = at(a, u, c).imag();
        }
    return out;
  }

  static BeamTensor from_real(const Tensor& real_view) {
    if (real_view.rank() != 3 || real_view.dim(2) % 2 != 0)
      throw ShapeError("BeamTensor::from_real: expected Q x I x 2M tensor");
    const int q = static_cast<int>(real_view.dim(0));
    const int i = static_cast<int>(real_view.dim(1));
    const int m = static_cast<int>(real_view.dim(2) / 2);
    BeamTensor out(q, i, m);
    for (int a = 0; a < q; ++a)
      for (int u = 0; u < i; ++u)
        for (int c = 0; c < m; ++c)
          out.at(a, u, c) = {real_view.at3(a, u, c), real_view.at3(a, u, c + m)};
    return out;
  }
};

}  // namespace cfbeam

#endif  // CFBEAM_BEAM_HPP
