#ifndef CFBEAM_CHANNEL_HPP
#define CFBEAM_CHANNEL_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "cfbeam/rng.hpp"
#include "cfbeam/tensor.hpp"

namespace cfbeam::channel {

enum class ChannelModel { Multipath, Rayleigh, Rician };

std::string to_string(ChannelModel m);
ChannelModel channel_model_from_string(const std::string& s);

/// One interval with a fixed channel distribution and fixed AP/user counts.
struct PeriodSpec {
  int ap_count = 1;          // Q_t
  int user_count = 1;        // I_t
  ChannelModel model = ChannelModel::Rayleigh;
  double rice_factor = 0.0;  // linear LoS/NLoS power ratio; 0 = Rayleigh
  int paths = 6;             // multipath model only
  int sample_count = 0;
};

struct ScenarioConfig {
  std::vector<PeriodSpec> periods;
  double area_side = 500.0;       // meters
  int ap_antennas = 2;            // M
  int user_antennas = 2;          // N
  double p_max = 1.0;             // watts
  double noise_power = 1.0;       // sigma^2, watts
  double pathloss_exponent = 3.76;
  std::uint64_t seed = 0;

  void validate() const;
};

/// One period's channel draw: blocks of (I*N) x (Q*M), block (i, q) is the
/// N x M channel of AP q to user i.
struct CSISample {
  CTensor h;
  int period_index = 0;
  int label = 0;  // channel-model class id in [0, T)
  double noise_power = 1.0;
};

struct Point {
  double x = 0.0, y = 0.0;
};

struct Geometry {
  std::vector<Point> aps;
  std::vector<Point> users;
};

Geometry place_nodes(int ap_count, int user_count, double area_side, Rng& rng);

/// Half-wavelength uniform linear array response; element m is
/// exp(j * pi * m * sin(angle)).
CTensor steering_vector(double angle, int count);

/// Amplitude large-scale fading beta = max(d, 1 m)^(-alpha / 2).
double pathloss_beta(double distance, double alpha);

/// Geometric multipath draw, N x M, paths averaged with 1/sqrt(P) gains.
CTensor gen_multipath(double beta, int user_antennas, int ap_antennas, int paths, Rng& rng);

/// Rician draw with linear factor eps, N x M; eps = 0 reduces to Rayleigh.
CTensor gen_rician(double beta, int user_antennas, int ap_antennas, double rice_factor, Rng& rng);

/// Full-period sample: geometry drawn fresh, then one N x M block per
/// (user, AP) pair assembled into the stacked CSI matrix.
CSISample gen_sample(const ScenarioConfig& scenario, int period_index, std::uint64_t sample_index);

/// Label map: distinct channel models in order of first appearance.
std::vector<ChannelModel> distinct_models(const ScenarioConfig& scenario);
int model_label(const ScenarioConfig& scenario, int period_index);

}  // namespace cfbeam::channel

#endif  // CFBEAM_CHANNEL_HPP
