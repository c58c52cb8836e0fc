#include "cfbeam/channel.hpp"

#include <algorithm>
#include <cmath>

#include "cfbeam/errors.hpp"

namespace cfbeam::channel {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kMinDistance = 1.0;  // meters; clamps the pathloss singularity
}  // namespace

std::string to_string(ChannelModel m) {
  switch (m) {
    case ChannelModel::Multipath: return "multipath";
    case ChannelModel::Rayleigh: return "rayleigh";
    case ChannelModel::Rician: return "rician";
  }
  return "unknown";
}

ChannelModel channel_model_from_string(const std::string& s) {
  if (s == "multipath") return ChannelModel::Multipath;
  if (s == "rayleigh") return ChannelModel::Rayleigh;
  if (s == "rician") return ChannelModel::Rician;
  throw ArgumentError("unknown channel model: " + s);
}

void ScenarioConfig::validate() const {
  if (ap_antennas < 1 || user_antennas < 1)
    throw ArgumentError("scenario: antenna counts must be >= 1");
  if (p_max <= 0.0) throw ArgumentError("scenario: p_max must be positive");
  if (noise_power <= 0.0) throw ArgumentError("scenario: noise power must be positive");
  if (area_side <= 0.0) throw ArgumentError("scenario: area side must be positive");
  if (periods.empty()) throw ArgumentError("scenario: at least one period required");
  for (const auto& p : periods) {
    if (p.ap_count < 1 || p.user_count < 1)
      throw ArgumentError("period: AP and user counts must be >= 1");
    if (p.rice_factor < 0.0) throw ArgumentError("period: rice factor must be >= 0");
    if (p.paths < 1) throw ArgumentError("period: path count must be >= 1");
  }
}

Geometry place_nodes(int ap_count, int user_count, double area_side, Rng& rng) {
  if (ap_count < 1 || user_count < 1) throw ArgumentError("place_nodes: counts must be >= 1");
  Geometry g;
  g.aps.reserve(ap_count);
  g.users.reserve(user_count);
  for (int q = 0; q < ap_count; ++q)
    g.aps.push_back({rng.uniform(0.0, area_side), rng.uniform(0.0, area_side)});
  for (int i = 0; i < user_count; ++i)
    g.users.push_back({rng.uniform(0.0, area_side), rng.uniform(0.0, area_side)});
  return g;
}

CTensor steering_vector(double angle, int count) {
  if (count < 1) throw ArgumentError("steering_vector: count must be >= 1");
  CTensor a({static_cast<std::size_t>(count), 1});
  const double phase_step = kPi * std::sin(angle);
  for (int m = 0; m < count; ++m) {
    const double phase = phase_step * m;
    a[m] = {std::cos(phase), std::sin(phase)};
  }
  return a;
}

double pathloss_beta(double distance, double alpha) {
  const double d = std::max(distance, kMinDistance);
  return std::pow(d, -alpha / 2.0);
}

CTensor gen_multipath(double beta, int user_antennas, int ap_antennas, int paths, Rng& rng) {
  if (paths < 1) throw ArgumentError("gen_multipath: paths must be >= 1");
  const std::size_t n = static_cast<std::size_t>(user_antennas);
  const std::size_t m = static_cast<std::size_t>(ap_antennas);
  CTensor h({n, m});
  const double inv_sqrt_p = 1.0 / std::sqrt(static_cast<double>(paths));
  for (int p = 0; p < paths; ++p) {
    const std::complex<double> gain = rng.cnormal() * inv_sqrt_p;
    const double arrival = rng.uniform(-kPi / 2.0, kPi / 2.0);
    const double departure = rng.uniform(-kPi / 2.0, kPi / 2.0);
    const CTensor a_r = steering_vector(arrival, user_antennas);
    const CTensor a_t = steering_vector(departure, ap_antennas);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) h.at2(r, c) += gain * a_r[r] * std::conj(a_t[c]);
  }
  for (std::size_t i = 0; i < h.size(); ++i) h[i] *= beta;
  return h;
}

CTensor gen_rician(double beta, int user_antennas, int ap_antennas, double rice_factor,
                   Rng& rng) {
  if (rice_factor < 0.0) throw ArgumentError("gen_rician: rice factor must be >= 0");
  const std::size_t n = static_cast<std::size_t>(user_antennas);
  const std::size_t m = static_cast<std::size_t>(ap_antennas);
  const double los_amp = std::sqrt(rice_factor / (rice_factor + 1.0));
  const double nlos_amp = std::sqrt(1.0 / (rice_factor + 1.0));
  const double departure = rng.uniform(-kPi / 2.0, kPi / 2.0);
  const double arrival = rng.uniform(-kPi / 2.0, kPi / 2.0);
  const CTensor a_t = steering_vector(departure, ap_antennas);
  const CTensor a_r = steering_vector(arrival, user_antennas);
  CTensor h({n, m});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) {
      const std::complex<double> los = a_r[r] * std::conj(a_t[c]);
      h.at2(r, c) = beta * (los_amp * los + nlos_amp * rng.cnormal());
    }
  return h;
}

CSISample gen_sample(const ScenarioConfig& scenario, int period_index,
                     std::uint64_t sample_index) {
  const PeriodSpec& period = scenario.periods.at(period_index);
  Rng rng(derive_stream(scenario.seed, static_cast<std::uint64_t>(period_index), sample_index));
  Geometry geo = place_nodes(period.ap_count, period.user_count, scenario.area_side, rng);

  const int n = scenario.user_antennas;
  const int m = scenario.ap_antennas;
  CSISample sample;
  sample.h = CTensor({static_cast<std::size_t>(period.user_count * n),
                      static_cast<std::size_t>(period.ap_count * m)});
  sample.period_index = period_index;
  sample.label = model_label(scenario, period_index);
  sample.noise_power = scenario.noise_power;

  for (int i = 0; i < period.user_count; ++i) {
    for (int q = 0; q < period.ap_count; ++q) {
      const double dx = geo.users[i].x - geo.aps[q].x;
      const double dy = geo.users[i].y - geo.aps[q].y;
      const double beta = pathloss_beta(std::hypot(dx, dy), scenario.pathloss_exponent);
      CTensor block;
      switch (period.model) {
        case ChannelModel::Multipath:
          block = gen_multipath(beta, n, m, period.paths, rng);
          break;
        case ChannelModel::Rayleigh:
          block = gen_rician(beta, n, m, 0.0, rng);
          break;
        case ChannelModel::Rician:
          block = gen_rician(beta, n, m, period.rice_factor, rng);
          break;
      }
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < m; ++c)
          sample.h.at2(static_cast<std::size_t>(i * n + r), static_cast<std::size_t>(q * m + c)) =
              block.at2(r, c);
    }
  }
  return sample;
}

std::vector<ChannelModel> distinct_models(const ScenarioConfig& scenario) {
  std::vector<ChannelModel> models;
  for (const auto& p : scenario.periods)
    if (std::find(models.begin(), models.end(), p.model) == models.end())
      models.push_back(p.model);
  return models;
}

int model_label(const ScenarioConfig& scenario, int period_index) {
  const auto models = distinct_models(scenario);
  const ChannelModel m = scenario.periods.at(period_index).model;
  return static_cast<int>(std::find(models.begin(), models.end(), m) - models.begin());
}

}  // namespace cfbeam::channel
