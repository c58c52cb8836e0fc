#include "cfbeam/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cfbeam/errors.hpp"
#include "cfbeam/metrics.hpp"
#include "cfbeam/mmd.hpp"
#include "cfbeam/parallel.hpp"

namespace cfbeam::harness {

namespace {

using nlohmann::json;

constexpr double kFeasibilitySlack = 1e-9;

double now_s() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

void check_feasible(const BeamTensor& beams, double p_max, const std::string& who) {
  for (int q = 0; q < beams.ap_count(); ++q)
    if (metrics::per_ap_power(beams, q) > p_max * (1.0 + kFeasibilitySlack))
      throw NumericError(who + ": emitted beams violate the per-AP power cap");
}

struct MethodEval {
  std::vector<double> rates;
  std::vector<double> times_s;
};

ResultRow make_row(const std::string& method, const std::string& model, int q, int i,
                   const MethodEval& ev, std::uint64_t seed) {
  ResultRow row;
  row.method = method;
  row.channel_model = model;
  row.q = q;
  row.i = i;
  row.samples = static_cast<int>(ev.rates.size());
  row.seed = seed;
  double mean = 0.0;
  for (double r : ev.rates) mean += r;
  mean /= std::max<std::size_t>(ev.rates.size(), 1);
  double var = 0.0;
  for (double r : ev.rates) var += (r - mean) * (r - mean);
  var /= std::max<std::size_t>(ev.rates.size(), 1);
  row.mean_sum_rate_bits = mean;
  row.std_sum_rate_bits = std::sqrt(var);
  double tmean = 0.0;
  for (double t : ev.times_s) tmean += t;
  row.mean_wall_s = ev.times_s.empty() ? 0.0 : tmean / ev.times_s.size();
  return row;
}

int parse_layer_field(const json& j, const char* longhand, const char* shorthand, int fallback) {
  if (j.contains(longhand)) return j.at(longhand).get<int>();
  if (j.contains(shorthand)) return j.at(shorthand).get<int>();
  return fallback;
}

}  // namespace

channel::ScenarioConfig ExperimentSpec::train_scenario() const {
  channel::ScenarioConfig s = scenario;
  s.periods.clear();
  for (const auto& p : periods) {
    if (p.train_samples <= 0) continue;  // held-out period, e.g. adaptation target
    channel::PeriodSpec ps = p.period;
    ps.sample_count = p.train_samples;
    s.periods.push_back(ps);
  }
  s.seed = seed;
  return s;
}

channel::ScenarioConfig ExperimentSpec::test_scenario() const {
  channel::ScenarioConfig s = scenario;
  s.periods.clear();
  for (const auto& p : periods) {
    if (p.test_samples <= 0) continue;
    channel::PeriodSpec ps = p.period;
    ps.sample_count = p.test_samples;
    s.periods.push_back(ps);
  }
  s.seed = derive_stream(seed, 0x7e57);
  return s;
}

channel::ScenarioConfig ExperimentSpec::eval_scenario(int period_index, int q, int i, int samples,
                                                      std::uint64_t salt) const {
  channel::ScenarioConfig s = scenario;
  s.periods.clear();
  channel::PeriodSpec ps = periods.at(period_index).period;
  ps.ap_count = q;
  ps.user_count = i;
  ps.sample_count = samples;
  s.periods.push_back(ps);
  s.seed = derive_stream(derive_stream(seed, salt, static_cast<std::uint64_t>(period_index)),
                         static_cast<std::uint64_t>(q), static_cast<std::uint64_t>(i));
  return s;
}

ExperimentSpec load_spec(const std::filesystem::path& config_path) {
  std::ifstream in(config_path);
  if (!in) throw ConfigError("cannot open config: " + config_path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config parse error: " + std::string(e.what()));
  }
  if (j.value("schema_version", 1) != 1) throw ConfigError("unsupported config schema version");

  ExperimentSpec spec;
  spec.seed = j.value("seed", 1ULL);

  const json& sj = j.at("scenario");
  spec.scenario.area_side = sj.value("area_side_m", 500.0);
  spec.scenario.ap_antennas = sj.value("ap_antennas", 2);
  spec.scenario.user_antennas = sj.value("user_antennas", 2);
  spec.scenario.p_max = sj.value("p_max_watts", 1.0);
  spec.scenario.noise_power = sj.value("noise_power_watts", 1.0);
  spec.scenario.pathloss_exponent = sj.value("pathloss_exponent", 3.76);
  spec.scenario.seed = spec.seed;
  for (const auto& pj : sj.at("periods")) {
    ExperimentPeriod p;
    p.period.ap_count = pj.at("q").get<int>();
    p.period.user_count = pj.at("i").get<int>();
    p.period.model = channel::channel_model_from_string(pj.at("channel_model").get<std::string>());
    if (pj.contains("rice_factor_db"))
      p.period.rice_factor = std::pow(10.0, pj.at("rice_factor_db").get<double>() / 10.0);
    else if (pj.contains("rice_factor"))
      p.period.rice_factor = pj.at("rice_factor").get<double>();
    else
      p.period.rice_factor =
          p.period.model == channel::ChannelModel::Rician ? std::pow(10.0, 0.3) : 0.0;
    p.period.paths = pj.value("paths", 6);
    p.train_samples = pj.value("train_samples", 0);
    p.test_samples = pj.value("test_samples", 0);
    spec.periods.push_back(p);
    spec.scenario.periods.push_back(p.period);
  }

  const json& nj = j.at("net");
  spec.net.layers.clear();
  for (const auto& lj : nj.at("layers")) {
    hgnet::LayerSpec l;
    l.kernel_w = parse_layer_field(lj, "kernel_w", "k", 3);
    l.kernel_h = parse_layer_field(lj, "kernel_h", "k", l.kernel_w);
    l.stride_w = parse_layer_field(lj, "stride_w", "s", 1);
    l.stride_h = parse_layer_field(lj, "stride_h", "s", l.stride_w);
    l.pad_w = parse_layer_field(lj, "pad_w", "p", (l.kernel_w - 1) / 2);
    l.pad_h = parse_layer_field(lj, "pad_h", "p", (l.kernel_h - 1) / 2);
    l.channels = parse_layer_field(lj, "channels", "c", 2 * spec.scenario.ap_antennas);
    spec.net.layers.push_back(l);
  }
  spec.net.num_classes = nj.value("num_classes", 0);
  if (spec.net.num_classes == 0)
    spec.net.num_classes = static_cast<int>(channel::distinct_models(spec.train_scenario()).size());
  spec.net.features_dropped = nj.value("features_dropped", 0);
  spec.net.grl_lambda = nj.value("grl_lambda", 1.0);
  spec.net.adv_weight = nj.value("adv_weight", 0.1);
  spec.net.ap_antennas = spec.scenario.ap_antennas;
  spec.net.user_antennas = spec.scenario.user_antennas;
  spec.net.p_max = spec.scenario.p_max;
  if (!spec.periods.empty()) {
    spec.net.ref_width = spec.periods.front().period.ap_count;
    spec.net.ref_height = spec.periods.front().period.user_count;
  }
  if (nj.contains("train")) {
    const json& tj = nj.at("train");
    spec.net.train.batch_size = tj.value("batch_size", 64);
    spec.net.train.learning_rate = tj.value("learning_rate", 1e-3);
    spec.net.train.epochs = tj.value("epochs", 30);
    spec.net.train.seed = tj.value("seed", 0ULL);
  }
  if (spec.net.train.seed == 0) spec.net.train.seed = derive_stream(spec.seed, 0x42);

  if (j.contains("oau")) {
    const json& oj = j.at("oau");
    spec.oau.config.iterations = oj.value("iterations", 15);
    spec.oau.config.learning_rate = oj.value("learning_rate", 1e-3);
    spec.oau.config.reset = oj.value("reset_policy", std::string("per-sample")) == "persistent"
                                ? oau::ResetPolicy::Persistent
                                : oau::ResetPolicy::PerSample;
    if (oj.contains("h_sweep")) spec.oau.h_sweep = oj.at("h_sweep").get<std::vector<int>>();
    spec.oau.adapt_period = oj.value("adapt_period", -1);
    spec.oau.adapt_samples = oj.value("adapt_samples", 200);
  }
  if (spec.oau.adapt_period < 0)
    spec.oau.adapt_period = static_cast<int>(spec.periods.size()) - 1;

  if (j.contains("wmmse")) {
    const json& wj = j.at("wmmse");
    spec.wmmse_cfg.max_iters = wj.value("max_iters", 200);
    spec.wmmse_cfg.rate_tol = wj.value("rate_tol", 1e-5);
    spec.wmmse_cfg.bisection_tol = wj.value("bisection_tol", 1e-9);
    spec.wmmse_cfg.bisection_max_steps = wj.value("bisection_max_steps", 200);
  }

  if (j.contains("baselines")) spec.baselines = j.at("baselines").get<std::vector<std::string>>();
  spec.eval_sizes.clear();
  if (j.contains("eval_sizes"))
    for (const auto& ej : j.at("eval_sizes"))
      spec.eval_sizes.emplace_back(ej.at(0).get<int>(), ej.at(1).get<int>());
  spec.eval_samples = j.value("eval_samples", 50);
  spec.output_dir = j.value("output_dir", std::string("out"));
  try {
    spec.scenario.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid scenario: ") + e.what());
  }
  return spec;
}

void emit_report(const std::vector<ResultRow>& rows, ReportFormat format,
                 const std::filesystem::path& path) {
  if (rows.empty()) throw ArgumentError("emit_report: no rows");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PersistenceError("cannot write report: " + path.string());
  if (format == ReportFormat::Csv) {
    out << "method,channel_model,q,i,mean_sum_rate_bits,std_sum_rate_bits,mean_wall_s,samples,"
           "seed\n";
    for (const auto& r : rows) {
      std::ostringstream line;
      line.precision(12);
      line << r.method << ',' << r.channel_model << ',' << r.q << ',' << r.i << ','
           << r.mean_sum_rate_bits << ',' << r.std_sum_rate_bits << ',' << r.mean_wall_s << ','
           << r.samples << ',' << r.seed;
      out << line.str() << "\n";
    }
  } else {
    json arr = json::array();
    for (const auto& r : rows)
      arr.push_back({{"method", r.method},
                     {"channel_model", r.channel_model},
                     {"q", r.q},
                     {"i", r.i},
                     {"mean_sum_rate_bits", r.mean_sum_rate_bits},
                     {"std_sum_rate_bits", r.std_sum_rate_bits},
                     {"mean_wall_s", r.mean_wall_s},
                     {"samples", r.samples},
                     {"seed", r.seed}});
    out << arr.dump(2) << "\n";
  }
  if (!out) throw PersistenceError("report write failed: " + path.string());
}

std::vector<ResultRow> parse_report_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw PersistenceError("cannot read report: " + path.string());
  json arr;
  in >> arr;
  std::vector<ResultRow> rows;
  for (const auto& rj : arr) {
    ResultRow r;
    r.method = rj.at("method").get<std::string>();
    r.channel_model = rj.at("channel_model").get<std::string>();
    r.q = rj.at("q").get<int>();
    r.i = rj.at("i").get<int>();
    r.mean_sum_rate_bits = rj.at("mean_sum_rate_bits").get<double>();
    r.std_sum_rate_bits = rj.at("std_sum_rate_bits").get<double>();
    r.mean_wall_s = rj.at("mean_wall_s").get<double>();
    r.samples = rj.at("samples").get<int>();
    r.seed = rj.at("seed").get<std::uint64_t>();
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string hardware_descriptor() {
  std::ifstream cpuinfo("/proc/cpuinfo");
  std::string line;
  while (std::getline(cpuinfo, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto pos = line.find(':');
      if (pos != std::string::npos) {
        std::string name = line.substr(pos + 1);
        if (!name.empty() && name.front() == ' ') name.erase(0, 1);
        return name;
      }
    }
  }
  return "unknown-cpu";
}

TimingStats bench_timing(const std::string& method, std::size_t instances, int repetitions,
                         const std::function<void(std::size_t)>& fn) {
  if (repetitions < 5) throw ArgumentError("bench_timing: at least 5 repetitions required");
  for (std::size_t k = 0; k < instances; ++k) fn(k);  // warm-up, untimed
  std::vector<double> per_instance;
  per_instance.reserve(instances * static_cast<std::size_t>(repetitions));
  for (int rep = 0; rep < repetitions; ++rep)
    for (std::size_t k = 0; k < instances; ++k) {
      const double t0 = now_s();
      fn(k);
      per_instance.push_back(now_s() - t0);
    }
  std::sort(per_instance.begin(), per_instance.end());
  TimingStats stats;
  stats.method = method;
  stats.repetitions = repetitions;
  stats.median_s = per_instance[per_instance.size() / 2];
  stats.min_s = per_instance.front();
  stats.max_s = per_instance.back();
  double mean = 0.0;
  for (double t : per_instance) mean += t;
  stats.mean_s = mean / per_instance.size();
  stats.hardware = hardware_descriptor();
  return stats;
}

void run_gen_data(const ExperimentSpec& spec, const std::filesystem::path& out_dir, int threads) {
  channel::gen_dataset(spec.train_scenario(), out_dir / "train", threads);
  channel::gen_dataset(spec.test_scenario(), out_dir / "test", threads);
}

TrainOutcome run_train(const ExperimentSpec& spec, const std::filesystem::path& data_dir,
                       const std::filesystem::path& ckpt_path, bool variant_no_g) {
  const auto info = channel::read_manifest(data_dir / "train");
  const auto data = channel::load_all(info);

  hgnet::HGNetConfig cfg = spec.net;
  if (variant_no_g) {
    cfg.adv_weight = 0.0;
    cfg.features_dropped = 0;
    cfg.train.seed = derive_stream(cfg.train.seed, 0x906);
  }
  const int classes = info.class_count();
  if (cfg.num_classes != classes)
    throw ConfigError("run_train: configured class count does not match the dataset");

  Rng init_rng(derive_stream(cfg.train.seed, 0x111));
  hgnet::HGNetParams params = hgnet::HGNetParams::init(cfg, init_rng);

  TrainOutcome outcome;
  outcome.curve = hgnet::train(params, cfg, data);
  outcome.checkpoint = ckpt_path;
  hgnet::save_checkpoint(ckpt_path, cfg, params);
  return outcome;
}

namespace {

MethodEval eval_method(const std::vector<channel::CSISample>& samples, double p_max,
                       const std::function<BeamTensor(const channel::CSISample&)>& solver,
                       const std::string& who, int threads) {
  MethodEval ev;
  ev.rates.resize(samples.size());
  ev.times_s.resize(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t k) {
    const double t0 = now_s();
    const BeamTensor beams = solver(samples[k]);
    ev.times_s[k] = now_s() - t0;
    check_feasible(beams, p_max, who);
    ev.rates[k] = metrics::sum_rate(samples[k].h, beams, samples[k].noise_power);
  });
  return ev;
}

}  // namespace

std::vector<ResultRow> run_eval(const ExperimentSpec& spec,
                                const std::optional<hgnet::Checkpoint>& ckpt,
                                const std::optional<hgnet::Checkpoint>& ckpt_no_g, int threads) {
  std::vector<std::pair<int, int>> sizes = spec.eval_sizes;
  if (sizes.empty())
    for (const auto& p : spec.periods)
      sizes.emplace_back(p.period.ap_count, p.period.user_count);
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());

  const double p_max = spec.scenario.p_max;
  std::vector<ResultRow> rows;
  for (std::size_t pi = 0; pi < spec.periods.size(); ++pi) {
    const std::string model = channel::to_string(spec.periods[pi].period.model);
    for (const auto& [q, i] : sizes) {
      const auto scenario = spec.eval_scenario(static_cast<int>(pi), q, i, spec.eval_samples,
                                               /*salt=*/0xE7A1);
      std::vector<channel::CSISample> samples;
      samples.reserve(spec.eval_samples);
      for (int k = 0; k < spec.eval_samples; ++k)
        samples.push_back(channel::gen_sample(scenario, 0, static_cast<std::uint64_t>(k)));

      for (const std::string& method : spec.baselines) {
        std::function<BeamTensor(const channel::CSISample&)> solver;
        if (method == "wmmse") {
          solver = [&](const channel::CSISample& s) {
            return wmmse::wmmse_solve(s.h, spec.scenario.ap_antennas, spec.scenario.user_antennas,
                                      p_max, s.noise_power, spec.wmmse_cfg)
                .beams;
          };
        } else if (method == "mrt") {
          solver = [&](const channel::CSISample& s) {
            return wmmse::mrt_baseline(s.h, spec.scenario.ap_antennas,
                                       spec.scenario.user_antennas, p_max);
          };
        } else if (method == "hgnet") {
          if (!ckpt) throw ConfigError("run_eval: hgnet requested without a checkpoint");
          solver = [&](const channel::CSISample& s) {
            return hgnet::forward(ckpt->params, ckpt->config, s.h, hgnet::ForwardMode::Infer)
                .beams;
          };
        } else if (method == "hgnet_no_g") {
          if (!ckpt_no_g)
            throw ConfigError("run_eval: hgnet_no_g requested without its checkpoint");
          solver = [&](const channel::CSISample& s) {
            return hgnet::forward(ckpt_no_g->params, ckpt_no_g->config, s.h,
                                  hgnet::ForwardMode::Infer)
                .beams;
          };
        } else {
          throw ConfigError("run_eval: unknown baseline " + method);
        }
        rows.push_back(
            make_row(method, model, q, i, eval_method(samples, p_max, solver, method, threads),
                     scenario.seed));
      }
    }
  }
  return rows;
}

std::vector<ResultRow> run_adapt_sweep(const ExperimentSpec& spec, const hgnet::Checkpoint& ckpt,
                                       const std::vector<int>& h_sweep, int threads,
                                       const std::filesystem::path& out_dir) {
  if (h_sweep.empty()) throw ArgumentError("run_adapt_sweep: empty H sweep");
  const int pi = spec.oau.adapt_period;
  if (pi < 0 || pi >= static_cast<int>(spec.periods.size()))
    throw ConfigError("run_adapt_sweep: adapt period out of range");
  const auto& period = spec.periods[pi].period;
  const auto scenario =
      spec.eval_scenario(pi, period.ap_count, period.user_count, spec.oau.adapt_samples,
                         /*salt=*/0xADA7);
  std::vector<channel::CSISample> samples;
  for (int k = 0; k < spec.oau.adapt_samples; ++k)
    samples.push_back(channel::gen_sample(scenario, 0, static_cast<std::uint64_t>(k)));

  const int h_max = *std::max_element(h_sweep.begin(), h_sweep.end());
  const std::string model = channel::to_string(period.model);
  std::vector<ResultRow> rows;

  if (spec.oau.config.reset == oau::ResetPolicy::PerSample) {
    // One full-length run per sample; the rate after h iterations equals the
    // H = h result because the update trajectory does not depend on H.
    std::vector<double> base_rate(samples.size());
    std::vector<double> base_wall_s(samples.size());
    std::vector<oau::AdaptationReport> reports(samples.size());
    std::vector<std::vector<double>> iter_rates(samples.size());
    parallel_for(samples.size(), threads, [&](std::size_t k) {
      const double t0 = now_s();
      const BeamTensor base =
          hgnet::forward(ckpt.params, ckpt.config, samples[k].h, hgnet::ForwardMode::Infer).beams;
      base_wall_s[k] = now_s() - t0;
      base_rate[k] = metrics::sum_rate(samples[k].h, base, samples[k].noise_power);
      oau::OAUConfig cfg = spec.oau.config;
      cfg.iterations = h_max;
      cfg.record_rates = true;
      auto result = oau::adapt(ckpt.params, ckpt.config, cfg, samples[k].h,
                               samples[k].noise_power);
      check_feasible(result.beams, spec.scenario.p_max, "oau");
      for (const auto& step : result.report.steps)
        iter_rates[k].push_back(step.sum_rate_bits);
      reports[k] = std::move(result.report);
    });

    for (int h : h_sweep) {
      MethodEval ev;
      for (std::size_t k = 0; k < samples.size(); ++k) {
        double rate = base_rate[k];
        double wall = base_wall_s[k];
        if (h > 0 && !iter_rates[k].empty()) {
          const std::size_t last = std::min<std::size_t>(h, iter_rates[k].size()) - 1;
          rate = iter_rates[k][last];
          for (std::size_t s = 0; s <= last; ++s)
            wall += reports[k].steps[s].wall_ms / 1000.0;
        }
        ev.rates.push_back(rate);
        ev.times_s.push_back(wall);
      }
      rows.push_back(make_row("hgnet+oau[h=" + std::to_string(h) + "]", model, period.ap_count,
                              period.user_count, ev, scenario.seed));
    }

    if (!out_dir.empty()) {
      std::error_code ec;
      std::filesystem::create_directories(out_dir, ec);
      std::ofstream out(out_dir / "adapt_report.jsonl", std::ios::trunc);
      for (std::size_t k = 0; k < samples.size(); ++k) {
        json steps = json::array();
        for (const auto& s : reports[k].steps)
          steps.push_back({{"h", s.iteration},
                           {"entropy", s.entropy},
                           {"sum_rate_bits", s.sum_rate_bits},
                           {"wall_ms", s.wall_ms}});
        out << json{{"sample", k},
                    {"base_sum_rate_bits", base_rate[k]},
                    {"touched_fraction", reports[k].touched_fraction},
                    {"aborted", reports[k].aborted},
                    {"iterations", steps}}
                   .dump()
            << "\n";
      }
    }
  } else {
    // Persistent policy: affine state carries across samples, so each H value
    // runs its own pass over the sample stream.
    for (int h : h_sweep) {
      MethodEval ev;
      hgnet::HGNetParams carry = ckpt.params;
      for (const auto& sample : samples) {
        oau::OAUConfig cfg = spec.oau.config;
        cfg.iterations = h;
        cfg.record_rates = false;
        const double t0 = now_s();
        auto result = oau::adapt(carry, ckpt.config, cfg, sample.h, sample.noise_power);
        ev.times_s.push_back(now_s() - t0);
        check_feasible(result.beams, spec.scenario.p_max, "oau");
        ev.rates.push_back(metrics::sum_rate(sample.h, result.beams, sample.noise_power));
        carry = std::move(result.params);
      }
      rows.push_back(make_row("hgnet+oau[h=" + std::to_string(h) + "]", model, period.ap_count,
                              period.user_count, ev, scenario.seed));
    }
  }
  return rows;
}

std::vector<TimingStats> run_bench(const ExperimentSpec& spec, const hgnet::Checkpoint& ckpt,
                                   int q, int i, int instances, int repetitions) {
  const auto scenario = spec.eval_scenario(0, q, i, instances, /*salt=*/0xBE7C);
  std::vector<channel::CSISample> samples;
  for (int k = 0; k < instances; ++k)
    samples.push_back(channel::gen_sample(scenario, 0, static_cast<std::uint64_t>(k)));

  std::vector<TimingStats> out;
  out.push_back(bench_timing("hgnet", samples.size(), repetitions, [&](std::size_t k) {
    hgnet::forward(ckpt.params, ckpt.config, samples[k].h, hgnet::ForwardMode::Infer);
  }));
  out.push_back(bench_timing("wmmse", samples.size(), repetitions, [&](std::size_t k) {
    wmmse::wmmse_solve(samples[k].h, spec.scenario.ap_antennas, spec.scenario.user_antennas,
                       spec.scenario.p_max, samples[k].noise_power, spec.wmmse_cfg);
  }));
  out.push_back(bench_timing("mrt", samples.size(), repetitions, [&](std::size_t k) {
    wmmse::mrt_baseline(samples[k].h, spec.scenario.ap_antennas, spec.scenario.user_antennas,
                        spec.scenario.p_max);
  }));
  for (int h : spec.oau.h_sweep) {
    oau::OAUConfig cfg = spec.oau.config;
    cfg.iterations = h;
    cfg.record_rates = false;
    out.push_back(
        bench_timing("oau[h=" + std::to_string(h) + "]", samples.size(), repetitions,
                     [&, cfg](std::size_t k) {
                       oau::adapt(ckpt.params, ckpt.config, cfg, samples[k].h,
                                  samples[k].noise_power);
                     }));
  }
  return out;
}

MmdDiagReport run_mmd_diag(const hgnet::Checkpoint& ckpt, const std::filesystem::path& data_dir,
                           int max_samples) {
  const auto info = channel::read_manifest(data_dir / "test");
  const int diag_layer = std::max(0, ckpt.config.layer_count() - 2);  // last hidden layer

  std::vector<std::string> names;
  std::vector<std::vector<Tensor>> features;
  for (int pi = 0; pi < static_cast<int>(info.scenario.periods.size()); ++pi) {
    auto samples = channel::load_period(info, pi);
    if (static_cast<int>(samples.size()) > max_samples) samples.resize(max_samples);
    std::vector<Tensor> feats;
    feats.reserve(samples.size());
    for (const auto& s : samples)
      feats.push_back(hgnet::forward(ckpt.params, ckpt.config, s.h, hgnet::ForwardMode::Infer)
                          .layers[diag_layer]
                          .masked_out);
    names.push_back(channel::to_string(info.scenario.periods[pi].model));
    features.push_back(std::move(feats));
  }

  MmdDiagReport report;
  for (std::size_t a = 0; a < features.size(); ++a)
    for (std::size_t b = a + 1; b < features.size(); ++b) {
      MmdDiagRow row;
      row.model_a = names[a];
      row.model_b = names[b];
      row.layer = diag_layer + 1;
      row.gmmd = metrics::gmmd(features[a], features[b]);
      report.pairs.push_back(row);
      report.source_gap = std::max(report.source_gap, row.gmmd);
    }
  return report;
}

std::vector<ResultRow> run_experiment(const ExperimentSpec& spec, int threads) {
  std::error_code ec;
  std::filesystem::create_directories(spec.output_dir, ec);
  if (ec) throw PersistenceError("cannot create output directory " + spec.output_dir.string());

  const bool want_hgnet =
      std::find(spec.baselines.begin(), spec.baselines.end(), "hgnet") != spec.baselines.end();
  const bool want_no_g = std::find(spec.baselines.begin(), spec.baselines.end(), "hgnet_no_g") !=
                         spec.baselines.end();
  const bool want_oau = !spec.oau.h_sweep.empty() && want_hgnet;

  std::optional<hgnet::Checkpoint> ckpt, ckpt_no_g;
  if (want_hgnet || want_no_g) {
    run_gen_data(spec, spec.output_dir / "data", threads);
    if (want_hgnet) {
      run_train(spec, spec.output_dir / "data", spec.output_dir / "hgnet.ckpt", false);
      ckpt = hgnet::load_checkpoint(spec.output_dir / "hgnet.ckpt");
    }
    if (want_no_g) {
      run_train(spec, spec.output_dir / "data", spec.output_dir / "hgnet_no_g.ckpt", true);
      ckpt_no_g = hgnet::load_checkpoint(spec.output_dir / "hgnet_no_g.ckpt");
    }
  }

  std::vector<ResultRow> rows = run_eval(spec, ckpt, ckpt_no_g, threads);
  if (want_oau && ckpt) {
    auto adapt_rows = run_adapt_sweep(spec, *ckpt, spec.oau.h_sweep, threads, spec.output_dir);
    rows.insert(rows.end(), adapt_rows.begin(), adapt_rows.end());
  }

  emit_report(rows, ReportFormat::Csv, spec.output_dir / "results.csv");
  emit_report(rows, ReportFormat::Json, spec.output_dir / "results.json");
  return rows;
}

}  // namespace cfbeam::harness
