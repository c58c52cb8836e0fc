#ifndef CFBEAM_HARNESS_HPP
#define CFBEAM_HARNESS_HPP

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cfbeam/channel.hpp"
#include "cfbeam/checkpoint.hpp"
#include "cfbeam/dataset.hpp"
#include "cfbeam/hgnet.hpp"
#include "cfbeam/oau.hpp"
#include "cfbeam/wmmse.hpp"

namespace cfbeam::harness {

/// One period of the experiment: a channel family at a fixed (Q, I) with
/// separate train and test sample counts.
struct ExperimentPeriod {
  channel::PeriodSpec period;  // sample_count unused here
  int train_samples = 0;
  int test_samples = 0;
};

struct OauSection {
  oau::OAUConfig config;
  std::vector<int> h_sweep{0, 5, 10, 15};
  int adapt_period = -1;  // period index supplying adaptation test data
  int adapt_samples = 200;
};

struct ExperimentSpec {
  std::uint64_t seed = 1;
  channel::ScenarioConfig scenario;  // periods carry train counts
  std::vector<ExperimentPeriod> periods;
  hgnet::HGNetConfig net;
  OauSection oau;
  wmmse::WmmseConfig wmmse_cfg;
  std::vector<std::string> baselines{"wmmse", "mrt", "hgnet"};
  std::vector<std::pair<int, int>> eval_sizes;  // (Q, I) pairs
  int eval_samples = 50;
  std::filesystem::path output_dir = "out";

  channel::ScenarioConfig train_scenario() const;
  channel::ScenarioConfig test_scenario() const;
  /// Single-period scenario for one channel family at an arbitrary size.
  channel::ScenarioConfig eval_scenario(int period_index, int q, int i, int samples,
                                        std::uint64_t salt) const;
};

ExperimentSpec load_spec(const std::filesystem::path& config_path);

struct ResultRow {
  std::string method;
  std::string channel_model;
  int q = 0, i = 0;
  double mean_sum_rate_bits = 0.0;
  double std_sum_rate_bits = 0.0;
  double mean_wall_s = 0.0;
  int samples = 0;
  std::uint64_t seed = 0;
};

enum class ReportFormat { Csv, Json };

/// Fixed column order; CSV gets a stable header line, JSON an array of rows.
void emit_report(const std::vector<ResultRow>& rows, ReportFormat format,
                 const std::filesystem::path& path);
std::vector<ResultRow> parse_report_json(const std::filesystem::path& path);

struct TimingStats {
  std::string method;
  double median_s = 0.0;
  double mean_s = 0.0;
  double min_s = 0.0;
  double max_s = 0.0;
  int repetitions = 0;
  std::string hardware;
};

/// Median/mean per-instance latency of `fn` over `repetitions` passes across
/// the instances; one untimed warm-up pass first.
TimingStats bench_timing(const std::string& method, std::size_t instances, int repetitions,
                         const std::function<void(std::size_t)>& fn);

std::string hardware_descriptor();

// --- orchestration ---------------------------------------------------------

/// Writes <out>/train and <out>/test datasets.
void run_gen_data(const ExperimentSpec& spec, const std::filesystem::path& out_dir, int threads);

struct TrainOutcome {
  hgnet::TrainResult curve;
  std::filesystem::path checkpoint;
};

/// Trains on <data>/train and saves the checkpoint. `variant_no_g` disables
/// the high-generalization module (adversarial weight and discard count 0).
TrainOutcome run_train(const ExperimentSpec& spec, const std::filesystem::path& data_dir,
                       const std::filesystem::path& ckpt_path, bool variant_no_g = false);

/// Evaluates the requested methods on freshly drawn channels for every
/// (channel model x eval size) cell.
std::vector<ResultRow> run_eval(const ExperimentSpec& spec,
                                const std::optional<hgnet::Checkpoint>& ckpt,
                                const std::optional<hgnet::Checkpoint>& ckpt_no_g, int threads);

/// OAU sweep over H on adaptation test data; one row per H value. Also
/// writes one JSON record per sample (adapt_report.jsonl) when out_dir is
/// non-empty.
std::vector<ResultRow> run_adapt_sweep(const ExperimentSpec& spec, const hgnet::Checkpoint& ckpt,
                                       const std::vector<int>& h_sweep, int threads,
                                       const std::filesystem::path& out_dir = {});

/// Relative latency comparison of the configured methods.
std::vector<TimingStats> run_bench(const ExperimentSpec& spec, const hgnet::Checkpoint& ckpt,
                                   int q, int i, int instances, int repetitions);

struct MmdDiagRow {
  std::string model_a, model_b;
  int layer = 0;
  double gmmd = 0.0;
};

struct MmdDiagReport {
  std::vector<MmdDiagRow> pairs;
  double source_gap = 0.0;  // max pairwise gmmd at the diagnostic layer
};

/// Domain-gap diagnostics: per-layer features of test samples from each
/// channel model through the trained net, pairwise G-MMD at the last hidden
/// layer.
MmdDiagReport run_mmd_diag(const hgnet::Checkpoint& ckpt, const std::filesystem::path& data_dir,
                           int max_samples = 128);

/// Full pipeline: data, training, evaluation, adaptation sweep; returns all
/// result rows. Fully reproducible from (spec, seed) up to wall times.
std::vector<ResultRow> run_experiment(const ExperimentSpec& spec, int threads);

}  // namespace cfbeam::harness

#endif  // CFBEAM_HARNESS_HPP
