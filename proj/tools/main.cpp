// cfbeam command line: dataset generation, training, evaluation, online
// adaptation sweeps, latency benchmarks and domain-gap diagnostics for the
// cell-free beamforming laboratory.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "cfbeam/harness.hpp"

namespace {

using namespace cfbeam;

struct GlobalOpts {
  std::uint64_t seed = 0;  // 0 = keep the config's seed
  std::string format = "csv";
  int threads = 1;
};

harness::ExperimentSpec load(const std::string& config_path, const GlobalOpts& g) {
  harness::ExperimentSpec spec = harness::load_spec(config_path);
  if (g.seed != 0) {
    spec.seed = g.seed;
    spec.scenario.seed = g.seed;
  }
  return spec;
}

harness::ReportFormat format_of(const GlobalOpts& g) {
  return g.format == "json" ? harness::ReportFormat::Json : harness::ReportFormat::Csv;
}

std::vector<std::pair<int, int>> parse_sizes(const std::string& arg) {
  std::vector<std::pair<int, int>> sizes;
  std::size_t pos = 0;
  while (pos < arg.size()) {
    const std::size_t comma = arg.find(',', pos);
    const std::string tok = arg.substr(pos, comma == std::string::npos ? arg.size() - pos
                                                                       : comma - pos);
    int q = 0, i = 0;
    if (std::sscanf(tok.c_str(), "%dx%d", &q, &i) != 2 || q < 1 || i < 1)
      throw CLI::ValidationError("--sizes", "expected QxI pairs like 6x6,8x8");
    sizes.emplace_back(q, i);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return sizes;
}

void print_rows(const std::vector<harness::ResultRow>& rows) {
  for (const auto& r : rows)
    std::printf("%-22s %-10s (%2d,%2d)  rate %8.4f +/- %7.4f bits  %9.3f ms  n=%d\n",
                r.method.c_str(), r.channel_model.c_str(), r.q, r.i, r.mean_sum_rate_bits,
                r.std_sum_rate_bits, r.mean_wall_s * 1e3, r.samples);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cell-free beamforming laboratory"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand

  GlobalOpts g;
  app.add_option("--seed", g.seed, "override the config seed");
  app.add_option("--format", g.format, "report format: csv or json")
      ->check(CLI::IsMember({"csv", "json"}));
  app.add_option("--threads", g.threads, "worker threads for parallel cells")
      ->check(CLI::PositiveNumber);

  std::string config_path, data_dir = "data", out_arg, ckpt_path, ckpt_no_g_path, sizes_arg,
              sweep_arg;
  int bench_q = 8, bench_i = 8, bench_instances = 8, bench_reps = 5;
  bool train_no_g = false;

  auto* gen = app.add_subcommand("gen-data", "generate train/test channel datasets");
  gen->add_option("--config", config_path, "experiment config JSON")->required();
  gen->add_option("--out", out_arg, "output dataset directory")->required();

  auto* train = app.add_subcommand("train", "train the beamforming network");
  train->add_option("--config", config_path)->required();
  train->add_option("--data", data_dir, "dataset directory from gen-data")->required();
  train->add_option("--out", out_arg, "checkpoint output path")->required();
  train->add_flag("--no-g", train_no_g, "disable the feature-dropout module (ablation)");

  auto* eval = app.add_subcommand("eval", "evaluate methods over channel model x size cells");
  eval->add_option("--config", config_path)->required();
  eval->add_option("--ckpt", ckpt_path, "trained checkpoint");
  eval->add_option("--ckpt-no-g", ckpt_no_g_path, "ablation checkpoint");
  eval->add_option("--sizes", sizes_arg, "evaluation sizes, e.g. 6x6,8x8");

  auto* adapt = app.add_subcommand("adapt", "online adaptation sweep over update counts");
  adapt->add_option("--config", config_path)->required();
  adapt->add_option("--ckpt", ckpt_path)->required();
  adapt->add_option("--H-sweep", sweep_arg, "comma-separated update counts, e.g. 0,5,10,15,20");

  auto* bench = app.add_subcommand("bench", "per-sample latency comparison");
  bench->add_option("--config", config_path)->required();
  bench->add_option("--ckpt", ckpt_path)->required();
  bench->add_option("--q", bench_q, "AP count");
  bench->add_option("--i", bench_i, "user count");
  bench->add_option("--instances", bench_instances);
  bench->add_option("--reps", bench_reps)->check(CLI::Range(5, 1000));

  auto* diag = app.add_subcommand("mmd-diag", "domain-gap diagnostics on trained features");
  diag->add_option("--ckpt", ckpt_path)->required();
  diag->add_option("--data", data_dir)->required();

  auto* run = app.add_subcommand("run", "full experiment: data, training, eval, adaptation");
  run->add_option("--config", config_path)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      harness::run_gen_data(load(config_path, g), out_arg, g.threads);
      std::printf("dataset written to %s\n", out_arg.c_str());
    } else if (train->parsed()) {
      auto spec = load(config_path, g);
      auto outcome = harness::run_train(spec, data_dir, out_arg, train_no_g);
      for (std::size_t e = 0; e < outcome.curve.epochs.size(); ++e)
        std::printf("epoch %3zu  loss %12.6f  (rate %12.6f, adv %10.6f)\n", e + 1,
                    outcome.curve.epochs[e].mean_loss, outcome.curve.epochs[e].mean_rate_loss,
                    outcome.curve.epochs[e].mean_adv_loss);
      std::printf("checkpoint written to %s\n", outcome.checkpoint.string().c_str());
    } else if (eval->parsed()) {
      auto spec = load(config_path, g);
      if (!sizes_arg.empty()) spec.eval_sizes = parse_sizes(sizes_arg);
      std::optional<hgnet::Checkpoint> ckpt, no_g;
      if (!ckpt_path.empty()) ckpt = hgnet::load_checkpoint(ckpt_path);
      if (!ckpt_no_g_path.empty()) no_g = hgnet::load_checkpoint(ckpt_no_g_path);
      auto rows = harness::run_eval(spec, ckpt, no_g, g.threads);
      print_rows(rows);
      std::filesystem::create_directories(spec.output_dir);
      const auto path = spec.output_dir / (g.format == "json" ? "eval.json" : "eval.csv");
      harness::emit_report(rows, format_of(g), path);
      std::printf("report written to %s\n", path.string().c_str());
    } else if (adapt->parsed()) {
      auto spec = load(config_path, g);
      std::vector<int> sweep = spec.oau.h_sweep;
      if (!sweep_arg.empty()) {
        sweep.clear();
        std::size_t pos = 0;
        while (pos <= sweep_arg.size()) {
          const std::size_t comma = sweep_arg.find(',', pos);
          sweep.push_back(std::stoi(sweep_arg.substr(pos, comma - pos)));
          if (comma == std::string::npos) break;
          pos = comma + 1;
        }
      }
      const auto ckpt = hgnet::load_checkpoint(ckpt_path);
      auto rows = harness::run_adapt_sweep(spec, ckpt, sweep, g.threads, spec.output_dir);
      print_rows(rows);
      std::filesystem::create_directories(spec.output_dir);
      const auto path = spec.output_dir / (g.format == "json" ? "adapt.json" : "adapt.csv");
      harness::emit_report(rows, format_of(g), path);
      std::printf("report written to %s\n", path.string().c_str());
    } else if (bench->parsed()) {
      auto spec = load(config_path, g);
      const auto ckpt = hgnet::load_checkpoint(ckpt_path);
      auto stats = harness::run_bench(spec, ckpt, bench_q, bench_i, bench_instances, bench_reps);
      std::printf("hardware: %s\n", stats.front().hardware.c_str());
      for (const auto& s : stats)
        std::printf("%-12s median %10.4f ms  mean %10.4f ms  [%0.4f, %0.4f]\n", s.method.c_str(),
                    s.median_s * 1e3, s.mean_s * 1e3, s.min_s * 1e3, s.max_s * 1e3);
    } else if (diag->parsed()) {
      const auto ckpt = hgnet::load_checkpoint(ckpt_path);
      auto report = harness::run_mmd_diag(ckpt, data_dir);
      for (const auto& p : report.pairs)
        std::printf("G-MMD(layer %d) %-10s vs %-10s = %.6f\n", p.layer, p.model_a.c_str(),
                    p.model_b.c_str(), p.gmmd);
      std::printf("source gap (max pairwise) = %.6f\n", report.source_gap);
    } else if (run->parsed()) {
      auto spec = load(config_path, g);
      auto rows = harness::run_experiment(spec, g.threads);
      print_rows(rows);
      std::printf("reports written to %s\n", spec.output_dir.string().c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
