#include "cfbeam/dataset.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "cfbeam/errors.hpp"
#include "cfbeam/parallel.hpp"

namespace cfbeam::channel {

namespace {

using nlohmann::json;

static_assert(sizeof(double) == 8, "dataset format requires 64-bit doubles");

void append_f64_le(std::vector<unsigned char>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xff));
}

double read_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

std::string period_filename(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "period_%03d.bin", index);
  return buf;
}

json scenario_to_json(const ScenarioConfig& s) {
  json periods = json::array();
  for (const auto& p : s.periods) {
    periods.push_back({{"q", p.ap_count},
                       {"i", p.user_count},
                       {"channel_model", to_string(p.model)},
                       {"rice_factor", p.rice_factor},
                       {"paths", p.paths},
                       {"sample_count", p.sample_count}});
  }
  return json{{"area_side_m", s.area_side},
              {"ap_antennas", s.ap_antennas},
              {"user_antennas", s.user_antennas},
              {"p_max_watts", s.p_max},
              {"noise_power_watts", s.noise_power},
              {"pathloss_exponent", s.pathloss_exponent},
              {"seed", s.seed},
              {"periods", periods}};
}

ScenarioConfig scenario_from_json(const json& j) {
  ScenarioConfig s;
  s.area_side = j.at("area_side_m").get<double>();
  s.ap_antennas = j.at("ap_antennas").get<int>();
  s.user_antennas = j.at("user_antennas").get<int>();
  s.p_max = j.at("p_max_watts").get<double>();
  s.noise_power = j.at("noise_power_watts").get<double>();
  s.pathloss_exponent = j.at("pathloss_exponent").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& pj : j.at("periods")) {
    PeriodSpec p;
    p.ap_count = pj.at("q").get<int>();
    p.user_count = pj.at("i").get<int>();
    p.model = channel_model_from_string(pj.at("channel_model").get<std::string>());
    p.rice_factor = pj.at("rice_factor").get<double>();
    p.paths = pj.at("paths").get<int>();
    p.sample_count = pj.at("sample_count").get<int>();
    s.periods.push_back(p);
  }
  return s;
}

}  // namespace

DatasetInfo gen_dataset(const ScenarioConfig& scenario, const std::filesystem::path& dir,
                        int threads) {
  scenario.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw PersistenceError("cannot create dataset directory " + dir.string());

  DatasetInfo info;
  info.scenario = scenario;
  info.root = dir;
  for (const auto m : distinct_models(scenario)) info.label_names.push_back(to_string(m));

  json manifest;
  manifest["format_version"] = 1;
  manifest["scenario"] = scenario_to_json(scenario);
  manifest["labels"] = info.label_names;
  json periods_meta = json::array();

  for (int pi = 0; pi < static_cast<int>(scenario.periods.size()); ++pi) {
    const PeriodSpec& period = scenario.periods[pi];
    const std::size_t rows = static_cast<std::size_t>(period.user_count) * scenario.user_antennas;
    const std::size_t cols = static_cast<std::size_t>(period.ap_count) * scenario.ap_antennas;
    const std::size_t sample_bytes = rows * cols * 16;

    std::vector<unsigned char> blob(sample_bytes * static_cast<std::size_t>(period.sample_count));
    parallel_for(static_cast<std::size_t>(period.sample_count), threads, [&](std::size_t si) {
      const CSISample sample = gen_sample(scenario, pi, si);
      std::vector<unsigned char> bytes;
      bytes.reserve(sample_bytes);
      for (std::size_t k = 0; k < sample.h.size(); ++k) {
        append_f64_le(bytes, sample.h[k].real());
        append_f64_le(bytes, sample.h[k].imag());
      }
      std::memcpy(blob.data() + si * sample_bytes, bytes.data(), sample_bytes);
    });

    const std::string fname = period_filename(pi);
    std::ofstream out(dir / fname, std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot open " + (dir / fname).string() + " for writing");
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob.size()));
    if (!out) throw PersistenceError("write failed: " + (dir / fname).string());

    info.period_files.push_back(fname);
    info.period_labels.push_back(model_label(scenario, pi));
    periods_meta.push_back({{"index", pi},
                            {"file", fname},
                            {"label", model_label(scenario, pi)},
                            {"rows", rows},
                            {"cols", cols},
                            {"sample_count", period.sample_count}});
  }
  manifest["periods"] = periods_meta;

  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  if (!mf) throw PersistenceError("cannot write manifest in " + dir.string());
  mf << manifest.dump(2) << "\n";
  return info;
}

DatasetInfo read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw PersistenceError("missing manifest: " + (dir / "manifest.json").string());
  json manifest;
  in >> manifest;
  if (manifest.at("format_version").get<int>() != 1)
    throw PersistenceError("unsupported dataset format version");

  DatasetInfo info;
  info.scenario = scenario_from_json(manifest.at("scenario"));
  info.root = dir;
  info.label_names = manifest.at("labels").get<std::vector<std::string>>();
  for (const auto& pj : manifest.at("periods")) {
    info.period_files.push_back(pj.at("file").get<std::string>());
    info.period_labels.push_back(pj.at("label").get<int>());
  }
  return info;
}

std::vector<CSISample> load_period(const DatasetInfo& info, int period_index) {
  const PeriodSpec& period = info.scenario.periods.at(period_index);
  const std::size_t rows =
      static_cast<std::size_t>(period.user_count) * info.scenario.user_antennas;
  const std::size_t cols = static_cast<std::size_t>(period.ap_count) * info.scenario.ap_antennas;
  const std::size_t sample_bytes = rows * cols * 16;

  const auto path = info.root / info.period_files.at(period_index);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PersistenceError("missing period file: " + path.string());
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (blob.size() != sample_bytes * static_cast<std::size_t>(period.sample_count))
    throw PersistenceError("period file size mismatch: " + path.string());

  std::vector<CSISample> samples;
  samples.reserve(period.sample_count);
  for (int si = 0; si < period.sample_count; ++si) {
    CSISample s;
    s.h = CTensor({rows, cols});
    s.period_index = period_index;
    s.label = info.period_labels.at(period_index);
    s.noise_power = info.scenario.noise_power;
    const unsigned char* p = blob.data() + static_cast<std::size_t>(si) * sample_bytes;
    for (std::size_t k = 0; k < rows * cols; ++k) {
      const double re = read_f64_le(p + 16 * k);
      const double im = read_f64_le(p + 16 * k + 8);
      s.h[k] = {re, im};
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

std::vector<CSISample> load_all(const DatasetInfo& info) {
  std::vector<CSISample> all;
  for (int pi = 0; pi < static_cast<int>(info.scenario.periods.size()); ++pi) {
    auto part = load_period(info, pi);
    for (auto& s : part) all.push_back(std::move(s));
  }
  return all;
}

}  // namespace cfbeam::channel
