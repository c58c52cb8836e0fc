#include "cfbeam/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "cfbeam/errors.hpp"

namespace cfbeam::hgnet {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'C', 'F', 'B', 'M', 'O', 'D', 'L', '1'};

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

json config_to_json(const HGNetConfig& cfg) {
  json layers = json::array();
  for (const auto& l : cfg.layers)
    layers.push_back({{"kernel_w", l.kernel_w},
                      {"kernel_h", l.kernel_h},
                      {"stride_w", l.stride_w},
                      {"stride_h", l.stride_h},
                      {"pad_w", l.pad_w},
                      {"pad_h", l.pad_h},
                      {"channels", l.channels}});
  return json{{"layers", layers},
              {"num_classes", cfg.num_classes},
              {"features_dropped", cfg.features_dropped},
              {"grl_lambda", cfg.grl_lambda},
              {"adv_weight", cfg.adv_weight},
              {"ap_antennas", cfg.ap_antennas},
              {"user_antennas", cfg.user_antennas},
              {"p_max", cfg.p_max},
              {"bn_eps", cfg.bn_eps},
              {"projection",
               cfg.projection == metrics::PowerScaling::Projection ? "projection" : "power-ratio"},
              {"ref_width", cfg.ref_width},
              {"ref_height", cfg.ref_height},
              {"train",
               {{"batch_size", cfg.train.batch_size},
                {"learning_rate", cfg.train.learning_rate},
                {"epochs", cfg.train.epochs},
                {"seed", cfg.train.seed}}}};
}

HGNetConfig config_from_json(const json& j) {
  HGNetConfig cfg;
  cfg.layers.clear();
  for (const auto& lj : j.at("layers")) {
    LayerSpec l;
    l.kernel_w = lj.at("kernel_w").get<int>();
    l.kernel_h = lj.at("kernel_h").get<int>();
    l.stride_w = lj.at("stride_w").get<int>();
    l.stride_h = lj.at("stride_h").get<int>();
    l.pad_w = lj.at("pad_w").get<int>();
    l.pad_h = lj.at("pad_h").get<int>();
    l.channels = lj.at("channels").get<int>();
    cfg.layers.push_back(l);
  }
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.features_dropped = j.at("features_dropped").get<int>();
  cfg.grl_lambda = j.at("grl_lambda").get<double>();
  cfg.adv_weight = j.at("adv_weight").get<double>();
  cfg.ap_antennas = j.at("ap_antennas").get<int>();
  cfg.user_antennas = j.at("user_antennas").get<int>();
  cfg.p_max = j.at("p_max").get<double>();
  cfg.bn_eps = j.at("bn_eps").get<double>();
  cfg.projection = j.at("projection").get<std::string>() == "power-ratio"
                       ? metrics::PowerScaling::PowerRatio
                       : metrics::PowerScaling::Projection;
  cfg.ref_width = j.at("ref_width").get<int>();
  cfg.ref_height = j.at("ref_height").get<int>();
  const auto& tj = j.at("train");
  cfg.train.batch_size = tj.at("batch_size").get<int>();
  cfg.train.learning_rate = tj.at("learning_rate").get<double>();
  cfg.train.epochs = tj.at("epochs").get<int>();
  cfg.train.seed = tj.at("seed").get<std::uint64_t>();
  return cfg;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const HGNetConfig& cfg,
                     const HGNetParams& params) {
  json manifest;
  manifest["config"] = config_to_json(cfg);
  json blocks = json::array();
  std::vector<unsigned char> blob;
  for (const ParamGroup* g : params.all_groups()) {
    blocks.push_back({{"id", g->id}, {"count", g->size()}});
    for (std::size_t k = 0; k < g->size(); ++k) append_f64_le(blob, g->values[k]);
  }
  json stats = json::array();
  for (const auto& l : params.layers) {
    stats.push_back({{"channels", l.stats.channels()}, {"batches", l.stats.batches}});
    for (std::size_t k = 0; k < l.stats.mean_sum.size(); ++k)
      append_f64_le(blob, l.stats.mean_sum[k]);
    for (std::size_t k = 0; k < l.stats.var_sum.size(); ++k)
      append_f64_le(blob, l.stats.var_sum[k]);
  }
  manifest["blocks"] = blocks;
  manifest["bn_stats"] = stats;
  const std::string header = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PersistenceError("cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, 8);
  const std::uint64_t len = header.size();
  unsigned char len_le[8];
  for (int b = 0; b < 8; ++b) len_le[b] = static_cast<unsigned char>((len >> (8 * b)) & 0xff);
  out.write(reinterpret_cast<const char*>(len_le), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!out) throw PersistenceError("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PersistenceError("cannot open checkpoint: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw PersistenceError("not a checkpoint file: " + path.string());
  std::uint64_t len = 0;
  for (int b = 0; b < 8; ++b) len |= static_cast<std::uint64_t>(bytes[8 + b]) << (8 * b);
  if (bytes.size() < 16 + len) throw PersistenceError("truncated checkpoint: " + path.string());
  const json manifest = json::parse(bytes.begin() + 16, bytes.begin() + 16 + len);

  Checkpoint ck;
  ck.config = config_from_json(manifest.at("config"));
  Rng scratch(0);
  ck.params = HGNetParams::init(ck.config, scratch);

  const unsigned char* p = bytes.data() + 16 + len;
  const unsigned char* end = bytes.data() + bytes.size();
  auto take = [&](Tensor& t) {
    if (p + 8 * t.size() > end) throw PersistenceError("checkpoint blob too short");
    for (std::size_t k = 0; k < t.size(); ++k, p += 8) t[k] = read_f64_le(p);
  };

  const auto& blocks = manifest.at("blocks");
  auto groups = ck.params.all_groups();
  if (blocks.size() != groups.size())
    throw PersistenceError("checkpoint block table does not match configuration");
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    if (blocks[gi].at("id").get<std::string>() != groups[gi]->id ||
        blocks[gi].at("count").get<std::size_t>() != groups[gi]->size())
      throw PersistenceError("checkpoint block mismatch at " + groups[gi]->id);
    take(groups[gi]->values);
  }
  const auto& stats = manifest.at("bn_stats");
  if (stats.size() != ck.params.layers.size())
    throw PersistenceError("checkpoint statistics table does not match configuration");
  for (std::size_t li = 0; li < ck.params.layers.size(); ++li) {
    auto& s = ck.params.layers[li].stats;
    if (stats[li].at("channels").get<std::size_t>() != s.channels())
      throw PersistenceError("checkpoint statistics mismatch at layer " + std::to_string(li + 1));
    s.batches = stats[li].at("batches").get<std::size_t>();
    take(s.mean_sum);
    take(s.var_sum);
  }
  if (p != end) throw PersistenceError("checkpoint has trailing data: " + path.string());
  return ck;
}

}  // namespace cfbeam::hgnet
