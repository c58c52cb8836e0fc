#ifndef CFBEAM_DATASET_HPP
#define CFBEAM_DATASET_HPP

#include <filesystem>
#include <string>
#include <vector>

#include "cfbeam/channel.hpp"

namespace cfbeam::channel {

// On-disk dataset layout: `manifest.json` plus one binary file per period.
// Each sample is its (I*N) x (Q*M) complex matrix, row-major, every value a
// little-endian IEEE-754 float64 pair (re, im); samples are concatenated.

struct DatasetInfo {
  ScenarioConfig scenario;
  std::vector<std::string> period_files;
  std::vector<int> period_labels;
  std::vector<std::string> label_names;  // index = class id
  std::filesystem::path root;

  int class_count() const { return static_cast<int>(label_names.size()); }
};

/// Generates every period's samples and writes the dataset. Sample
/// generation is parallel-safe: bytes are identical for any thread count.
DatasetInfo gen_dataset(const ScenarioConfig& scenario, const std::filesystem::path& dir,
                        int threads = 1);

DatasetInfo read_manifest(const std::filesystem::path& dir);

/// Loads one period's samples into memory.
std::vector<CSISample> load_period(const DatasetInfo& info, int period_index);

/// Loads all periods, concatenated in period order.
std::vector<CSISample> load_all(const DatasetInfo& info);

}  // namespace cfbeam::channel

#endif  // CFBEAM_DATASET_HPP
