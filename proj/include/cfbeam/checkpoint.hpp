#ifndef CFBEAM_CHECKPOINT_HPP
#define CFBEAM_CHECKPOINT_HPP

#include <filesystem>

#include "cfbeam/hgnet.hpp"

namespace cfbeam::hgnet {

// Checkpoint file: magic + version, a JSON manifest echoing the network
// configuration and the parameter block table, then one contiguous blob of
// little-endian float64 values in declared group order followed by the BN
// running statistics (mean sums, variance sums, batch counters) per layer.
// Save/load round-trips are byte-stable.

struct Checkpoint {
  HGNetConfig config;
  HGNetParams params;
};

void save_checkpoint(const std::filesystem::path& path, const HGNetConfig& cfg,
                     const HGNetParams& params);

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cfbeam::hgnet

#endif  // CFBEAM_CHECKPOINT_HPP
