#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "sprout/model.hpp"

namespace sprout {

/// Model parameters plus the Dirichlet state and the run metadata needed to
/// reproduce them.
///
/// On disk: the 8-byte magic "SPRCKPT\0", a little-endian u64 header length, a
/// JSON header (model spec, parameter names and shapes, config, epoch, seeds)
/// and then raw little-endian float64 blocks: each parameter in header order,
/// followed by log beta.
struct Checkpoint {
  Model model;
  std::vector<double> log_beta;
  std::map<std::string, std::string> config;
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seed_lineage;  // seeds of the runs this one was initialized from
};

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Short content hash used as checkpoint id in report provenance.
std::string checkpoint_id(const std::filesystem::path& path);

}  // namespace sprout
