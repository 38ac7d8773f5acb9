#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

namespace fastgsc {

// Layout on disk:
//   8 bytes   magic "FGSCKPT1"
//   8 bytes   header length n, unsigned little-endian
//   n bytes   UTF-8 JSON header (shape manifest, schedule, seed, ...)
//   4*P bytes P parameters as little-endian IEEE-754 binary32
// The header always carries "num_params" = P.
struct Checkpoint {
  nlohmann::json header;
  std::vector<double> params;
};

void write_checkpoint(const std::filesystem::path& path, nlohmann::json header,
                      std::span<const double> params);

// Throws MissingCheckpoint when the file does not exist and MalformedInput
// when it cannot be parsed.
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Rounds every value to the nearest binary32, i.e. what a save/load cycle
// produces.
void round_to_float32(std::span<double> values);

}  // namespace fastgsc
