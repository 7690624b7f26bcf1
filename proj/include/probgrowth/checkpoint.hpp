#pragma once

// Checkpoint container.
//
//   offset 0   8 bytes   magic "PGCKPT\0\1"
//   offset 8   8 bytes   header length H, unsigned little-endian
//   offset 16  H bytes   UTF-8 JSON header
//   offset 16+H          payload: little-endian float64 arrays back to back
//
// The header holds "network" (NetworkConfig), "meta" (free-form: training
// config, fold, variant), "global_step", "rng_state", "optimizer"
// (Adam hyperparameters and step), "payload_bytes", "checksum" (FNV-1a 64 of
// the payload, hex) and "arrays": [{name, shape, offset, count}]. Parameter
// arrays use their model names; Adam moments are stored as "adam.m/<name>"
// and "adam.v/<name>". Save followed by load reproduces every value bit-exactly.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "probgrowth/model.hpp"
#include "probgrowth/optimizer.hpp"
#include "probgrowth/rng.hpp"

namespace probgrowth {

struct Checkpoint {
  ProbUNet model;
  AdamState optimizer;
  std::int64_t global_step = 0;
  Rng rng;
  nlohmann::json meta = nlohmann::json::object();
};

/// Writes atomically (temporary file, then rename). Throws IoError.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws IoError if unreadable and DataError (naming the file) if truncated,
/// corrupt or inconsistent.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace probgrowth
