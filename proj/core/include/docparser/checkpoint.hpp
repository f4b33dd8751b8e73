#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "docparser/model.hpp"
#include "docparser/optim.hpp"

namespace docparser {

/// Versioned binary container: magic "DPCK", u32 version, model config
/// JSON, named f64 parameter arrays, optional optimizer moments, step
/// counter, RNG state and training phase. save -> load -> save is
/// byte-identical.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string config_json;
  std::vector<std::pair<std::string, Tensor>> params;
  bool has_optimizer = false;
  std::int64_t opt_step = 0;
  std::vector<AdamW::Moments> moments;  // aligned with params
  std::int64_t global_step = 0;
  std::array<std::uint64_t, 4> rng_state{};
  std::string phase;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Snapshot of a live model (and optionally its optimizer state).
Checkpoint capture_checkpoint(DocParserModel& model, const AdamW* optimizer,
                              std::int64_t global_step, const Rng& rng,
                              const std::string& phase);

/// Copies parameter values from a checkpoint into the model, validating
/// that every expected parameter name and shape is present.
void restore_parameters(DocParserModel& model, const Checkpoint& ckpt);

}  // namespace docparser
