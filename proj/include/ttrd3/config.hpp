#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "ttrd3/denoiser.hpp"
#include "ttrd3/losses.hpp"
#include "ttrd3/mfam.hpp"
#include "ttrd3/schedule.hpp"
#include "ttrd3/sttg.hpp"

namespace ttrd3 {

struct OptimConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  int iterations = 300000;
  int batch_size = 2;
};

struct DataConfig {
  std::string manifest;
  int sr_factor = 4;
  std::string pairing = "same-category";
  int patch_size = 256;  // HR training crop; 0 keeps the whole image
};

struct TrainLoopConfig {
  int log_every = 50;
  int val_every = 500;
  int checkpoint_every = 0;  // 0: only the final checkpoint
};

struct ExperimentConfig {
  int T = 1000;
  double beta_bar_T = 0.1;
  ScheduleShape schedule_shape = ScheduleShape::Uniform;
  int sample_steps = 10;
  double eta = 1.0;
  MfamConfig mfam;
  SttgConfig sttg;
  DenoiserConfig denoiser;  // guidance_channels follow mfam.widths
  LossWeights loss;
  std::string perceptual = "convstack";
  OptimConfig optim;
  DataConfig data;
  TrainLoopConfig train;
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
};

/// Paper-scale hyperparameters.
ExperimentConfig paper_config();
/// CPU-sized default (C=16, multipliers [1,2,2,4], 64x64 crops).
ExperimentConfig desk_config();
/// Tiny configuration for the synthetic overfit run.
ExperimentConfig toy_config();

nlohmann::json to_json(const ExperimentConfig& cfg);

/// Merges `j` over `base` (default: desk_config) and validates. Unknown keys
/// and wrongly typed values are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j, const ExperimentConfig& base = desk_config());

ExperimentConfig load_config(const std::string& path, const ExperimentConfig& base = desk_config());

/// Applies "a.b.c=value" (value parsed as JSON, falling back to a string).
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Throws std::invalid_argument describing the first violated constraint.
void validate(const ExperimentConfig& cfg);

/// FNV-1a over the canonical schedule and model sections; hex string.
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace ttrd3
