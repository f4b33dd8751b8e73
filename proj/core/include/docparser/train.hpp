#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "docparser/checkpoint.hpp"
#include "docparser/dataset.hpp"
#include "docparser/model.hpp"
#include "docparser/pretrain.hpp"

namespace docparser {

/// Cosine annealing: lr_min + (lr0 - lr_min) * (1 + cos(pi * step/total)) / 2.
/// step must lie in [0, total]; total must be positive.
double cosine_lr(std::int64_t step, std::int64_t total, double lr0, double lr_min);

struct AugmentConfig {
  double prob = 0.5;
  double scale_lo = 0.95;
  double scale_hi = 1.05;
  double rotate_deg = 5.0;
  double color = 0.10;  // brightness/saturation/contrast jitter, +-10%
  bool enabled = true;
};

/// Deterministic per-seed augmentation: light rescale, rotation and colour
/// jitter, each applied independently with the configured probability. The
/// output is always (out_h, out_w): inputs are fitted preserving aspect
/// ratio and re-padded.
Image augment(const Image& img, std::uint64_t seed, const AugmentConfig& cfg,
              std::int64_t out_h, std::int64_t out_w);

struct TrainConfig {
  std::string phase = "finetune";  // kt | read | finetune
  double lr = -1.0;                // -1: phase default (1e-4 pretrain, 3e-5 finetune)
  double lr_min = 0.0;
  double weight_decay = 0.01;
  double stochastic_depth = 0.1;
  std::int64_t batch_size = 1;
  std::int64_t grad_accum_steps = 1;
  std::int64_t total_steps = 100;
  std::int64_t warmup_steps = -1;  // -1: 3% of total_steps
  std::uint64_t seed = 0;
  std::int64_t resolution_h = 320;
  std::int64_t resolution_w = 320;
  AugmentConfig aug;
  std::int64_t eval_interval = 25;
  std::int64_t checkpoint_interval = 100;
  double early_stop_f1 = -1.0;   // finetune: stop once train F1 reaches this
  double early_stop_dar = -1.0;  // additional DAR bar for the early stop
  std::int64_t eval_limit = 0;  // 0: evaluate every document
  // Steps at the start of read/finetune runs during which the encoder is
  // held frozen so the decoder first learns to read the visual features
  // before they are refined jointly. Prevents the early optimisation shock
  // from erasing input-dependent structure on small datasets.
  std::int64_t freeze_encoder_steps = 0;
  // Learning-rate multiplier for encoder parameters (finetune/read):
  // gentler joint refinement after a frozen lead-in.
  double encoder_lr_scale = 1.0;
  // read phase
  double mask_ratio = 0.15;
  // kt phase
  std::int64_t teacher_channels = 48;
  std::uint64_t teacher_seed = 1234;
  std::string teacher_features;  // optional DPTF file; empty -> random teacher
  std::string kt_resize = "bilinear";  // or "pool"

  double effective_lr() const;
  std::int64_t effective_warmup() const;
};

/// Model-side settings carried in the same key=value config file under the
/// "model." prefix.
struct ModelSpec {
  std::vector<std::int64_t> channels{64, 128, 256, 512, 768, 1024};
  std::vector<std::int64_t> blocks{3, 6, 6, 2, 2, 2};
  std::vector<std::pair<std::int64_t, std::int64_t>> windows{{5, 40}, {5, 20}, {10, 10}};
  std::vector<std::int64_t> heads{8, 12, 16};
  std::int64_t conv_kernel = 7;
  bool shifted_windows = true;
  std::int64_t decoder_layers = 1;
  std::int64_t decoder_heads = 16;
  std::int64_t decoder_dim = 0;  // 0: C5
  std::int64_t decoder_ffn = 0;  // 0: 4x dim
  std::int64_t max_decode_len = 768;
  std::string vocab = "builtin:tiny";     // or builtin:char or a file path
  std::string schema = "builtin:receipt"; // or a file path
};

struct ExperimentConfig {
  TrainConfig train;
  ModelSpec model;
};

/// Flat key=value configuration file; '#' starts a comment; unknown keys
/// are errors.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::string& path);

/// Assembles the full ModelConfig (resolves builtin/file vocab and schema,
/// positional grid, stochastic depth) from an experiment config.
ModelConfig build_model_config(const ExperimentConfig& exp);

struct TrainOutcome {
  std::int64_t steps = 0;
  double final_loss = 0.0;
  double final_f1 = -1.0;
  double final_dar = -1.0;
  std::string final_checkpoint;
};

/// Single-process training loop: gradient accumulation, warmup + cosine
/// schedule, periodic evaluation and checkpointing, bit-exact resume.
class Trainer {
 public:
  Trainer(DocParserModel& model, TrainConfig cfg, std::vector<DocumentSample> data,
          std::string out_dir, std::shared_ptr<Teacher> teacher = nullptr);

  /// Loads parameters (and, when the phase matches, optimizer state, step
  /// counter and RNG) from a checkpoint. Enforces phase ordering: kt only
  /// on top of kt, read on top of kt/read, finetune on top of anything.
  void resume_from(const std::string& checkpoint_path);

  TrainOutcome run();

  /// Greedy-decodes documents and scores them against their records.
  std::pair<double, double> evaluate_extraction(std::int64_t limit = 0) const;

 private:
  Tensor batch_loss(std::int64_t step, std::int64_t micro);
  void write_checkpoint(const std::string& name, const Checkpoint& ckpt);
  void log_metrics(const std::string& line);

  DocParserModel& model_;
  TrainConfig cfg_;
  std::vector<DocumentSample> data_;
  std::string out_dir_;
  std::shared_ptr<Teacher> teacher_;
  std::unique_ptr<AdamW> optimizer_;
  Rng rng_;
  std::int64_t start_step_ = 0;
  std::string last_checkpoint_;
};

}  // namespace docparser
