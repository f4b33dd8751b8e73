#include "docparser/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "docparser/metrics.hpp"
#include "docparser/ops.hpp"

namespace docparser {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

double cosine_lr(std::int64_t step, std::int64_t total, double lr0, double lr_min) {
  if (total <= 0) {
    throw std::invalid_argument("cosine_lr: total steps must be positive");
  }
  if (step < 0 || step > total) {
    throw std::invalid_argument("cosine_lr: step " + std::to_string(step) +
                                " outside [0," + std::to_string(total) + "]");
  }
  const double t = static_cast<double>(step) / static_cast<double>(total);
  return lr_min + (lr0 - lr_min) * (1.0 + std::cos(3.141592653589793 * t)) / 2.0;
}

namespace {

// Center crop or pad to the target size (used after scale jitter).
Image center_fit(const Image& img, std::int64_t out_h, std::int64_t out_w,
                 double fill) {
  Image out = Image::filled(out_h, out_w, fill);
  const std::int64_t dy = (out_h - img.height) / 2;
  const std::int64_t dx = (out_w - img.width) / 2;
  for (int c = 0; c < 3; ++c) {
    for (std::int64_t y = 0; y < out_h; ++y) {
      const std::int64_t sy = y - dy;
      if (sy < 0 || sy >= img.height) continue;
      for (std::int64_t x = 0; x < out_w; ++x) {
        const std::int64_t sx = x - dx;
        if (sx < 0 || sx >= img.width) continue;
        out.at(c, y, x) = img.at(c, sy, sx);
      }
    }
  }
  return out;
}

}  // namespace

Image augment(const Image& img, std::uint64_t seed, const AugmentConfig& cfg,
              std::int64_t out_h, std::int64_t out_w) {
  Image cur = (img.height == out_h && img.width == out_w)
                  ? img
                  : fit_pad(img, out_h, out_w, 1.0);
  if (!cfg.enabled) return cur;
  Rng rng(Rng::mix(seed, 0xa0933e41u, 7));
  if (rng.bernoulli(cfg.prob)) {
    const double f = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    const auto nh = std::max<std::int64_t>(1, std::llround(out_h * f));
    const auto nw = std::max<std::int64_t>(1, std::llround(out_w * f));
    cur = center_fit(resize_bilinear(cur, nh, nw), out_h, out_w, 1.0);
  }
  if (rng.bernoulli(cfg.prob)) {
    cur = rotate(cur, rng.uniform(-cfg.rotate_deg, cfg.rotate_deg), 1.0);
  }
  if (rng.bernoulli(cfg.prob)) {
    cur = adjust_brightness(cur, rng.uniform(1.0 - cfg.color, 1.0 + cfg.color));
  }
  if (rng.bernoulli(cfg.prob)) {
    cur = adjust_saturation(cur, rng.uniform(1.0 - cfg.color, 1.0 + cfg.color));
  }
  if (rng.bernoulli(cfg.prob)) {
    cur = adjust_contrast(cur, rng.uniform(1.0 - cfg.color, 1.0 + cfg.color));
  }
  clamp01(cur);
  return cur;
}

double TrainConfig::effective_lr() const {
  if (lr > 0) return lr;
  return phase == "finetune" ? 3e-5 : 1e-4;
}

std::int64_t TrainConfig::effective_warmup() const {
  if (warmup_steps >= 0) return warmup_steps;
  return std::max<std::int64_t>(0, total_steps * 3 / 100);
}

// ---------------------------------------------------------------------------
// Config file parsing
// ---------------------------------------------------------------------------

namespace {

std::vector<std::int64_t> parse_int_list(const std::string& v, const std::string& key) {
  std::vector<std::int64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stoll(item));
    } catch (...) {
      throw std::invalid_argument("config: bad integer '" + item + "' for key '" +
                                  key + "'");
    }
  }
  if (out.empty()) throw std::invalid_argument("config: empty list for key '" + key + "'");
  return out;
}

std::pair<std::int64_t, std::int64_t> parse_dims(const std::string& v,
                                                 const std::string& key) {
  const auto x = v.find('x');
  if (x == std::string::npos) {
    throw std::invalid_argument("config: key '" + key + "' expects HxW, got '" + v +
                                "'");
  }
  return {std::stoll(v.substr(0, x)), std::stoll(v.substr(x + 1))};
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw std::invalid_argument("config: key '" + key + "' expects a boolean, got '" +
                              v + "'");
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text) {
  ExperimentConfig exp;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) +
                                  ": expected key=value, got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto& t = exp.train;
    auto& m = exp.model;
    if (key == "phase") {
      if (value != "kt" && value != "read" && value != "finetune") {
        throw std::invalid_argument("config: phase must be kt|read|finetune, got '" +
                                    value + "'");
      }
      t.phase = value;
    } else if (key == "lr") {
      t.lr = std::stod(value);
    } else if (key == "lr_min") {
      t.lr_min = std::stod(value);
    } else if (key == "weight_decay") {
      t.weight_decay = std::stod(value);
    } else if (key == "stochastic_depth") {
      t.stochastic_depth = std::stod(value);
    } else if (key == "batch_size") {
      t.batch_size = std::stoll(value);
    } else if (key == "grad_accum_steps") {
      t.grad_accum_steps = std::stoll(value);
    } else if (key == "total_steps") {
      t.total_steps = std::stoll(value);
    } else if (key == "warmup_steps") {
      t.warmup_steps = std::stoll(value);
    } else if (key == "seed") {
      t.seed = std::stoull(value);
    } else if (key == "resolution") {
      auto [h, w] = parse_dims(value, key);
      t.resolution_h = h;
      t.resolution_w = w;
    } else if (key == "aug_enabled") {
      t.aug.enabled = parse_bool(value, key);
    } else if (key == "aug_prob") {
      t.aug.prob = std::stod(value);
    } else if (key == "aug_scale_lo") {
      t.aug.scale_lo = std::stod(value);
    } else if (key == "aug_scale_hi") {
      t.aug.scale_hi = std::stod(value);
    } else if (key == "aug_rotate_deg") {
      t.aug.rotate_deg = std::stod(value);
    } else if (key == "aug_color") {
      t.aug.color = std::stod(value);
    } else if (key == "eval_interval") {
      t.eval_interval = std::stoll(value);
    } else if (key == "checkpoint_interval") {
      t.checkpoint_interval = std::stoll(value);
    } else if (key == "early_stop_f1") {
      t.early_stop_f1 = std::stod(value);
    } else if (key == "early_stop_dar") {
      t.early_stop_dar = std::stod(value);
    } else if (key == "eval_limit") {
      t.eval_limit = std::stoll(value);
    } else if (key == "freeze_encoder_steps") {
      t.freeze_encoder_steps = std::stoll(value);
    } else if (key == "encoder_lr_scale") {
      t.encoder_lr_scale = std::stod(value);
    } else if (key == "mask_ratio") {
      t.mask_ratio = std::stod(value);
    } else if (key == "teacher_channels") {
      t.teacher_channels = std::stoll(value);
    } else if (key == "teacher_seed") {
      t.teacher_seed = std::stoull(value);
    } else if (key == "teacher_features") {
      t.teacher_features = value;
    } else if (key == "kt_resize") {
      if (value != "pool" && value != "bilinear") {
        throw std::invalid_argument("config: kt_resize must be pool|bilinear");
      }
      t.kt_resize = value;
    } else if (key == "model.channels") {
      m.channels = parse_int_list(value, key);
    } else if (key == "model.blocks") {
      m.blocks = parse_int_list(value, key);
    } else if (key == "model.windows") {
      m.windows.clear();
      std::stringstream ws(value);
      std::string pair;
      while (std::getline(ws, pair, ',')) {
        m.windows.push_back(parse_dims(pair, key));
      }
      if (m.windows.size() != 3) {
        throw std::invalid_argument("config: model.windows expects three HxW pairs");
      }
    } else if (key == "model.heads") {
      m.heads = parse_int_list(value, key);
    } else if (key == "model.conv_kernel") {
      m.conv_kernel = std::stoll(value);
    } else if (key == "model.shifted") {
      m.shifted_windows = parse_bool(value, key);
    } else if (key == "model.decoder_layers") {
      m.decoder_layers = std::stoll(value);
    } else if (key == "model.decoder_heads") {
      m.decoder_heads = std::stoll(value);
    } else if (key == "model.decoder_dim") {
      m.decoder_dim = std::stoll(value);
    } else if (key == "model.decoder_ffn") {
      m.decoder_ffn = std::stoll(value);
    } else if (key == "model.max_decode_len") {
      m.max_decode_len = std::stoll(value);
    } else if (key == "model.vocab") {
      m.vocab = value;
    } else if (key == "model.schema") {
      m.schema = value;
    } else {
      throw std::invalid_argument("config: unknown key '" + key + "'");
    }
  }
  return exp;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

ModelConfig build_model_config(const ExperimentConfig& exp) {
  ModelConfig cfg;
  cfg.encoder.channels = exp.model.channels;
  cfg.encoder.blocks_per_stage = exp.model.blocks;
  cfg.encoder.window_sizes = exp.model.windows;
  cfg.encoder.num_heads = exp.model.heads;
  cfg.encoder.conv_kernel = exp.model.conv_kernel;
  cfg.encoder.use_shifted_windows = exp.model.shifted_windows;
  cfg.encoder.stochastic_depth_p = exp.train.stochastic_depth;
  cfg.decoder.num_layers = exp.model.decoder_layers;
  cfg.decoder.num_heads = exp.model.decoder_heads;
  cfg.decoder.model_dim = exp.model.decoder_dim;
  cfg.decoder.ffn_dim = exp.model.decoder_ffn;
  cfg.decoder.max_decode_len = exp.model.max_decode_len;
  cfg.train_height = exp.train.resolution_h;
  cfg.train_width = exp.train.resolution_w;

  if (exp.model.vocab == "builtin:tiny") {
    cfg.vocab_json = Vocabulary::builtin_tiny_bpe().to_json();
  } else if (exp.model.vocab == "builtin:char") {
    cfg.vocab_json = Vocabulary::char_level().to_json();
  } else {
    cfg.vocab_json = Vocabulary::from_file(exp.model.vocab).to_json();
  }
  if (exp.model.schema == "builtin:receipt") {
    cfg.schema_json = TaskSchema::builtin_receipt().to_json();
  } else {
    cfg.schema_json = TaskSchema::from_file(exp.model.schema).to_json();
  }
  if (exp.train.phase == "kt") {
    cfg.kt_teacher_channels = exp.train.teacher_channels;
  }
  cfg.finalize();
  return cfg;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(DocParserModel& model, TrainConfig cfg,
                 std::vector<DocumentSample> data, std::string out_dir,
                 std::shared_ptr<Teacher> teacher)
    : model_(model),
      cfg_(std::move(cfg)),
      data_(std::move(data)),
      out_dir_(std::move(out_dir)),
      teacher_(std::move(teacher)),
      rng_(Rng::mix(cfg_.seed, 0x7a41137eu, 3)) {
  if (data_.empty()) throw std::invalid_argument("trainer: empty dataset");
  if (cfg_.phase != "kt" && cfg_.phase != "read" && cfg_.phase != "finetune") {
    throw std::invalid_argument("trainer: unknown phase '" + cfg_.phase + "'");
  }
  if (cfg_.phase == "read") {
    for (const auto& s : data_) {
      if (s.transcription.empty()) {
        throw std::invalid_argument("trainer: read phase needs transcriptions");
      }
    }
  }
  if (cfg_.phase == "finetune") {
    for (const auto& s : data_) {
      if (s.record.empty()) {
        throw std::invalid_argument("trainer: finetune phase needs records");
      }
    }
  }
  if (cfg_.phase == "kt") {
    if (!teacher_) {
      teacher_ = std::make_shared<RandomTeacher>(cfg_.teacher_channels,
                                                 cfg_.teacher_seed);
    }
    if (!model_.has_kt_adapter()) {
      throw std::invalid_argument(
          "trainer: kt phase needs a model built with kt_teacher_channels set");
    }
  }
  fs::create_directories(out_dir_);
  auto params = model_.parameters();
  optimizer_ = std::make_unique<AdamW>(
      params, AdamWOpts{cfg_.effective_lr(), 0.9, 0.999, 1e-8, cfg_.weight_decay});
  if (cfg_.encoder_lr_scale != 1.0 && cfg_.phase != "kt") {
    std::vector<double> scales(params.size(), 1.0);
    for (size_t i = 0; i < params.size(); ++i) {
      if (params[i].name.rfind("encoder.", 0) == 0) scales[i] = cfg_.encoder_lr_scale;
    }
    optimizer_->set_lr_scales(std::move(scales));
  }
}

void Trainer::resume_from(const std::string& checkpoint_path) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  // Phase ordering: knowledge transfer precedes masked reading precedes
  // fine-tuning.
  const std::string& prev = ckpt.phase;
  const std::string& next = cfg_.phase;
  const bool ok = (next == "kt" && (prev.empty() || prev == "kt")) ||
                  (next == "read" && (prev.empty() || prev == "kt" || prev == "read")) ||
                  (next == "finetune");
  if (!ok) {
    throw std::invalid_argument("phase ordering violation: cannot start phase '" +
                                next + "' from a '" + prev + "' checkpoint");
  }
  restore_parameters(model_, ckpt);
  if (prev == next) {
    // Exact resume of the same run.
    if (ckpt.has_optimizer) {
      optimizer_->restore(ckpt.opt_step, ckpt.moments);
    }
    start_step_ = ckpt.global_step;
    rng_.set_state(ckpt.rng_state);
  }
  last_checkpoint_ = checkpoint_path;
}

void Trainer::write_checkpoint(const std::string& name, const Checkpoint& ckpt) {
  const std::string path = (fs::path(out_dir_) / name).string();
  save_checkpoint(path, ckpt);
  last_checkpoint_ = path;
}

void Trainer::log_metrics(const std::string& line) {
  std::ofstream log(fs::path(out_dir_) / "metrics.jsonl", std::ios::app);
  log << line << "\n";
}

Tensor Trainer::batch_loss(std::int64_t step, std::int64_t micro) {
  const auto n = data_.size();
  std::vector<std::int64_t> indices;
  std::vector<Image> images;
  for (std::int64_t b = 0; b < cfg_.batch_size; ++b) {
    // Flat position within the effective batch, so splitting a batch into
    // micro-batches draws exactly the same samples.
    const auto pos = static_cast<std::uint64_t>(micro * cfg_.batch_size + b);
    const auto idx = static_cast<std::int64_t>(
        Rng::mix(cfg_.seed, static_cast<std::uint64_t>(step) * 1000003ULL + pos,
                 0x5a17u) %
        n);
    indices.push_back(idx);
    const auto aug_seed =
        Rng::mix(cfg_.seed ^ 0xaULL, static_cast<std::uint64_t>(step), pos);
    images.push_back(augment(data_[static_cast<size_t>(idx)].image, aug_seed, cfg_.aug,
                             cfg_.resolution_h, cfg_.resolution_w));
  }

  if (cfg_.phase == "kt") {
    Tensor batch = images_to_tensor(images);
    Tensor student = model_.encode_stage3(batch, true, &rng_);
    Tensor teacher_fm = teacher_->features(batch, indices);
    return knowledge_transfer_loss(
        student, teacher_fm, model_.kt_adapter_weight(), model_.kt_adapter_bias(),
        cfg_.kt_resize == "pool" ? KtResize::Pool : KtResize::Bilinear);
  }
  const bool frozen_encoder = step < cfg_.freeze_encoder_steps;
  if (cfg_.phase == "read") {
    std::vector<std::string> texts;
    for (auto idx : indices) texts.push_back(data_[static_cast<size_t>(idx)].transcription);
    const auto mask_seed =
        Rng::mix(cfg_.seed ^ 0x3a5cu, static_cast<std::uint64_t>(step),
                 static_cast<std::uint64_t>(micro));
    if (frozen_encoder) {
      std::vector<std::vector<std::int64_t>> sequences;
      std::vector<Image> masked;
      for (size_t i = 0; i < images.size(); ++i) {
        masked.push_back(cfg_.mask_ratio > 0
                             ? mask_blocks(images[i], 32, cfg_.mask_ratio,
                                           Rng::mix(mask_seed, i)).image
                             : images[i]);
        sequences.push_back(model_.codec().serialize_reading(texts[i]).ids);
      }
      Tensor memory;
      {
        NoGradGuard ng;
        memory = model_.encode_memory(images_to_tensor(masked), false, nullptr);
      }
      return model_.decoder().teacher_forced_loss(sequences, memory,
                                                  model_.codec().end_id());
    }
    return masked_reading_loss(model_, images, texts, cfg_.mask_ratio, mask_seed, true,
                               &rng_);
  }
  // finetune
  Tensor batch = images_to_tensor(images);
  Tensor memory;
  if (frozen_encoder) {
    NoGradGuard ng;
    memory = model_.encode_memory(batch, false, nullptr);
  } else {
    memory = model_.encode_memory(batch, true, &rng_);
  }
  std::vector<std::vector<std::int64_t>> sequences;
  for (auto idx : indices) {
    sequences.push_back(model_.codec().serialize(data_[static_cast<size_t>(idx)].record).ids);
  }
  return model_.decoder().teacher_forced_loss(sequences, memory,
                                              model_.codec().end_id());
}

std::pair<double, double> Trainer::evaluate_extraction(std::int64_t limit) const {
  NoGradGuard ng;
  std::vector<std::pair<FieldRecord, FieldRecord>> results;
  const auto n = limit > 0 ? std::min<std::size_t>(data_.size(), limit) : data_.size();
  for (std::size_t i = 0; i < n; ++i) {
    Image img = (data_[i].image.height == cfg_.resolution_h &&
                 data_[i].image.width == cfg_.resolution_w)
                    ? data_[i].image
                    : fit_pad(data_[i].image, cfg_.resolution_h, cfg_.resolution_w, 1.0);
    auto ex = model_.extract(img);
    results.emplace_back(ex.record, data_[i].record);
  }
  auto f1 = field_f1_corpus(results);
  return {f1.f1, dar(results)};
}

TrainOutcome Trainer::run() {
  TrainOutcome outcome;
  const double lr0 = cfg_.effective_lr();
  const std::int64_t warmup = cfg_.effective_warmup();
  double last_loss = 0.0;

  for (std::int64_t step = start_step_; step < cfg_.total_steps; ++step) {
    double lr = lr0;
    if (step < warmup && warmup > 0) {
      lr = lr0 * static_cast<double>(step + 1) / static_cast<double>(warmup);
    } else {
      const std::int64_t cos_total = std::max<std::int64_t>(1, cfg_.total_steps - warmup);
      lr = cosine_lr(std::min(step - warmup, cos_total), cos_total, lr0, cfg_.lr_min);
    }
    optimizer_->set_lr(lr);

    double step_loss = 0.0;
    for (std::int64_t micro = 0; micro < cfg_.grad_accum_steps; ++micro) {
      Tensor loss = scale(batch_loss(step, micro),
                          1.0 / static_cast<double>(cfg_.grad_accum_steps));
      const double value = loss.item() * cfg_.grad_accum_steps;
      if (!std::isfinite(value)) {
        throw std::runtime_error(
            "non-finite loss at step " + std::to_string(step) +
            (last_checkpoint_.empty()
                 ? std::string("; no checkpoint written yet")
                 : "; last good checkpoint: " + last_checkpoint_));
      }
      step_loss += value / cfg_.grad_accum_steps;
      backward(loss);
    }
    optimizer_->step();
    optimizer_->zero_grad();
    last_loss = step_loss;

    const std::int64_t done = step + 1;
    const bool is_eval =
        cfg_.eval_interval > 0 &&
        (done % cfg_.eval_interval == 0 || done == cfg_.total_steps);
    double f1 = -1.0, dar_v = -1.0;
    if (is_eval) {
      ordered_json j;
      j["step"] = done;
      j["phase"] = cfg_.phase;
      j["lr"] = lr;
      j["loss"] = step_loss;
      if (cfg_.phase == "finetune") {
        std::tie(f1, dar_v) = evaluate_extraction(cfg_.eval_limit);
        j["f1_micro"] = f1;
        j["dar"] = dar_v;
        outcome.final_f1 = f1;
        outcome.final_dar = dar_v;
      }
      log_metrics(j.dump());
    }

    const bool is_ckpt = cfg_.checkpoint_interval > 0 &&
                         (done % cfg_.checkpoint_interval == 0);
    const bool early_stop = cfg_.phase == "finetune" && cfg_.early_stop_f1 > 0 &&
                            f1 >= cfg_.early_stop_f1 &&
                            (cfg_.early_stop_dar <= 0 || dar_v >= cfg_.early_stop_dar);
    if (is_ckpt || done == cfg_.total_steps || early_stop) {
      Checkpoint ckpt =
          capture_checkpoint(model_, optimizer_.get(), done, rng_, cfg_.phase);
      char name[64];
      std::snprintf(name, sizeof(name), "ckpt_step_%06lld.dpck",
                    static_cast<long long>(done));
      write_checkpoint(name, ckpt);
      if (done == cfg_.total_steps || early_stop) {
        write_checkpoint("ckpt_final.dpck", ckpt);
      }
    }
    outcome.steps = done;
    if (early_stop) break;
  }
  outcome.final_loss = last_loss;
  outcome.final_checkpoint = last_checkpoint_;
  if (outcome.final_checkpoint.empty()) {
    Checkpoint ckpt = capture_checkpoint(model_, optimizer_.get(), outcome.steps,
                                         rng_, cfg_.phase);
    write_checkpoint("ckpt_final.dpck", ckpt);
    outcome.final_checkpoint = last_checkpoint_;
  }
  return outcome;
}

}  // namespace docparser
