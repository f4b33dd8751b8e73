#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "docparser/checkpoint.hpp"
#include "docparser/dataset.hpp"
#include "docparser/metrics.hpp"
#include "docparser/train.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;
using namespace docparser;

namespace {

bool log_enabled() {
  const char* v = std::getenv("DOCPARSER_LOG");
  return !(v && std::string(v) == "quiet");
}

void info(const std::string& msg) {
  if (log_enabled()) std::cerr << "[docparser] " << msg << "\n";
}

std::pair<std::int64_t, std::int64_t> parse_resolution(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) {
    throw CLI::ValidationError("--resolution", "expected HxW, e.g. 320x320");
  }
  return {std::stoll(s.substr(0, x)), std::stoll(s.substr(x + 1))};
}

int cmd_synth(std::int64_t count, const std::string& template_id,
              const std::string& resolution, std::uint64_t seed,
              const std::string& out, bool force) {
  auto [h, w] = parse_resolution(resolution);
  std::vector<DocumentSample> samples;
  samples.reserve(static_cast<size_t>(count));
  SynthOpts opts{template_id, h, w};
  for (std::int64_t i = 0; i < count; ++i) {
    samples.push_back(generate(seed + static_cast<std::uint64_t>(i), opts));
  }
  DatasetManifest manifest;
  manifest.seed = seed;
  manifest.count = count;
  manifest.template_id = template_id;
  manifest.height = h;
  manifest.width = w;
  DatasetOnDisk::write(out, samples, manifest, force);
  info("wrote " + std::to_string(count) + " samples to " + out);
  return 0;
}

std::shared_ptr<Teacher> make_teacher(const TrainConfig& cfg) {
  if (!cfg.teacher_features.empty()) {
    return std::make_shared<FileFeatureTeacher>(cfg.teacher_features);
  }
  return std::make_shared<RandomTeacher>(cfg.teacher_channels, cfg.teacher_seed);
}

int cmd_train(const std::string& phase, const std::string& config_path,
              const std::string& data_dir, const std::string& out_dir,
              const std::string& resume) {
  ExperimentConfig exp = load_experiment_config(config_path);
  exp.train.phase = phase;

  DatasetOnDisk ds = DatasetOnDisk::load(data_dir);
  if (phase == "read" && !ds.has_transcriptions()) {
    throw std::runtime_error("read phase needs a dataset with transcriptions");
  }
  if (phase == "finetune" && !ds.has_records()) {
    throw std::runtime_error("finetune phase needs a dataset with records");
  }
  auto data = ds.load_all();
  info("loaded " + std::to_string(data.size()) + " samples from " + data_dir);

  std::unique_ptr<DocParserModel> model;
  if (!resume.empty()) {
    Checkpoint ckpt = load_checkpoint(resume);
    model = std::make_unique<DocParserModel>(ModelConfig::from_json(ckpt.config_json),
                                             exp.train.seed);
    info("model rebuilt from checkpoint config: " + resume);
  } else {
    ModelConfig mc = build_model_config(exp);
    model = std::make_unique<DocParserModel>(mc, exp.train.seed);
  }

  std::shared_ptr<Teacher> teacher;
  if (phase == "kt") teacher = make_teacher(exp.train);

  Trainer trainer(*model, exp.train, std::move(data), out_dir, teacher);
  if (!resume.empty()) trainer.resume_from(resume);
  TrainOutcome outcome = trainer.run();

  ordered_json summary;
  summary["phase"] = phase;
  summary["steps"] = outcome.steps;
  summary["final_loss"] = outcome.final_loss;
  if (outcome.final_f1 >= 0) {
    summary["f1_micro"] = outcome.final_f1;
    summary["dar"] = outcome.final_dar;
  }
  summary["checkpoint"] = outcome.final_checkpoint;
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_infer(const std::string& checkpoint_path,
              const std::vector<std::string>& image_paths, const std::string& task,
              const std::string& out_path, bool pad) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  ModelConfig cfg = ModelConfig::from_json(ckpt.config_json);
  DocParserModel model(cfg, 0);
  restore_parameters(model, ckpt);

  const std::string extraction_task = model.codec().schema().task_name;
  if (task != extraction_task && task != "read") {
    throw std::runtime_error("unknown task '" + task + "'; available task tokens: <s_" +
                             extraction_task + ">, <s_read>");
  }

  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("cannot write output file '" + out_path + "'");
  for (const auto& path : image_paths) {
    Image img = read_ppm(path);
    if (img.height != cfg.train_height || img.width != cfg.train_width) {
      if (!pad) {
        throw std::runtime_error(
            "image '" + path + "' is " + std::to_string(img.height) + "x" +
            std::to_string(img.width) + " but the checkpoint expects " +
            std::to_string(cfg.train_height) + "x" + std::to_string(cfg.train_width) +
            " (rerun with --pad to fit and pad)");
      }
      img = fit_pad(img, cfg.train_height, cfg.train_width, 1.0);
    }
    ordered_json line;
    line["image"] = fs::path(path).filename().string();
    if (task == "read") {
      NoGradGuard ng;
      Tensor memory = model.encode_memory(image_to_tensor(img), false, nullptr);
      auto res = model.decoder().decode_greedy_cached(
          memory, model.codec().read_task_id(), model.codec().end_id());
      std::vector<std::int64_t> payload(res.ids.begin() + 1, res.ids.end());
      if (!payload.empty() && payload.back() == model.codec().end_id()) {
        payload.pop_back();
      }
      line["text"] = model.codec().detokenize(payload);
      line["truncated"] = res.truncated;
    } else {
      auto ex = model.extract(img);
      line["record"] = ordered_json::parse(record_to_json(ex.record));
      line["diagnostics"] = ex.diagnostics;
      line["truncated"] = ex.tokens.truncated;
    }
    out << line.dump() << "\n";
    info("processed " + path);
  }
  return 0;
}

std::map<std::string, FieldRecord> read_records_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open records file '" + path + "'");
  std::map<std::string, FieldRecord> by_image;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ordered_json j = ordered_json::parse(line);
    by_image[j.at("image").get<std::string>()] =
        record_from_json(j.at("record").dump());
  }
  return by_image;
}

int cmd_score(const std::string& pred_path, const std::string& truth_path,
              const std::string& out_path) {
  auto preds = read_records_file(pred_path);
  auto truths = read_records_file(truth_path);
  if (truths.empty()) throw std::runtime_error("truth file holds no records");

  std::vector<std::pair<FieldRecord, FieldRecord>> results;
  std::int64_t missing = 0;
  for (const auto& [image, truth] : truths) {
    auto it = preds.find(image);
    if (it == preds.end()) {
      ++missing;
      results.emplace_back(FieldRecord{}, truth);
    } else {
      results.emplace_back(it->second, truth);
    }
  }
  auto f1 = field_f1_corpus(results);
  const double dar_v = dar(results);

  ordered_json report;
  report["documents"] = results.size();
  report["missing_predictions"] = missing;
  report["precision"] = f1.precision;
  report["recall"] = f1.recall;
  report["f1_micro"] = f1.f1;
  report["f1_macro"] = f1.macro_f1;
  report["dar"] = dar_v;
  ordered_json per_field = ordered_json::object();
  for (const auto& [path, s] : f1.per_field) {
    per_field[path] = {{"matches", s.matches},
                       {"detected", s.detected},
                       {"truth", s.truth},
                       {"precision", s.precision},
                       {"recall", s.recall},
                       {"f1", s.f1}};
  }
  report["per_field"] = per_field;
  const std::string text = report.dump(2);
  if (out_path.empty()) {
    std::cout << text << "\n";
  } else {
    std::ofstream out(out_path);
    out << text << "\n";
    if (!out) throw std::runtime_error("cannot write report '" + out_path + "'");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"OCR-free document information extraction"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  std::int64_t count = 16;
  std::string template_id = "receipt";
  std::string resolution = "320x320";
  std::uint64_t seed = 0;
  std::string out_dir;
  bool force = false;
  synth->add_option("--count", count, "Number of documents");
  synth->add_option("--template", template_id, "Document template id");
  synth->add_option("--resolution", resolution, "Canvas HxW");
  synth->add_option("--seed", seed, "Base seed");
  synth->add_option("--out", out_dir, "Output dataset directory")->required();
  synth->add_flag("--force", force, "Write into a non-empty directory");

  auto* train = app.add_subcommand("train", "Run a training phase");
  std::string phase, config_path, data_dir, train_out, resume;
  train->add_option("--phase", phase, "kt | read | finetune")
      ->required()
      ->check(CLI::IsMember({"kt", "read", "finetune"}));
  train->add_option("--config", config_path, "key=value experiment config")->required();
  train->add_option("--data", data_dir, "Dataset directory")->required();
  train->add_option("--out", train_out, "Run/output directory")->required();
  train->add_option("--resume", resume, "Checkpoint to resume or warm-start from");

  auto* infer = app.add_subcommand("infer", "Extract fields from images");
  std::string ckpt_path, task = "receipt", infer_out;
  std::vector<std::string> images;
  bool pad = false;
  infer->add_option("--checkpoint", ckpt_path, "Model checkpoint")->required();
  infer->add_option("--image", images, "Input image(s), binary PPM")->required();
  infer->add_option("--task", task, "Task name (schema task or 'read')");
  infer->add_option("--out", infer_out, "Output records file")->required();
  infer->add_flag("--pad", pad, "Fit and pad off-resolution images");

  auto* score = app.add_subcommand("score", "Score predictions against truth");
  std::string pred_path, truth_path, report_path;
  score->add_option("--pred", pred_path, "Predicted records (jsonl)")->required();
  score->add_option("--truth", truth_path, "Ground-truth records (jsonl)")->required();
  score->add_option("--out", report_path, "Report file (stdout when omitted)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(count, template_id, resolution, seed, out_dir, force);
    if (*train) return cmd_train(phase, config_path, data_dir, train_out, resume);
    if (*infer) return cmd_infer(ckpt_path, images, task, infer_out, pad);
    if (*score) return cmd_score(pred_path, truth_path, report_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
