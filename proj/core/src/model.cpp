#include "docparser/model.hpp"

#include <stdexcept>

#include <json.hpp>

#include "docparser/ops.hpp"

namespace docparser {

using ordered_json = nlohmann::ordered_json;

void ModelConfig::finalize() {
  if (vocab_json.empty()) vocab_json = Vocabulary::builtin_tiny_bpe().to_json();
  if (schema_json.empty()) schema_json = TaskSchema::builtin_receipt().to_json();
  FieldCodec codec(Vocabulary::from_json(vocab_json), TaskSchema::from_json(schema_json));
  decoder.vocab_size = codec.vocab_size();
  if (decoder.model_dim <= 0) decoder.model_dim = encoder.channels.back();
  decoder.memory_dim = encoder.channels.back();
  if (decoder.ffn_dim <= 0) decoder.ffn_dim = 4 * decoder.model_dim;
  if (train_height % 32 != 0 || train_width % 32 != 0) {
    throw std::invalid_argument("model config: training resolution must be divisible by 32");
  }
  encoder.pos_rows = train_height / 32;
  encoder.pos_cols = train_width / 8;
  encoder.validate();
  decoder.validate();
  auto errs = encoder.resolution_errors(train_height, train_width);
  if (!errs.empty()) {
    std::string msg = "model config: training resolution invalid:";
    for (const auto& e : errs) msg += "\n  - " + e;
    throw std::invalid_argument(msg);
  }
}

std::string ModelConfig::to_json() const {
  ordered_json j;
  j["encoder"]["channels"] = encoder.channels;
  j["encoder"]["blocks_per_stage"] = encoder.blocks_per_stage;
  j["encoder"]["conv_kernel"] = encoder.conv_kernel;
  ordered_json wins = ordered_json::array();
  for (auto [h, w] : encoder.window_sizes) wins.push_back({h, w});
  j["encoder"]["window_sizes"] = wins;
  j["encoder"]["num_heads"] = encoder.num_heads;
  j["encoder"]["stochastic_depth_p"] = encoder.stochastic_depth_p;
  j["encoder"]["use_shifted_windows"] = encoder.use_shifted_windows;
  j["encoder"]["pos_rows"] = encoder.pos_rows;
  j["encoder"]["pos_cols"] = encoder.pos_cols;
  j["decoder"]["num_layers"] = decoder.num_layers;
  j["decoder"]["model_dim"] = decoder.model_dim;
  j["decoder"]["ffn_dim"] = decoder.ffn_dim;
  j["decoder"]["num_heads"] = decoder.num_heads;
  j["decoder"]["max_decode_len"] = decoder.max_decode_len;
  j["decoder"]["vocab_size"] = decoder.vocab_size;
  j["decoder"]["memory_dim"] = decoder.memory_dim;
  j["train_height"] = train_height;
  j["train_width"] = train_width;
  j["kt_teacher_channels"] = kt_teacher_channels;
  j["vocab"] = ordered_json::parse(vocab_json);
  j["schema"] = ordered_json::parse(schema_json);
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& json) {
  ordered_json j = ordered_json::parse(json);
  ModelConfig cfg;
  const auto& e = j.at("encoder");
  cfg.encoder.channels = e.at("channels").get<std::vector<std::int64_t>>();
  cfg.encoder.blocks_per_stage =
      e.at("blocks_per_stage").get<std::vector<std::int64_t>>();
  cfg.encoder.conv_kernel = e.at("conv_kernel").get<std::int64_t>();
  cfg.encoder.window_sizes.clear();
  for (const auto& w : e.at("window_sizes")) {
    cfg.encoder.window_sizes.emplace_back(w.at(0).get<std::int64_t>(),
                                          w.at(1).get<std::int64_t>());
  }
  cfg.encoder.num_heads = e.at("num_heads").get<std::vector<std::int64_t>>();
  cfg.encoder.stochastic_depth_p = e.at("stochastic_depth_p").get<double>();
  cfg.encoder.use_shifted_windows = e.at("use_shifted_windows").get<bool>();
  cfg.encoder.pos_rows = e.at("pos_rows").get<std::int64_t>();
  cfg.encoder.pos_cols = e.at("pos_cols").get<std::int64_t>();
  const auto& d = j.at("decoder");
  cfg.decoder.num_layers = d.at("num_layers").get<std::int64_t>();
  cfg.decoder.model_dim = d.at("model_dim").get<std::int64_t>();
  cfg.decoder.ffn_dim = d.at("ffn_dim").get<std::int64_t>();
  cfg.decoder.num_heads = d.at("num_heads").get<std::int64_t>();
  cfg.decoder.max_decode_len = d.at("max_decode_len").get<std::int64_t>();
  cfg.decoder.vocab_size = d.at("vocab_size").get<std::int64_t>();
  cfg.decoder.memory_dim = d.at("memory_dim").get<std::int64_t>();
  cfg.train_height = j.at("train_height").get<std::int64_t>();
  cfg.train_width = j.at("train_width").get<std::int64_t>();
  cfg.kt_teacher_channels = j.at("kt_teacher_channels").get<std::int64_t>();
  cfg.vocab_json = j.at("vocab").dump();
  cfg.schema_json = j.at("schema").dump();
  return cfg;
}

DocParserModel::DocParserModel(ModelConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)) {
  cfg_.finalize();
  codec_ = std::make_unique<FieldCodec>(Vocabulary::from_json(cfg_.vocab_json),
                                        TaskSchema::from_json(cfg_.schema_json));
  if (codec_->vocab_size() != cfg_.decoder.vocab_size) {
    throw std::logic_error("codec vocabulary size diverged from config");
  }
  Rng rng(Rng::mix(seed, 0xd0c9a55eU, 1));
  encoder_ = VisionEncoder(cfg_.encoder, rng);
  decoder_ = SeqDecoder(cfg_.decoder, rng);
  if (cfg_.kt_teacher_channels > 0) {
    kt_adapter_w_ = Tensor::he_normal(
        {cfg_.kt_teacher_channels, cfg_.encoder.channels[3], 1, 1}, rng,
        cfg_.encoder.channels[3]);
    kt_adapter_b_ = Tensor::zeros({cfg_.kt_teacher_channels}, true);
  }
}

Tensor DocParserModel::encode_memory(const Tensor& images, bool training,
                                     Rng* rng) const {
  FeatureMap fm = encoder_.encode(images, training, rng);
  const std::int64_t n = fm.tensor.dim(0), c = fm.tensor.dim(1);
  const std::int64_t l = fm.tensor.dim(2) * fm.tensor.dim(3);
  Tensor flat = reshape(fm.tensor, {n, c, l});
  return permute(flat, {0, 2, 1});
}

Tensor DocParserModel::encode_stage3(const Tensor& images, bool training,
                                     Rng* rng) const {
  FeatureMap fm = encoder_.patch_embed(images);
  fm = encoder_.convnext_stage(fm, 1, training, rng);
  fm = encoder_.convnext_stage(fm, 2, training, rng);
  fm = encoder_.convnext_stage(fm, 3, training, rng);
  return fm.tensor;
}

std::vector<Parameter> DocParserModel::parameters() {
  std::vector<Parameter> params;
  encoder_.collect_params("encoder", params);
  decoder_.collect_params("decoder", params);
  if (kt_adapter_w_.defined()) {
    params.push_back({"kt_adapter.weight", kt_adapter_w_});
    params.push_back({"kt_adapter.bias", kt_adapter_b_});
  }
  return params;
}

DocParserModel::Extraction DocParserModel::extract(const Tensor& image_batch1) const {
  NoGradGuard ng;
  Tensor memory = encode_memory(image_batch1, false, nullptr);
  auto greedy =
      decoder_.decode_greedy_cached(memory, codec_->task_id(), codec_->end_id());
  Extraction ex;
  ex.tokens.ids = greedy.ids;
  ex.tokens.decoded = true;
  ex.tokens.truncated = greedy.truncated;
  auto parsed = codec_->parse(greedy.ids);
  ex.record = std::move(parsed.record);
  ex.diagnostics = std::move(parsed.diagnostics);
  if (greedy.truncated) ex.diagnostics.push_back("decode truncated at max length");
  return ex;
}

DocParserModel::Extraction DocParserModel::extract(const Image& img) const {
  return extract(image_to_tensor(img));
}

}  // namespace docparser
