#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "docparser/optim.hpp"
#include "docparser/pretrain.hpp"
#include "docparser/train.hpp"
#include "testutil.hpp"

using namespace docparser;

namespace {

// 64x64-capable model for fast loops.
ModelConfig micro_model_config(std::int64_t kt_channels = 0) {
  ModelConfig cfg;
  cfg.encoder.channels = {4, 6, 8, 10, 12, 14};
  cfg.encoder.blocks_per_stage = {1, 1, 1, 1, 1, 1};
  cfg.encoder.window_sizes = {{1, 2}, {1, 2}, {2, 2}};
  cfg.encoder.num_heads = {1, 1, 2};
  cfg.encoder.stochastic_depth_p = 0.0;
  cfg.decoder.num_layers = 1;
  cfg.decoder.num_heads = 2;
  cfg.decoder.max_decode_len = 64;
  cfg.train_height = 64;
  cfg.train_width = 64;
  cfg.kt_teacher_channels = kt_channels;
  return cfg;
}

Image flat_image(std::int64_t h, std::int64_t w, double v) {
  return Image::filled(h, w, v);
}

}  // namespace

TEST_CASE("knowledge-transfer loss is exactly zero under feature equality") {
  Rng rng(1);
  const std::int64_t c = 5;
  Tensor fm = Tensor::randn({2, c, 4, 6}, rng, 1.0);
  // Identity pointwise adapter.
  std::vector<double> eye(static_cast<size_t>(c * c), 0.0);
  for (std::int64_t i = 0; i < c; ++i) eye[static_cast<size_t>(i * c + i)] = 1.0;
  Tensor aw = Tensor::from_data({c, c, 1, 1}, eye);
  Tensor ab = Tensor::zeros({c});
  Tensor loss = knowledge_transfer_loss(fm, fm, aw, ab, KtResize::Bilinear);
  CHECK(loss.item() == 0.0);
}

TEST_CASE("knowledge-transfer spatial reconciliation: pool and bilinear") {
  Rng rng(2);
  Tensor student = Tensor::randn({1, 3, 8, 8}, rng, 1.0);
  Tensor teacher = Tensor::randn({1, 4, 4, 4}, rng, 1.0);
  Tensor aw = Tensor::randn({4, 3, 1, 1}, rng, 0.1);
  Tensor ab = Tensor::zeros({4});
  CHECK_NOTHROW(knowledge_transfer_loss(student, teacher, aw, ab, KtResize::Pool));
  CHECK_NOTHROW(knowledge_transfer_loss(student, teacher, aw, ab, KtResize::Bilinear));
  // Upsampling cannot be pooled.
  Tensor teacher_big = Tensor::randn({1, 4, 16, 16}, rng, 1.0);
  CHECK_THROWS_WITH_AS(
      knowledge_transfer_loss(student, teacher_big, aw, ab, KtResize::Pool),
      doctest::Contains("average-pooled"), std::invalid_argument);
}

TEST_CASE("kt loss drops by at least half after 50 steps on a fixed batch") {
  DocParserModel model(micro_model_config(/*kt_channels=*/6), 11);
  RandomTeacher teacher(6, 99);
  Rng img_rng(3);
  Tensor batch = Tensor::rand_uniform({2, 3, 64, 64}, img_rng, 0.0, 1.0);
  std::vector<std::int64_t> idx{0, 1};
  Tensor teacher_fm = teacher.features(batch, idx);

  AdamW opt(model.parameters(), {.lr = 5e-3, .weight_decay = 0.0});
  double first = -1.0, last = -1.0;
  for (int step = 0; step < 50; ++step) {
    opt.zero_grad();
    Tensor student = model.encode_stage3(batch);
    Tensor loss = knowledge_transfer_loss(student, teacher_fm,
                                          model.kt_adapter_weight(),
                                          model.kt_adapter_bias());
    if (first < 0) first = loss.item();
    backward(loss);
    opt.step();
    last = loss.item();
  }
  CHECK(last < first);
  CHECK(last <= 0.5 * first);
}

TEST_CASE("kt loss leaves attention stages and decoder untouched") {
  DocParserModel model(micro_model_config(6), 21);
  RandomTeacher teacher(6, 7);
  Rng img_rng(4);
  Tensor batch = Tensor::rand_uniform({1, 3, 64, 64}, img_rng, 0.0, 1.0);
  Tensor student = model.encode_stage3(batch);
  std::vector<std::int64_t> idx{0};
  Tensor loss = knowledge_transfer_loss(student, teacher.features(batch, idx),
                                        model.kt_adapter_weight(),
                                        model.kt_adapter_bias());
  backward(loss);
  bool conv_has_grad = false;
  for (auto& p : model.parameters()) {
    const bool is_swin = p.name.find("encoder.stage4") == 0 ||
                         p.name.find("encoder.stage5") == 0 ||
                         p.name.find("encoder.stage6") == 0 ||
                         p.name.find("encoder.pos_embed") == 0;
    const bool is_decoder = p.name.find("decoder.") == 0;
    if (is_swin || is_decoder) {
      INFO(p.name);
      CHECK_FALSE(p.tensor.has_grad());
    }
    if (p.name.find("encoder.stage1") == 0 && p.tensor.has_grad()) {
      conv_has_grad = true;
    }
  }
  CHECK(conv_has_grad);
  CHECK(model.kt_adapter_weight().has_grad());
}

TEST_CASE("reading target begins with the reading task token and ends with End") {
  DocParserModel model(micro_model_config(), 31);
  const auto& codec = model.codec();
  auto seq = codec.serialize_reading("TOTAL 4500");
  REQUIRE(seq.ids.size() >= 3);
  CHECK(seq.ids.front() == codec.read_task_id());
  CHECK(seq.ids.back() == codec.end_id());
  CHECK(codec.read_task_id() != codec.task_id());
  for (size_t i = 1; i + 1 < seq.ids.size(); ++i) {
    CHECK_FALSE(codec.is_special(seq.ids[i]));
  }
}

TEST_CASE("masked_reading_loss validates transcriptions") {
  DocParserModel model(micro_model_config(), 41);
  std::vector<Image> images{flat_image(64, 64, 0.9)};
  std::vector<std::string> texts{""};
  CHECK_THROWS_WITH_AS(
      masked_reading_loss(model, images, texts, 0.0, 1, false, nullptr),
      doctest::Contains("empty transcription"), std::invalid_argument);
}

TEST_CASE("memorized micro model reads its documents at near-zero loss; "
          "masking raises the loss") {
  DocParserModel model(micro_model_config(), 51);
  // Four tiny documents with distinct texts, so the decoder must consult
  // the image to know which transcription to produce. The encoder stays
  // frozen (decoder-only optimizer) to keep its features informative.
  std::vector<Image> images;
  std::vector<std::string> texts;
  const char* lines[4] = {"TEA 500", "PIE 123", "SODA 77", "CAKE 9"};
  for (int i = 0; i < 4; ++i) {
    Image doc = flat_image(64, 64, 0.95);
    draw_text(doc, 4, 4 + 6 * i, lines[i], 1, 0.1);
    images.push_back(std::move(doc));
    texts.emplace_back(lines[i]);
  }
  std::vector<Parameter> decoder_params;
  model.decoder().collect_params("decoder", decoder_params);
  AdamW opt(decoder_params, {.lr = 2e-3, .weight_decay = 0.0});
  double loss_v = 1e9;
  for (int step = 0; step < 400 && loss_v > 0.02; ++step) {
    opt.zero_grad();
    Tensor loss = masked_reading_loss(model, images, texts, 0.0, 0, false, nullptr);
    backward(loss);
    opt.step();
    loss_v = loss.item();
  }
  CHECK(loss_v < 0.05);

  // Average masked loss across 20 mask draws vs the unmasked loss: hiding
  // blocks can only remove evidence.
  NoGradGuard ng;
  const double clean =
      masked_reading_loss(model, images, texts, 0.0, 0, false, nullptr).item();
  double masked_sum = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    masked_sum +=
        masked_reading_loss(model, images, texts, 0.25, s, false, nullptr).item();
  }
  CHECK(masked_sum / 20.0 >= clean);
}

TEST_CASE("random teacher is deterministic with declared geometry") {
  RandomTeacher a(6, 42), b(6, 42), c(6, 43);
  Rng rng(5);
  Tensor img = Tensor::rand_uniform({1, 3, 64, 64}, rng, 0.0, 1.0);
  std::vector<std::int64_t> idx{0};
  Tensor fa = a.features(img, idx);
  Tensor fb = b.features(img, idx);
  Tensor fc = c.features(img, idx);
  CHECK(fa.shape() == Shape{1, 6, 2, 8});  // (H/32) x (W/8)
  CHECK(testutil::bitwise_equal(fa, fb));
  CHECK(testutil::max_abs_diff(fa, fc) > 0.0);
}

TEST_CASE("file-backed teacher features round trip and substitute") {
  Rng rng(6);
  Tensor feats = Tensor::randn({3, 5, 4, 4}, rng, 1.0);
  const std::string path = "/tmp/docparser_teacher_test.dptf";
  write_teacher_features(path, feats);
  FileFeatureTeacher teacher(path);
  CHECK(teacher.out_channels() == 5);
  CHECK(teacher.count() == 3);
  Tensor imgs = Tensor::rand_uniform({2, 3, 64, 64}, rng, 0.0, 1.0);
  std::vector<std::int64_t> idx{2, 0};
  Tensor out = teacher.features(imgs, idx);
  CHECK(out.shape() == Shape{2, 5, 4, 4});
  // Row 0 of the batch is sample 2 of the file.
  for (std::int64_t i = 0; i < 5 * 16; ++i) {
    REQUIRE(out.values()[static_cast<size_t>(i)] ==
            feats.values()[static_cast<size_t>(2 * 5 * 16 + i)]);
  }
  std::vector<std::int64_t> bad{7, 0};
  CHECK_THROWS_AS(teacher.features(imgs, bad), std::out_of_range);
  std::filesystem::remove(path);
}
