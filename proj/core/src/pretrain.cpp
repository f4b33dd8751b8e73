#include "docparser/pretrain.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "docparser/ops.hpp"

namespace docparser {

RandomTeacher::RandomTeacher(std::int64_t out_channels, std::uint64_t seed)
    : out_channels_(out_channels) {
  if (out_channels < 1) {
    throw std::invalid_argument("teacher out_channels must be positive");
  }
  Rng rng(Rng::mix(seed, 0x7eac4e2u, 5));
  w1_ = Tensor::randn({16, 3, 3, 3}, rng, 0.25);
  b1_ = Tensor::zeros({16});
  w2_ = Tensor::randn({out_channels, 16, 3, 3}, rng, 0.08);
  b2_ = Tensor::zeros({out_channels});
}

Tensor RandomTeacher::features(const Tensor& images,
                               std::span<const std::int64_t>) const {
  NoGradGuard ng;
  // Recognition-style geometry: height is reduced much harder than width.
  Tensor x = conv2d(images, w1_, b1_,
                    {.stride_h = 8, .stride_w = 4, .pad_h = 1, .pad_w = 1});
  x = gelu(x);
  return conv2d(x, w2_, b2_, {.stride_h = 4, .stride_w = 2, .pad_h = 1, .pad_w = 1});
}

FileFeatureTeacher::FileFeatureTeacher(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open teacher feature file '" + path + "'");
  char magic[4] = {};
  in.read(magic, 4);
  if (std::memcmp(magic, "DPTF", 4) != 0) {
    throw std::runtime_error("'" + path + "' is not a teacher feature file");
  }
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  if (version != 1) {
    throw std::runtime_error("unsupported teacher feature version " +
                             std::to_string(version));
  }
  auto read_i64 = [&in]() {
    std::int64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
  };
  count_ = read_i64();
  channels_ = read_i64();
  height_ = read_i64();
  width_ = read_i64();
  if (count_ <= 0 || channels_ <= 0 || height_ <= 0 || width_ <= 0) {
    throw std::runtime_error("corrupt teacher feature header in '" + path + "'");
  }
  data_.resize(static_cast<size_t>(count_ * channels_ * height_ * width_));
  in.read(reinterpret_cast<char*>(data_.data()),
          static_cast<std::streamsize>(data_.size() * 8));
  if (!in) throw std::runtime_error("truncated teacher feature file '" + path + "'");
}

Tensor FileFeatureTeacher::features(const Tensor& images,
                                    std::span<const std::int64_t> indices) const {
  const std::int64_t n = images.dim(0);
  if (static_cast<std::int64_t>(indices.size()) != n) {
    throw std::invalid_argument("teacher features: need one sample index per image");
  }
  const std::int64_t stride = channels_ * height_ * width_;
  std::vector<double> out(static_cast<size_t>(n * stride));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t idx = indices[static_cast<size_t>(i)];
    if (idx < 0 || idx >= count_) {
      throw std::out_of_range("teacher feature index " + std::to_string(idx) +
                              " out of range [0," + std::to_string(count_) + ")");
    }
    std::memcpy(out.data() + i * stride, data_.data() + idx * stride,
                static_cast<size_t>(stride) * 8);
  }
  return Tensor::from_data({n, channels_, height_, width_}, std::move(out));
}

void write_teacher_features(const std::string& path, const Tensor& features) {
  if (features.ndim() != 4) {
    throw std::invalid_argument("teacher features must be (count, C, h, w)");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write teacher feature file '" + path + "'");
  out.write("DPTF", 4);
  const std::uint32_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), 4);
  for (auto d : features.shape()) {
    const std::int64_t v = d;
    out.write(reinterpret_cast<const char*>(&v), 8);
  }
  out.write(reinterpret_cast<const char*>(features.data()),
            static_cast<std::streamsize>(features.numel() * 8));
}

Tensor knowledge_transfer_loss(const Tensor& student_fm, const Tensor& teacher_fm,
                               const Tensor& adapter_w, const Tensor& adapter_b,
                               KtResize mode) {
  if (student_fm.ndim() != 4 || teacher_fm.ndim() != 4) {
    throw std::invalid_argument("knowledge_transfer_loss: expected NCHW maps");
  }
  if (student_fm.dim(0) != teacher_fm.dim(0)) {
    throw std::invalid_argument("knowledge_transfer_loss: batch size mismatch");
  }
  Tensor adapted = conv2d(student_fm, adapter_w, adapter_b, {});
  if (adapted.dim(1) != teacher_fm.dim(1)) {
    throw std::invalid_argument(
        "knowledge_transfer_loss: adapter maps to " + std::to_string(adapted.dim(1)) +
        " channels but teacher has " + std::to_string(teacher_fm.dim(1)));
  }
  const std::int64_t th = teacher_fm.dim(2), tw = teacher_fm.dim(3);
  if (adapted.dim(2) != th || adapted.dim(3) != tw) {
    if (mode == KtResize::Pool) {
      if (adapted.dim(2) % th != 0 || adapted.dim(3) % tw != 0) {
        throw std::invalid_argument(
            "knowledge_transfer_loss: student grid " + std::to_string(adapted.dim(2)) +
            "x" + std::to_string(adapted.dim(3)) +
            " cannot be average-pooled onto teacher grid " + std::to_string(th) + "x" +
            std::to_string(tw));
      }
      adapted = avg_pool2d(adapted, adapted.dim(2) / th, adapted.dim(3) / tw);
    } else {
      adapted = bilinear_resize(adapted, th, tw);
    }
  }
  Tensor diff = sub(adapted, teacher_fm);
  return mean_all(mul(diff, diff));
}

Tensor masked_reading_loss(const DocParserModel& model,
                           const std::vector<Image>& images,
                           const std::vector<std::string>& transcriptions,
                           double mask_ratio, std::uint64_t mask_seed_base,
                           bool training, Rng* rng) {
  if (images.empty() || images.size() != transcriptions.size()) {
    throw std::invalid_argument("masked_reading_loss: need matching images and text");
  }
  std::vector<Image> masked;
  masked.reserve(images.size());
  std::vector<std::vector<std::int64_t>> sequences;
  const auto& codec = model.codec();
  for (size_t i = 0; i < images.size(); ++i) {
    if (transcriptions[i].empty()) {
      throw std::invalid_argument("masked_reading_loss: empty transcription at index " +
                                  std::to_string(i));
    }
    if (mask_ratio > 0.0) {
      masked.push_back(
          mask_blocks(images[i], 32, mask_ratio, Rng::mix(mask_seed_base, i)).image);
    } else {
      masked.push_back(images[i]);
    }
    sequences.push_back(codec.serialize_reading(transcriptions[i]).ids);
  }
  Tensor batch = images_to_tensor(masked);
  Tensor memory = model.encode_memory(batch, training, rng);
  return model.decoder().teacher_forced_loss(sequences, memory, codec.end_id());
}

}  // namespace docparser
