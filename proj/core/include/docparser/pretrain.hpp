#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "docparser/model.hpp"
#include "docparser/synth.hpp"
#include "docparser/tensor.hpp"

namespace docparser {

/// Frozen feature extractor the convolutional stages learn to imitate.
/// Implementations must be deterministic and gradient-free.
class Teacher {
 public:
  virtual ~Teacher() = default;
  virtual std::int64_t out_channels() const = 0;
  /// Features for a batch of images (N,3,H,W); sample_indices identify the
  /// dataset rows for implementations backed by exported feature files.
  virtual Tensor features(const Tensor& images,
                          std::span<const std::int64_t> sample_indices) const = 0;
};

/// Desk-scale stand-in for a trained OCR recognition backbone: a small,
/// seeded, randomly initialised CNN (3 -> 16 -> C) whose output grid is
/// H/32 x W/8, the same geometry as the convolutional stages it teaches.
/// Frozen and deterministic.
class RandomTeacher : public Teacher {
 public:
  RandomTeacher(std::int64_t out_channels, std::uint64_t seed);
  std::int64_t out_channels() const override { return out_channels_; }
  Tensor features(const Tensor& images,
                  std::span<const std::int64_t> sample_indices) const override;

 private:
  std::int64_t out_channels_;
  Tensor w1_, b1_, w2_, b2_;
};

/// Teacher backed by a feature file exported from a real backbone:
/// magic "DPTF", u32 version, i64 count/channels/height/width, then count
/// f64 arrays of channels*height*width. features() stacks rows by index.
class FileFeatureTeacher : public Teacher {
 public:
  explicit FileFeatureTeacher(const std::string& path);
  std::int64_t out_channels() const override { return channels_; }
  std::int64_t count() const { return count_; }
  Tensor features(const Tensor& images,
                  std::span<const std::int64_t> sample_indices) const override;

 private:
  std::int64_t count_ = 0, channels_ = 0, height_ = 0, width_ = 0;
  std::vector<double> data_;
};

/// Writer for the feature-file format above.
void write_teacher_features(const std::string& path, const Tensor& features);

enum class KtResize { Pool, Bilinear };

/// L2 imitation loss: the pointwise adapter maps the student stage-3 map to
/// the teacher's channel count, the spatial grid is reconciled onto the
/// teacher grid, and the mean squared error is returned. Gradients reach
/// only the convolutional stages and the adapter.
Tensor knowledge_transfer_loss(const Tensor& student_fm, const Tensor& teacher_fm,
                               const Tensor& adapter_w, const Tensor& adapter_b,
                               KtResize mode = KtResize::Bilinear);

/// Masked document reading: images are masked in 32x32 blocks, targets are
/// the tokenized transcriptions wrapped in the reading task token, and the
/// teacher-forced cross entropy is returned.
Tensor masked_reading_loss(const DocParserModel& model,
                           const std::vector<Image>& images,
                           const std::vector<std::string>& transcriptions,
                           double mask_ratio, std::uint64_t mask_seed_base,
                           bool training, Rng* rng);

}  // namespace docparser
