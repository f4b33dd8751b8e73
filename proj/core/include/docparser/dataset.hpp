#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "docparser/synth.hpp"

namespace docparser {

struct DatasetManifest {
  std::string generator = "docparser-synth-1";
  std::uint64_t seed = 0;
  std::int64_t count = 0;
  std::string template_id = "receipt";
  std::int64_t height = 0;
  std::int64_t width = 0;
};

/// Directory layout: images/<name>.ppm, records.jsonl (one
/// {"image":..., "record":{...}} object per line), transcriptions.jsonl
/// (one {"image":..., "text":...} per line) and manifest.json. Loading
/// validates up front that every referenced image exists.
class DatasetOnDisk {
 public:
  static void write(const std::string& dir, const std::vector<DocumentSample>& samples,
                    const DatasetManifest& manifest, bool force);
  static DatasetOnDisk load(const std::string& dir);

  std::size_t size() const { return names_.size(); }
  bool has_records() const { return !records_.empty(); }
  bool has_transcriptions() const { return !transcriptions_.empty(); }
  const DatasetManifest& manifest() const { return manifest_; }
  const std::vector<std::string>& image_names() const { return names_; }

  /// Loads the image from disk and attaches ground truth where present.
  DocumentSample sample(std::size_t i) const;
  /// All samples, eagerly loaded.
  std::vector<DocumentSample> load_all() const;

 private:
  std::string dir_;
  DatasetManifest manifest_;
  std::vector<std::string> names_;
  std::vector<FieldRecord> records_;
  std::vector<std::string> transcriptions_;
};

}  // namespace docparser
