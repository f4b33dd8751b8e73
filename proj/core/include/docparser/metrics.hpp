#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "docparser/codec.hpp"

namespace docparser {

/// Leaf fields of a record as (dotted path, value) pairs; list nesting adds
/// no index, so repeated fields form a multiset per path.
std::vector<std::pair<std::string, std::string>> flatten_fields(const FieldRecord& rec);

struct FieldScore {
  std::int64_t matches = 0;
  std::int64_t detected = 0;
  std::int64_t truth = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct F1Result {
  double precision = 0.0;  // pooled over all fields (micro)
  double recall = 0.0;
  double f1 = 0.0;
  double macro_f1 = 0.0;  // mean of per-field F1 scores
  std::map<std::string, FieldScore> per_field;
  std::int64_t matches = 0;
  std::int64_t detected = 0;
  std::int64_t truth = 0;
};

/// Exact-match field scoring: predictions and truth are flattened to
/// (path, value) multisets; matches are the per-path multiset intersection.
/// A value counts only on exact string equality. Zero detections give
/// precision 0 (and F1 0) unless the truth is empty too, in which case all
/// scores are 1.
F1Result field_f1(const FieldRecord& pred, const FieldRecord& truth);

/// Pooled scoring over a corpus of (prediction, truth) pairs.
F1Result field_f1_corpus(
    const std::vector<std::pair<FieldRecord, FieldRecord>>& results);

/// Document Accuracy Rate: fraction of documents whose extraction has zero
/// false positives and zero false negatives. Throws on an empty list.
double dar(const std::vector<std::pair<FieldRecord, FieldRecord>>& results);

}  // namespace docparser
