#include "docparser/metrics.hpp"

#include <algorithm>
#include <stdexcept>

namespace docparser {

namespace {

void flatten_into(const FieldRecord& rec, const std::string& prefix,
                  std::vector<std::pair<std::string, std::string>>& out) {
  for (const auto& [name, value] : rec.entries) {
    const std::string path = prefix.empty() ? name : prefix + "." + name;
    switch (value.kind()) {
      case FieldValue::Kind::Text:
        out.emplace_back(path, value.as_text());
        break;
      case FieldValue::Kind::Group:
        flatten_into(value.as_group(), path, out);
        break;
      case FieldValue::Kind::List:
        for (const auto& item : value.as_list()) {
          if (item.kind() == FieldValue::Kind::Text) {
            out.emplace_back(path, item.as_text());
          } else if (item.kind() == FieldValue::Kind::Group) {
            flatten_into(item.as_group(), path, out);
          }
        }
        break;
    }
  }
}

void score(FieldScore& s) {
  if (s.detected == 0 && s.truth == 0) {
    s.precision = s.recall = s.f1 = 1.0;
    return;
  }
  s.precision = s.detected > 0 ? double(s.matches) / double(s.detected) : 0.0;
  s.recall = s.truth > 0 ? double(s.matches) / double(s.truth) : 0.0;
  // Algebraically 2PR/(P+R), computed with a single rounding so forced
  // rationals like 4/7 come out exact.
  s.f1 = 2.0 * double(s.matches) / double(s.detected + s.truth);
}

void accumulate(const FieldRecord& pred, const FieldRecord& truth,
                std::map<std::string, FieldScore>& per_field) {
  // Per path: sorted value multisets; matches = multiset intersection size.
  std::map<std::string, std::vector<std::string>> pred_by_path, truth_by_path;
  std::vector<std::pair<std::string, std::string>> flat;
  flatten_into(pred, "", flat);
  for (auto& [p, v] : flat) pred_by_path[p].push_back(v);
  flat.clear();
  flatten_into(truth, "", flat);
  for (auto& [p, v] : flat) truth_by_path[p].push_back(v);

  for (auto& [path, values] : pred_by_path) {
    per_field[path].detected += static_cast<std::int64_t>(values.size());
  }
  for (auto& [path, values] : truth_by_path) {
    per_field[path].truth += static_cast<std::int64_t>(values.size());
  }
  for (auto& [path, pv] : pred_by_path) {
    auto it = truth_by_path.find(path);
    if (it == truth_by_path.end()) continue;
    auto tv = it->second;
    std::sort(pv.begin(), pv.end());
    std::sort(tv.begin(), tv.end());
    std::vector<std::string> common;
    std::set_intersection(pv.begin(), pv.end(), tv.begin(), tv.end(),
                          std::back_inserter(common));
    per_field[path].matches += static_cast<std::int64_t>(common.size());
  }
}

F1Result finalise(std::map<std::string, FieldScore> per_field) {
  F1Result res;
  for (auto& [path, s] : per_field) {
    score(s);
    res.matches += s.matches;
    res.detected += s.detected;
    res.truth += s.truth;
  }
  res.per_field = std::move(per_field);
  FieldScore pooled{res.matches, res.detected, res.truth, 0, 0, 0};
  score(pooled);
  res.precision = pooled.precision;
  res.recall = pooled.recall;
  res.f1 = pooled.f1;
  if (res.per_field.empty()) {
    res.macro_f1 = 1.0;  // both records empty
  } else {
    double acc = 0.0;
    for (const auto& [path, s] : res.per_field) acc += s.f1;
    res.macro_f1 = acc / static_cast<double>(res.per_field.size());
  }
  return res;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> flatten_fields(
    const FieldRecord& rec) {
  std::vector<std::pair<std::string, std::string>> out;
  flatten_into(rec, "", out);
  return out;
}

F1Result field_f1(const FieldRecord& pred, const FieldRecord& truth) {
  std::map<std::string, FieldScore> per_field;
  accumulate(pred, truth, per_field);
  return finalise(std::move(per_field));
}

F1Result field_f1_corpus(
    const std::vector<std::pair<FieldRecord, FieldRecord>>& results) {
  std::map<std::string, FieldScore> per_field;
  for (const auto& [pred, truth] : results) accumulate(pred, truth, per_field);
  return finalise(std::move(per_field));
}

double dar(const std::vector<std::pair<FieldRecord, FieldRecord>>& results) {
  if (results.empty()) {
    throw std::invalid_argument("dar: empty result list");
  }
  std::int64_t ok = 0;
  for (const auto& [pred, truth] : results) {
    auto p = flatten_fields(pred);
    auto t = flatten_fields(truth);
    std::sort(p.begin(), p.end());
    std::sort(t.begin(), t.end());
    if (p == t) ++ok;  // zero false positives and zero false negatives
  }
  return static_cast<double>(ok) / static_cast<double>(results.size());
}

}  // namespace docparser
