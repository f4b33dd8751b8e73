#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>

#include "docparser/metrics.hpp"
#include "docparser/rng.hpp"

using namespace docparser;

namespace {

FieldRecord make_flat(std::vector<std::pair<std::string, std::string>> kv) {
  FieldRecord rec;
  for (auto& [k, v] : kv) rec.set(k, FieldValue::text(v));
  return rec;
}

// Independent brute-force oracle: counts per-path multiset intersections by
// repeated erase, no sorting shared with the implementation.
struct OracleCounts {
  std::int64_t matches = 0, detected = 0, truth = 0;
};

OracleCounts oracle_counts(const FieldRecord& pred, const FieldRecord& truth) {
  auto p = flatten_fields(pred);
  auto t = flatten_fields(truth);
  OracleCounts c;
  c.detected = static_cast<std::int64_t>(p.size());
  c.truth = static_cast<std::int64_t>(t.size());
  std::vector<bool> used(t.size(), false);
  for (const auto& pe : p) {
    for (size_t i = 0; i < t.size(); ++i) {
      if (!used[i] && t[i] == pe) {
        used[i] = true;
        ++c.matches;
        break;
      }
    }
  }
  return c;
}

FieldRecord random_nested_record(Rng& rng) {
  static const std::vector<std::string> names{"a", "b", "c", "d"};
  static const std::vector<std::string> values{"x", "y", "z", "10", "20"};
  FieldRecord rec;
  for (const auto& n : names) {
    const double r = rng.uniform();
    if (r < 0.25) continue;
    if (r < 0.6) {
      rec.set(n, FieldValue::text(values[rng.below(values.size())]));
    } else if (r < 0.8) {
      FieldRecord g;
      g.set("u", FieldValue::text(values[rng.below(values.size())]));
      if (rng.bernoulli(0.5)) g.set("v", FieldValue::text(values[rng.below(values.size())]));
      rec.set(n, FieldValue::group(g));
    } else {
      std::vector<FieldValue> items;
      for (std::uint64_t i = 0, k = rng.below(4); i < k; ++i) {
        FieldRecord g;
        g.set("u", FieldValue::text(values[rng.below(values.size())]));
        items.push_back(FieldValue::group(g));
      }
      rec.set(n, FieldValue::list(std::move(items)));
    }
  }
  return rec;
}

}  // namespace

TEST_CASE("perfect prediction scores 1 everywhere") {
  FieldRecord rec = make_flat({{"company", "ACME"}, {"date", "2021-01-01"},
                               {"total", "99"}});
  auto res = field_f1(rec, rec);
  CHECK(res.precision == 1.0);
  CHECK(res.recall == 1.0);
  CHECK(res.f1 == 1.0);
  CHECK(res.macro_f1 == 1.0);
  CHECK(res.per_field.size() == 3);
}

TEST_CASE("forced example: 2 matches, 3 detected, 4 truth gives F1 = 4/7") {
  FieldRecord truth = make_flat(
      {{"a", "1"}, {"b", "2"}, {"c", "3"}, {"d", "4"}});
  FieldRecord pred = make_flat({{"a", "1"}, {"b", "2"}, {"c", "wrong"}});
  auto res = field_f1(pred, truth);
  CHECK(res.matches == 2);
  CHECK(res.detected == 3);
  CHECK(res.truth == 4);
  CHECK(res.precision == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(res.recall == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(res.f1 == doctest::Approx(4.0 / 7.0).epsilon(1e-15));
}

TEST_CASE("zero-denominator conventions") {
  FieldRecord empty;
  FieldRecord some = make_flat({{"a", "1"}});
  auto both_empty = field_f1(empty, empty);
  CHECK(both_empty.precision == 1.0);
  CHECK(both_empty.recall == 1.0);
  CHECK(both_empty.f1 == 1.0);

  auto nothing_found = field_f1(empty, some);
  CHECK(nothing_found.precision == 0.0);
  CHECK(nothing_found.f1 == 0.0);

  auto hallucinated = field_f1(some, empty);
  CHECK(hallucinated.precision == 0.0);
  CHECK(hallucinated.recall == 0.0);
  CHECK(hallucinated.f1 == 0.0);
}

TEST_CASE("whitespace and single-character differences fail the match") {
  FieldRecord truth = make_flat({{"a", "ACME corp"}});
  CHECK(field_f1(make_flat({{"a", "ACME corp"}}), truth).f1 == 1.0);
  CHECK(field_f1(make_flat({{"a", "ACME  corp"}}), truth).f1 == 0.0);
  CHECK(field_f1(make_flat({{"a", "ACME corP"}}), truth).f1 == 0.0);
}

TEST_CASE("repeated fields match as multisets, order-independent") {
  FieldRecord truth;
  truth.set("items", FieldValue::list({FieldValue::text("A"), FieldValue::text("B"),
                                       FieldValue::text("A")}));
  FieldRecord pred;
  pred.set("items", FieldValue::list({FieldValue::text("B"), FieldValue::text("A"),
                                      FieldValue::text("A")}));
  auto res = field_f1(pred, truth);
  CHECK(res.f1 == 1.0);

  FieldRecord pred2;
  pred2.set("items", FieldValue::list({FieldValue::text("A"), FieldValue::text("A"),
                                       FieldValue::text("A")}));
  auto res2 = field_f1(pred2, truth);
  CHECK(res2.matches == 2);
}

TEST_CASE("nested paths are dotted and list nesting adds no index") {
  FieldRecord rec;
  FieldRecord item;
  item.set("name", FieldValue::text("TEA"));
  rec.set("menu", FieldValue::list({FieldValue::group(item)}));
  auto flat = flatten_fields(rec);
  REQUIRE(flat.size() == 1);
  CHECK(flat[0].first == "menu.name");
  CHECK(flat[0].second == "TEA");
}

TEST_CASE("field_f1 equals the brute-force oracle on 500 random pairs") {
  Rng rng(31337);
  for (int i = 0; i < 500; ++i) {
    FieldRecord pred = random_nested_record(rng);
    FieldRecord truth = random_nested_record(rng);
    auto res = field_f1(pred, truth);
    auto ora = oracle_counts(pred, truth);
    REQUIRE(res.matches == ora.matches);
    REQUIRE(res.detected == ora.detected);
    REQUIRE(res.truth == ora.truth);
    double precision = ora.detected ? double(ora.matches) / ora.detected
                                    : (ora.truth == 0 ? 1.0 : 0.0);
    double recall = ora.truth ? double(ora.matches) / ora.truth
                              : (ora.detected == 0 ? 1.0 : 0.0);
    double f1 = (precision + recall) > 0 ? 2 * precision * recall / (precision + recall)
                                         : 0.0;
    if (ora.detected == 0 && ora.truth == 0) f1 = 1.0;
    REQUIRE(res.f1 == doctest::Approx(f1).epsilon(1e-12));
  }
}

TEST_CASE("dar counts only fully clean documents") {
  FieldRecord truth = make_flat({{"a", "1"}, {"b", "2"}});
  std::vector<std::pair<FieldRecord, FieldRecord>> results;
  for (int i = 0; i < 3; ++i) results.emplace_back(truth, truth);
  // One document with a spurious extra field: one false positive.
  FieldRecord extra = truth;
  extra.set("c", FieldValue::text("spurious"));
  results.emplace_back(extra, truth);
  CHECK(dar(results) == doctest::Approx(0.75).epsilon(1e-15));

  std::vector<std::pair<FieldRecord, FieldRecord>> perfect(4, {truth, truth});
  CHECK(dar(perfect) == 1.0);

  CHECK_THROWS_AS(dar({}), std::invalid_argument);
}

TEST_CASE("dar equals per-document oracle on random sets") {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::pair<FieldRecord, FieldRecord>> results;
    const auto n = 1 + rng.below(6);
    for (std::uint64_t i = 0; i < n; ++i) {
      results.emplace_back(random_nested_record(rng), random_nested_record(rng));
    }
    int clean = 0;
    for (auto& [p, t] : results) {
      auto ora = oracle_counts(p, t);
      const bool no_fp = ora.matches == ora.detected;
      const bool no_fn = ora.matches == ora.truth;
      if (no_fp && no_fn) ++clean;
    }
    CHECK(dar(results) == doctest::Approx(double(clean) / double(n)).epsilon(1e-12));
  }
}

TEST_CASE("dar never exceeds the per-document perfect indicator mean") {
  // DAR <= mean of 1{doc f1 == 1}; equality holds by definition here, the
  // property guards against counting partially-correct documents.
  Rng rng(5);
  std::vector<std::pair<FieldRecord, FieldRecord>> results;
  for (int i = 0; i < 20; ++i) {
    results.emplace_back(random_nested_record(rng), random_nested_record(rng));
  }
  double indicator = 0.0;
  for (auto& [p, t] : results) {
    if (field_f1(p, t).f1 == 1.0 &&
        flatten_fields(p).size() == flatten_fields(t).size()) {
      indicator += 1.0;
    }
  }
  indicator /= 20.0;
  CHECK(dar(results) <= indicator + 1e-12);
}
