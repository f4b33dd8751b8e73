#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace docparser {

// ---------------------------------------------------------------------------
// FieldRecord: ordered nested mapping of field names to strings, groups and
// repeated groups/strings. The ground-truth and prediction type.
// ---------------------------------------------------------------------------

struct FieldRecord;

class FieldValue {
 public:
  enum class Kind { Text, Group, List };

  FieldValue() : kind_(Kind::Text) {}
  static FieldValue text(std::string s);
  static FieldValue group(FieldRecord rec);
  static FieldValue list(std::vector<FieldValue> items);

  FieldValue(const FieldValue& other);
  FieldValue& operator=(const FieldValue& other);
  FieldValue(FieldValue&&) noexcept = default;
  FieldValue& operator=(FieldValue&&) noexcept = default;

  Kind kind() const { return kind_; }
  const std::string& as_text() const;
  const FieldRecord& as_group() const;
  FieldRecord& as_group();
  const std::vector<FieldValue>& as_list() const;
  std::vector<FieldValue>& as_list();

  bool operator==(const FieldValue& other) const;

 private:
  Kind kind_;
  std::string text_;
  std::unique_ptr<FieldRecord> group_;
  std::vector<FieldValue> list_;
};

struct FieldRecord {
  std::vector<std::pair<std::string, FieldValue>> entries;

  bool operator==(const FieldRecord& other) const;
  bool empty() const { return entries.empty(); }
  void set(std::string name, FieldValue value);
  const FieldValue* find(const std::string& name) const;
};

/// UTF-8 JSON form of a record (strings, objects, arrays), key order
/// preserved.
std::string record_to_json(const FieldRecord& rec);
FieldRecord record_from_json(const std::string& json);

/// Uppercase word inventory shared by the synthetic document generator and
/// the built-in vocabulary.
const std::vector<std::string>& builtin_receipt_words();

// ---------------------------------------------------------------------------
// Task schema: ordered field definitions with nesting/repetition flags.
// ---------------------------------------------------------------------------

struct FieldDef {
  enum class Kind { Value, Group, ValueList, GroupList };
  std::string name;
  Kind kind = Kind::Value;
  std::vector<FieldDef> children;  // for Group / GroupList
};

struct TaskSchema {
  std::string task_name;  // e.g. "receipt"; task token is "<s_receipt>"
  std::vector<FieldDef> fields;

  std::string task_token() const { return "<s_" + task_name + ">"; }
  /// Unique field names in depth-first declaration order.
  std::vector<std::string> field_names() const;
  /// Throws std::invalid_argument if the record does not conform.
  void validate_record(const FieldRecord& rec) const;

  static TaskSchema from_json(const std::string& json);
  static TaskSchema from_file(const std::string& path);
  std::string to_json() const;
  /// Built-in receipt schema used by the synthetic generator and tests.
  static TaskSchema builtin_receipt();
};

// ---------------------------------------------------------------------------
// Vocabulary: byte-level BPE or byte ("character") tokenizer over base text,
// ids in [0, base_size).
// ---------------------------------------------------------------------------

class Vocabulary {
 public:
  enum class Kind { ByteBpe, Char };

  static Vocabulary char_level();
  static Vocabulary byte_bpe(std::map<std::string, std::int64_t> vocab,
                             std::vector<std::pair<std::string, std::string>> merges);
  /// Small built-in BPE vocabulary with merges for digits and the words the
  /// synthetic generator emits; ships for tests and self-contained runs.
  static Vocabulary builtin_tiny_bpe();
  static Vocabulary from_json(const std::string& json);
  static Vocabulary from_file(const std::string& path);
  std::string to_json() const;

  Kind kind() const { return kind_; }
  std::int64_t base_size() const;
  std::vector<std::int64_t> encode(const std::string& text) const;
  std::string decode(const std::vector<std::int64_t>& ids) const;
  /// Mapped (display) form of a base token.
  std::string token_string(std::int64_t id) const;

 private:
  Kind kind_ = Kind::Char;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, std::int64_t> token_to_id_;
  std::map<std::pair<std::string, std::string>, std::int64_t> merge_rank_;
};

// ---------------------------------------------------------------------------
// FieldCodec: FieldRecord <-> TokenSequence with special control tokens.
// ---------------------------------------------------------------------------

struct TokenSequence {
  std::vector<std::int64_t> ids;
  bool decoded = false;    // produced by a model rather than serialisation
  bool truncated = false;  // hit the decoder length limit before END
};

/// Token layout: specials first (END, the reading task token, the schema's
/// task token, per-field open/close tags, <item>/</item>), then the base
/// vocabulary shifted up. Ids are a pure function of (vocabulary, schema).
class FieldCodec {
 public:
  FieldCodec(Vocabulary vocab, TaskSchema schema);

  std::int64_t vocab_size() const { return total_size_; }
  std::int64_t end_id() const { return 0; }
  std::int64_t read_task_id() const { return 1; }
  std::int64_t task_id() const { return 2; }
  bool is_special(std::int64_t id) const { return id >= 0 && id < special_count_; }
  /// Id of a special token by surface string; throws if unknown.
  std::int64_t special_id(const std::string& token) const;
  /// Surface string of any id (specials and base tokens).
  std::string token_string(std::int64_t id) const;

  std::vector<std::int64_t> tokenize_text(const std::string& text) const;
  /// Inverse of tokenize_text for base ids; special ids render as their
  /// surface form.
  std::string detokenize(const std::vector<std::int64_t>& ids) const;

  /// Depth-first Fig-of-record emission: <task> fields... <End>. Record must
  /// conform to the schema.
  TokenSequence serialize(const FieldRecord& record) const;
  /// <read-task> transcription-tokens <End>.
  TokenSequence serialize_reading(const std::string& transcription) const;

  struct ParseResult {
    FieldRecord record;
    std::vector<std::string> diagnostics;
  };
  /// Recursive-descent parse with recovery; never throws on content, only
  /// on ids outside the vocabulary.
  ParseResult parse(const std::vector<std::int64_t>& ids) const;

  const TaskSchema& schema() const { return schema_; }
  const Vocabulary& vocabulary() const { return vocab_; }

 private:
  struct SpecialIds {
    std::int64_t open = -1, close = -1;
  };
  std::int64_t base_to_full(std::int64_t base_id) const {
    return base_id + special_count_;
  }

  Vocabulary vocab_;
  TaskSchema schema_;
  std::vector<std::string> special_tokens_;
  std::unordered_map<std::string, std::int64_t> special_by_name_;
  std::unordered_map<std::string, SpecialIds> field_tokens_;
  std::int64_t item_open_ = -1, item_close_ = -1;
  std::int64_t special_count_ = 0;
  std::int64_t total_size_ = 0;
};

}  // namespace docparser
