#include "docparser/codec.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace docparser {

using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// FieldValue / FieldRecord
// ---------------------------------------------------------------------------

FieldValue FieldValue::text(std::string s) {
  FieldValue v;
  v.kind_ = Kind::Text;
  v.text_ = std::move(s);
  return v;
}

FieldValue FieldValue::group(FieldRecord rec) {
  FieldValue v;
  v.kind_ = Kind::Group;
  v.group_ = std::make_unique<FieldRecord>(std::move(rec));
  return v;
}

FieldValue FieldValue::list(std::vector<FieldValue> items) {
  FieldValue v;
  v.kind_ = Kind::List;
  v.list_ = std::move(items);
  return v;
}

FieldValue::FieldValue(const FieldValue& other)
    : kind_(other.kind_), text_(other.text_), list_(other.list_) {
  if (other.group_) group_ = std::make_unique<FieldRecord>(*other.group_);
}

FieldValue& FieldValue::operator=(const FieldValue& other) {
  if (this == &other) return *this;
  kind_ = other.kind_;
  text_ = other.text_;
  list_ = other.list_;
  group_ = other.group_ ? std::make_unique<FieldRecord>(*other.group_) : nullptr;
  return *this;
}

const std::string& FieldValue::as_text() const {
  if (kind_ != Kind::Text) throw std::logic_error("field value is not text");
  return text_;
}
const FieldRecord& FieldValue::as_group() const {
  if (kind_ != Kind::Group || !group_) throw std::logic_error("field value is not a group");
  return *group_;
}
FieldRecord& FieldValue::as_group() {
  if (kind_ != Kind::Group || !group_) throw std::logic_error("field value is not a group");
  return *group_;
}
const std::vector<FieldValue>& FieldValue::as_list() const {
  if (kind_ != Kind::List) throw std::logic_error("field value is not a list");
  return list_;
}
std::vector<FieldValue>& FieldValue::as_list() {
  if (kind_ != Kind::List) throw std::logic_error("field value is not a list");
  return list_;
}

bool FieldValue::operator==(const FieldValue& other) const {
  if (kind_ != other.kind_) return false;
  switch (kind_) {
    case Kind::Text:
      return text_ == other.text_;
    case Kind::Group:
      return *group_ == *other.group_;
    case Kind::List:
      return list_ == other.list_;
  }
  return false;
}

bool FieldRecord::operator==(const FieldRecord& other) const {
  return entries == other.entries;
}

void FieldRecord::set(std::string name, FieldValue value) {
  entries.emplace_back(std::move(name), std::move(value));
}

const FieldValue* FieldRecord::find(const std::string& name) const {
  for (const auto& [n, v] : entries) {
    if (n == name) return &v;
  }
  return nullptr;
}

namespace {

ordered_json value_to_json(const FieldValue& v);

ordered_json record_to_json_obj(const FieldRecord& rec) {
  ordered_json obj = ordered_json::object();
  for (const auto& [name, value] : rec.entries) obj[name] = value_to_json(value);
  return obj;
}

ordered_json value_to_json(const FieldValue& v) {
  switch (v.kind()) {
    case FieldValue::Kind::Text:
      return v.as_text();
    case FieldValue::Kind::Group:
      return record_to_json_obj(v.as_group());
    case FieldValue::Kind::List: {
      ordered_json arr = ordered_json::array();
      for (const auto& item : v.as_list()) arr.push_back(value_to_json(item));
      return arr;
    }
  }
  return nullptr;
}

FieldValue value_from_json(const ordered_json& j);

FieldRecord record_from_json_obj(const ordered_json& j) {
  if (!j.is_object()) {
    throw std::invalid_argument("record JSON must be an object, got " + j.dump());
  }
  FieldRecord rec;
  for (auto it = j.begin(); it != j.end(); ++it) {
    rec.set(it.key(), value_from_json(it.value()));
  }
  return rec;
}

FieldValue value_from_json(const ordered_json& j) {
  if (j.is_string()) return FieldValue::text(j.get<std::string>());
  if (j.is_object()) return FieldValue::group(record_from_json_obj(j));
  if (j.is_array()) {
    std::vector<FieldValue> items;
    for (const auto& e : j) {
      if (!e.is_string() && !e.is_object()) {
        throw std::invalid_argument("record list items must be strings or objects");
      }
      items.push_back(value_from_json(e));
    }
    return FieldValue::list(std::move(items));
  }
  throw std::invalid_argument("record values must be strings, objects or arrays, got " +
                              j.dump());
}

}  // namespace

std::string record_to_json(const FieldRecord& rec) {
  return record_to_json_obj(rec).dump();
}

FieldRecord record_from_json(const std::string& json) {
  return record_from_json_obj(ordered_json::parse(json));
}

// ---------------------------------------------------------------------------
// TaskSchema
// ---------------------------------------------------------------------------

namespace {

const char* kind_name(FieldDef::Kind k) {
  switch (k) {
    case FieldDef::Kind::Value: return "value";
    case FieldDef::Kind::Group: return "group";
    case FieldDef::Kind::ValueList: return "value_list";
    case FieldDef::Kind::GroupList: return "group_list";
  }
  return "?";
}

FieldDef::Kind kind_from_name(const std::string& s) {
  if (s == "value") return FieldDef::Kind::Value;
  if (s == "group") return FieldDef::Kind::Group;
  if (s == "value_list") return FieldDef::Kind::ValueList;
  if (s == "group_list") return FieldDef::Kind::GroupList;
  throw std::invalid_argument("unknown schema field kind '" + s + "'");
}

void collect_names(const std::vector<FieldDef>& defs, std::vector<std::string>& out) {
  for (const auto& d : defs) {
    if (std::find(out.begin(), out.end(), d.name) == out.end()) out.push_back(d.name);
    collect_names(d.children, out);
  }
}

void validate_against(const std::vector<FieldDef>& defs, const FieldRecord& rec,
                      const std::string& where) {
  std::vector<std::string> seen;
  for (const auto& [name, value] : rec.entries) {
    if (std::find(seen.begin(), seen.end(), name) != seen.end()) {
      throw std::invalid_argument("duplicate field '" + name + "' in " + where);
    }
    seen.push_back(name);
    const FieldDef* def = nullptr;
    for (const auto& d : defs) {
      if (d.name == name) {
        def = &d;
        break;
      }
    }
    if (!def) {
      throw std::invalid_argument("field '" + name + "' in " + where +
                                  " is not in the task schema");
    }
    switch (def->kind) {
      case FieldDef::Kind::Value:
        if (value.kind() != FieldValue::Kind::Text) {
          throw std::invalid_argument("field '" + name + "' must be a string");
        }
        break;
      case FieldDef::Kind::Group:
        if (value.kind() != FieldValue::Kind::Group) {
          throw std::invalid_argument("field '" + name + "' must be a group");
        }
        validate_against(def->children, value.as_group(), "group '" + name + "'");
        break;
      case FieldDef::Kind::ValueList:
        if (value.kind() != FieldValue::Kind::List) {
          throw std::invalid_argument("field '" + name + "' must be a list");
        }
        for (const auto& item : value.as_list()) {
          if (item.kind() != FieldValue::Kind::Text) {
            throw std::invalid_argument("list field '" + name +
                                        "' must hold strings only");
          }
        }
        break;
      case FieldDef::Kind::GroupList:
        if (value.kind() != FieldValue::Kind::List) {
          throw std::invalid_argument("field '" + name + "' must be a list");
        }
        for (const auto& item : value.as_list()) {
          if (item.kind() != FieldValue::Kind::Group) {
            throw std::invalid_argument("list field '" + name +
                                        "' must hold groups only");
          }
          validate_against(def->children, item.as_group(), "item of '" + name + "'");
        }
        break;
    }
  }
}

ordered_json defs_to_json(const std::vector<FieldDef>& defs) {
  ordered_json arr = ordered_json::array();
  for (const auto& d : defs) {
    ordered_json f;
    f["name"] = d.name;
    f["kind"] = kind_name(d.kind);
    if (!d.children.empty()) f["fields"] = defs_to_json(d.children);
    arr.push_back(f);
  }
  return arr;
}

std::vector<FieldDef> defs_from_json(const ordered_json& arr) {
  if (!arr.is_array()) throw std::invalid_argument("schema 'fields' must be an array");
  std::vector<FieldDef> defs;
  for (const auto& f : arr) {
    FieldDef d;
    d.name = f.at("name").get<std::string>();
    d.kind = kind_from_name(f.at("kind").get<std::string>());
    if (f.contains("fields")) d.children = defs_from_json(f.at("fields"));
    const bool needs_children =
        d.kind == FieldDef::Kind::Group || d.kind == FieldDef::Kind::GroupList;
    if (needs_children && d.children.empty()) {
      throw std::invalid_argument("schema field '" + d.name +
                                  "' needs nested 'fields'");
    }
    defs.push_back(std::move(d));
  }
  return defs;
}

}  // namespace

std::vector<std::string> TaskSchema::field_names() const {
  std::vector<std::string> out;
  collect_names(fields, out);
  return out;
}

void TaskSchema::validate_record(const FieldRecord& rec) const {
  validate_against(fields, rec, "record");
}

TaskSchema TaskSchema::from_json(const std::string& json) {
  ordered_json j = ordered_json::parse(json);
  TaskSchema s;
  s.task_name = j.at("task").get<std::string>();
  if (s.task_name.empty()) throw std::invalid_argument("schema task name is empty");
  s.fields = defs_from_json(j.at("fields"));
  return s;
}

TaskSchema TaskSchema::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open schema file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::string TaskSchema::to_json() const {
  ordered_json j;
  j["task"] = task_name;
  j["fields"] = defs_to_json(fields);
  return j.dump();
}

TaskSchema TaskSchema::builtin_receipt() {
  TaskSchema s;
  s.task_name = "receipt";
  FieldDef store{"store", FieldDef::Kind::Value, {}};
  FieldDef date{"date", FieldDef::Kind::Value, {}};
  FieldDef menu{"menu",
                FieldDef::Kind::GroupList,
                {{"name", FieldDef::Kind::Value, {}},
                 {"price", FieldDef::Kind::Value, {}}}};
  FieldDef total{"total",
                 FieldDef::Kind::Group,
                 {{"total-price", FieldDef::Kind::Value, {}},
                  {"cash-price", FieldDef::Kind::Value, {}}}};
  s.fields = {store, date, menu, total};
  return s;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

namespace {

// GPT-2 style byte <-> printable codepoint table.
const std::array<char32_t, 256>& byte_to_cp_table() {
  static const std::array<char32_t, 256> table = [] {
    std::array<char32_t, 256> t{};
    std::array<bool, 256> keep{};
    for (int b = 0x21; b <= 0x7E; ++b) keep[static_cast<size_t>(b)] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) keep[static_cast<size_t>(b)] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) keep[static_cast<size_t>(b)] = true;
    char32_t next = 256;
    for (int b = 0; b < 256; ++b) {
      t[static_cast<size_t>(b)] = keep[static_cast<size_t>(b)]
                                      ? static_cast<char32_t>(b)
                                      : next++;
    }
    return t;
  }();
  return table;
}

std::string cp_to_utf8(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return out;
}

std::vector<char32_t> utf8_to_cps(const std::string& s) {
  std::vector<char32_t> cps;
  size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    char32_t cp;
    size_t len;
    if (c < 0x80) {
      cp = c;
      len = 1;
    } else if ((c >> 5) == 0x6) {
      cp = c & 0x1F;
      len = 2;
    } else if ((c >> 4) == 0xE) {
      cp = c & 0x0F;
      len = 3;
    } else {
      throw std::invalid_argument("invalid UTF-8 in token string");
    }
    if (i + len > s.size()) throw std::invalid_argument("truncated UTF-8 token");
    for (size_t k = 1; k < len; ++k) {
      cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
    }
    cps.push_back(cp);
    i += len;
  }
  return cps;
}

std::string map_bytes(const std::string& raw) {
  std::string out;
  const auto& table = byte_to_cp_table();
  for (unsigned char c : raw) out += cp_to_utf8(table[c]);
  return out;
}

std::string unmap_bytes(const std::string& mapped) {
  static const auto reverse = [] {
    std::unordered_map<char32_t, unsigned char> m;
    const auto& table = byte_to_cp_table();
    for (int b = 0; b < 256; ++b) m[table[static_cast<size_t>(b)]] =
        static_cast<unsigned char>(b);
    return m;
  }();
  std::string out;
  for (char32_t cp : utf8_to_cps(mapped)) {
    auto it = reverse.find(cp);
    if (it == reverse.end()) {
      throw std::invalid_argument("token string contains a non byte-level codepoint");
    }
    out.push_back(static_cast<char>(it->second));
  }
  return out;
}

// Splits text into GPT-2 style pieces: space-prefixed runs of one character
// class, whitespace runs (final space attaches to the following word).
std::vector<std::string> pre_split(const std::string& s) {
  auto cls = [](unsigned char c) -> int {
    if (std::isdigit(c)) return 1;
    if (std::isalpha(c) || c >= 0x80) return 0;
    return 2;
  };
  auto is_ws = [](unsigned char c) { return std::isspace(c) != 0; };
  std::vector<std::string> pieces;
  size_t i = 0;
  const size_t n = s.size();
  while (i < n) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (s[i] == ' ' && i + 1 < n && !is_ws(static_cast<unsigned char>(s[i + 1]))) {
      const int k = cls(static_cast<unsigned char>(s[i + 1]));
      size_t j = i + 1;
      while (j < n && !is_ws(static_cast<unsigned char>(s[j])) &&
             cls(static_cast<unsigned char>(s[j])) == k) {
        ++j;
      }
      pieces.push_back(s.substr(i, j - i));
      i = j;
    } else if (is_ws(c)) {
      size_t j = i;
      while (j < n && is_ws(static_cast<unsigned char>(s[j]))) ++j;
      size_t end = j;
      if (j < n && s[j - 1] == ' ' && j - i > 1) end = j - 1;
      if (end == i) end = j;  // lone non-space-attaching whitespace
      pieces.push_back(s.substr(i, end - i));
      i = end;
    } else {
      const int k = cls(c);
      size_t j = i;
      while (j < n && !is_ws(static_cast<unsigned char>(s[j])) &&
             cls(static_cast<unsigned char>(s[j])) == k) {
        ++j;
      }
      pieces.push_back(s.substr(i, j - i));
      i = j;
    }
  }
  return pieces;
}

}  // namespace

Vocabulary Vocabulary::char_level() {
  Vocabulary v;
  v.kind_ = Kind::Char;
  v.id_to_token_.reserve(256);
  for (int b = 0; b < 256; ++b) {
    std::string tok = cp_to_utf8(byte_to_cp_table()[static_cast<size_t>(b)]);
    v.token_to_id_[tok] = b;
    v.id_to_token_.push_back(std::move(tok));
  }
  return v;
}

Vocabulary Vocabulary::byte_bpe(
    std::map<std::string, std::int64_t> vocab,
    std::vector<std::pair<std::string, std::string>> merges) {
  Vocabulary v;
  v.kind_ = Kind::ByteBpe;
  const auto size = static_cast<std::int64_t>(vocab.size());
  v.id_to_token_.assign(static_cast<size_t>(size), {});
  for (auto& [tok, id] : vocab) {
    if (id < 0 || id >= size || !v.id_to_token_[static_cast<size_t>(id)].empty()) {
      throw std::invalid_argument(
          "vocabulary ids must be dense and unique in [0, size)");
    }
    v.id_to_token_[static_cast<size_t>(id)] = tok;
    v.token_to_id_[tok] = id;
  }
  // Every single mapped byte must be present for lossless round trips.
  for (int b = 0; b < 256; ++b) {
    std::string tok = cp_to_utf8(byte_to_cp_table()[static_cast<size_t>(b)]);
    if (!v.token_to_id_.count(tok)) {
      throw std::invalid_argument("byte-level vocabulary is missing byte token " +
                                  std::to_string(b));
    }
  }
  std::int64_t rank = 0;
  for (auto& [a, b] : merges) v.merge_rank_[{a, b}] = rank++;
  return v;
}

std::int64_t Vocabulary::base_size() const {
  return static_cast<std::int64_t>(id_to_token_.size());
}

std::vector<std::int64_t> Vocabulary::encode(const std::string& text) const {
  std::vector<std::int64_t> out;
  if (kind_ == Kind::Char) {
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(c);
    return out;
  }
  for (const auto& piece : pre_split(text)) {
    // Word = sequence of mapped single-byte symbols, then merged greedily.
    std::vector<std::string> word;
    const auto& table = byte_to_cp_table();
    word.reserve(piece.size());
    for (unsigned char c : piece) word.push_back(cp_to_utf8(table[c]));
    while (word.size() >= 2) {
      std::int64_t best_rank = -1;
      size_t best_i = 0;
      for (size_t i = 0; i + 1 < word.size(); ++i) {
        auto it = merge_rank_.find({word[i], word[i + 1]});
        if (it != merge_rank_.end() && (best_rank < 0 || it->second < best_rank)) {
          best_rank = it->second;
          best_i = i;
        }
      }
      if (best_rank < 0) break;
      const std::string a = word[best_i], b = word[best_i + 1];
      std::vector<std::string> merged;
      merged.reserve(word.size());
      size_t i = 0;
      while (i < word.size()) {
        if (i + 1 < word.size() && word[i] == a && word[i + 1] == b) {
          merged.push_back(a + b);
          i += 2;
        } else {
          merged.push_back(word[i]);
          ++i;
        }
      }
      word = std::move(merged);
    }
    for (const auto& sym : word) {
      auto it = token_to_id_.find(sym);
      if (it != token_to_id_.end()) {
        out.push_back(it->second);
        continue;
      }
      // Merged symbol absent from the vocabulary: fall back to its bytes.
      for (char32_t cp : utf8_to_cps(sym)) {
        auto bit = token_to_id_.find(cp_to_utf8(cp));
        if (bit == token_to_id_.end()) {
          throw std::invalid_argument("vocabulary cannot represent text piece '" +
                                      piece + "'");
        }
        out.push_back(bit->second);
      }
    }
  }
  return out;
}

std::string Vocabulary::decode(const std::vector<std::int64_t>& ids) const {
  std::string mapped;
  for (auto id : ids) {
    if (id < 0 || id >= base_size()) {
      throw std::out_of_range("vocabulary id " + std::to_string(id) +
                              " out of range [0," + std::to_string(base_size()) + ")");
    }
    mapped += id_to_token_[static_cast<size_t>(id)];
  }
  return unmap_bytes(mapped);
}

std::string Vocabulary::token_string(std::int64_t id) const {
  if (id < 0 || id >= base_size()) {
    throw std::out_of_range("vocabulary id out of range");
  }
  return id_to_token_[static_cast<size_t>(id)];
}

namespace {

// Appends the merge chain that builds `word` from single characters:
// (w0,w1), (w0w1,w2), ... Skips pairs already present.
void add_word_chain(const std::string& word,
                    std::vector<std::pair<std::string, std::string>>& merges,
                    std::map<std::pair<std::string, std::string>, bool>& seen) {
  if (word.size() < 2) return;
  std::string prefix(1, word[0]);
  for (size_t i = 1; i < word.size(); ++i) {
    std::pair<std::string, std::string> p{prefix, std::string(1, word[i])};
    if (!seen.count(p)) {
      seen[p] = true;
      merges.push_back(p);
    }
    prefix += word[i];
  }
}

}  // namespace

Vocabulary Vocabulary::builtin_tiny_bpe() {
  std::vector<std::pair<std::string, std::string>> merges;
  std::map<std::pair<std::string, std::string>, bool> seen;
  // Chains pinned first so canonical receipt strings segment predictably:
  // Macchiato -> Mac|chi|ato, 17500 -> 17|500, 22500 -> 22|500, 5000 -> 5000.
  for (auto& m : std::initializer_list<std::pair<std::string, std::string>>{
           {"M", "a"}, {"Ma", "c"}, {"c", "h"}, {"ch", "i"}, {"a", "t"}, {"at", "o"},
           {"T", "E"}, {"TE", "A"}, {"1", "7"}, {"5", "0"}, {"50", "0"}, {"2", "2"},
           {"500", "0"}}) {
    if (!seen.count(m)) {
      seen[m] = true;
      merges.push_back(m);
    }
  }
  for (char a = '0'; a <= '9'; ++a) {
    for (char b = '0'; b <= '9'; ++b) {
      std::pair<std::string, std::string> p{std::string(1, a), std::string(1, b)};
      if (!seen.count(p)) {
        seen[p] = true;
        merges.push_back(p);
      }
    }
  }
  for (const auto& w : builtin_receipt_words()) add_word_chain(w, merges, seen);

  std::map<std::string, std::int64_t> vocab;
  std::int64_t next = 0;
  for (int b = 0; b < 256; ++b) {
    vocab[cp_to_utf8(byte_to_cp_table()[static_cast<size_t>(b)])] = next++;
  }
  for (const auto& [a, b] : merges) {
    const std::string tok = a + b;
    if (!vocab.count(tok)) vocab[tok] = next++;
  }
  return byte_bpe(std::move(vocab), std::move(merges));
}

Vocabulary Vocabulary::from_json(const std::string& json) {
  ordered_json j = ordered_json::parse(json);
  const std::string type = j.value("type", "byte_bpe");
  if (type == "char") return char_level();
  if (type != "byte_bpe") {
    throw std::invalid_argument("unknown vocabulary type '" + type + "'");
  }
  std::map<std::string, std::int64_t> vocab;
  for (auto it = j.at("vocab").begin(); it != j.at("vocab").end(); ++it) {
    vocab[it.key()] = it.value().get<std::int64_t>();
  }
  std::vector<std::pair<std::string, std::string>> merges;
  for (const auto& m : j.at("merges")) {
    const auto s = m.get<std::string>();
    const auto sp = s.find(' ');
    if (sp == std::string::npos) {
      throw std::invalid_argument("merge entry '" + s + "' must be 'left right'");
    }
    merges.emplace_back(s.substr(0, sp), s.substr(sp + 1));
  }
  return byte_bpe(std::move(vocab), std::move(merges));
}

Vocabulary Vocabulary::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::string Vocabulary::to_json() const {
  ordered_json j;
  if (kind_ == Kind::Char) {
    j["type"] = "char";
    return j.dump();
  }
  j["type"] = "byte_bpe";
  ordered_json vocab = ordered_json::object();
  for (size_t id = 0; id < id_to_token_.size(); ++id) {
    vocab[id_to_token_[id]] = id;
  }
  j["vocab"] = std::move(vocab);
  // Emit merges sorted by rank.
  std::vector<std::pair<std::int64_t, std::string>> by_rank;
  for (const auto& [pair, rank] : merge_rank_) {
    by_rank.emplace_back(rank, pair.first + " " + pair.second);
  }
  std::sort(by_rank.begin(), by_rank.end());
  ordered_json merges = ordered_json::array();
  for (auto& [rank, s] : by_rank) merges.push_back(s);
  j["merges"] = std::move(merges);
  return j.dump();
}

// Word inventory shared by the synthetic generator and the built-in
// vocabulary, so generated documents tokenize compactly.
const std::vector<std::string>& builtin_receipt_words() {
  static const std::vector<std::string> words{
      "COFFEE", "TEA",    "LATTE",  "MOCHA",  "BAGEL",  "DONUT",  "JUICE",
      "SODA",   "WATER",  "SALAD",  "SOUP",   "PASTA",  "PIZZA",  "BURGER",
      "FRIES",  "CAKE",   "PIE",    "MILK",   "COOKIE", "TOAST",  "MART",
      "STORE",  "SHOP",   "CAFE",   "DINER",  "MARKET", "DEPOT",  "CORNER",
      "CENTRAL", "GOLDEN", "TOTAL",  "CASH",   "DATE",   "ITEM"};
  return words;
}

// ---------------------------------------------------------------------------
// FieldCodec
// ---------------------------------------------------------------------------

FieldCodec::FieldCodec(Vocabulary vocab, TaskSchema schema)
    : vocab_(std::move(vocab)), schema_(std::move(schema)) {
  special_tokens_ = {"<End>", "<s_read>", schema_.task_token()};
  for (const auto& name : schema_.field_names()) {
    field_tokens_[name] = SpecialIds{
        static_cast<std::int64_t>(special_tokens_.size()),
        static_cast<std::int64_t>(special_tokens_.size()) + 1};
    special_tokens_.push_back("<" + name + ">");
    special_tokens_.push_back("</" + name + ">");
  }
  item_open_ = static_cast<std::int64_t>(special_tokens_.size());
  item_close_ = item_open_ + 1;
  special_tokens_.push_back("<item>");
  special_tokens_.push_back("</item>");
  special_count_ = static_cast<std::int64_t>(special_tokens_.size());
  total_size_ = special_count_ + vocab_.base_size();
  for (size_t i = 0; i < special_tokens_.size(); ++i) {
    special_by_name_[special_tokens_[i]] = static_cast<std::int64_t>(i);
  }
}

std::int64_t FieldCodec::special_id(const std::string& token) const {
  auto it = special_by_name_.find(token);
  if (it == special_by_name_.end()) {
    throw std::invalid_argument("unknown special token '" + token + "'");
  }
  return it->second;
}

std::string FieldCodec::token_string(std::int64_t id) const {
  if (id < 0 || id >= total_size_) {
    throw std::out_of_range("token id " + std::to_string(id) + " out of range [0," +
                            std::to_string(total_size_) + ")");
  }
  if (id < special_count_) return special_tokens_[static_cast<size_t>(id)];
  return vocab_.token_string(id - special_count_);
}

std::vector<std::int64_t> FieldCodec::tokenize_text(const std::string& text) const {
  std::vector<std::int64_t> out;
  for (auto id : vocab_.encode(text)) out.push_back(base_to_full(id));
  return out;
}

std::string FieldCodec::detokenize(const std::vector<std::int64_t>& ids) const {
  std::string out;
  std::vector<std::int64_t> base_run;
  auto flush = [&] {
    if (!base_run.empty()) {
      out += vocab_.decode(base_run);
      base_run.clear();
    }
  };
  for (auto id : ids) {
    if (id < 0 || id >= total_size_) {
      throw std::out_of_range("token id " + std::to_string(id) + " out of range");
    }
    if (id < special_count_) {
      flush();
      out += special_tokens_[static_cast<size_t>(id)];
    } else {
      base_run.push_back(id - special_count_);
    }
  }
  flush();
  return out;
}

namespace {

void serialize_fields(const FieldCodec& codec, const std::vector<FieldDef>& defs,
                      const FieldRecord& rec,
                      const std::function<std::int64_t(const std::string&, bool)>& tag,
                      std::int64_t item_open, std::int64_t item_close,
                      std::vector<std::int64_t>& out) {
  for (const auto& def : defs) {
    const FieldValue* value = rec.find(def.name);
    if (!value) continue;
    out.push_back(tag(def.name, false));
    switch (def.kind) {
      case FieldDef::Kind::Value: {
        auto ids = codec.tokenize_text(value->as_text());
        out.insert(out.end(), ids.begin(), ids.end());
        break;
      }
      case FieldDef::Kind::Group:
        serialize_fields(codec, def.children, value->as_group(), tag, item_open,
                         item_close, out);
        break;
      case FieldDef::Kind::ValueList:
        for (const auto& item : value->as_list()) {
          out.push_back(item_open);
          auto ids = codec.tokenize_text(item.as_text());
          out.insert(out.end(), ids.begin(), ids.end());
          out.push_back(item_close);
        }
        break;
      case FieldDef::Kind::GroupList:
        for (const auto& item : value->as_list()) {
          out.push_back(item_open);
          serialize_fields(codec, def.children, item.as_group(), tag, item_open,
                           item_close, out);
          out.push_back(item_close);
        }
        break;
    }
    out.push_back(tag(def.name, true));
  }
}

}  // namespace

TokenSequence FieldCodec::serialize(const FieldRecord& record) const {
  schema_.validate_record(record);
  TokenSequence seq;
  seq.ids.push_back(task_id());
  auto tag = [this](const std::string& name, bool close) {
    const auto& ids = field_tokens_.at(name);
    return close ? ids.close : ids.open;
  };
  serialize_fields(*this, schema_.fields, record, tag, item_open_, item_close_,
                   seq.ids);
  seq.ids.push_back(end_id());
  return seq;
}

TokenSequence FieldCodec::serialize_reading(const std::string& transcription) const {
  TokenSequence seq;
  seq.ids.push_back(read_task_id());
  auto ids = tokenize_text(transcription);
  seq.ids.insert(seq.ids.end(), ids.begin(), ids.end());
  seq.ids.push_back(end_id());
  return seq;
}

// ---------------------------------------------------------------------------
// Parse with recovery
// ---------------------------------------------------------------------------

namespace {

struct Parser {
  const FieldCodec& codec;
  const std::vector<std::int64_t>& toks;
  std::int64_t end_id;
  std::int64_t item_open, item_close;
  size_t pos = 0;
  std::vector<std::string>* diags;

  bool done() const { return pos >= toks.size(); }
  std::int64_t peek() const { return toks[pos]; }

  void diag(const std::string& msg) { diags->push_back(msg); }

  std::string surface(std::int64_t id) const { return codec.token_string(id); }

  // Leaf payload: base tokens until the closing tag; any other special ends
  // the field (recovery) and is left for the caller.
  std::string parse_value(std::int64_t close_tag, const std::string& name) {
    std::vector<std::int64_t> text;
    while (!done()) {
      const auto id = peek();
      if (id == close_tag) {
        ++pos;
        return codec.detokenize(text);
      }
      if (!codec.is_special(id)) {
        text.push_back(id);
        ++pos;
        continue;
      }
      if (id == item_open || id == item_close) {
        // Out-of-schema structural token inside a leaf: treat as text.
        diag("token '" + surface(id) + "' inside field '" + name +
             "' treated as text");
        text.push_back(id);
        ++pos;
        continue;
      }
      diag("field '" + name + "' closed implicitly at '" + surface(id) + "'");
      return codec.detokenize(text);
    }
    diag("field '" + name + "' unclosed at end of sequence");
    return codec.detokenize(text);
  }

  FieldRecord parse_group(const std::vector<FieldDef>& defs, std::int64_t close_tag,
                          const std::string& where) {
    FieldRecord rec;
    while (!done()) {
      const auto id = peek();
      if (id == close_tag) {
        ++pos;
        return rec;
      }
      if (id == end_id) {
        if (close_tag >= 0) diag(where + " unclosed at <End>");
        return rec;
      }
      const FieldDef* def = nullptr;
      for (const auto& d : defs) {
        if (codec.special_id("<" + d.name + ">") == id) {
          def = &d;
          break;
        }
      }
      if (def) {
        ++pos;
        FieldValue value = parse_field(*def);
        merge_entry(rec, def->name, std::move(value), *def);
        continue;
      }
      diag("skipped unexpected token '" + surface(id) + "' in " + where);
      ++pos;
    }
    diag(where + " unclosed at end of sequence");
    return rec;
  }

  FieldValue parse_field(const FieldDef& def) {
    const auto close_tag = codec.special_id("</" + def.name + ">");
    switch (def.kind) {
      case FieldDef::Kind::Value:
        return FieldValue::text(parse_value(close_tag, def.name));
      case FieldDef::Kind::Group:
        return FieldValue::group(
            parse_group(def.children, close_tag, "group '" + def.name + "'"));
      case FieldDef::Kind::ValueList:
      case FieldDef::Kind::GroupList: {
        std::vector<FieldValue> items;
        while (!done()) {
          const auto id = peek();
          if (id == close_tag) {
            ++pos;
            return FieldValue::list(std::move(items));
          }
          if (id == end_id) {
            diag("list '" + def.name + "' unclosed at <End>");
            return FieldValue::list(std::move(items));
          }
          if (id == item_open) {
            ++pos;
            if (def.kind == FieldDef::Kind::ValueList) {
              items.push_back(FieldValue::text(parse_value(item_close, def.name)));
            } else {
              items.push_back(FieldValue::group(parse_group(
                  def.children, item_close, "item of '" + def.name + "'")));
            }
            continue;
          }
          if (def.kind == FieldDef::Kind::ValueList && !codec.is_special(id)) {
            // Bare text inside a value list: wrap it as an item.
            diag("bare text in list '" + def.name + "' wrapped as item");
            items.push_back(FieldValue::text(parse_value(item_close, def.name)));
            continue;
          }
          diag("skipped unexpected token '" + surface(id) + "' in list '" + def.name +
               "'");
          ++pos;
        }
        diag("list '" + def.name + "' unclosed at end of sequence");
        return FieldValue::list(std::move(items));
      }
    }
    return FieldValue::text("");
  }

  // Duplicate fields: lists merge their items; scalar/group duplicates keep
  // the first occurrence.
  void merge_entry(FieldRecord& rec, const std::string& name, FieldValue value,
                   const FieldDef& def) {
    for (auto& [n, v] : rec.entries) {
      if (n != name) continue;
      if (def.kind == FieldDef::Kind::ValueList ||
          def.kind == FieldDef::Kind::GroupList) {
        diag("duplicate list field '" + name + "' merged");
        for (auto& item : value.as_list()) v.as_list().push_back(std::move(item));
      } else {
        diag("duplicate field '" + name + "' ignored (kept first value)");
      }
      return;
    }
    rec.set(name, std::move(value));
  }
};

}  // namespace

FieldCodec::ParseResult FieldCodec::parse(const std::vector<std::int64_t>& ids) const {
  for (auto id : ids) {
    if (id < 0 || id >= total_size_) {
      throw std::out_of_range("token id " + std::to_string(id) +
                              " outside vocabulary range [0," +
                              std::to_string(total_size_) + ")");
    }
  }
  ParseResult res;
  Parser p{*this, ids, end_id(), item_open_, item_close_, 0, &res.diagnostics};
  if (!ids.empty() && (ids[0] == task_id() || ids[0] == read_task_id())) {
    p.pos = 1;
  } else {
    res.diagnostics.push_back("sequence does not start with a task token");
  }
  res.record = p.parse_group(schema_.fields, /*close_tag=*/-1, "record");
  if (p.pos < ids.size() && ids[p.pos] == static_cast<std::int64_t>(end_id())) ++p.pos;
  if (p.pos < ids.size()) {
    res.diagnostics.push_back(std::to_string(ids.size() - p.pos) +
                              " trailing tokens after <End> ignored");
  }
  return res;
}

}  // namespace docparser
