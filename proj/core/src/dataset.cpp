#include "docparser/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace docparser {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

void DatasetOnDisk::write(const std::string& dir,
                          const std::vector<DocumentSample>& samples,
                          const DatasetManifest& manifest, bool force) {
  fs::path root(dir);
  if (fs::exists(root) && !fs::is_empty(root) && !force) {
    throw std::runtime_error("output directory '" + dir +
                             "' exists and is not empty (use --force)");
  }
  fs::create_directories(root / "images");

  std::ofstream records(root / "records.jsonl");
  std::ofstream transcriptions(root / "transcriptions.jsonl");
  if (!records || !transcriptions) {
    throw std::runtime_error("cannot write dataset files under '" + dir + "'");
  }
  for (size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
    write_ppm((root / "images" / name).string(), samples[i].image);
    ordered_json rec;
    rec["image"] = name;
    rec["record"] = ordered_json::parse(record_to_json(samples[i].record));
    records << rec.dump() << "\n";
    ordered_json tr;
    tr["image"] = name;
    tr["text"] = samples[i].transcription;
    transcriptions << tr.dump() << "\n";
  }
  ordered_json m;
  m["generator"] = manifest.generator;
  m["seed"] = manifest.seed;
  m["count"] = manifest.count;
  m["template"] = manifest.template_id;
  m["resolution"] = std::to_string(manifest.height) + "x" +
                    std::to_string(manifest.width);
  std::ofstream mf(root / "manifest.json");
  mf << m.dump(2) << "\n";
  if (!mf) throw std::runtime_error("cannot write manifest under '" + dir + "'");
}

DatasetOnDisk DatasetOnDisk::load(const std::string& dir) {
  fs::path root(dir);
  if (!fs::is_directory(root)) {
    throw std::runtime_error("dataset directory '" + dir + "' does not exist");
  }
  DatasetOnDisk ds;
  ds.dir_ = dir;

  if (fs::exists(root / "manifest.json")) {
    std::ifstream mf(root / "manifest.json");
    ordered_json m = ordered_json::parse(mf);
    ds.manifest_.generator = m.value("generator", "");
    ds.manifest_.seed = m.value("seed", std::uint64_t{0});
    ds.manifest_.count = m.value("count", std::int64_t{0});
    ds.manifest_.template_id = m.value("template", "");
    const std::string res = m.value("resolution", "0x0");
    const auto x = res.find('x');
    if (x != std::string::npos) {
      ds.manifest_.height = std::stoll(res.substr(0, x));
      ds.manifest_.width = std::stoll(res.substr(x + 1));
    }
  }

  std::vector<std::string> names;
  std::vector<FieldRecord> records;
  if (fs::exists(root / "records.jsonl")) {
    std::ifstream in(root / "records.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      ordered_json j = ordered_json::parse(line);
      names.push_back(j.at("image").get<std::string>());
      records.push_back(record_from_json(j.at("record").dump()));
    }
  }
  std::vector<std::string> t_names;
  std::vector<std::string> texts;
  if (fs::exists(root / "transcriptions.jsonl")) {
    std::ifstream in(root / "transcriptions.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      ordered_json j = ordered_json::parse(line);
      t_names.push_back(j.at("image").get<std::string>());
      texts.push_back(j.at("text").get<std::string>());
    }
  }

  if (names.empty() && !t_names.empty()) {
    names = t_names;
  } else if (!names.empty() && !t_names.empty()) {
    if (names != t_names) {
      throw std::runtime_error(
          "dataset '" + dir + "': records and transcriptions list different images");
    }
  }
  if (names.empty()) {
    // Fall back to whatever images exist.
    if (fs::is_directory(root / "images")) {
      for (const auto& e : fs::directory_iterator(root / "images")) {
        if (e.path().extension() == ".ppm") names.push_back(e.path().filename());
      }
      std::sort(names.begin(), names.end());
    }
  }
  if (names.empty() && ds.manifest_.count != 0) {
    throw std::runtime_error("dataset '" + dir + "' holds no samples");
  }
  for (const auto& n : names) {
    if (!fs::exists(root / "images" / n)) {
      throw std::runtime_error("dataset '" + dir + "': missing image file '" + n +
                               "' referenced by annotations");
    }
  }
  ds.names_ = std::move(names);
  ds.records_ = std::move(records);
  ds.transcriptions_ = std::move(texts);
  return ds;
}

DocumentSample DatasetOnDisk::sample(std::size_t i) const {
  if (i >= names_.size()) throw std::out_of_range("dataset index out of range");
  DocumentSample s;
  s.image = read_ppm((fs::path(dir_) / "images" / names_[i]).string());
  if (i < records_.size()) s.record = records_[i];
  if (i < transcriptions_.size()) s.transcription = transcriptions_[i];
  s.seed = i;
  return s;
}

std::vector<DocumentSample> DatasetOnDisk::load_all() const {
  std::vector<DocumentSample> out;
  out.reserve(size());
  for (size_t i = 0; i < size(); ++i) out.push_back(sample(i));
  return out;
}

}  // namespace docparser
