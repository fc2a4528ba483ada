#include "whatifts/data_model.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"
#include "whatifts/common.hpp"

namespace whatifts {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::Factual:
      return "factual";
    case DatasetKind::Counterfactual:
      return "counterfactual";
    case DatasetKind::Mixed:
      return "mixed";
  }
  return "factual";
}

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "factual") return DatasetKind::Factual;
  if (s == "counterfactual") return DatasetKind::Counterfactual;
  if (s == "mixed") return DatasetKind::Mixed;
  throw DataError("schema-violation: unknown dataset kind '" + s + "'");
}

const std::vector<SampleTuple>& Dataset::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw DataError("unknown split '" + name + "'");
  return it->second;
}

std::size_t Dataset::size() const {
  std::size_t n = 0;
  for (const auto& [_, records] : splits) n += records.size();
  return n;
}

void Dataset::validate() const {
  if (history_len <= 0 || future_len <= 0) throw DataError("schema-violation: L_h and L_f must be positive");
  std::set<std::string> ids;
  for (const auto& [split_name, records] : splits) {
    for (const auto& s : records) {
      if (!ids.insert(s.sample_id).second)
        throw DataError("schema-violation: duplicate sample_id '" + s.sample_id + "'");
      if (static_cast<int>(s.history.size()) != history_len)
        throw DataError("length-mismatch: sample '" + s.sample_id + "' history has " +
                        std::to_string(s.history.size()) + " values, expected " + std::to_string(history_len));
      if (s.future && static_cast<int>(s.future->size()) != future_len)
        throw DataError("length-mismatch: sample '" + s.sample_id + "' future has " +
                        std::to_string(s.future->size()) + " values, expected " + std::to_string(future_len));
      if (s.history_text.empty() || s.future_text.empty())
        throw DataError("schema-violation: sample '" + s.sample_id + "' has empty text");
      if (s.channel_id < 0) throw DataError("schema-violation: sample '" + s.sample_id + "' has negative channel_id");
      if (kind == DatasetKind::Counterfactual && s.future)
        throw DataError("schema-violation: counterfactual sample '" + s.sample_id + "' carries a future");
      if (kind == DatasetKind::Factual && !s.future)
        throw DataError("schema-violation: factual sample '" + s.sample_id + "' lacks a future");
    }
  }
  if (normalizer && !(normalizer->std > 0.0)) throw DataError("schema-violation: normalizer std must be > 0");
}

namespace {

[[noreturn]] void schema_error(const fs::path& file, std::size_t line, const std::string& field,
                               const std::string& reason) {
  throw DataError("schema-violation: " + file.filename().string() + ":" + std::to_string(line) + " field '" +
                  field + "': " + reason);
}

std::vector<double> parse_series(const json& v, const fs::path& file, std::size_t line, const char* field) {
  if (!v.is_array()) schema_error(file, line, field, "expected an array of numbers");
  std::vector<double> out;
  out.reserve(v.size());
  for (const auto& x : v) {
    if (!x.is_number()) schema_error(file, line, field, "non-numeric element");
    double d = x.get<double>();
    if (!std::isfinite(d)) schema_error(file, line, field, "non-finite element");
    out.push_back(d);
  }
  return out;
}

SampleTuple parse_record(const std::string& text, const fs::path& file, std::size_t line) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    schema_error(file, line, "<record>", std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) schema_error(file, line, "<record>", "expected an object");
  SampleTuple s;
  auto req = [&](const char* key) -> const json& {
    auto it = j.find(key);
    if (it == j.end()) schema_error(file, line, key, "missing");
    return *it;
  };
  const auto& id = req("sample_id");
  if (!id.is_string()) schema_error(file, line, "sample_id", "expected string");
  s.sample_id = id.get<std::string>();
  const auto& ch = req("channel_id");
  if (!ch.is_number_integer()) schema_error(file, line, "channel_id", "expected integer");
  s.channel_id = ch.get<int>();
  s.history = parse_series(req("history"), file, line, "history");
  const auto& ht = req("history_text");
  if (!ht.is_string()) schema_error(file, line, "history_text", "expected string");
  s.history_text = ht.get<std::string>();
  const auto& fut = req("future");
  if (!fut.is_null()) s.future = parse_series(fut, file, line, "future");
  const auto& ft = req("future_text");
  if (!ft.is_string()) schema_error(file, line, "future_text", "expected string");
  s.future_text = ft.get<std::string>();
  return s;
}

json record_json(const SampleTuple& s) {
  json j;
  j["sample_id"] = s.sample_id;
  j["channel_id"] = s.channel_id;
  j["history"] = s.history;
  j["history_text"] = s.history_text;
  j["future"] = s.future ? json(*s.future) : json(nullptr);
  j["future_text"] = s.future_text;
  return j;
}

}  // namespace

Dataset load_dataset(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  std::ifstream meta_in(meta_path);
  if (!meta_in) throw DataError("missing-file: " + meta_path.string());
  json meta;
  try {
    meta = json::parse(meta_in);
  } catch (const json::parse_error& e) {
    throw DataError("schema-violation: meta.json: " + std::string(e.what()));
  }
  Dataset d;
  try {
    d.name = meta.at("name").get<std::string>();
    d.history_len = meta.at("L_h").get<int>();
    d.future_len = meta.at("L_f").get<int>();
    d.kind = dataset_kind_from_string(meta.at("kind").get<std::string>());
    if (meta.contains("normalizer") && !meta["normalizer"].is_null()) {
      const auto& n = meta["normalizer"];
      d.normalizer = Normalizer{n.at("mean").get<double>(), n.at("std").get<double>(),
                                n.value("fitted_on", std::string("train"))};
    }
  } catch (const json::exception& e) {
    throw DataError("schema-violation: meta.json: " + std::string(e.what()));
  }

  for (const auto& split : kSplitNames) {
    const fs::path file = dir / (split + ".jsonl");
    std::ifstream in(file);
    if (!in) throw DataError("missing-file: " + file.string());
    auto& records = d.splits[split];
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      records.push_back(parse_record(line, file, lineno));
    }
  }
  d.validate();
  return d;
}

void save_dataset(const Dataset& dataset, const fs::path& dir) {
  dataset.validate();
  fs::create_directories(dir);
  json meta;
  meta["name"] = dataset.name;
  meta["L_h"] = dataset.history_len;
  meta["L_f"] = dataset.future_len;
  meta["kind"] = to_string(dataset.kind);
  if (dataset.normalizer) {
    meta["normalizer"] = {{"mean", dataset.normalizer->mean},
                          {"std", dataset.normalizer->std},
                          {"fitted_on", dataset.normalizer->fitted_on}};
  }
  {
    std::ofstream out(dir / "meta.json");
    if (!out) throw DataError("cannot write " + (dir / "meta.json").string());
    out << meta.dump(2) << "\n";
  }
  for (const auto& split : kSplitNames) {
    std::ofstream out(dir / (split + ".jsonl"));
    if (!out) throw DataError("cannot write " + (dir / (split + ".jsonl")).string());
    auto it = dataset.splits.find(split);
    if (it == dataset.splits.end()) continue;
    for (const auto& s : it->second) out << record_json(s).dump() << "\n";
  }
}

Normalizer fit_normalizer(const Dataset& dataset, const std::string& split) {
  const auto& records = dataset.split(split);
  // Two-pass for numerical stability.
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& s : records) {
    for (double v : s.history) sum += v;
    count += s.history.size();
    if (s.future) {
      for (double v : *s.future) sum += v;
      count += s.future->size();
    }
  }
  if (count == 0) throw DataError("empty-split: '" + split + "'");
  const double mean = sum / static_cast<double>(count);
  double ss = 0.0;
  for (const auto& s : records) {
    for (double v : s.history) ss += (v - mean) * (v - mean);
    if (s.future)
      for (double v : *s.future) ss += (v - mean) * (v - mean);
  }
  const double std = std::sqrt(ss / static_cast<double>(count));
  return Normalizer{mean, std::max(std, kStdFloor), split};
}

std::vector<double> apply_normalizer(const Normalizer& n, std::span<const double> x, bool inverse) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = inverse ? x[i] * n.std + n.mean : (x[i] - n.mean) / n.std;
  return out;
}

std::vector<std::string> split_corpus(const Dataset& dataset, const std::string& split) {
  std::vector<std::string> corpus;
  for (const auto& s : dataset.split(split)) {
    corpus.push_back(s.history_text);
    corpus.push_back(s.future_text);
  }
  return corpus;
}

}  // namespace whatifts
