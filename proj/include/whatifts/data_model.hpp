#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace whatifts {

/// One (history, history text, future, future text) quadruple. Multivariate
/// sources are flattened to one sample per channel.
struct SampleTuple {
  std::string sample_id;
  int channel_id = 0;
  std::vector<double> history;
  std::string history_text;
  std::optional<std::vector<double>> future;  // absent for counterfactual records
  std::string future_text;

  bool is_counterfactual() const { return !future.has_value(); }
  bool operator==(const SampleTuple&) const = default;
};

enum class DatasetKind { Factual, Counterfactual, Mixed };

std::string to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(const std::string& s);

struct Normalizer {
  double mean = 0.0;
  double std = 1.0;
  std::string fitted_on = "train";

  bool operator==(const Normalizer&) const = default;
};

inline constexpr double kStdFloor = 1e-6;
inline const std::vector<std::string> kSplitNames = {"train", "val", "test"};

struct Dataset {
  std::string name;
  int history_len = 0;
  int future_len = 0;
  DatasetKind kind = DatasetKind::Factual;
  std::map<std::string, std::vector<SampleTuple>> splits;
  std::optional<Normalizer> normalizer;

  const std::vector<SampleTuple>& split(const std::string& name) const;
  std::size_t size() const;

  /// Throws DataError on any invariant violation (lengths, empty text,
  /// duplicate ids across splits, kind/future consistency).
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

Dataset load_dataset(const std::filesystem::path& dir);
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);

Normalizer fit_normalizer(const Dataset& dataset, const std::string& split);
std::vector<double> apply_normalizer(const Normalizer& n, std::span<const double> x, bool inverse = false);

/// All history and future texts of a split, in record order.
std::vector<std::string> split_corpus(const Dataset& dataset, const std::string& split);

}  // namespace whatifts
