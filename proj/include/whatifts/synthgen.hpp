#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "whatifts/data_model.hpp"

namespace whatifts::synth {

enum class TrendType { Linear, Quadratic, Exponential, Logistic };
enum class Shapelet { Nothing, Peak, Sag, DoublePeaks, Platform };
enum class Segment { Beginning = 0, Middle = 1, End = 2 };

inline constexpr std::array<int, 4> kSeasonCycles = {0, 1, 2, 4};
inline constexpr double kNoiseStdMin = 0.02;
inline constexpr double kNoiseStdMax = 0.08;
inline constexpr double kBiasMagnitudeMin = 0.2;
inline constexpr double kBiasMagnitudeMax = 0.5;
inline constexpr double kShapeletProbability = 0.5;
inline constexpr double kSeasonAmplitudeMin = 0.4;
inline constexpr double kSeasonAmplitudeMax = 0.6;
inline constexpr double kShapeletAmplitudeMin = 0.5;
inline constexpr double kShapeletAmplitudeMax = 1.0;

std::string to_string(TrendType t);
std::string to_string(Shapelet s);
std::string to_string(Segment s);

struct AttributeSet {
  TrendType trend_type = TrendType::Linear;
  int direction = 1;  // +1 up, -1 down
  int season_cycles = 0;
  std::array<Shapelet, 3> shapelets{Shapelet::Nothing, Shapelet::Nothing, Shapelet::Nothing};
  double noise_std = 0.0;
  double bias = 0.0;

  bool operator==(const AttributeSet&) const = default;
};

/// History and future attributes of one sample. Trend type, noise level and
/// bias are intrinsic and shared; direction, cycles and shapelets may differ.
struct AttributePair {
  AttributeSet history;
  AttributeSet future;
};

using Rng = std::mt19937_64;

AttributePair sample_attributes(Rng& rng);

struct RenderOptions {
  double trend_amplitude = 1.0;  // 0 renders a flat trend
};

/// Rng consumption is independent of every attribute value, so two renders
/// with the same seed differ only by the attributes that changed.
std::vector<double> render_series(const AttributeSet& attrs, int length, Rng& rng, RenderOptions opts = {});

/// Base trend in [-1, 1] at normalized time u in [0, 1], before direction.
double base_trend(TrendType type, double u);

struct TemplateBank {
  int version = 0;
  std::vector<std::string> direction;
  std::vector<std::string> cycles;
  std::vector<std::string> shapelet;
  std::string up_name, down_name;
  std::array<std::string, 5> shape_names;  // indexed by Shapelet
  std::array<std::string, 3> segment_names;

  static const TemplateBank& builtin();
  static TemplateBank from_json(const std::string& text);
  const std::string& raw_json() const { return raw_; }

 private:
  std::string raw_;
};

std::string render_caption(const AttributeSet& attrs, Rng& rng, const TemplateBank& bank = TemplateBank::builtin());

struct SynthOutput {
  Dataset dataset;
  std::vector<AttributePair> attributes;  // aligned with train ⊕ val ⊕ test order
};

SynthOutput generate_with_attributes(int n, int history_len, int future_len, std::uint64_t seed);
Dataset generate_dataset(int n, int history_len, int future_len, std::uint64_t seed);

void write_template_bank(const std::filesystem::path& dir, const TemplateBank& bank = TemplateBank::builtin());
void write_attributes(const std::filesystem::path& file, const SynthOutput& out);

}  // namespace whatifts::synth
