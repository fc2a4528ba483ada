#include "whatifts/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "whatifts/common.hpp"
#include "whatifts_templates.hpp"  // generated from data/templates.json

namespace whatifts::synth {

using nlohmann::json;

std::string to_string(TrendType t) {
  switch (t) {
    case TrendType::Linear:
      return "linear";
    case TrendType::Quadratic:
      return "quadratic";
    case TrendType::Exponential:
      return "exponential";
    case TrendType::Logistic:
      return "logistic";
  }
  return "linear";
}

std::string to_string(Shapelet s) {
  switch (s) {
    case Shapelet::Nothing:
      return "nothing";
    case Shapelet::Peak:
      return "peak";
    case Shapelet::Sag:
      return "sag";
    case Shapelet::DoublePeaks:
      return "double_peaks";
    case Shapelet::Platform:
      return "platform";
  }
  return "nothing";
}

std::string to_string(Segment s) {
  switch (s) {
    case Segment::Beginning:
      return "beginning";
    case Segment::Middle:
      return "middle";
    case Segment::End:
      return "end";
  }
  return "beginning";
}

namespace {

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

int pick(Rng& rng, int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); }

AttributeSet sample_extrinsic(Rng& rng, AttributeSet base) {
  base.direction = pick(rng, 2) == 0 ? 1 : -1;
  base.season_cycles = kSeasonCycles[pick(rng, 4)];
  for (auto& s : base.shapelets) {
    const bool inject = uniform(rng, 0.0, 1.0) < kShapeletProbability;
    const int shape = pick(rng, 4);  // always drawn so consumption is fixed
    s = inject ? static_cast<Shapelet>(1 + shape) : Shapelet::Nothing;
  }
  return base;
}

double gaussian_bump(double i, double center, double width) {
  const double z = (i - center) / width;
  return std::exp(-0.5 * z * z);
}

}  // namespace

AttributePair sample_attributes(Rng& rng) {
  AttributeSet intrinsic;
  intrinsic.trend_type = static_cast<TrendType>(pick(rng, 4));
  intrinsic.noise_std = uniform(rng, kNoiseStdMin, kNoiseStdMax);
  const int bias_range = pick(rng, 3);
  const double magnitude = uniform(rng, kBiasMagnitudeMin, kBiasMagnitudeMax);
  intrinsic.bias = bias_range == 0 ? -magnitude : (bias_range == 1 ? 0.0 : magnitude);
  AttributePair pair;
  pair.history = sample_extrinsic(rng, intrinsic);
  pair.future = sample_extrinsic(rng, intrinsic);
  return pair;
}

double base_trend(TrendType type, double u) {
  switch (type) {
    case TrendType::Linear:
      return 2.0 * u - 1.0;
    case TrendType::Quadratic:
      return 2.0 * u * u - 1.0;
    case TrendType::Exponential:
      return 2.0 * std::expm1(3.0 * u) / std::expm1(3.0) - 1.0;
    case TrendType::Logistic: {
      auto f = [](double v) { return 1.0 / (1.0 + std::exp(-10.0 * (v - 0.5))); };
      const double lo = f(0.0), hi = f(1.0);
      return 2.0 * (f(u) - lo) / (hi - lo) - 1.0;
    }
  }
  return 0.0;
}

std::vector<double> render_series(const AttributeSet& attrs, int length, Rng& rng, RenderOptions opts) {
  if (length < 12) throw UsageError("invalid-length: series length must be >= 12, got " + std::to_string(length));
  const auto n = static_cast<std::size_t>(length);
  std::vector<double> x(n, 0.0);

  for (std::size_t i = 0; i < n; ++i) {
    const double u = static_cast<double>(i) / static_cast<double>(n - 1);
    x[i] = opts.trend_amplitude * attrs.direction * base_trend(attrs.trend_type, u);
  }

  const double amplitude = uniform(rng, kSeasonAmplitudeMin, kSeasonAmplitudeMax);
  const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  if (attrs.season_cycles > 0) {
    for (std::size_t i = 0; i < n; ++i) {
      const double u = static_cast<double>(i) / static_cast<double>(n);
      x[i] += amplitude * std::sin(2.0 * std::numbers::pi * attrs.season_cycles * u + phase);
    }
  }

  for (int seg = 0; seg < 3; ++seg) {
    const double a1 = uniform(rng, kShapeletAmplitudeMin, kShapeletAmplitudeMax);
    const double a2 = uniform(rng, kShapeletAmplitudeMin, kShapeletAmplitudeMax);
    const std::size_t begin = n * seg / 3;
    const std::size_t end = n * (seg + 1) / 3;
    const double seg_len = static_cast<double>(end - begin);
    const double center = static_cast<double>(begin) + 0.5 * (seg_len - 1.0);
    switch (attrs.shapelets[seg]) {
      case Shapelet::Nothing:
        break;
      case Shapelet::Peak:
      case Shapelet::Sag: {
        const double sign = attrs.shapelets[seg] == Shapelet::Peak ? 1.0 : -1.0;
        for (std::size_t i = begin; i < end; ++i)
          x[i] += sign * a1 * gaussian_bump(static_cast<double>(i), center, seg_len / 6.0);
        break;
      }
      case Shapelet::DoublePeaks: {
        const double c1 = static_cast<double>(begin) + seg_len / 3.0;
        const double c2 = static_cast<double>(begin) + 2.0 * seg_len / 3.0;
        for (std::size_t i = begin; i < end; ++i) {
          const auto fi = static_cast<double>(i);
          x[i] += a1 * gaussian_bump(fi, c1, seg_len / 10.0) + a2 * gaussian_bump(fi, c2, seg_len / 10.0);
        }
        break;
      }
      case Shapelet::Platform: {
        const auto lo = begin + static_cast<std::size_t>(seg_len / 4.0);
        const auto hi = begin + static_cast<std::size_t>(3.0 * seg_len / 4.0);
        for (std::size_t i = lo; i < hi; ++i) x[i] += a1;
        break;
      }
    }
  }

  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) x[i] += attrs.noise_std * normal(rng) + attrs.bias;
  return x;
}

TemplateBank TemplateBank::from_json(const std::string& text) {
  const json j = json::parse(text);
  TemplateBank b;
  b.raw_ = text;
  b.version = j.at("version").get<int>();
  b.direction = j.at("direction").get<std::vector<std::string>>();
  b.cycles = j.at("cycles").get<std::vector<std::string>>();
  b.shapelet = j.at("shapelet").get<std::vector<std::string>>();
  b.up_name = j.at("direction_names").at("up").get<std::string>();
  b.down_name = j.at("direction_names").at("down").get<std::string>();
  const auto& shapes = j.at("shape_names");
  b.shape_names = {"", shapes.at("peak").get<std::string>(), shapes.at("sag").get<std::string>(),
                   shapes.at("double_peaks").get<std::string>(), shapes.at("platform").get<std::string>()};
  const auto segs = j.at("segment_names").get<std::vector<std::string>>();
  if (segs.size() != 3 || b.direction.empty() || b.cycles.empty() || b.shapelet.empty())
    throw DataError("schema-violation: malformed template bank");
  std::copy(segs.begin(), segs.end(), b.segment_names.begin());
  return b;
}

const TemplateBank& TemplateBank::builtin() {
  static const TemplateBank bank = from_json(kBuiltinTemplatesJson);
  return bank;
}

namespace {

std::string fill(std::string tpl, const std::string& key, const std::string& value) {
  const std::string pattern = "{" + key + "}";
  for (auto pos = tpl.find(pattern); pos != std::string::npos; pos = tpl.find(pattern, pos + value.size()))
    tpl.replace(pos, pattern.size(), value);
  return tpl;
}

}  // namespace

std::string render_caption(const AttributeSet& attrs, Rng& rng, const TemplateBank& bank) {
  std::vector<std::string> sentences;
  const auto& dir_tpl = bank.direction[pick(rng, static_cast<int>(bank.direction.size()))];
  sentences.push_back(fill(dir_tpl, "direction", attrs.direction > 0 ? bank.up_name : bank.down_name));
  const auto& cyc_tpl = bank.cycles[pick(rng, static_cast<int>(bank.cycles.size()))];
  sentences.push_back(fill(cyc_tpl, "cycles", std::to_string(attrs.season_cycles)));
  for (int seg = 0; seg < 3; ++seg) {
    if (attrs.shapelets[seg] == Shapelet::Nothing) continue;
    const auto& tpl = bank.shapelet[pick(rng, static_cast<int>(bank.shapelet.size()))];
    auto s = fill(tpl, "shape", bank.shape_names[static_cast<int>(attrs.shapelets[seg])]);
    s = fill(s, "segment", bank.segment_names[seg]);
    sentences.push_back(s);
  }
  std::shuffle(sentences.begin(), sentences.end(), rng);
  std::string out;
  for (const auto& s : sentences) {
    if (!out.empty()) out += ' ';
    out += s;
  }
  return out;
}

SynthOutput generate_with_attributes(int n, int history_len, int future_len, std::uint64_t seed) {
  if (n < 10) throw UsageError("gen-synth requires n >= 10, got " + std::to_string(n));
  const int n_val = n / 10;
  const int n_test = n / 10;
  const int n_train = n - n_val - n_test;

  SynthOutput out;
  auto& d = out.dataset;
  d.name = "synth";
  d.history_len = history_len;
  d.future_len = future_len;
  d.kind = DatasetKind::Factual;
  for (const auto& s : kSplitNames) d.splits[s];
  out.attributes.reserve(n);

  char id[32];
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    const AttributePair pair = sample_attributes(rng);
    SampleTuple s;
    std::snprintf(id, sizeof(id), "synth-%06d", i);
    s.sample_id = id;
    s.channel_id = 0;
    s.history = render_series(pair.history, history_len, rng);
    s.future = render_series(pair.future, future_len, rng);
    s.history_text = render_caption(pair.history, rng);
    s.future_text = render_caption(pair.future, rng);
    const char* split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
    d.splits[split].push_back(std::move(s));
    out.attributes.push_back(pair);
  }
  return out;
}

Dataset generate_dataset(int n, int history_len, int future_len, std::uint64_t seed) {
  return generate_with_attributes(n, history_len, future_len, seed).dataset;
}

void write_template_bank(const std::filesystem::path& dir, const TemplateBank& bank) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "templates.json");
  if (!out) throw DataError("cannot write " + (dir / "templates.json").string());
  out << bank.raw_json();
}

namespace {

json attrs_json(const AttributeSet& a) {
  json shapes = json::array();
  for (auto s : a.shapelets) shapes.push_back(to_string(s));
  return {{"trend_type", to_string(a.trend_type)},
          {"direction", a.direction > 0 ? "up" : "down"},
          {"season_cycles", a.season_cycles},
          {"shapelets", shapes},
          {"noise_std", a.noise_std},
          {"bias", a.bias}};
}

}  // namespace

void write_attributes(const std::filesystem::path& file, const SynthOutput& out) {
  std::ofstream os(file);
  if (!os) throw DataError("cannot write " + file.string());
  std::size_t i = 0;
  for (const auto& split : kSplitNames) {
    for (const auto& s : out.dataset.split(split)) {
      const auto& p = out.attributes.at(i++);
      os << json{{"sample_id", s.sample_id}, {"history", attrs_json(p.history)}, {"future", attrs_json(p.future)}}.dump()
         << "\n";
    }
  }
}

}  // namespace whatifts::synth
