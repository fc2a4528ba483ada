#include <complex>
#include <fstream>
#include <regex>
#include <sstream>

#include "helpers.hpp"
#include "whatifts/common.hpp"
#include "whatifts/synthgen.hpp"

using namespace whatifts;
using namespace whatifts::synth;

namespace {

// Independent O(n^2) DFT magnitude.
std::vector<double> dft_magnitude(const std::vector<double>& x) {
  const auto n = x.size();
  std::vector<double> mag(n / 2 + 1);
  for (std::size_t k = 0; k < mag.size(); ++k) {
    std::complex<double> acc = 0;
    for (std::size_t i = 0; i < n; ++i)
      acc += x[i] * std::polar(1.0, -2.0 * M_PI * static_cast<double>(k * i) / static_cast<double>(n));
    mag[k] = std::abs(acc);
  }
  return mag;
}

struct ParsedCaption {
  std::optional<int> direction;
  std::optional<int> cycles;
  std::array<std::string, 3> shapes{"nothing", "nothing", "nothing"};
  bool ok = true;
};

// Re-extracts extrinsic attributes from caption text with plain regexes,
// independent of the template bank.
ParsedCaption parse_caption(const std::string& caption) {
  ParsedCaption p;
  std::regex sentence_re(R"([^.]+\.)");
  const std::regex number_re(R"(\b(\d+)\b)");
  const std::regex dir_re(R"(\b(up|down)\b)");
  const std::regex shape_re(R"(\b(double peaks|peak|sag|platform)\b)");
  const std::regex seg_re(R"(\b(beginning|middle|end)\b)");
  for (auto it = std::sregex_iterator(caption.begin(), caption.end(), sentence_re); it != std::sregex_iterator(); ++it) {
    std::string s = it->str();
    std::transform(s.begin(), s.end(), s.begin(), ::tolower);
    std::smatch m;
    if (s.find("season") != std::string::npos) {
      if (!std::regex_search(s, m, number_re) || p.cycles) p.ok = false;
      else p.cycles = std::stoi(m[1]);
    } else if (s.find("trend") != std::string::npos) {
      if (!std::regex_search(s, m, dir_re) || p.direction) p.ok = false;
      else p.direction = m[1] == "up" ? 1 : -1;
    } else {
      std::smatch sm, gm;
      if (!std::regex_search(s, sm, shape_re) || !std::regex_search(s, gm, seg_re)) {
        p.ok = false;
        continue;
      }
      const std::string seg = gm[1];
      const int idx = seg == "beginning" ? 0 : seg == "middle" ? 1 : 2;
      if (p.shapes[idx] != "nothing") p.ok = false;
      std::string shape = sm[1];
      if (shape == "double peaks") shape = "double_peaks";
      p.shapes[idx] = shape;
    }
  }
  return p;
}

bool caption_matches(const std::string& caption, const AttributeSet& a) {
  auto p = parse_caption(caption);
  if (!p.ok || p.direction != a.direction || p.cycles != a.season_cycles) return false;
  for (int i = 0; i < 3; ++i)
    if (p.shapes[i] != to_string(a.shapelets[i])) return false;
  return true;
}

std::string slurp(const std::filesystem::path& f) {
  std::ifstream in(f);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("sample_attributes is deterministic and shares intrinsic attributes") {
  Rng a(11), b(11);
  for (int i = 0; i < 20; ++i) {
    auto x = sample_attributes(a);
    auto y = sample_attributes(b);
    CHECK(x.history == y.history);
    CHECK(x.future == y.future);
  }
  Rng rng(5);
  std::array<int, 4> counts{};
  int shared = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    auto p = sample_attributes(rng);
    ++counts[static_cast<int>(p.history.trend_type)];
    shared += p.history.trend_type == p.future.trend_type && p.history.noise_std == p.future.noise_std &&
              p.history.bias == p.future.bias;
  }
  for (int c : counts) {
    CHECK(c / double(n) >= 0.23);
    CHECK(c / double(n) <= 0.27);
  }
  CHECK(shared == n);
}

TEST_CASE("render_series: pure linear ramp") {
  AttributeSet a;
  a.trend_type = TrendType::Linear;
  a.direction = 1;
  Rng rng(1);
  auto x = render_series(a, 128, rng);
  REQUIRE(x.size() == 128);
  for (std::size_t i = 1; i < x.size(); ++i) CHECK(x[i] >= x[i - 1]);
  CHECK(x.front() == doctest::Approx(-1.0));
  CHECK(x.back() == doctest::Approx(1.0));
  CHECK_THROWS_AS(render_series(a, 5, rng), UsageError);
}

TEST_CASE("render_series: seasonality shows at the cycle bin (spectral oracle)") {
  for (int cycles : {1, 2, 4}) {
    AttributeSet a;
    a.season_cycles = cycles;
    Rng rng(42 + cycles);
    RenderOptions opts;
    opts.trend_amplitude = 0.0;
    auto mag = dft_magnitude(render_series(a, 128, rng, opts));
    const auto peak = std::max_element(mag.begin() + 1, mag.end()) - mag.begin();
    CHECK(peak == cycles);
  }
}

TEST_CASE("render_series: bias is additive under an identical seed") {
  Rng r0(9);
  auto pair = sample_attributes(r0);
  auto a = pair.history;
  a.bias = 0.0;
  auto b = a;
  b.bias = 0.8;
  Rng ra(123), rb(123);
  auto xa = render_series(a, 96, ra);
  auto xb = render_series(b, 96, rb);
  for (std::size_t i = 0; i < xa.size(); ++i) CHECK(xb[i] - xa[i] == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("render_caption examples") {
  AttributeSet a;
  a.direction = 1;
  a.season_cycles = 1;
  a.shapelets = {Shapelet::Nothing, Shapelet::Nothing, Shapelet::Sag};
  Rng rng(2);
  auto c = render_caption(a, rng);
  auto tokens = split_tokens(c);
  for (const char* w : {"up", "1", "sag", "end"}) CHECK(std::find(tokens.begin(), tokens.end(), w) != tokens.end());

  AttributeSet b;
  b.direction = -1;
  b.season_cycles = 0;
  auto cb = render_caption(b, rng);
  auto tb = split_tokens(cb);
  CHECK(std::find(tb.begin(), tb.end(), "down") != tb.end());
  CHECK(std::find(tb.begin(), tb.end(), "0") != tb.end());
  for (const char* w : {"peak", "sag", "platform", "peaks"}) CHECK(std::find(tb.begin(), tb.end(), w) == tb.end());

  // Different rngs may change wording but never the mentioned attributes.
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng r(s);
    CHECK(caption_matches(render_caption(a, r), a));
  }
}

TEST_CASE("caption parse-back oracle recovers extrinsic attributes") {
  auto out = generate_with_attributes(600, 32, 32, 77);
  std::size_t i = 0;
  int failures = 0;
  for (const auto& split : kSplitNames)
    for (const auto& r : out.dataset.split(split)) {
      const auto& attrs = out.attributes[i++];
      failures += !caption_matches(r.history_text, attrs.history);
      failures += !caption_matches(r.future_text, attrs.future);
    }
  CHECK(i == 600);
  CHECK(failures == 0);
}

TEST_CASE("generate_dataset split arithmetic and determinism") {
  auto small = generate_dataset(10, 16, 16, 1);
  CHECK(small.split("train").size() == 8);
  CHECK(small.split("val").size() == 1);
  CHECK(small.split("test").size() == 1);

  auto d1 = testutil::temp_dir("gen1");
  auto d2 = testutil::temp_dir("gen2");
  save_dataset(generate_dataset(50, 32, 32, 99), d1);
  save_dataset(generate_dataset(50, 32, 32, 99), d2);
  for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl", "meta.json"}) CHECK(slurp(d1 / f) == slurp(d2 / f));
  CHECK(slurp(d1 / "train.jsonl") != [&] {
    auto d3 = testutil::temp_dir("gen3");
    save_dataset(generate_dataset(50, 32, 32, 100), d3);
    return slurp(d3 / "train.jsonl");
  }());
}

TEST_CASE("generated samples carry factual futures and valid ids") {
  auto ds = generate_dataset(30, 24, 24, 4);
  CHECK_NOTHROW(ds.validate());
  CHECK(ds.split("train").front().sample_id == "synth-000000");
  for (const auto& r : ds.split("test")) {
    CHECK(r.future.has_value());
    CHECK(r.history.size() == 24);
  }
}

TEST_CASE("template bank round trip") {
  const auto& bank = TemplateBank::builtin();
  auto copy = TemplateBank::from_json(bank.raw_json());
  CHECK(copy.direction == bank.direction);
  CHECK(copy.cycles == bank.cycles);
  CHECK(copy.shapelet == bank.shapelet);
  CHECK(copy.shape_names == bank.shape_names);
  auto dir = testutil::temp_dir("tpl");
  write_template_bank(dir);
  auto again = TemplateBank::from_json(slurp(dir / "templates.json"));
  CHECK(again.segment_names == bank.segment_names);
  CHECK_THROWS(TemplateBank::from_json("{\"version\": 1}"));
}
