#include <fstream>

#include "helpers.hpp"
#include "whatifts/common.hpp"
#include "whatifts/evaluation.hpp"
#include "whatifts/synthgen.hpp"

using namespace whatifts;

namespace {

DttcModel toy_dttc(const Vocab& v, const Normalizer& n) {
  torch::manual_seed(8);
  auto m = DttcModel::create(testutil::toy_dttc_config(v, 16), v, n);
  testutil::randomize(*m.net, 12);
  m.net->eval();
  return m;
}

ForecastModel toy_forecaster(const Vocab& v, const Normalizer& n) {
  auto cfg = testutil::toy_estimator_config(v);
  cfg.max_len = 32;
  torch::manual_seed(6);
  auto m = ForecastModel::create(cfg, make_schedule(20, 1e-3, 0.2, 4), v, n, 16, 16);
  testutil::randomize(*m.net, 14, 0.2);
  m.net->eval();
  return m;
}

struct Fixture {
  Dataset ds = synth::generate_dataset(60, 16, 16, 2);
  Normalizer norm = fit_normalizer(ds, "train");
  Vocab vocab = build_vocab(split_corpus(ds, "train"), 1, 8);
  DttcModel dttc = toy_dttc(vocab, norm);
};

}  // namespace

TEST_CASE("mae_mse examples") {
  auto [a, b] = mae_mse(std::vector<std::vector<double>>{{1, 2, 3}}, {{1, 2, 3}});
  CHECK(a == 0.0);
  CHECK(b == 0.0);
  auto [c, d] = mae_mse(std::vector<std::vector<double>>{{0, 0}}, {{1, -1}});
  CHECK(c == 1.0);
  CHECK(d == 1.0);
  auto [e, f] = mae_mse(std::vector<std::vector<double>>{{0, 0}}, {{2, 0}});
  CHECK(e == 1.0);
  CHECK(f == 2.0);
  CHECK_THROWS_AS(mae_mse(std::vector<std::vector<double>>{{0}}, {{1, 2}}), UsageError);
}

TEST_CASE("mae_mse properties") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> p(3, std::vector<double>(5)), t = p;
    for (auto& r : p)
      for (auto& x : r) x = nd(rng);
    for (auto& r : t)
      for (auto& x : r) x = nd(rng);
    auto [mae, mse] = mae_mse(p, t);
    auto [mae2, mse2] = mae_mse(t, p);
    CHECK(mae >= 0);
    CHECK(mae == doctest::Approx(mae2));
    CHECK(mse == doctest::Approx(mse2));
    CHECK(mae * mae <= mse + 1e-12);  // Jensen
    auto [z, zz] = mae_mse(p, p);
    CHECK(z == 0.0);
    CHECK(zz == 0.0);
    auto tp = torch::tensor(p[0], torch::kDouble);
    auto tt = torch::tensor(t[0], torch::kDouble);
    auto [tm, ts] = mae_mse(tp, tt);
    auto [vm, vs] = mae_mse(std::vector<std::vector<double>>{p[0]}, {t[0]});
    CHECK(tm == doctest::Approx(vm));
    CHECK(ts == doctest::Approx(vs));
  }
}

TEST_CASE("an oracle forecaster scores zero error; the median is taken over draws") {
  Fixture fx;
  const auto& test = fx.ds.split("test");
  Forecaster oracle = [&](const EvalBatch& batch, int draw) {
    std::vector<double> flat;
    for (auto i : batch.rows) {
      auto f = apply_normalizer(fx.norm, *test[i].future);
      flat.insert(flat.end(), f.begin(), f.end());
    }
    auto t = torch::tensor(flat, torch::kDouble).view({static_cast<std::int64_t>(batch.rows.size()), -1});
    // Draws 1 and 2 are wildly off in opposite directions; the median is the oracle.
    if (draw == 1) return t + 100.0;
    if (draw == 2) return t - 100.0;
    return t;
  };
  EvalOptions opts;
  opts.num_samples = 3;
  opts.batch_size = 4;
  auto r = evaluate_forecaster(oracle, fx.dttc, fx.ds, fx.norm, opts);
  CHECK(r.n == static_cast<int>(test.size()));
  CHECK(*r.mae == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(*r.mse == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(*r.mae_raw <= 1e-9);
  CHECK(validate_report_json(r.to_json()) == "");
}

TEST_CASE("counterfactual reports omit error metrics") {
  Fixture fx;
  Forecaster zeros = [](const EvalBatch& batch, int) {
    return torch::zeros({static_cast<std::int64_t>(batch.rows.size()), 16}, torch::kDouble);
  };
  EvalOptions opts;
  opts.setting = EvalSetting::Counterfactual;
  auto r = evaluate_forecaster(zeros, fx.dttc, fx.ds, fx.norm, opts);
  auto j = r.to_json();
  for (const char* k : {"mae", "mse", "mae_raw", "mse_raw"}) CHECK_FALSE(j.contains(k));
  CHECK(j.contains("dttc_i"));
  CHECK(validate_report_json(j) == "");
  j["mae"] = 0.1;
  CHECK(validate_report_json(j) != "");
}

TEST_CASE("report JSON round trip and schema checks") {
  EvalReport r;
  r.dataset = "synth";
  r.mae = 0.5;
  r.mse = 0.25;
  r.mae_raw = 1.0;
  r.mse_raw = 1.0;
  r.dttc_i = 3.5;
  r.dttc_e = -1.25;
  r.n = 10;
  r.num_samples = 3;
  r.model_checkpoint = "abc";
  r.dttc_checkpoint = "def";
  r.seed = 7;
  r.wall_time_s = 0.5;
  CHECK(EvalReport::from_json(r.to_json()) == r);
  auto j = r.to_json();
  j.erase("mse");
  CHECK(validate_report_json(j) != "");
  j = r.to_json();
  j["n"] = 0;
  CHECK(validate_report_json(j) != "");
  CHECK_THROWS_AS(EvalReport::from_json(j), DataError);
  CHECK(eval_setting_from_string("counterfactual") == EvalSetting::Counterfactual);
  CHECK_THROWS_AS(eval_setting_from_string("other"), UsageError);
}

TEST_CASE("persistence baseline") {
  CHECK(persistence_forecast({1, 2, 3, 4}, 2) == std::vector<double>{3, 4});
  CHECK(persistence_forecast({1, 2}, 5) == std::vector<double>{1, 2, 1, 2, 1});
  Dataset ds;
  ds.name = "p";
  ds.history_len = 2;
  ds.future_len = 2;
  ds.splits["test"] = {testutil::make_sample("a", {0, 1}, {0, 1})};
  auto [mae, mse] = persistence_mae_mse(ds, Normalizer{0, 1}, "test");
  CHECK(mae == 0.0);
  CHECK(mse == 0.0);
}

TEST_CASE("model evaluation is reproducible and respects the attribution option") {
  Fixture fx;
  auto model = toy_forecaster(fx.vocab, fx.norm);
  EvalOptions opts;
  opts.num_samples = 2;
  opts.seed = 3;
  auto a = evaluate(model, fx.dttc, fx.ds, opts);
  auto b = evaluate(model, fx.dttc, fx.ds, opts);
  CHECK(*a.mae == *b.mae);
  CHECK(a.dttc_i == b.dttc_i);
  opts.use_attribution = false;
  auto c = evaluate(model, fx.dttc, fx.ds, opts);
  auto d = evaluate(model, fx.dttc, fx.ds, opts);
  CHECK(*c.mae == *d.mae);
  CHECK_FALSE(c.use_attribution);
  opts.seed = 4;
  auto e = evaluate(model, fx.dttc, fx.ds, opts);
  CHECK(*e.mae != *c.mae);
}

TEST_CASE("export_initial_noise rows and determinism") {
  Fixture fx;
  auto model = toy_forecaster(fx.vocab, fx.norm);
  auto dir = testutil::temp_dir("noise");
  NoiseExportOptions o;
  o.control_seed = 5;
  o.limit = 4;
  CHECK(export_initial_noise(model, fx.ds, dir / "a.jsonl", o) == 4);
  export_initial_noise(model, fx.ds, dir / "b.jsonl", o);
  std::ifstream fa(dir / "a.jsonl"), fb(dir / "b.jsonl");
  std::string la, lb;
  int rows = 0;
  while (std::getline(fa, la)) {
    REQUIRE(std::getline(fb, lb));
    CHECK(la == lb);
    auto j = nlohmann::json::parse(la);
    CHECK(j["attributed"].size() == 16);
    CHECK(j["control"].size() == 16);
    CHECK(j["sample_id"] == fx.ds.split("test")[rows].sample_id);
    ++rows;
  }
  CHECK(rows == 4);
}
