#include <fstream>

#include "helpers.hpp"
#include "whatifts/common.hpp"
#include "whatifts/layers.hpp"
#include "whatifts/synthgen.hpp"
#include "whatifts/training.hpp"

using namespace whatifts;

namespace {

auto i64(std::vector<std::int64_t> v) { return torch::tensor(v); }
torch::Tensor rowd(std::vector<double> v) { return torch::tensor(v, torch::kDouble).unsqueeze(0); }

EstimatorFn constant_fn(torch::Tensor value) {
  return [value](const torch::Tensor& x, const torch::Tensor&, const torch::Tensor&) { return value.expand_as(x).clone(); };
}

ForecastModel toy_model(std::uint64_t seed, int lh = 8, int lf = 8) {
  auto v = testutil::toy_vocab();
  torch::manual_seed(seed);
  auto m = ForecastModel::create(testutil::toy_estimator_config(v), make_schedule(20, 1e-3, 0.2, 5), v,
                                 Normalizer{0.0, 1.0}, lh, lf);
  m.net->to(torch::kDouble);
  return m;
}

}  // namespace

TEST_CASE("forecast_loss examples") {
  auto s = make_schedule(20, 1e-3, 0.2, 5);
  auto h = rowd({1, 2, 3, 4});
  auto f = rowd({5, 6, 7, 8});
  auto eps = rowd({0.1, -0.2, 0.3, 0.5});
  auto ids = torch::zeros({1, 8}, torch::kInt64);
  auto b = make_masked_batch(h, f, ids, i64({4}), eps, s);
  CHECK(torch::equal(b.mask, torch::tensor({0., 0., 0., 0., 1., 1., 1., 1.}).to(torch::kDouble)));
  CHECK(torch::equal(b.x_mixed.slice(1, 0, 4), h));

  // Perfect estimator over the future span with garbage over the history gives zero loss.
  auto perfect = torch::cat({torch::full({1, 4}, 9.0, torch::kDouble), eps}, 1);
  CHECK(forecast_loss(constant_fn(perfect), b).item<double>() == 0.0);
  // Constant 1 against target 0 everywhere: loss 1.
  auto zero_eps = torch::zeros_like(eps);
  auto b0 = make_masked_batch(h, f, ids, i64({4}), zero_eps, s);
  CHECK(forecast_loss(constant_fn(torch::ones({1, 8}, torch::kDouble)), b0).item<double>() == doctest::Approx(1.0));
  // Targets (0, 0, 2, 2) on a length-4 future, estimator 0: loss 2.
  auto b2 = make_masked_batch(h, f, ids, i64({4}), rowd({0, 0, 2, 2}), s);
  CHECK(forecast_loss(constant_fn(torch::zeros({1, 8}, torch::kDouble)), b2).item<double>() == doctest::Approx(2.0));
}

TEST_CASE("attribution_loss examples") {
  auto s = make_schedule(20, 1e-3, 0.2, 5);
  auto h = rowd({1, -1, 0.5, 2});
  auto eps = rowd({0.3, 0.3, -0.1, 0.8});
  CHECK(attribution_loss(constant_fn(eps), h, torch::zeros({1, 8}, torch::kInt64), i64({7}), eps, s).item<double>() ==
        0.0);
  auto e2 = rowd({0, 0, 2, 2});
  CHECK(attribution_loss(constant_fn(torch::zeros({1, 4}, torch::kDouble)), h, torch::zeros({1, 8}, torch::kInt64),
                         i64({7}), e2, s)
            .item<double>() == doctest::Approx(2.0));
}

TEST_CASE("masked loss sends exactly zero gradient to the history span") {
  auto m = toy_model(3);
  testutil::randomize(*m.net, 11);
  auto s = m.schedule;
  auto h = torch::randn({2, 8}, torch::kDouble);
  auto f = torch::randn({2, 8}, torch::kDouble);
  auto eps = torch::randn({2, 8}, torch::kDouble);
  auto ids = m.ids({"The trend goes up.", "A sag appears in the middle."});
  auto b = make_masked_batch(h, f, ids, i64({3, 15}), eps, s);
  torch::Tensor out;
  EstimatorFn fn = [&](const torch::Tensor& x, const torch::Tensor& i, const torch::Tensor& t) {
    out = m.net->forward(x, i, t);
    out.retain_grad();
    return out;
  };
  forecast_loss(fn, b).backward();
  auto g = out.grad();
  CHECK(g.slice(1, 0, 8).abs().max().item<double>() == 0.0);
  CHECK(g.slice(1, 8, 16).abs().max().item<double>() > 0.0);
}

TEST_CASE("finite-difference checks of forecast and attribution losses") {
  auto m = toy_model(5);
  testutil::randomize(*m.net, 13);
  auto s = m.schedule;
  auto h = torch::randn({2, 8}, torch::kDouble);
  auto f = torch::randn({2, 8}, torch::kDouble);
  auto eps = torch::randn({2, 8}, torch::kDouble);
  auto ids = m.ids({"There is a peak at end.", "The trend goes down."});
  auto fn = as_estimator_fn(m.net);
  auto b = make_masked_batch(h, f, ids, i64({2, 9}), eps, s);
  auto lf = testutil::finite_difference_check(m.net->parameters(), [&] { return forecast_loss(fn, b); });
  CHECK(lf.max_rel < 1e-3);
  auto la = testutil::finite_difference_check(m.net->parameters(),
                                              [&] { return attribution_loss(fn, h, ids, i64({5, 20}), eps, s); });
  CHECK(la.max_rel < 1e-3);
}

TEST_CASE("joint loss with lambda_A = 0 reduces to the forecast term") {
  auto m = toy_model(6);
  testutil::randomize(*m.net, 2);
  SplitTensors data;
  data.history = torch::randn({4, 8}, torch::kDouble);
  data.future = torch::randn({4, 8}, torch::kDouble);
  data.history_ids = m.ids({"up", "down", "peak", "sag"});
  data.future_ids = m.ids({"down", "up", "sag", "peak"});
  auto idx = torch::arange(4);
  auto g1 = make_generator(1);
  auto full = joint_loss(m, data, idx, 2.0, 1.0, g1);
  auto g2 = make_generator(1);
  auto only = joint_loss(m, data, idx, 2.0, 0.0, g2);
  CHECK(only.attribution.item<double>() == 0.0);
  CHECK(only.total.item<double>() == doctest::Approx(2.0 * only.forecast.item<double>()));
  CHECK(full.forecast.item<double>() == doctest::Approx(only.forecast.item<double>()));
  CHECK(full.total.item<double>() ==
        doctest::Approx(2.0 * full.forecast.item<double>() + full.attribution.item<double>()));
}

TEST_CASE("train config validation and JSON") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.lambda_forecast = 0;
  c.lambda_attribution = 0;
  CHECK_THROWS_AS(c.validate(), UsageError);
  TrainConfig d;
  d.epochs = 7;
  d.batch_size = 3;
  auto back = TrainConfig::from_json(d.to_json());
  CHECK(back.epochs == 7);
  CHECK(back.batch_size == 3);
  CHECK(back.lambda_forecast == 2.0);
  CHECK(back.lambda_attribution == 1.0);
}

namespace {

TrainConfig toy_train_config(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.learning_rate = 3e-3;
  c.seed = 4;
  c.T = 50;
  c.beta_start = 1e-3;
  c.beta_end = 0.2;
  c.S = 5;
  c.estimator.patch_len = 4;
  c.estimator.width = 16;
  c.estimator.depth = 1;
  c.estimator.heads = 2;
  c.estimator.text_layers = 1;
  c.estimator.max_tokens = 16;
  c.val_samples = 16;
  return c;
}

std::string slurp(const std::filesystem::path& f) {
  std::ifstream in(f, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("toy training reduces the loss, logs epochs and round-trips the checkpoint") {
  auto ds = synth::generate_dataset(160, 16, 16, 3);
  auto dir = testutil::temp_dir("train");
  auto res = train(toy_train_config(30), ds, dir / "model.ckpt");
  REQUIRE(res.epochs.size() == 30);
  double first = 0, last = 0;
  for (int i = 0; i < 3; ++i) first += res.epochs[i].total / 3;
  for (int i = 27; i < 30; ++i) last += res.epochs[i].total / 3;
  CHECK(last < 0.5 * first);
  CHECK(std::filesystem::exists(dir / "model.ckpt.last"));
  CHECK(std::filesystem::exists(dir / "model.ckpt.best"));
  std::ifstream log(dir / "train.log.jsonl");
  int lines = 0;
  for (std::string l; std::getline(log, l);) {
    auto j = nlohmann::json::parse(l);
    CHECK(j.contains("L_F"));
    CHECK(j.contains("L_A"));
    ++lines;
  }
  CHECK(lines == 30);

  auto m = ForecastModel::load(dir / "model.ckpt");
  CHECK(m.history_len == 16);
  CHECK(m.future_len == 16);
  CHECK(m.schedule.T == 50);
  m.save(dir / "copy.ckpt");
  auto again = ForecastModel::load(dir / "copy.ckpt");
  auto a = m.net->named_parameters();
  auto b = again.net->named_parameters();
  for (const auto& p : a) CHECK(torch::equal(p.value(), b[p.key()]));
  CHECK(again.vocab == m.vocab);
  CHECK(again.normalizer == m.normalizer);
}

TEST_CASE("training is deterministic under a fixed seed") {
  auto ds = synth::generate_dataset(80, 16, 16, 8);
  auto d1 = testutil::temp_dir("det1");
  auto d2 = testutil::temp_dir("det2");
  auto r1 = train(toy_train_config(2), ds, d1 / "m.ckpt");
  auto r2 = train(toy_train_config(2), ds, d2 / "m.ckpt");
  CHECK(r1.epochs.back().total == r2.epochs.back().total);
  CHECK(slurp(d1 / "m.ckpt") == slurp(d2 / "m.ckpt"));
}

TEST_CASE("training rejects datasets smaller than one batch") {
  auto ds = synth::generate_dataset(12, 16, 16, 8);
  auto dir = testutil::temp_dir("small");
  CHECK_THROWS_AS(train(toy_train_config(1), ds, dir / "m.ckpt"), DataError);
}

TEST_CASE("loading a corrupt forecaster checkpoint fails") {
  auto dir = testutil::temp_dir("corrupt");
  {
    std::ofstream f(dir / "m.ckpt", std::ios::binary);
    f << "garbage";
  }
  CHECK_THROWS_AS(ForecastModel::load(dir / "m.ckpt"), CheckpointError);
  CHECK_THROWS_AS(ForecastModel::load(dir / "none.ckpt"), CheckpointError);
}
