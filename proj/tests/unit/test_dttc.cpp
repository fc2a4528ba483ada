#include "helpers.hpp"
#include "whatifts/common.hpp"
#include "whatifts/dttc.hpp"
#include "whatifts/synthgen.hpp"

using namespace whatifts;

namespace {

torch::Tensor mat(std::vector<std::vector<double>> rows) {
  std::vector<double> flat;
  for (auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return torch::tensor(flat, torch::kDouble).view({static_cast<std::int64_t>(rows.size()), -1});
}

DttcModel toy_dttc(std::uint64_t seed, bool dbl = true) {
  torch::manual_seed(seed);
  auto m = DttcModel::create(testutil::toy_dttc_config(testutil::toy_vocab()), testutil::toy_vocab(), Normalizer{0.5, 2.0});
  if (dbl) m.net->to(torch::kDouble);
  testutil::randomize(*m.net, seed + 7);
  return m;
}

}  // namespace

TEST_CASE("dttc_scores examples") {
  auto one = mat({{1, 0}});
  auto s = dttc_scores(one, one, one, one);
  CHECK(s.intrinsic == doctest::Approx(1.0));
  CHECK(s.extrinsic == doctest::Approx(1.0));
  auto s2 = dttc_scores(mat({{1, 0}}), mat({{0, 1}}), mat({{1, 0}}), mat({{0, 1}}));
  CHECK(s2.intrinsic == 0.0);
  CHECK(s2.extrinsic == 0.0);
  auto s3 = dttc_scores(mat({{1, 1}, {2, 0}}), mat({{1, 1}, {2, 0}}), mat({{1, 0}}).expand({2, 2}), mat({{1, 0}, {1, 0}}));
  CHECK(s3.intrinsic == doctest::Approx(3.0));
  CHECK_THROWS_AS(dttc_scores(mat({{1, 0}}), mat({{1, 0}, {0, 1}}), mat({{1, 0}}), mat({{1, 0}})), UsageError);
}

TEST_CASE("contrastive loss of identical rows is ln 2 at unit scale") {
  auto q = mat({{1, 0}, {1, 0}});
  auto l = contrastive_loss(q, q, torch::ones({}, torch::kDouble));
  CHECK(l.item<double>() == doctest::Approx(std::log(2.0)));
  auto orth = mat({{1, 0}, {0, 1}});
  auto sharp = contrastive_loss(orth, orth, torch::full({}, 50.0, torch::kDouble));
  CHECK(sharp.item<double>() < 1e-6);
}

TEST_CASE("retrieval accuracy: oracle, ties and chance") {
  auto eye = torch::eye(50, torch::kDouble);
  CHECK(retrieval_accuracy(eye, 3, 1) == 100.0);
  CHECK(retrieval_accuracy(torch::ones({50, 50}, torch::kDouble), 3, 1) == 0.0);
  auto gen = make_generator(3);
  auto noise = torch::randn({3000, 3000}, gen, torch::TensorOptions().dtype(torch::kDouble));
  const double acc = retrieval_accuracy(noise, 3, 4);
  CHECK(acc > 100.0 / 3 - 3);
  CHECK(acc < 100.0 / 3 + 3);
  CHECK_THROWS_AS(retrieval_accuracy(eye.slice(0, 0, 2).slice(1, 0, 2), 3, 1), UsageError);
}

TEST_CASE("zero heads give zero DTTC scores") {
  auto m = toy_dttc(1);
  m.net->zero_heads();
  auto x = torch::randn({3, 8}, torch::kDouble);
  auto s = dttc_scores(m, x, x, {"up", "down", "peak"});
  CHECK(s.intrinsic == 0.0);
  CHECK(s.extrinsic == 0.0);
}

TEST_CASE("DTTC encoders pass finite-difference checks") {
  auto m = toy_dttc(2);
  auto x = torch::randn({3, 8}, torch::kDouble);
  auto w = torch::randn({3, 6}, torch::kDouble);
  auto ids = tokenize_batch({"The trend goes up.", "A sag appears in the middle.", "There is 2 season."}, m.vocab);
  auto series = testutil::finite_difference_check(m.net->parameters(), [&] {
    auto [i, e] = m.net->encode_series(x);
    return (i * w).sum() + (e * w * 0.5).sum();
  });
  CHECK(series.max_rel < 1e-3);
  auto text = testutil::finite_difference_check(m.net->text_encoder->parameters(),
                                                [&] { return (m.net->encode_text(ids) * w).sum(); });
  CHECK(text.max_rel < 1e-3);
  // Gradient with respect to the input series as well.
  auto xin = x.clone().requires_grad_(true);
  auto loss_fn = [&] { return (m.encode_series(xin).first * w).sum(); };
  auto inp = testutil::finite_difference_check({xin}, loss_fn, 12);
  CHECK(inp.max_rel < 1e-3);
}

TEST_CASE("dttc_losses combine intrinsic and the mean of the extrinsic terms") {
  auto m = toy_dttc(3);
  auto h = torch::randn({4, 8}, torch::kDouble);
  auto f = torch::randn({4, 8}, torch::kDouble);
  auto hid = tokenize_batch({"up", "down", "peak", "sag"}, m.vocab);
  auto fid = tokenize_batch({"down", "sag", "up", "peak"}, m.vocab);
  auto l = dttc_losses(m.net, h, f, hid, fid);
  auto [ih, eh] = m.net->encode_series(h);
  auto [if_, ef] = m.net->encode_series(f);
  auto scale = m.net->logit_scale();
  auto li = contrastive_loss(ih, if_, scale);
  auto le = 0.5 * (contrastive_loss(eh, m.net->encode_text(hid), scale) + contrastive_loss(ef, m.net->encode_text(fid), scale));
  CHECK(l.intrinsic.item<double>() == doctest::Approx(li.item<double>()));
  CHECK(l.extrinsic.item<double>() == doctest::Approx(le.item<double>()));
  CHECK(l.total.item<double>() == doctest::Approx((li + le).item<double>()));
}

TEST_CASE("temperature starts at 0.07 and the scale is clamped") {
  auto m = toy_dttc(4, false);
  DttcNet fresh(m.config);
  CHECK(fresh->logit_scale().item<double>() == doctest::Approx(1.0 / 0.07).epsilon(1e-5));
  {
    torch::NoGradGuard guard;
    fresh->log_scale.fill_(10.0);
  }
  CHECK(fresh->logit_scale().item<double>() == doctest::Approx(100.0).epsilon(1e-5));
}

TEST_CASE("DTTC checkpoint round trip") {
  auto m = toy_dttc(5, false);
  auto dir = testutil::temp_dir("dttc");
  m.save(dir / "d.ckpt");
  auto back = DttcModel::load(dir / "d.ckpt");
  CHECK(back.vocab == m.vocab);
  CHECK(back.normalizer == m.normalizer);
  auto x = torch::randn({2, 8}, torch::kDouble);
  m.net->eval();
  back.net->eval();
  auto a = m.encode_series(x);
  auto b = back.encode_series(x);
  CHECK(torch::equal(a.first, b.first));
  CHECK(torch::equal(m.encode_texts({"up"}), back.encode_texts({"up"})));
  CHECK_THROWS_AS(DttcModel::load(dir / "missing.ckpt"), CheckpointError);
}

TEST_CASE("short contrastive training lifts retrieval above chance") {
  auto ds = synth::generate_dataset(400, 16, 16, 21);
  DttcTrainConfig c;
  c.epochs = 8;
  c.batch_size = 32;
  c.seed = 2;
  c.model.patch_len = 4;
  c.model.width = 32;
  c.model.embed_dim = 16;
  c.model.layers = 1;
  c.model.heads = 2;
  c.model.text_layers = 1;
  c.model.max_tokens = 16;
  auto res = contrastive_train(c, ds);
  REQUIRE(res.epochs.size() == 8);
  CHECK(res.epochs.back().extrinsic < res.epochs.front().extrinsic);
  auto r = retrieval_eval(res.model, ds.split("test"), 3, 0);
  CHECK(r.n == 40);
  CHECK(r.acc_e > 100.0 / 3);
}

TEST_CASE("independence probe validates its inputs") {
  auto v = testutil::toy_vocab();
  ProbeConfig pc;
  pc.model = testutil::toy_dttc_config(v);
  CHECK_THROWS_AS(independence_probe(torch::randn({10, 8}), std::vector<std::string>(10, "up"), v, pc), DataError);
  CHECK_THROWS_AS(independence_probe(torch::randn({40, 8}), std::vector<std::string>(10, "up"), v, pc), UsageError);
}
