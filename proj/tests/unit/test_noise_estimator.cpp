#include <fstream>

#include "helpers.hpp"
#include "whatifts/checkpoint.hpp"
#include "whatifts/common.hpp"
#include "whatifts/layers.hpp"
#include "whatifts/noise_estimator.hpp"

using namespace whatifts;

TEST_CASE("patchify shapes and round trip") {
  auto x = torch::randn({2, 96});
  auto tokens = patchify(x, 8);
  CHECK(tokens.size(1) == 12);
  CHECK(tokens.size(2) == 8);
  CHECK(torch::equal(unpatchify(tokens), x));
  CHECK_THROWS_AS(patchify(torch::randn({1, 10}), 8), UsageError);

  auto single = torch::randn({1, 8});
  torch::nn::Linear identity(8, 8);
  {
    torch::NoGradGuard guard;
    identity->weight.copy_(torch::eye(8));
    identity->bias.zero_();
  }
  auto embedded = identity(patchify(single, 8));
  CHECK(embedded.size(1) == 1);
  CHECK(torch::allclose(embedded.view({1, 8}), single));
}

TEST_CASE("estimator is length preserving, deterministic, and zero with a zero head") {
  auto v = testutil::toy_vocab();
  torch::manual_seed(1);
  NoiseEstimator net(testutil::toy_estimator_config(v));
  net->eval();
  auto ids = tokenize_batch({"The trend goes up.", "There is 2 season."}, v);
  auto t = torch::tensor(std::vector<std::int64_t>{3, 17});
  for (int len : {8, 16}) {
    auto x = torch::randn({2, len});
    auto a = net->forward(x, ids, t);
    CHECK(a.sizes() == x.sizes());
    CHECK(torch::equal(a, net->forward(x, ids, t)));
  }
  CHECK_THROWS_AS(net->forward(torch::randn({2, 10}), ids, t), UsageError);
  CHECK_THROWS_AS(net->forward(torch::randn({2, 8}), ids, torch::tensor(std::vector<std::int64_t>{3, 21})), UsageError);
  CHECK_THROWS_AS(net->forward(torch::randn({2, 32}), ids, t), UsageError);

  auto single = estimate_noise(net, torch::randn({16}), tokenize("up", v), 5);
  CHECK(single.size(-1) == 16);

  testutil::randomize(*net, 3);
  net->zero_head();
  auto out = net->forward(torch::randn({2, 16}), ids, t);
  CHECK(out.abs().max().item<double>() == 0.0);
}

TEST_CASE("estimator responds to the condition and the step") {
  auto v = testutil::toy_vocab();
  torch::manual_seed(2);
  NoiseEstimator net(testutil::toy_estimator_config(v));
  testutil::randomize(*net, 8);
  net->eval();
  auto x = torch::randn({1, 16});
  auto up = tokenize_batch({"The trend goes up."}, v);
  auto down = tokenize_batch({"The trend goes down."}, v);
  auto t = torch::tensor(std::vector<std::int64_t>{4});
  CHECK_FALSE(torch::allclose(net->forward(x, up, t), net->forward(x, down, t)));
  CHECK_FALSE(torch::allclose(net->forward(x, up, t), net->forward(x, up, t + 5)));
}

TEST_CASE("estimator finite-difference gradient check (toy dims, double)") {
  auto v = testutil::toy_vocab();
  torch::manual_seed(4);
  NoiseEstimator net(testutil::toy_estimator_config(v));
  net->to(torch::kDouble);
  testutil::randomize(*net, 21);
  auto x = torch::randn({2, 16}, torch::kDouble);
  auto ids = tokenize_batch({"The trend goes up.", "A sag appears in the middle."}, v);
  auto t = torch::tensor(std::vector<std::int64_t>{2, 19});
  auto w = torch::randn({2, 16}, torch::kDouble);
  auto res = testutil::finite_difference_check(net->parameters(), [&] { return (net->forward(x, ids, t) * w).sum(); });
  CHECK(res.checked > 50);
  CHECK(res.max_rel < 1e-3);
}

TEST_CASE("checkpoint archive round trip and integrity") {
  auto v = testutil::toy_vocab();
  torch::manual_seed(5);
  NoiseEstimator net(testutil::toy_estimator_config(v));
  testutil::randomize(*net, 9);
  auto dir = testutil::temp_dir("ckpt");
  auto file = dir / "m.ckpt";
  write_checkpoint(file, {{"kind", "test"}}, *net);
  auto ckpt = read_checkpoint(file);
  CHECK(ckpt.meta["kind"] == "test");
  torch::manual_seed(6);
  NoiseEstimator other(testutil::toy_estimator_config(v));
  load_parameters(*other, ckpt);
  auto a = net->named_parameters();
  auto b = other->named_parameters();
  for (const auto& item : a) CHECK(torch::equal(item.value(), b[item.key()]));

  CHECK(file_sha256(file).size() == 64);
  {
    std::ofstream f(dir / "abc.txt", std::ios::binary);
    f << "abc";
  }
  CHECK(file_sha256(dir / "abc.txt") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");

  {
    std::ofstream f(dir / "bad.ckpt", std::ios::binary);
    f << "NOTACKPT";
  }
  CHECK_THROWS_AS(read_checkpoint(dir / "bad.ckpt"), CheckpointError);
  CHECK_THROWS_AS(read_checkpoint(dir / "absent.ckpt"), CheckpointError);
  // Truncation is detected.
  std::filesystem::resize_file(file, std::filesystem::file_size(file) - 16);
  CHECK_THROWS_AS(read_checkpoint(file), CheckpointError);
}
