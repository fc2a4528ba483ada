#include "helpers.hpp"
#include "whatifts/common.hpp"
#include "whatifts/diffusion_schedule.hpp"

using namespace whatifts;

namespace {

torch::Tensor d(std::vector<double> v) { return torch::tensor(v, torch::kDouble).unsqueeze(0); }
double at0(const torch::Tensor& t) { return t.view({-1})[0].item<double>(); }

// alpha_1 = 0.25, alpha_2 = 0.125 after the second beta
NoiseSchedule quarter() { return schedule_from_betas({0.75, 0.5}, 2); }

}  // namespace

TEST_CASE("make_schedule cumulative products") {
  auto one = schedule_from_betas({0.19}, 1);
  CHECK(one.alphas.size() == 2);
  CHECK(one.alpha(0) == 1.0);
  CHECK(one.alpha(1) == doctest::Approx(0.81));
  auto two = schedule_from_betas({0.1, 0.2}, 2);
  CHECK(two.alpha(1) == doctest::Approx(0.9));
  CHECK(two.alpha(2) == doctest::Approx(0.72));
  auto tiny = make_schedule(10, 1e-12, 1e-12, 10);
  for (double a : tiny.alphas) CHECK(a == doctest::Approx(1.0));
  auto t1 = make_schedule(1, 0.19, 0.5, 1);
  CHECK(t1.alpha(1) == doctest::Approx(0.81));
  CHECK_THROWS_AS(make_schedule(10, 0.2, 0.1, 5), UsageError);
  CHECK_THROWS_AS(make_schedule(10, 1e-4, 0.02, 11), UsageError);
}

TEST_CASE("default schedule and grid") {
  auto s = make_schedule();
  CHECK(s.T == 1000);
  CHECK(s.steps() == 50);
  CHECK(s.grid.front() == 0);
  CHECK(s.grid.back() == 1000);
  CHECK(s.grid[1] == 20);
  for (std::size_t i = 1; i < s.alphas.size(); ++i) CHECK(s.alphas[i] < s.alphas[i - 1]);
  CHECK(s.alpha(s.T) < 1e-4);
  auto back = NoiseSchedule::from_json(s.to_json());
  CHECK(back.alphas == s.alphas);
  CHECK(back.grid == s.grid);
}

TEST_CASE("q_sample examples") {
  auto s = quarter();
  auto x0 = d({2.0, -1.0});
  CHECK(torch::allclose(q_sample(x0, 1, torch::zeros_like(x0), s), 0.5 * x0));
  auto eps = d({0.3, 0.7});
  CHECK(torch::allclose(q_sample(torch::zeros_like(eps), 1, eps, s), std::sqrt(0.75) * eps));
  CHECK(at0(q_sample(d({2.0}), 1, d({1.0}), s)) == doctest::Approx(1.8660).epsilon(1e-4));
  CHECK_THROWS_AS(q_sample(d({1.0, 2.0}), 1, d({1.0}), s), UsageError);
  CHECK_THROWS_AS(q_sample(d({1.0}), 3, d({1.0}), s), UsageError);
}

TEST_CASE("x0_estimate examples and exact inversion") {
  auto s = quarter();
  auto xt = d({0.4, -1.2});
  CHECK(torch::allclose(x0_estimate(xt, torch::zeros_like(xt), 1, s), xt / 0.5));
  CHECK(at0(x0_estimate(d({1.0}), d({0.5}), 1, s)) == doctest::Approx(1.1340).epsilon(1e-4));
  auto big = make_schedule();
  auto x0 = torch::randn({4, 32}, torch::kDouble);
  auto eps = torch::randn({4, 32}, torch::kDouble);
  for (int t : {1, 17, 500, 1000}) {
    auto back = x0_estimate(q_sample(x0, t, eps, big), eps, t, big);
    CHECK((back - x0).abs().max().item<double>() <= 1e-9);
  }
}

TEST_CASE("ddim_step examples") {
  auto s = quarter();
  CHECK(at0(ddim_step(d({0.5}), d({0.0}), 1, 0, s)) == doctest::Approx(1.0));
  // alpha_2 = 0.125 so use a schedule with alpha_t = 0.25, alpha_prev = 0.5
  auto h = schedule_from_betas({0.5, 0.5}, 2);
  CHECK(h.alpha(1) == doctest::Approx(0.5));
  CHECK(h.alpha(2) == doctest::Approx(0.25));
  CHECK(at0(ddim_step(d({1.0}), d({0.5}), 2, 1, h)) == doctest::Approx(1.1554).epsilon(1e-4));
  CHECK_THROWS_AS(ddim_step(d({1.0}), d({0.5}), 2, 2, h), UsageError);
  CHECK_THROWS_AS(ddim_invert_step(d({1.0}), d({0.5}), 1, 1, h), UsageError);
}

TEST_CASE("ddim_invert_step examples and frozen round trip") {
  auto s = quarter();
  CHECK(at0(ddim_invert_step(d({2.0}), d({0.0}), 0, 1, s)) == doctest::Approx(1.0));
  CHECK(at0(ddim_invert_step(d({0.0}), d({0.0}), 0, 2, s)) == 0.0);
  auto big = make_schedule();
  auto x = torch::randn({3, 16}, torch::kDouble);
  auto c = torch::randn({3, 16}, torch::kDouble);
  for (auto [t, tn] : std::vector<std::pair<int, int>>{{0, 20}, {20, 40}, {480, 500}, {980, 1000}}) {
    auto up = ddim_invert_step(x, c, t, tn, big);
    auto down = ddim_step(up, c, tn, t, big);
    CHECK((down - x).abs().max().item<double>() <= 1e-9);
  }
}

TEST_CASE("full-grid invert then denoise round trip under frozen estimates") {
  auto s = make_schedule();
  auto x0 = torch::randn({4, 64}, torch::kDouble);
  std::vector<torch::Tensor> frozen;
  auto x = x0;
  for (std::size_t i = 0; i + 1 < s.grid.size(); ++i) {
    auto eps = torch::tanh(x) * 0.5 + 0.1 * static_cast<double>(i % 3);
    frozen.push_back(eps);
    x = ddim_invert_step(x, eps, s.grid[i], s.grid[i + 1], s);
  }
  for (std::size_t i = s.grid.size() - 1; i > 0; --i) x = ddim_step(x, frozen[i - 1], s.grid[i], s.grid[i - 1], s);
  CHECK((x - x0).abs().max().item<double>() <= 1e-6);
}

TEST_CASE("q_sample moments over 1e5 draws") {
  auto s = make_schedule();
  const std::int64_t n = 100000;
  auto gen = make_generator(5);
  for (int t : {10, 300, 900}) {
    const double a = s.alpha(t);
    auto x0 = torch::full({n, 1}, 1.5, torch::kDouble);
    auto eps = torch::randn({n, 1}, gen, torch::TensorOptions().dtype(torch::kDouble));
    auto xt = q_sample(x0, t, eps, s);
    const double mean = xt.mean().item<double>();
    const double var = xt.var().item<double>();
    const double sd = std::sqrt(1 - a);
    // Mean within 5 standard errors; variance within 5 standard errors of the sample variance.
    CHECK(std::abs(mean - std::sqrt(a) * 1.5) < 5 * sd / std::sqrt(double(n)));
    CHECK(std::abs(var - (1 - a)) < 5 * (1 - a) * std::sqrt(2.0 / double(n)));
  }
}

TEST_CASE("per-row q_sample agrees with scalar form") {
  auto s = make_schedule(100, 1e-4, 0.02, 10);
  auto x0 = torch::randn({3, 8}, torch::kDouble);
  auto eps = torch::randn({3, 8}, torch::kDouble);
  auto t = torch::tensor(std::vector<std::int64_t>{1, 50, 100});
  auto rows = q_sample(x0, t, eps, s);
  for (int i = 0; i < 3; ++i) {
    const int ti = static_cast<int>(t[i].item<std::int64_t>());
    CHECK(torch::allclose(rows[i], q_sample(x0[i].unsqueeze(0), ti, eps[i].unsqueeze(0), s).squeeze(0)));
  }
}
