#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "doctest.h"
#include "whatifts/data_model.hpp"
#include "whatifts/dttc.hpp"
#include "whatifts/noise_estimator.hpp"
#include "whatifts/textproc.hpp"
#include "whatifts/training.hpp"

namespace testutil {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("whatifts_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline whatifts::Vocab toy_vocab() {
  return whatifts::build_vocab({"The trend goes up.", "The trend goes down.", "There is a peak at end.",
                                "There is 2 season.", "A sag appears in the middle."},
                               1, 8);
}

inline whatifts::EstimatorConfig toy_estimator_config(const whatifts::Vocab& vocab) {
  whatifts::EstimatorConfig c;
  c.patch_len = 4;
  c.width = 8;
  c.depth = 1;
  c.heads = 2;
  c.text_layers = 1;
  c.max_tokens = vocab.max_tokens();
  c.vocab_size = vocab.size();
  c.max_len = 16;
  c.diffusion_steps = 20;
  return c;
}

inline whatifts::DttcConfig toy_dttc_config(const whatifts::Vocab& vocab, int max_len = 8) {
  whatifts::DttcConfig c;
  c.patch_len = 4;
  c.width = 8;
  c.embed_dim = 6;
  c.layers = 1;
  c.heads = 2;
  c.text_layers = 1;
  c.max_tokens = vocab.max_tokens();
  c.vocab_size = vocab.size();
  c.max_len = max_len;
  return c;
}

/// Replaces every parameter with N(0, scale^2) draws so no branch is
/// trivially zero (zero-initialised gates would hide gradient paths).
inline void randomize(torch::nn::Module& m, std::uint64_t seed, double scale = 0.3) {
  torch::NoGradGuard guard;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  for (auto& p : m.parameters()) p.copy_(torch::randn(p.sizes(), gen, p.options()) * scale);
}

struct FdResult {
  double max_rel = 0.0;
  int checked = 0;
};

/// Central differences of `f` with respect to sampled coordinates of every
/// parameter, against autograd. `f` must be deterministic.
inline FdResult finite_difference_check(const std::vector<torch::Tensor>& params,
                                        const std::function<torch::Tensor()>& f, int per_tensor = 6,
                                        double step = 1e-4, std::uint64_t seed = 7) {
  for (auto p : params)
    if (p.grad().defined()) p.mutable_grad().zero_();
  auto loss = f();
  auto grads = torch::autograd::grad({loss}, params, {}, false, false, true);
  std::mt19937_64 rng(seed);
  FdResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k];
    auto flat = p.detach().view({-1});
    const auto n = flat.numel();
    auto g = grads[k].defined() ? grads[k].reshape({-1}) : torch::zeros({n}, p.options());
    for (int s = 0; s < std::min<std::int64_t>(per_tensor, n); ++s) {
      const auto idx = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(n));
      const double orig = flat[idx].item<double>();
      double plus, minus;
      {
        torch::NoGradGuard guard;
        flat[idx] = orig + step;
        plus = f().item<double>();
        flat[idx] = orig - step;
        minus = f().item<double>();
        flat[idx] = orig;
      }
      const double numeric = (plus - minus) / (2 * step);
      const double analytic = g[idx].item<double>();
      const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      res.max_rel = std::max(res.max_rel, rel);
      ++res.checked;
    }
  }
  return res;
}

inline whatifts::SampleTuple make_sample(const std::string& id, std::vector<double> h, std::vector<double> f,
                                         const std::string& ht = "The trend goes up.",
                                         const std::string& ft = "The trend goes down.") {
  whatifts::SampleTuple s;
  s.sample_id = id;
  s.history = std::move(h);
  s.future = std::move(f);
  s.history_text = ht;
  s.future_text = ft;
  return s;
}

}  // namespace testutil
