#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "whatifts/checkpoint.hpp"
#include "whatifts/common.hpp"
#include "whatifts/counterfactual.hpp"
#include "whatifts/diffusion_schedule.hpp"
#include "whatifts/dttc.hpp"
#include "whatifts/evaluation.hpp"
#include "whatifts/inference.hpp"
#include "whatifts/synthgen.hpp"
#include "whatifts/textproc.hpp"
#include "whatifts/training.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using nlohmann::json;
using namespace whatifts;

namespace {

using Rows = std::vector<std::vector<double>>;

torch::Tensor to_tensor(const Rows& rows) {
  if (rows.empty()) throw UsageError("empty input");
  std::vector<double> flat;
  for (const auto& r : rows) {
    if (r.size() != rows.front().size()) throw UsageError("ragged input rows");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return torch::tensor(flat, torch::TensorOptions().dtype(torch::kDouble))
      .view({static_cast<std::int64_t>(rows.size()), -1});
}

Rows to_rows(const torch::Tensor& t) {
  auto d = t.to(torch::kDouble).contiguous();
  Rows out(static_cast<std::size_t>(d.size(0)));
  for (std::int64_t i = 0; i < d.size(0); ++i) {
    const double* p = d[i].data_ptr<double>();
    out[i].assign(p, p + d.size(1));
  }
  return out;
}

json parse_config(const std::string& text) {
  try {
    return text.empty() ? json::object() : json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config is not valid JSON: ") + e.what());
  }
}

class PyForecaster {
 public:
  explicit PyForecaster(const fs::path& ckpt) : model_(ForecastModel::load(ckpt)), id_(file_sha256(ckpt)) {}

  Rows forecast(const std::vector<double>& history, const std::string& history_text, const std::string& future_text,
                int num_samples, bool use_attribution, std::uint64_t seed, double perturb_scale) {
    ForecastRequest req;
    if (static_cast<int>(history.size()) != model_.history_len) throw UsageError("history length differs from L_h");
    req.history = apply_normalizer(model_.normalizer, history);
    req.history_text = history_text;
    req.future_text = future_text;
    req.num_samples = num_samples;
    req.use_attribution = use_attribution;
    req.seed = seed;
    req.perturb_scale = perturb_scale;
    py::gil_scoped_release release;
    return whatifts::forecast(model_, req).denormalized;
  }

  int history_len() const { return model_.history_len; }
  int future_len() const { return model_.future_len; }
  const std::string& checkpoint_id() const { return id_; }

 private:
  ForecastModel model_;
  std::string id_;
};

}  // namespace

PYBIND11_MODULE(_whatifts, m) {
  m.doc() = "whatifts core bindings";

  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_IOError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_IOError);

  m.def(
      "generate_synth",
      [](int n, int history_len, int future_len, std::uint64_t seed, const fs::path& out) {
        auto gen = synth::generate_with_attributes(n, history_len, future_len, seed);
        save_dataset(gen.dataset, out);
        synth::write_template_bank(out);
        synth::write_attributes(out / "attributes.jsonl", gen);
        return std::vector<std::size_t>{gen.dataset.split("train").size(), gen.dataset.split("val").size(),
                                        gen.dataset.split("test").size()};
      },
      py::arg("n"), py::arg("history_len") = 128, py::arg("future_len") = 128, py::arg("seed") = 0, py::arg("out"));

  m.def(
      "dataset_info",
      [](const fs::path& dir) {
        auto ds = load_dataset(dir);
        json j{{"name", ds.name}, {"L_h", ds.history_len}, {"L_f", ds.future_len}, {"kind", to_string(ds.kind)}};
        for (const auto& s : kSplitNames) j["sizes"][s] = ds.split(s).size();
        return j.dump();
      },
      py::arg("dir"));

  m.def(
      "build_vocab",
      [](const std::vector<std::string>& corpus, int min_freq, int max_tokens) {
        return build_vocab(corpus, min_freq, max_tokens).to_json().dump();
      },
      py::arg("corpus"), py::arg("min_freq") = 1, py::arg("max_tokens") = kDefaultMaxTokens);

  m.def(
      "tokenize",
      [](const std::string& text, const std::string& vocab_json, int max_tokens) {
        return tokenize(text, Vocab::from_json(json::parse(vocab_json), max_tokens));
      },
      py::arg("text"), py::arg("vocab_json"), py::arg("max_tokens") = kDefaultMaxTokens);

  m.def("split_tokens", &split_tokens, py::arg("text"));

  m.def(
      "mae_mse", [](const Rows& pred, const Rows& truth) { return mae_mse(pred, truth); }, py::arg("pred"),
      py::arg("truth"));

  py::class_<NoiseSchedule>(m, "NoiseSchedule")
      .def(py::init([](int T, double beta_start, double beta_end, int steps) {
             return make_schedule(T, beta_start, beta_end, steps);
           }),
           py::arg("T") = ScheduleDefaults::T, py::arg("beta_start") = ScheduleDefaults::beta_start,
           py::arg("beta_end") = ScheduleDefaults::beta_end, py::arg("steps") = ScheduleDefaults::S)
      .def_readonly("T", &NoiseSchedule::T)
      .def_readonly("alphas", &NoiseSchedule::alphas)
      .def_readonly("betas", &NoiseSchedule::betas)
      .def_readonly("grid", &NoiseSchedule::grid)
      .def("q_sample",
           [](const NoiseSchedule& s, const Rows& x0, int t, const Rows& eps) {
             return to_rows(q_sample(to_tensor(x0), t, to_tensor(eps), s));
           })
      .def("x0_estimate",
           [](const NoiseSchedule& s, const Rows& xt, const Rows& eps, int t) {
             return to_rows(x0_estimate(to_tensor(xt), to_tensor(eps), t, s));
           })
      .def("ddim_step",
           [](const NoiseSchedule& s, const Rows& xt, const Rows& eps, int t, int t_prev) {
             return to_rows(ddim_step(to_tensor(xt), to_tensor(eps), t, t_prev, s));
           })
      .def("ddim_invert_step", [](const NoiseSchedule& s, const Rows& xt, const Rows& eps, int t, int t_next) {
        return to_rows(ddim_invert_step(to_tensor(xt), to_tensor(eps), t, t_next, s));
      });

  m.def(
      "train",
      [](const fs::path& data, const std::string& config, const fs::path& out) {
        auto cfg = TrainConfig::from_json(parse_config(config));
        auto ds = load_dataset(data);
        auto vocab = dataset_vocab(ds, data, cfg.estimator.max_tokens);
        py::gil_scoped_release release;
        auto res = train(cfg, ds, out, vocab);
        json log = json::array();
        for (const auto& e : res.epochs) log.push_back({{"epoch", e.epoch}, {"L_F", e.forecast_loss}, {"L_A", e.attribution_loss}, {"total", e.total}});
        return log.dump();
      },
      py::arg("data"), py::arg("config") = "", py::arg("out"));

  m.def(
      "train_dttc",
      [](const fs::path& data, const std::string& config, const fs::path& out) {
        auto cfg = DttcTrainConfig::from_json(parse_config(config));
        auto ds = load_dataset(data);
        auto vocab = dataset_vocab(ds, data, cfg.model.max_tokens);
        py::gil_scoped_release release;
        auto res = contrastive_train(cfg, ds, vocab);
        res.model.save(out);
        return retrieval_eval(res.model, ds.split("test"), 3, cfg.seed, 1000).to_json().dump();
      },
      py::arg("data"), py::arg("config") = "", py::arg("out"));

  m.def(
      "evaluate",
      [](const fs::path& ckpt, const fs::path& dttc_ckpt, const fs::path& data, const std::string& setting,
         int num_samples, int limit, std::uint64_t seed, bool use_attribution) {
        auto model = ForecastModel::load(ckpt);
        auto dttc = DttcModel::load(dttc_ckpt);
        auto ds = load_dataset(data);
        EvalOptions opt;
        opt.setting = eval_setting_from_string(setting);
        opt.num_samples = num_samples;
        opt.limit = limit;
        opt.seed = seed;
        opt.use_attribution = use_attribution;
        py::gil_scoped_release release;
        auto report = evaluate(model, dttc, ds, opt);
        report.model_checkpoint = file_sha256(ckpt);
        report.dttc_checkpoint = file_sha256(dttc_ckpt);
        return report.to_json().dump();
      },
      py::arg("ckpt"), py::arg("dttc"), py::arg("data"), py::arg("setting") = "factual", py::arg("num_samples") = 1,
      py::arg("limit") = 0, py::arg("seed") = 0, py::arg("use_attribution") = true);

  m.def(
      "construct_counterfactual",
      [](const fs::path& data, const fs::path& dttc_ckpt, int M, std::uint64_t seed, const fs::path& out) {
        auto ds = load_dataset(data);
        auto dttc = DttcModel::load(dttc_ckpt);
        auto res = construct_counterfactual(ds, dttc, M, seed);
        save_dataset(res.dataset, out);
        write_provenance(out / "candidates.jsonl", res.provenance);
        return recheck_selection(dttc, res.provenance);
      },
      py::arg("data"), py::arg("dttc"), py::arg("M") = 10, py::arg("seed") = 0, py::arg("out"));

  m.def("checkpoint_id", &file_sha256, py::arg("path"));

  py::class_<PyForecaster>(m, "Forecaster")
      .def(py::init<const fs::path&>(), py::arg("checkpoint"))
      .def("forecast", &PyForecaster::forecast, py::arg("history"), py::arg("history_text") = "",
           py::arg("future_text"), py::arg("num_samples") = 1, py::arg("use_attribution") = true, py::arg("seed") = 0,
           py::arg("perturb_scale") = 0.0)
      .def_property_readonly("history_len", &PyForecaster::history_len)
      .def_property_readonly("future_len", &PyForecaster::future_len)
      .def_property_readonly("checkpoint_id", &PyForecaster::checkpoint_id);
}
