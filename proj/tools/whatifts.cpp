#include <csignal>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "httplib.h"
#include "json.hpp"
#include "whatifts/api_service.hpp"
#include "whatifts/checkpoint.hpp"
#include "whatifts/common.hpp"
#include "whatifts/counterfactual.hpp"
#include "whatifts/dttc.hpp"
#include "whatifts/evaluation.hpp"
#include "whatifts/inference.hpp"
#include "whatifts/synthgen.hpp"
#include "whatifts/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace whatifts;

namespace {

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("WHATIFTS_SEED");
  if (!v || !*v) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto s = std::stoull(v, &used);
    if (used != std::strlen(v)) throw std::invalid_argument(v);
    return s;
  } catch (const std::exception&) {
    throw UsageError(std::string("WHATIFTS_SEED is not an unsigned integer: ") + v);
  }
}

// Explicit flag, then WHATIFTS_SEED, then the fallback.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
  if (flag) return *flag;
  if (auto e = env_seed()) return *e;
  return fallback;
}

fs::path data_path(const std::string& p) {
  const char* root = std::getenv("WHATIFTS_DATA_DIR");
  if (p.empty()) {
    if (root && *root) return root;
    throw UsageError("no data directory given and WHATIFTS_DATA_DIR is unset");
  }
  fs::path path(p);
  if (path.is_relative() && root && *root) return fs::path(root) / path;
  return path;
}

json read_config(const std::string& file) {
  if (file.empty()) return json::object();
  std::ifstream in(file);
  if (!in) throw UsageError("cannot open config file " + file);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config file " + file + " is not valid JSON: " + e.what());
  }
}

void write_json_file(const fs::path& file, const json& j) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  out << j.dump(2) << "\n";
}

std::vector<double> read_history_file(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("missing-file: " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  const auto first = text.find_first_not_of(" \t\r\n");
  std::vector<double> out;
  if (first != std::string::npos && text[first] == '[') {
    try {
      for (const auto& v : json::parse(text)) out.push_back(v.get<double>());
    } catch (const json::exception& e) {
      throw DataError("schema-violation: " + file.string() + ": " + e.what());
    }
    return out;
  }
  std::istringstream values(text);
  std::string tok;
  while (values >> tok) {
    for (auto& c : tok)
      if (c == ',') c = ' ';
    std::istringstream part(tok);
    double v;
    while (part >> v) out.push_back(v);
    if (part.fail() && !part.eof()) throw DataError("schema-violation: " + file.string() + ": non-numeric value");
  }
  return out;
}

struct Args {
  // gen-synth
  int n = 14000, lh = 128, lf = 128;
  std::optional<std::uint64_t> seed;
  std::string out, data, config, ckpt, dttc, cf, setting = "factual", split = "test";
  std::string history_file, future_text, history_text, host = "127.0.0.1";
  int min_freq = 1, max_tokens = kDefaultMaxTokens, m = 10, num_samples = 1, limit = 0, port = 8080;
  std::optional<int> steps;
  double perturb = 0.0;
  bool no_attribution = false, verbose = false;
  std::optional<std::uint64_t> control_seed;
};

int cmd_gen_synth(const Args& a) {
  if (a.n < 10) throw UsageError("--n must be >= 10");
  const auto seed = resolve_seed(a.seed, 0);
  const fs::path out = data_path(a.out);
  auto gen = synth::generate_with_attributes(a.n, a.lh, a.lf, seed);
  save_dataset(gen.dataset, out);
  synth::write_template_bank(out);
  synth::write_attributes(out / "attributes.jsonl", gen);
  std::cout << json{{"out", out.string()},
                    {"train", gen.dataset.split("train").size()},
                    {"val", gen.dataset.split("val").size()},
                    {"test", gen.dataset.split("test").size()},
                    {"seed", seed}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_build_vocab(const Args& a) {
  const fs::path dir = data_path(a.data);
  auto ds = load_dataset(dir);
  auto vocab = build_vocab(split_corpus(ds, "train"), a.min_freq, a.max_tokens);
  const fs::path out = a.out.empty() ? dir / "vocab.json" : fs::path(a.out);
  write_json_file(out, vocab.to_json());
  std::cout << json{{"out", out.string()}, {"size", vocab.size()}}.dump() << "\n";
  return 0;
}

int cmd_train(const Args& a) {
  auto cfg = TrainConfig::from_json(read_config(a.config));
  cfg.seed = resolve_seed(a.seed, cfg.seed);
  cfg.verbose = cfg.verbose || a.verbose;
  const fs::path dir = data_path(a.data);
  auto ds = load_dataset(dir);
  auto vocab = dataset_vocab(ds, dir, cfg.estimator.max_tokens);
  auto res = train(cfg, ds, a.out, vocab);
  std::cout << json{{"checkpoint", a.out}, {"checkpoint_id", file_sha256(a.out)},
                    {"epochs", res.epochs.size()}, {"final_total", res.epochs.back().total}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_train_dttc(const Args& a) {
  auto cfg = DttcTrainConfig::from_json(read_config(a.config));
  cfg.seed = resolve_seed(a.seed, cfg.seed);
  cfg.verbose = cfg.verbose || a.verbose;
  const fs::path dir = data_path(a.data);
  auto ds = load_dataset(dir);
  auto vocab = dataset_vocab(ds, dir, cfg.model.max_tokens);
  auto res = contrastive_train(cfg, ds, vocab);
  res.model.save(a.out);
  auto report = retrieval_eval(res.model, ds.split("test"), 3, cfg.seed, 2000);
  std::cout << json{{"checkpoint", a.out}, {"checkpoint_id", file_sha256(a.out)}, {"retrieval", report.to_json()}}.dump()
            << "\n";
  return 0;
}

int cmd_make_cf(const Args& a) {
  const auto seed = resolve_seed(a.seed, 0);
  auto ds = load_dataset(data_path(a.data));
  auto dttc = DttcModel::load(a.dttc);
  auto out = construct_counterfactual(ds, dttc, a.m, seed);
  const fs::path dir = data_path(a.out);
  save_dataset(out.dataset, dir);
  write_provenance(dir / "candidates.jsonl", out.provenance);
  std::cout << json{{"out", dir.string()}, {"samples", out.dataset.size()}, {"M", a.m}, {"seed", seed}}.dump() << "\n";
  return 0;
}

int cmd_finetune(const Args& a) {
  const json raw = read_config(a.config);
  auto cfg = CfConfig::from_json(raw);
  cfg.seed = resolve_seed(a.seed, cfg.seed);
  cfg.verbose = cfg.verbose || a.verbose;
  std::string dttc_path = a.dttc.empty() ? raw.value("dttc", std::string()) : a.dttc;
  if (dttc_path.empty()) throw UsageError("finetune needs a DTTC checkpoint (--dttc or \"dttc\" in the config)");
  auto factual = load_dataset(data_path(a.data));
  auto cf = load_dataset(data_path(a.cf));
  auto dttc = DttcModel::load(dttc_path);
  auto res = finetune(cfg, factual, cf, a.ckpt, dttc, a.out);
  std::cout << json{{"checkpoint", a.out}, {"checkpoint_id", file_sha256(a.out)}, {"parent", file_sha256(a.ckpt)},
                    {"epochs", res.epochs.size()}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_eval(const Args& a) {
  auto model = ForecastModel::load(a.ckpt);
  auto dttc = DttcModel::load(a.dttc);
  auto ds = load_dataset(data_path(a.data));
  EvalOptions opt;
  opt.split = a.split;
  opt.setting = eval_setting_from_string(a.setting);
  if (opt.setting == EvalSetting::Counterfactual && ds.kind == DatasetKind::Factual)
    throw DataError("counterfactual evaluation needs a counterfactual dataset");
  if (opt.setting == EvalSetting::Factual && ds.kind == DatasetKind::Counterfactual)
    throw DataError("missing futures: factual evaluation on a counterfactual dataset");
  opt.num_samples = a.num_samples;
  opt.use_attribution = !a.no_attribution;
  opt.perturb_scale = a.perturb;
  opt.steps = a.steps;
  opt.seed = resolve_seed(a.seed, 0);
  opt.limit = a.limit;
  auto report = evaluate(model, dttc, ds, opt);
  report.model_checkpoint = file_sha256(a.ckpt);
  report.dttc_checkpoint = file_sha256(a.dttc);
  const json j = report.to_json();
  if (!a.out.empty()) write_json_file(a.out, j);
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_export_noise(const Args& a) {
  auto model = ForecastModel::load(a.ckpt);
  auto ds = load_dataset(data_path(a.data));
  NoiseExportOptions opt;
  opt.split = a.split;
  opt.limit = a.limit;
  opt.control_seed = a.control_seed;
  const auto rows = export_initial_noise(model, ds, a.out, opt);
  std::cout << json{{"out", a.out}, {"rows", rows}}.dump() << "\n";
  return 0;
}

int cmd_forecast(const Args& a) {
  auto model = ForecastModel::load(a.ckpt);
  const auto history = read_history_file(a.history_file);
  if (static_cast<int>(history.size()) != model.history_len)
    throw DataError("length-mismatch: history file has " + std::to_string(history.size()) + " values, L_h=" +
                    std::to_string(model.history_len));
  if (a.future_text.find_first_not_of(" \t\r\n") == std::string::npos) throw UsageError("--future-text must not be empty");
  ForecastRequest req;
  req.history = apply_normalizer(model.normalizer, history);
  req.history_text = a.history_text;
  req.future_text = a.future_text;
  req.num_samples = a.num_samples;
  req.use_attribution = !a.no_attribution;
  req.steps = a.steps;
  req.perturb_scale = a.perturb;
  req.seed = resolve_seed(a.seed, 0);
  auto res = forecast(model, req);
  std::cout << json{{"forecasts", res.denormalized}, {"attribution_used", res.attribution_used}, {"seed", req.seed}}.dump()
            << "\n";
  return 0;
}

httplib::Server* g_server = nullptr;

int cmd_serve(const Args& a) {
  ServiceOptions opt;
  opt.perturb_scale = a.perturb;
  Service service(opt);
  httplib::Server server;
  mount_routes(server, service);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  if (!server.bind_to_port(a.host, a.port)) throw UsageError("cannot bind " + a.host + ":" + std::to_string(a.port));
  std::thread listener([&] { server.listen_after_bind(); });
  try {
    service.load(a.ckpt, a.dttc, data_path(a.data));
  } catch (...) {
    server.stop();
    listener.join();
    throw;
  }
  std::cerr << "serving on http://" << a.host << ":" << a.port << "/api\n";
  listener.join();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"whatifts: counterfactual time-series forecasting"};
  app.require_subcommand(1);
  Args a;
  auto seed_opt = [&](CLI::App* c) { c->add_option("--seed", a.seed, "random seed (overrides WHATIFTS_SEED)"); };
  auto verbose_opt = [&](CLI::App* c) { c->add_flag("-v,--verbose", a.verbose, "per-epoch progress on stderr"); };

  auto* gen = app.add_subcommand("gen-synth", "generate the Synth dataset");
  gen->add_option("--n", a.n, "number of samples")->capture_default_str();
  gen->add_option("--lh", a.lh, "history length")->capture_default_str();
  gen->add_option("--lf", a.lf, "future length")->capture_default_str();
  gen->add_option("--out", a.out, "output directory")->required();
  seed_opt(gen);

  auto* vocab = app.add_subcommand("build-vocab", "build vocab.json from the train split");
  vocab->add_option("--data", a.data, "dataset directory");
  vocab->add_option("--min-freq", a.min_freq)->capture_default_str();
  vocab->add_option("--max-tokens", a.max_tokens)->capture_default_str();
  vocab->add_option("--out", a.out, "output file (default DATA/vocab.json)");

  auto* tr = app.add_subcommand("train", "train the forecaster");
  tr->add_option("--data", a.data);
  tr->add_option("--config", a.config, "JSON training config");
  tr->add_option("--out", a.out, "checkpoint file")->required();
  seed_opt(tr);
  verbose_opt(tr);

  auto* td = app.add_subcommand("train-dttc", "train the DTTC evaluator");
  td->add_option("--data", a.data);
  td->add_option("--config", a.config, "JSON DTTC config");
  td->add_option("--out", a.out, "checkpoint file")->required();
  seed_opt(td);
  verbose_opt(td);

  auto* mk = app.add_subcommand("make-cf", "construct a counterfactual dataset");
  mk->add_option("--data", a.data);
  mk->add_option("--dttc", a.dttc, "DTTC checkpoint")->required();
  mk->add_option("--m", a.m, "candidates per sample")->capture_default_str();
  mk->add_option("--out", a.out, "output directory")->required();
  seed_opt(mk);

  auto* ft = app.add_subcommand("finetune", "finetune on factual plus counterfactual data");
  ft->add_option("--data", a.data);
  ft->add_option("--cf", a.cf, "counterfactual dataset directory")->required();
  ft->add_option("--ckpt", a.ckpt, "parent checkpoint")->required();
  ft->add_option("--dttc", a.dttc, "DTTC checkpoint (or \"dttc\" in the config)");
  ft->add_option("--config", a.config, "JSON finetune config");
  ft->add_option("--out", a.out, "new checkpoint")->required();
  seed_opt(ft);
  verbose_opt(ft);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--ckpt", a.ckpt)->required();
  ev->add_option("--dttc", a.dttc)->required();
  ev->add_option("--data", a.data);
  ev->add_option("--setting", a.setting)->check(CLI::IsMember({"factual", "counterfactual"}))->capture_default_str();
  ev->add_option("--split", a.split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  ev->add_option("--num-samples", a.num_samples)->check(CLI::PositiveNumber)->capture_default_str();
  ev->add_option("--limit", a.limit, "evaluate only the first N samples");
  ev->add_option("--steps", a.steps, "inference steps");
  ev->add_option("--perturb", a.perturb, "jitter on the attributed state for extra samples");
  ev->add_flag("--no-attribution", a.no_attribution);
  ev->add_option("--out", a.out, "report file");
  seed_opt(ev);

  auto* ex = app.add_subcommand("export-noise", "export attributed initial states");
  ex->add_option("--ckpt", a.ckpt)->required();
  ex->add_option("--data", a.data);
  ex->add_option("--split", a.split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  ex->add_option("--limit", a.limit);
  ex->add_option("--control-seed", a.control_seed, "pin the control draws");
  ex->add_option("--out", a.out)->required();

  auto* fc = app.add_subcommand("forecast", "forecast one history");
  fc->add_option("--ckpt", a.ckpt)->required();
  fc->add_option("--history-file", a.history_file, "JSON array or whitespace/comma separated values")->required();
  fc->add_option("--history-text", a.history_text);
  fc->add_option("--future-text", a.future_text)->required();
  fc->add_option("--num-samples", a.num_samples)->check(CLI::PositiveNumber)->capture_default_str();
  fc->add_option("--steps", a.steps);
  fc->add_option("--perturb", a.perturb);
  fc->add_flag("--no-attribution", a.no_attribution);
  seed_opt(fc);

  auto* sv = app.add_subcommand("serve", "run the HTTP API");
  sv->add_option("--ckpt", a.ckpt)->required();
  sv->add_option("--dttc", a.dttc)->required();
  sv->add_option("--data", a.data);
  sv->add_option("--host", a.host)->capture_default_str();
  sv->add_option("--port", a.port)->capture_default_str();
  sv->add_option("--perturb", a.perturb);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_synth(a);
    if (vocab->parsed()) return cmd_build_vocab(a);
    if (tr->parsed()) return cmd_train(a);
    if (td->parsed()) return cmd_train_dttc(a);
    if (mk->parsed()) return cmd_make_cf(a);
    if (ft->parsed()) return cmd_finetune(a);
    if (ev->parsed()) return cmd_eval(a);
    if (ex->parsed()) return cmd_export_noise(a);
    if (fc->parsed()) return cmd_forecast(a);
    if (sv->parsed()) return cmd_serve(a);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.kind()) {
      case ErrorKind::Usage: return 2;
      case ErrorKind::Data: return 3;
      case ErrorKind::Checkpoint: return 4;
      default: return 1;
    }
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
