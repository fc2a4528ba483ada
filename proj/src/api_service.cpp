#include "whatifts/api_service.hpp"

#include <cstdio>
#include <random>

#include "httplib.h"
#include "whatifts/checkpoint.hpp"
#include "whatifts/common.hpp"
#include "whatifts/inference.hpp"

namespace whatifts {

using nlohmann::json;

namespace {

ApiResponse error_response(int status, const std::string& message, const std::string& field = "",
                           const std::string& reason = "") {
  ApiResponse r;
  r.status = status;
  r.body = json32{{"error", message}};
  if (!field.empty()) r.body["field"] = field;
  if (!reason.empty()) r.body["reason"] = reason;
  return r;
}

ApiResponse not_ready() {
  ApiResponse r;
  r.status = 503;
  r.body = json32{{"status", "loading"}, {"error", "not ready"}};
  return r;
}

json32 float_rows(const std::vector<std::vector<double>>& rows) {
  json32 out = json32::array();
  for (const auto& row : rows) {
    json32 r = json32::array();
    for (double v : row) r.push_back(static_cast<float>(v));
    out.push_back(std::move(r));
  }
  return out;
}

bool is_blank(const std::string& s) { return s.find_first_not_of(" \t\r\n") == std::string::npos; }

}  // namespace

Service::Service(ServiceOptions options) : options_(std::move(options)), started_(std::chrono::steady_clock::now()) {}

void Service::load(const std::filesystem::path& model_ckpt, const std::filesystem::path& dttc_ckpt,
                   const std::filesystem::path& data_dir) {
  auto model = ForecastModel::load(model_ckpt);
  auto dttc = DttcModel::load(dttc_ckpt);
  auto dataset = load_dataset(data_dir);
  if (dataset.history_len != model.history_len || dataset.future_len != model.future_len)
    throw DataError("incompatible dataset: window lengths differ from the checkpoint");
  attach(std::move(model), std::move(dttc), std::move(dataset), file_sha256(model_ckpt));
}

void Service::attach(ForecastModel model, DttcModel dttc, Dataset dataset, std::string checkpoint_id) {
  model.net->eval();
  dttc.net->eval();
  state_ = std::make_shared<State>(State{std::move(model), std::move(dttc), std::move(dataset), std::move(checkpoint_id)});
  ready_.store(true, std::memory_order_release);
}

ApiResponse Service::health() const {
  if (!ready()) return not_ready();
  const double uptime = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  return {200, json32{{"status", "ok"},
                      {"checkpoint_id", state_->checkpoint_id},
                      {"dataset", state_->dataset.name},
                      {"uptime_s", uptime}}};
}

ApiResponse Service::windows(const std::map<std::string, std::string>& query) const {
  if (!ready()) return not_ready();
  const auto split_it = query.find("split");
  const std::string split = split_it == query.end() ? "test" : split_it->second;
  if (std::find(kSplitNames.begin(), kSplitNames.end(), split) == kSplitNames.end())
    return error_response(400, "unknown split", "split", "expected train, val or test");
  long limit = options_.default_window_limit;
  if (auto it = query.find("limit"); it != query.end()) {
    try {
      std::size_t used = 0;
      limit = std::stol(it->second, &used);
      if (used != it->second.size() || limit < 0) throw std::invalid_argument("limit");
    } catch (const std::exception&) {
      return error_response(400, "invalid limit", "limit", "must be a non-negative integer");
    }
  }
  const auto& records = state_->dataset.split(split);
  json32 out = json32::array();
  for (std::size_t i = 0; i < records.size() && static_cast<long>(i) < limit; ++i) {
    const auto& r = records[i];
    json32 history = json32::array();
    for (double v : r.history) history.push_back(static_cast<float>(v));
    out.push_back(json32{{"sample_id", r.sample_id},
                         {"history", std::move(history)},
                         {"history_text", r.history_text},
                         {"factual_future_text", r.future_text}});
  }
  return {200, out};
}

std::uint64_t Service::request_seed(const json& body, std::optional<std::uint64_t> client_seed) {
  json canonical = body;
  if (canonical.is_object()) canonical.erase("seed");
  const std::string text = canonical.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return client_seed ? mix_seed(h ^ mix_seed(*client_seed)) : h;
}

ApiResponse Service::forecast(const std::string& body_text) const {
  if (!ready()) return not_ready();
  const auto t0 = std::chrono::steady_clock::now();
  json body;
  try {
    body = json::parse(body_text);
  } catch (const json::exception&) {
    return error_response(400, "invalid JSON body", "body", "not parseable JSON");
  }
  if (!body.is_object()) return error_response(400, "invalid body", "body", "must be a JSON object");
  auto& st = *state_;
  auto& model = st.model;

  if (!body.contains("future_text") || !body["future_text"].is_string())
    return error_response(400, "validation failed", "future_text", "required string");
  const std::string future_text = body["future_text"].get<std::string>();
  if (is_blank(future_text)) return error_response(400, "validation failed", "future_text", "must not be empty");

  int num_samples = 1;
  if (body.contains("num_samples")) {
    if (!body["num_samples"].is_number_integer()) return error_response(400, "validation failed", "num_samples", "must be an integer");
    num_samples = body["num_samples"].get<int>();
    if (num_samples < 1 || num_samples > options_.max_num_samples)
      return error_response(400, "validation failed", "num_samples",
                            "must be in [1, " + std::to_string(options_.max_num_samples) + "]");
  }
  bool use_attribution = true;
  if (body.contains("use_attribution")) {
    if (!body["use_attribution"].is_boolean()) return error_response(400, "validation failed", "use_attribution", "must be a boolean");
    use_attribution = body["use_attribution"].get<bool>();
  }
  std::optional<std::uint64_t> client_seed;
  if (body.contains("seed")) {
    if (!body["seed"].is_number_unsigned()) return error_response(400, "validation failed", "seed", "must be a non-negative integer");
    client_seed = body["seed"].get<std::uint64_t>();
  }

  std::vector<double> history;
  std::string history_text;
  std::string sample_id;
  const bool has_id = body.contains("sample_id");
  const bool has_history = body.contains("history");
  if (has_id == has_history)
    return error_response(400, "validation failed", has_id ? "history" : "sample_id",
                          "provide exactly one of sample_id or history");
  if (has_id) {
    if (!body["sample_id"].is_string()) return error_response(400, "validation failed", "sample_id", "must be a string");
    sample_id = body["sample_id"].get<std::string>();
    const SampleTuple* found = nullptr;
    for (const auto& name : kSplitNames)
      for (const auto& r : st.dataset.split(name))
        if (r.sample_id == sample_id) found = &r;
    if (!found) return error_response(400, "validation failed", "sample_id", "unknown sample");
    history = found->history;
    history_text = found->history_text;
  } else {
    if (!body["history"].is_array()) return error_response(400, "validation failed", "history", "must be an array of numbers");
    for (const auto& v : body["history"]) {
      if (!v.is_number()) return error_response(400, "validation failed", "history", "must be an array of numbers");
      history.push_back(v.get<double>());
    }
    if (body.contains("history_text")) {
      if (!body["history_text"].is_string()) return error_response(400, "validation failed", "history_text", "must be a string");
      history_text = body["history_text"].get<std::string>();
    }
  }
  if (static_cast<int>(history.size()) != model.history_len)
    return error_response(400, "validation failed", "history",
                          "length " + std::to_string(history.size()) + " differs from L_h=" + std::to_string(model.history_len));
  if (use_attribution && model.history_len != model.future_len)
    return error_response(422, "length-policy violation", "use_attribution", "attribution requires L_h == L_f");

  const std::uint64_t seed = request_seed(body, client_seed);
  try {
    ForecastRequest req;
    req.history = apply_normalizer(model.normalizer, history);
    req.history_text = history_text;
    req.future_text = future_text;
    req.num_samples = num_samples;
    req.use_attribution = use_attribution;
    req.perturb_scale = options_.perturb_scale;
    req.seed = seed;
    const auto res = whatifts::forecast(model, req);

    std::vector<double> flat;
    for (const auto& row : res.denormalized) flat.insert(flat.end(), row.begin(), row.end());
    auto dopts = torch::TensorOptions().dtype(torch::kDouble);
    const std::int64_t k = num_samples;
    auto forecasts = torch::tensor(flat, dopts).view({k, -1});
    auto hist = torch::tensor(history, dopts).unsqueeze(0).expand({k, -1});
    const auto scores = dttc_scores(st.dttc, forecasts, hist, std::vector<std::string>(k, future_text));

    json32 out{{"forecasts", float_rows(res.denormalized)},
               {"dttc_i", static_cast<float>(scores.intrinsic)},
               {"dttc_e", static_cast<float>(scores.extrinsic)},
               {"attribution_used", res.attribution_used},
               {"seed", seed},
               {"elapsed_ms", static_cast<float>(std::chrono::duration<double, std::milli>(
                                  std::chrono::steady_clock::now() - t0).count())}};
    if (!sample_id.empty()) out["sample_id"] = sample_id;
    return {200, out};
  } catch (const UsageError& e) {
    return error_response(400, "validation failed", "body", e.what());
  } catch (const std::exception& e) {
    char id[17];
    std::snprintf(id, sizeof id, "%016llx", static_cast<unsigned long long>(std::random_device{}()) << 32 ^ seed);
    std::fprintf(stderr, "internal error %s: %s\n", id, e.what());
    return error_response(500, "internal error", "", id);
  }
}

void mount_routes(httplib::Server& server, Service& service) {
  const std::string origin = service.options().cors_origin;
  server.set_default_headers({{"Access-Control-Allow-Origin", origin},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  auto send = [](httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.Get("/api/health", [&service, send](const httplib::Request&, httplib::Response& res) {
    send(res, service.health());
  });
  server.Get("/api/windows", [&service, send](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query[k] = v;
    send(res, service.windows(query));
  });
  server.Post("/api/forecast", [&service, send](const httplib::Request& req, httplib::Response& res) {
    send(res, service.forecast(req.body));
  });
}

}  // namespace whatifts
