#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "json.hpp"
#include "whatifts/data_model.hpp"
#include "whatifts/dttc.hpp"
#include "whatifts/training.hpp"

namespace httplib {
class Server;
}

namespace whatifts {

/// JSON whose floating-point numbers are stored and printed as float32.
using json32 = nlohmann::basic_json<std::map, std::vector, std::string, bool, std::int64_t, std::uint64_t, float>;

struct ApiResponse {
  int status = 200;
  json32 body;
};

struct ServiceOptions {
  double perturb_scale = 0.0;
  int max_num_samples = 64;
  int default_window_limit = 20;
  std::string cors_origin = "*";
};

/// Immutable session state plus the request handlers; the HTTP layer only
/// routes into these.
class Service {
 public:
  explicit Service(ServiceOptions options = {});

  /// Loads checkpoints and data; the service answers 503 until this finishes.
  void load(const std::filesystem::path& model_ckpt, const std::filesystem::path& dttc_ckpt,
            const std::filesystem::path& data_dir);
  void attach(ForecastModel model, DttcModel dttc, Dataset dataset, std::string checkpoint_id);
  bool ready() const { return ready_.load(); }

  ApiResponse health() const;
  ApiResponse windows(const std::map<std::string, std::string>& query) const;
  ApiResponse forecast(const std::string& body) const;

  /// FNV-1a of the canonical body (without "seed") mixed with the client seed.
  static std::uint64_t request_seed(const nlohmann::json& body, std::optional<std::uint64_t> client_seed);

  const ServiceOptions& options() const { return options_; }

 private:
  struct State {
    ForecastModel model;
    DttcModel dttc;
    Dataset dataset;
    std::string checkpoint_id;
  };
  ServiceOptions options_;
  std::shared_ptr<State> state_;
  std::atomic<bool> ready_{false};
  std::chrono::steady_clock::time_point started_;
};

/// Registers the /api routes (and CORS handling) on an httplib server.
void mount_routes(httplib::Server& server, Service& service);

}  // namespace whatifts
