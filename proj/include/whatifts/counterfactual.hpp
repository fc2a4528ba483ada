#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "whatifts/data_model.hpp"
#include "whatifts/dttc.hpp"
#include "whatifts/training.hpp"

namespace whatifts {

struct CfConfig {
  int M = 10;
  double lambda_I = 5.0;
  double lambda_E = 1.0;
  int epochs = 20;
  int batch_size = 64;
  int mix_factual = 1;  // factual:counterfactual batches per cycle
  int mix_counterfactual = 1;
  double learning_rate = 1e-4;
  double lambda_forecast = 2.0;
  double lambda_attribution = 1.0;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  int max_train_samples = 0;
  bool verbose = false;

  void validate() const;
  nlohmann::json to_json() const;
  static CfConfig from_json(const nlohmann::json& j);
};

struct CandidateRecord {
  std::string sample_id;
  std::string split;
  std::string history_text;
  std::vector<std::string> candidates;
  std::vector<double> similarities;
  int selected = 0;

  nlohmann::json to_json() const;
};

struct CfOutput {
  Dataset dataset;
  std::vector<CandidateRecord> provenance;
};

/// Index of the largest value; ties go to the lowest index.
int select_candidate(const std::vector<double>& similarities);

/// <E_text(a), E_text(b)> under the DTTC text encoder, each text encoded on its own.
double condition_similarity(DttcModel& dttc, const std::string& a, const std::string& b);

CfOutput construct_counterfactual(const Dataset& dataset, DttcModel& dttc, int M, std::uint64_t seed);

/// Fraction of provenance records whose stored choice is the maximum under
/// independent recomputation of every candidate similarity.
double recheck_selection(DttcModel& dttc, const std::vector<CandidateRecord>& provenance);

void write_provenance(const std::filesystem::path& file, const std::vector<CandidateRecord>& provenance);

/// -mean(lambda_I <I_h, Î_f> + lambda_E <Ê_f, Ẽ_f>) at grid step t. The trajectory
/// from a Gaussian start down to t runs without gradients under the
/// counterfactual text with the history span anchored; only the estimator
/// call at t is tracked. `history` is normalized under the model's normalizer,
/// `cf_ids` use the forecaster vocabulary and `dttc_cf_ids` the DTTC one.
torch::Tensor dttc_finetune_loss(ForecastModel& model, DttcModel& dttc, const torch::Tensor& history,
                                 const torch::Tensor& cf_ids, const torch::Tensor& dttc_cf_ids, int t,
                                 double lambda_I, double lambda_E, torch::Generator& gen);

struct FinetuneLog {
  int epoch = 0;
  std::optional<double> fact_loss;
  std::optional<double> dttc_loss;
};

void write_finetune_log(std::ostream& out, const FinetuneLog& log);

struct FinetuneResult {
  std::filesystem::path checkpoint;
  std::vector<FinetuneLog> epochs;
};

/// Continues training `parent` on factual batches (joint loss) interleaved
/// with counterfactual batches (DTTC loss); writes a new checkpoint whose
/// parent is the SHA-256 of the parent file.
FinetuneResult finetune(const CfConfig& config, const Dataset& factual, const Dataset& counterfactual,
                        const std::filesystem::path& parent, DttcModel& dttc, const std::filesystem::path& out);

}  // namespace whatifts
