#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedrbn/datagen.hpp"
#include "fedrbn/detector.hpp"
#include "fedrbn/federation.hpp"
#include "fedrbn/model.hpp"
#include "fedrbn/propagation.hpp"

namespace fedrbn {

/// fedavg and fedbn are the adversarial-training baselines (every FedRBN
/// component off); fedrbn is fedbn aggregation with every component on.
enum class Method : std::uint8_t { fedavg, fedbn, fedrbn };

Method parse_method(const std::string& name);
const char* method_name(Method m);

struct RawDomainFiles {
  std::filesystem::path features, labels;
};

struct DataSpec {
  std::size_t domains = 3;
  std::size_t users_per_domain = 4;
  std::size_t dim = 32;
  std::size_t classes = 10;
  std::size_t train_per_user = 500;
  std::size_t val_per_user = 100;
  std::size_t test_per_user = 200;
  PartitionScheme partition;
  DomainOptions generator;
  std::vector<RawDomainFiles> raw_domains;  // replaces the generator when set
};

/// Which users train adversarially. per_domain_ratio picks the lowest-index
/// round(ratio * K) users of every domain; domains makes every user of the
/// listed domains adversarial.
struct AtAssignment {
  enum class Rule : std::uint8_t { per_domain_ratio, domains } rule = Rule::per_domain_ratio;
  double ratio = 0.25;
  std::vector<int> domains;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  DataSpec data;
  std::vector<std::size_t> hidden{64, 64};
  Method method = Method::fedrbn;
  FederationConfig federation;
  PropagationConfig propagation;
  double detector_C = kDetectorC;
  std::optional<double> detector_gamma;  // defaults to 1 / classes
  AtAssignment at_users;
  bool model_selection = true;
  std::filesystem::path out_dir = "runs/fedrbn";

  /// Sets aggregation mode and component flags for a method.
  void set_method(Method m);
  /// Rejects contradictory settings with ArgumentError.
  void validate() const;
};

/// Parses the JSON config format; absent keys keep their defaults, unknown
/// keys are rejected.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Builds data shards, AT/ST assignment and identical initial models.
std::vector<UserState> build_users(const ExperimentConfig& cfg, Model& global);

struct UserEvaluation {
  double sa = 0.0;
  double ra = 0.0;
  double sa_clean_path = 0.0;
  double ra_clean_path = 0.0;
};

/// Test-set SA/RA. Attacks target the clean path; with use_detector the
/// predictions come from robust_predict, otherwise from the clean path.
std::vector<UserEvaluation> evaluate(std::span<const UserState> users, const AttackConfig& atk, bool use_detector,
                                     std::span<const DetectorModel> detectors, std::uint64_t seed,
                                     std::size_t workers = 1);

struct UserResult {
  int user_id = 0;
  int domain_id = 0;
  bool adversarial = false;
  UserEvaluation eval;
  std::optional<double> detector_acc;
};

struct ExperimentResult {
  std::vector<RoundRecord> history;
  std::vector<UserResult> users;
  std::vector<PropagationLogRow> propagation;
  std::uint64_t training_flops = 0;
  std::uint64_t propagation_flops = 0;
  std::uint64_t detector_flops = 0;

  double mean_sa(std::optional<bool> adversarial = std::nullopt) const;
  double mean_ra(std::optional<bool> adversarial = std::nullopt) const;
  std::optional<double> mean_detector_acc() const;
};

/// Users after federated training and per-user best-round selection.
struct TrainedFederation {
  std::vector<UserState> users;
  Model global;  // after the last round
  std::vector<RoundRecord> history;
  std::uint64_t training_flops = 0;
  bool dbn = true;
  AggregationMode aggregation = AggregationMode::fedbn;
};

/// Data, users and federated training with model selection.
TrainedFederation train_federation(const ExperimentConfig& cfg);

/// The post-training half: propagation, detector fitting and evaluation.
/// Only the copy/debias/reweight/detector flags may differ from the config
/// used for training, so one training run can serve several ablations.
ExperimentResult finish_pipeline(const ExperimentConfig& cfg, TrainedFederation trained,
                                 std::vector<UserState>* final_users = nullptr,
                                 std::vector<std::optional<DetectorModel>>* detectors = nullptr);

/// train_federation followed by finish_pipeline. Nothing is written to disk.
ExperimentResult run_pipeline(const ExperimentConfig& cfg, std::vector<UserState>* final_users = nullptr,
                              std::vector<std::optional<DetectorModel>>* detectors = nullptr,
                              Model* global = nullptr);

/// run_pipeline plus history.csv, final.csv, final_paths.csv, propagation.csv,
/// checkpoint.bin and run_meta.json under cfg.out_dir.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

void write_history_csv(std::ostream& os, std::span<const RoundRecord> rows);
void write_final_csv(std::ostream& os, const ExperimentResult& result);
void write_final_paths_csv(std::ostream& os, const ExperimentResult& result);
void write_propagation_csv(std::ostream& os, std::span<const PropagationLogRow> rows);

/// %.17g, so values round-trip exactly.
std::string format_double(double v);

}  // namespace fedrbn
