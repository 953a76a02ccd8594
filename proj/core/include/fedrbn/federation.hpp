#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "fedrbn/adversary.hpp"
#include "fedrbn/datagen.hpp"
#include "fedrbn/detector.hpp"
#include "fedrbn/model.hpp"

namespace fedrbn {

enum class AggregationMode : std::uint8_t {
  fedavg,  // every parameter, BN statistics included, is averaged
  fedbn,   // dual-BN layers stay local
};

/// Switches for the FedRBN components, in ablation order.
struct AblationFlags {
  bool dbn = true;
  bool detector = true;
  bool copy = true;
  bool debias = true;
  bool reweight = true;

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

inline constexpr double kAdversarialFraction = 0.5;

struct UserState {
  int user_id = 0;
  int domain_id = 0;
  double q = 0.0;  // 0 for standard training, 0.5 for adversarial training
  LabeledDataset train, val, test;
  Model model;
  std::uint64_t flops = 0;  // cumulative local-training operations

  bool adversarial() const noexcept { return q > 0.0; }
  void validate() const;
};

struct FederationConfig {
  int rounds = 50;
  int local_epochs = 1;
  std::size_t batch_size = 32;
  double lr = 1e-2;
  AggregationMode aggregation = AggregationMode::fedbn;
  AblationFlags flags;
  AttackConfig attack;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  // When non-zero every user runs exactly this many batches per round
  // (unequal dataset sizes); otherwise local_epochs passes over the data.
  std::size_t iterations_per_round = 0;
  // Per-round validation SA/RA; disable to save time in tests.
  bool evaluate_rounds = true;

  void validate() const;
};

enum class PassKind : std::uint8_t { forward, backward };

/// Add-or-multiply count: linear 2*B*in*out, dual BN 6*B*p, relu free;
/// a backward pass costs twice the forward pass.
std::uint64_t count_flops(const Layer& layer, std::size_t batch, PassKind pass);
std::uint64_t count_flops(const Model& model, std::size_t batch, PassKind pass);
/// One forward plus one backward per PGD step.
std::uint64_t pgd_flops(const Model& model, std::size_t batch, int steps);

/// Copies the parts of `global` the mode shares into `local`.
void load_global(Model& local, const Model& global, AggregationMode mode);

/// Runs one local round (Algorithm-1 style mixed clean/adversarial loss) and
/// returns the mean per-batch loss. `round` seeds the user's RNG stream.
double local_train_round(UserState& user, const Model& global, const FederationConfig& cfg, int round);

/// a_k = |D_k| / sum_j |D_j| over training-set sizes.
std::vector<double> aggregation_weights(std::span<const UserState> users);

/// Weighted parameter average written into `global`. In fedbn mode no dual-BN
/// field of any model is read or written.
void aggregate(std::span<const UserState> users, AggregationMode mode, Model& global);

struct RoundRecord {
  int round = 0;
  int user_id = 0;
  int domain_id = 0;
  bool adversarial = false;
  double loss = 0.0;
  double sa = 0.0;
  double ra = 0.0;
  std::uint64_t flops = 0;
};

struct Accuracy {
  double sa = 0.0;
  double ra = 0.0;
};

/// SA through the clean path; RA on PGD inputs crafted against the clean path
/// and classified through `predict_path`.
Accuracy path_accuracy(const Model& model, const LabeledDataset& data, const AttackConfig& atk, BnPath predict_path,
                       std::uint64_t seed, std::size_t batch_size = 100);

/// Path a user's robust predictions go through during validation.
BnPath validation_path(const UserState& user, const AblationFlags& flags);

using RoundObserver = std::function<void(int round, std::vector<UserState>& users, std::span<const RoundRecord> rows)>;

/// rounds x (local training -> aggregate -> redistribute). Rounds are numbered
/// from start_round + 1; results do not depend on cfg.workers.
std::vector<RoundRecord> run_federated_training(std::vector<UserState>& users, Model& global,
                                                const FederationConfig& cfg, const RoundObserver& observer = {},
                                                int start_round = 0);

/// Runs fn(0..n-1) on up to `workers` threads and rethrows the first failure.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

/// Resumable snapshot: global model, per-user dual-BN layers, optional
/// per-user shared parameters and optional detectors.
struct Checkpoint {
  struct UserEntry {
    int user_id = 0;
    int domain_id = 0;
    double q = 0.0;
    std::uint64_t flops = 0;
    std::vector<DBNState> dbn;
    std::optional<Model> own_model;  // set when the user's shared parameters diverge from global
    std::optional<DetectorModel> detector;
  };
  int round = 0;
  Model global;
  std::vector<UserEntry> users;
};

Checkpoint make_checkpoint(int round, const Model& global, std::span<const UserState> users,
                           std::span<const std::optional<DetectorModel>> detectors = {});
/// Rebuilds user models from a checkpoint; users must already hold their data.
void restore_checkpoint(const Checkpoint& ckpt, Model& global, std::vector<UserState>& users);

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);

}  // namespace fedrbn
