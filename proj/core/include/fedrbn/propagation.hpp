#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedrbn/dual_bn.hpp"
#include "fedrbn/federation.hpp"

namespace fedrbn {

inline constexpr double kDefaultLambda = 0.1;

struct PropagationConfig {
  double lambda = kDefaultLambda;
  std::optional<double> gamma_rbf;  // defaults to 100 * widest dual-BN layer
  bool debias = true;
  bool reweight = true;
  double eps0 = kBnEps;

  void validate() const;
};

/// Debiased estimate of a target's noise statistics from one source:
///   mu_hat  = mu_s^r + lambda * (mu_t - mu_s)
///   var_hat = var_s^r * (var_t / (var_s + eps0))^lambda
/// Only the target's clean statistics are read.
std::vector<PathStats> debias_copy(const StatBundle& source, const StatBundle& target, double lambda, double eps0);

/// 100 * max_l p^l.
double default_gamma_rbf(const StatBundle& bundle);

/// Squared distance between clean means plus squared distance between clean
/// standard deviations, one entry per layer.
std::vector<double> layer_distances(const StatBundle& source, const StatBundle& target);

/// alpha_i proportional to (1/L) sum_l exp(-gamma_rbf * d_W^l / p^l), normalized
/// to sum to one. Computed in log space so distant sources cannot underflow
/// every weight to zero at once.
std::vector<double> similarity_weights(std::span<const StatBundle> sources, const StatBundle& target, double gamma_rbf);

struct PropagationLogRow {
  int target_id = 0;
  int source_id = 0;
  std::size_t layer = 0;
  double distance = 0.0;
  double alpha = 0.0;
};

struct PropagationResult {
  std::vector<PathStats> noise;  // installed into the target
  std::vector<double> alphas;    // one per source, in the given order
  std::vector<PropagationLogRow> log;
  std::uint64_t flops = 0;
};

/// Estimates the target's noise statistics from every source and installs the
/// alpha-weighted average (linear in mean and in variance). Sources must be
/// adversarially trained. Target clean stats and parameters are not touched.
PropagationResult propagate(UserState& target, std::span<const UserState* const> sources,
                            const PropagationConfig& cfg);

}  // namespace fedrbn
