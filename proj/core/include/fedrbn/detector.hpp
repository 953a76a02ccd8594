#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "fedrbn/adversary.hpp"
#include "fedrbn/model.hpp"
#include "fedrbn/tensor.hpp"

namespace fedrbn {

inline constexpr double kDetectorC = 10.0;

/// Logit vectors labelled 0 (clean) or 1 (adversarial).
struct DetectorDataset {
  Tensor features;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
};

/// RBF-kernel SVM over logit vectors. decision(u) = sum_j coef_j k(sv_j, u) + bias,
/// with k(u, v) = exp(-gamma |u - v|^2); positive decisions mean adversarial.
/// A model with no support vectors is a constant detector (sign of bias).
struct DetectorModel {
  Tensor support_vectors;
  std::vector<double> dual_coefs;  // alpha_j * y_j, y in {-1, +1}
  double bias = -1.0;
  double gamma = 0.1;
  double C = kDetectorC;

  static DetectorModel constant(int label, double gamma = 0.1, double C = kDetectorC);

  std::size_t support_count() const noexcept { return dual_coefs.size(); }
  double decision(std::span<const double> features) const;
  int predict(std::span<const double> features) const { return decision(features) > 0.0 ? 1 : 0; }

  friend bool operator==(const DetectorModel&, const DetectorModel&) = default;
};

struct SmoOptions {
  double tolerance = 1e-3;   // KKT violation allowed at termination
  double alpha_eps = 1e-10;  // smallest alpha change counted as progress
  int max_passes = 200;
};

struct SvmFitReport {
  DetectorModel model;
  std::vector<double> alphas;  // in the order of the input rows
  int passes = 0;
  bool converged = false;
  std::uint64_t kernel_evaluations = 0;
};

/// Builds D_a: for each validation row, (clean-path logits of x, 0) followed by
/// (clean-path logits of pgd(x), 1). Attacks run batch-wise against h = 0.
DetectorDataset build_detector_dataset(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
                                       const AttackConfig& atk, Rng& rng, std::size_t batch_size = 32);

/// Soft-margin dual via Platt's SMO (examine-all / non-bound alternation,
/// second choice by max |E1 - E2|). Rows are first put into a canonical
/// lexicographic order so the fit does not depend on input ordering.
/// Throws DegenerateFitError when only one label is present.
SvmFitReport fit_svm_report(const DetectorDataset& data, double C, double gamma, const SmoOptions& opts = {});

DetectorModel fit_svm(const DetectorDataset& data, double C, double gamma, const SmoOptions& opts = {});

/// fit_svm, except that single-label data yields a constant clean detector
/// and a warning on stderr.
DetectorModel fit_detector(const DetectorDataset& data, double C, double gamma, std::uint64_t* kernel_evals = nullptr);

/// sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j k_ij with y in {-1, +1}.
double svm_dual_objective(const DetectorDataset& data, std::span<const double> alphas, double gamma);

double detector_accuracy(const DetectorModel& det, const DetectorDataset& data);

struct RobustPrediction {
  std::size_t label = 0;
  BnPath path = BnPath::clean;
};

/// Two-pass inference: clean-path logits feed the detector; flagged rows are
/// re-run through the noise path. Never abstains.
std::vector<RobustPrediction> robust_predict(const Model& model, const DetectorModel& det, const Tensor& x);

// Detector record: "FRDT", u16 version, u32 support count, u32 feature dim,
// f64 bias, gamma, C, then support vectors row-major and dual coefficients.
void write_detector(std::ostream& os, const DetectorModel& det);
DetectorModel read_detector(std::istream& is);

}  // namespace fedrbn
