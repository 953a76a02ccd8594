#include "fedrbn/detector.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "fedrbn/binary_io.hpp"
#include "fedrbn/errors.hpp"

namespace fedrbn {
namespace {

constexpr std::uint16_t kDetectorVersion = 1;

double rbf(std::span<const double> u, std::span<const double> v, double gamma) {
  double d2 = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    const double d = u[k] - v[k];
    d2 += d * d;
  }
  return std::exp(-gamma * d2);
}

std::vector<double> kernel_matrix(const Tensor& x, double gamma) {
  const std::size_t n = x.rows();
  std::vector<double> k(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) k[i * n + j] = k[j * n + i] = rbf(x.row(i), x.row(j), gamma);
  return k;
}

class SmoSolver {
 public:
  SmoSolver(const std::vector<double>& kernel, std::vector<double> y, double C, const SmoOptions& opts)
      : k_(kernel), y_(std::move(y)), n_(y_.size()), C_(C), opts_(opts), alpha_(n_, 0.0), err_(n_) {
    for (std::size_t i = 0; i < n_; ++i) err_[i] = -y_[i];
  }

  void solve() {
    bool examine_all = true;
    int changed = 0;
    while ((changed > 0 || examine_all) && passes_ < opts_.max_passes) {
      changed = 0;
      for (std::size_t i = 0; i < n_; ++i)
        if (examine_all || non_bound(i)) changed += examine(i);
      ++passes_;
      if (examine_all)
        examine_all = false;
      else if (changed == 0)
        examine_all = true;
    }
    converged_ = !(changed > 0 || examine_all);
  }

  const std::vector<double>& alpha() const { return alpha_; }
  double bias() const { return b_; }
  int passes() const { return passes_; }
  bool converged() const { return converged_; }

 private:
  double K(std::size_t i, std::size_t j) const { return k_[i * n_ + j]; }
  bool non_bound(std::size_t i) const { return alpha_[i] > 0.0 && alpha_[i] < C_; }

  int examine(std::size_t i2) {
    const double r2 = err_[i2] * y_[i2];
    const bool violates = (r2 < -opts_.tolerance && alpha_[i2] < C_) || (r2 > opts_.tolerance && alpha_[i2] > 0.0);
    if (!violates) return 0;

    std::size_t best = n_;
    double best_gap = -1.0;
    std::size_t nb = 0;
    for (std::size_t i = 0; i < n_; ++i) {
      if (!non_bound(i)) continue;
      ++nb;
      const double gap = std::abs(err_[i] - err_[i2]);
      if (gap > best_gap) {
        best_gap = gap;
        best = i;
      }
    }
    if (nb > 1 && take_step(best, i2)) return 1;
    for (std::size_t i = 0; i < n_; ++i)
      if (non_bound(i) && take_step(i, i2)) return 1;
    for (std::size_t i = 0; i < n_; ++i)
      if (take_step(i, i2)) return 1;
    return 0;
  }

  bool take_step(std::size_t i1, std::size_t i2) {
    if (i1 == i2) return false;
    const double a1_old = alpha_[i1], a2_old = alpha_[i2];
    const double y1 = y_[i1], y2 = y_[i2];
    const double e1 = err_[i1], e2 = err_[i2];
    const double s = y1 * y2;

    double lo, hi;
    if (s < 0) {
      lo = std::max(0.0, a2_old - a1_old);
      hi = std::min(C_, C_ + a2_old - a1_old);
    } else {
      lo = std::max(0.0, a2_old + a1_old - C_);
      hi = std::min(C_, a2_old + a1_old);
    }
    if (!(hi > lo)) return false;

    const double k11 = K(i1, i1), k12 = K(i1, i2), k22 = K(i2, i2);
    const double eta = k11 + k22 - 2.0 * k12;
    double a2;
    if (eta > 0.0) {
      a2 = std::clamp(a2_old + y2 * (e1 - e2) / eta, lo, hi);
    } else {
      // Objective (to minimize) at both ends of the segment.
      const double f1 = y1 * (e1 - b_) - a1_old * k11 - s * a2_old * k12;
      const double f2 = y2 * (e2 - b_) - s * a1_old * k12 - a2_old * k22;
      const double l1 = a1_old + s * (a2_old - lo);
      const double h1 = a1_old + s * (a2_old - hi);
      const double lobj = l1 * f1 + lo * f2 + 0.5 * l1 * l1 * k11 + 0.5 * lo * lo * k22 + s * lo * l1 * k12;
      const double hobj = h1 * f1 + hi * f2 + 0.5 * h1 * h1 * k11 + 0.5 * hi * hi * k22 + s * hi * h1 * k12;
      if (lobj < hobj - opts_.alpha_eps)
        a2 = lo;
      else if (lobj > hobj + opts_.alpha_eps)
        a2 = hi;
      else
        a2 = a2_old;
    }
    if (std::abs(a2 - a2_old) < opts_.alpha_eps * (a2 + a2_old + opts_.alpha_eps)) return false;

    double a1 = a1_old + s * (a2_old - a2);
    const double snap = 1e-12 * C_;
    if (a1 < snap) a1 = 0.0;
    if (a1 > C_ - snap) a1 = C_;

    const double d1 = y1 * (a1 - a1_old), d2 = y2 * (a2 - a2_old);
    const double b1 = b_ - e1 - d1 * k11 - d2 * k12;
    const double b2 = b_ - e2 - d1 * k12 - d2 * k22;
    double b_new;
    if (a1 > 0.0 && a1 < C_)
      b_new = b1;
    else if (a2 > 0.0 && a2 < C_)
      b_new = b2;
    else
      b_new = 0.5 * (b1 + b2);

    for (std::size_t i = 0; i < n_; ++i) err_[i] += d1 * K(i, i1) + d2 * K(i, i2) + (b_new - b_);
    alpha_[i1] = a1;
    alpha_[i2] = a2;
    b_ = b_new;
    return true;
  }

  const std::vector<double>& k_;
  std::vector<double> y_;
  std::size_t n_;
  double C_;
  SmoOptions opts_;
  std::vector<double> alpha_, err_;
  double b_ = 0.0;
  int passes_ = 0;
  bool converged_ = false;
};

void check_dataset(const DetectorDataset& data) {
  if (data.labels.empty()) throw ArgumentError("detector dataset is empty");
  if (data.features.rows() != data.labels.size()) throw DimensionError("one label per detector row required");
  for (int l : data.labels)
    if (l != 0 && l != 1) throw ArgumentError("detector labels must be 0 or 1");
}

}  // namespace

DetectorModel DetectorModel::constant(int label, double gamma_, double C_) {
  DetectorModel m;
  m.bias = label == 1 ? 1.0 : -1.0;
  m.gamma = gamma_;
  m.C = C_;
  return m;
}

double DetectorModel::decision(std::span<const double> features) const {
  double f = bias;
  for (std::size_t j = 0; j < dual_coefs.size(); ++j) {
    const auto sv = support_vectors.row(j);
    if (sv.size() != features.size()) throw DimensionError("detector feature width mismatch");
    f += dual_coefs[j] * rbf(sv, features, gamma);
  }
  return f;
}

DetectorDataset build_detector_dataset(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
                                       const AttackConfig& atk, Rng& rng, std::size_t batch_size) {
  if (x.empty() || labels.empty()) throw ArgumentError("detector needs a non-empty validation set");
  if (x.rows() != labels.size()) throw DimensionError("one label per validation row required");
  if (batch_size == 0) throw ArgumentError("batch size must be positive");

  Model clean = model;
  clean.bn_mode = BnPath::clean;
  const std::size_t n = x.rows(), c = model.output_dim();
  DetectorDataset out{Tensor({2 * n, c}), std::vector<int>(2 * n)};
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor xb = x.gather_rows(idx);
    const Tensor adv = pgd_attack(clean, xb, labels.subspan(start, stop - start), atk, rng);
    const Tensor z_clean = eval_logits(clean, xb, BnPath::clean);
    const Tensor z_adv = eval_logits(clean, adv, BnPath::clean);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const std::size_t row = 2 * (start + r);
      std::copy_n(z_clean.row(r).begin(), c, out.features.row(row).begin());
      std::copy_n(z_adv.row(r).begin(), c, out.features.row(row + 1).begin());
      out.labels[row] = 0;
      out.labels[row + 1] = 1;
    }
  }
  return out;
}

SvmFitReport fit_svm_report(const DetectorDataset& data, double C, double gamma, const SmoOptions& opts) {
  check_dataset(data);
  if (!(C > 0.0)) throw ArgumentError("SVM C must be positive");
  if (!(gamma > 0.0)) throw ArgumentError("SVM gamma must be positive");
  const auto n_pos = std::count(data.labels.begin(), data.labels.end(), 1);
  if (n_pos == 0 || static_cast<std::size_t>(n_pos) == data.labels.size())
    throw DegenerateFitError("detector data contains a single label");

  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ra = data.features.row(a), rb = data.features.row(b);
    if (std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end())) return true;
    if (std::lexicographical_compare(rb.begin(), rb.end(), ra.begin(), ra.end())) return false;
    return data.labels[a] < data.labels[b];
  });

  const Tensor x = data.features.gather_rows(order);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = data.labels[order[i]] == 1 ? 1.0 : -1.0;

  const auto kernel = kernel_matrix(x, gamma);
  SmoSolver solver(kernel, y, C, opts);
  solver.solve();

  SvmFitReport report;
  report.passes = solver.passes();
  report.converged = solver.converged();
  report.kernel_evaluations = n * (n + 1) / 2;
  report.alphas.assign(n, 0.0);
  std::vector<std::size_t> sv;
  for (std::size_t i = 0; i < n; ++i) {
    report.alphas[order[i]] = solver.alpha()[i];
    if (solver.alpha()[i] > 0.0) sv.push_back(i);
  }

  auto& m = report.model;
  m.gamma = gamma;
  m.C = C;
  m.bias = solver.bias();
  if (!sv.empty()) {
    m.support_vectors = x.gather_rows(sv);
    for (auto i : sv) m.dual_coefs.push_back(solver.alpha()[i] * y[i]);
  }
  return report;
}

DetectorModel fit_svm(const DetectorDataset& data, double C, double gamma, const SmoOptions& opts) {
  return fit_svm_report(data, C, gamma, opts).model;
}

DetectorModel fit_detector(const DetectorDataset& data, double C, double gamma, std::uint64_t* kernel_evals) {
  try {
    auto report = fit_svm_report(data, C, gamma);
    if (kernel_evals) *kernel_evals = report.kernel_evaluations;
    return std::move(report.model);
  } catch (const DegenerateFitError& e) {
    std::cerr << "warning: " << e.what() << "; falling back to a constant clean detector\n";
    if (kernel_evals) *kernel_evals = 0;
    return DetectorModel::constant(0, gamma, C);
  }
}

double svm_dual_objective(const DetectorDataset& data, std::span<const double> alphas, double gamma) {
  check_dataset(data);
  if (alphas.size() != data.size()) throw DimensionError("one alpha per row required");
  const std::size_t n = data.size();
  double linear = 0.0, quad = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    linear += alphas[i];
    const double yi = data.labels[i] == 1 ? 1.0 : -1.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double yj = data.labels[j] == 1 ? 1.0 : -1.0;
      quad += alphas[i] * alphas[j] * yi * yj * rbf(data.features.row(i), data.features.row(j), gamma);
    }
  }
  return linear - 0.5 * quad;
}

double detector_accuracy(const DetectorModel& det, const DetectorDataset& data) {
  check_dataset(data);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) hits += det.predict(data.features.row(i)) == data.labels[i];
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

std::vector<RobustPrediction> robust_predict(const Model& model, const DetectorModel& det, const Tensor& x) {
  const Tensor clean = eval_logits(model, x, BnPath::clean);
  std::vector<RobustPrediction> out(x.rows());
  std::vector<std::size_t> flagged;
  const auto clean_labels = argmax_rows(clean);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    out[r].label = clean_labels[r];
    if (det.predict(clean.row(r)) == 1) {
      out[r].path = BnPath::noise;
      flagged.push_back(r);
    }
  }
  if (!flagged.empty()) {
    const auto noisy = argmax_rows(eval_logits(model, x.gather_rows(flagged), BnPath::noise));
    for (std::size_t k = 0; k < flagged.size(); ++k) out[flagged[k]].label = noisy[k];
  }
  return out;
}

void write_detector(std::ostream& os, const DetectorModel& det) {
  const std::size_t n = det.support_count();
  const std::size_t dim = n ? det.support_vectors.cols() : 0;
  binio::write_magic(os, "FRDT");
  binio::write_le<std::uint16_t>(os, kDetectorVersion);
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(n));
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(dim));
  binio::write_le(os, det.bias);
  binio::write_le(os, det.gamma);
  binio::write_le(os, det.C);
  if (n) binio::write_f64s(os, det.support_vectors.data());
  binio::write_f64s(os, det.dual_coefs);
}

DetectorModel read_detector(std::istream& is) {
  binio::expect_magic(is, "FRDT");
  const auto version = binio::read_le<std::uint16_t>(is);
  if (version != kDetectorVersion) throw FormatError("unsupported detector record version");
  const auto n = binio::read_le<std::uint32_t>(is);
  const auto dim = binio::read_le<std::uint32_t>(is);
  if (n > 0 && dim == 0) throw FormatError("detector record has zero-width support vectors");
  DetectorModel det;
  det.bias = binio::read_le<double>(is);
  det.gamma = binio::read_le<double>(is);
  det.C = binio::read_le<double>(is);
  if (n) det.support_vectors = Tensor({n, dim}, binio::read_f64s(is, std::size_t{n} * dim));
  det.dual_coefs = binio::read_f64s(is, n);
  return det;
}

}  // namespace fedrbn
