#include "fedrbn/adversary.hpp"

#include <algorithm>
#include <cmath>

#include "fedrbn/errors.hpp"

namespace fedrbn {
namespace {

// Clamp into [x - eps, x + eps] intersected with [lo, hi]. Rounding in x + eps
// can land one ulp outside the ball, so step back until the check holds.
double project(double v, double x, double eps, double lo, double hi) {
  double out = std::clamp(v, std::max(lo, x - eps), std::min(hi, x + eps));
  while (out - x > eps) out = std::nextafter(out, x);
  while (x - out > eps) out = std::nextafter(out, x);
  return out;
}

}  // namespace

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0)) throw ArgumentError("attack epsilon must be non-negative");
  if (steps < 0) throw ArgumentError("attack steps must be non-negative");
  if (steps > 0 && !(step_size > 0.0)) throw ArgumentError("attack step size must be positive");
  if (!(lo < hi)) throw ArgumentError("attack box needs lo < hi");
}

Tensor pgd_attack(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
                  const AttackConfig& cfg, Rng& rng) {
  if (model.training) throw ContractError("pgd_attack requires an eval-mode model");
  cfg.validate();
  if (labels.size() != x.rows()) throw DimensionError("one label per input row required");
  for (double v : x.data())
    if (v < cfg.lo || v > cfg.hi) throw ArgumentError("attack input lies outside the box");

  Tensor adv = x;
  if (cfg.epsilon == 0.0) return adv;

  auto xs = x.data();
  auto as = adv.data();
  if (cfg.random_start) {
    std::uniform_real_distribution<double> noise(-cfg.epsilon, cfg.epsilon);
    for (std::size_t k = 0; k < as.size(); ++k)
      as[k] = project(xs[k] + noise(rng), xs[k], cfg.epsilon, cfg.lo, cfg.hi);
  }

  const Tensor y = one_hot(labels, model.output_dim());
  for (int step = 0; step < cfg.steps; ++step) {
    const auto g = loss_and_grad_eval(model, adv, y).input_grad;
    auto gs = g.data();
    for (std::size_t k = 0; k < as.size(); ++k) {
      const double dir = gs[k] > 0.0 ? 1.0 : (gs[k] < 0.0 ? -1.0 : 0.0);
      as[k] = project(as[k] + cfg.step_size * dir, xs[k], cfg.epsilon, cfg.lo, cfg.hi);
    }
  }
  return adv;
}

}  // namespace fedrbn
