#pragma once

#include <cstddef>
#include <span>

#include "fedrbn/model.hpp"
#include "fedrbn/rng.hpp"
#include "fedrbn/tensor.hpp"

namespace fedrbn {

/// L-infinity PGD settings. Defaults: eps 8/255, 7 steps of 2/255, no random
/// start, inputs boxed to [0, 1].
struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  int steps = 7;
  double step_size = 2.0 / 255.0;
  bool random_start = false;
  double lo = 0.0;
  double hi = 1.0;

  void validate() const;
};

/// Projected signed-gradient ascent on the cross-entropy of `model` using its
/// current bn_mode. The model must be in eval mode and is never mutated.
///
/// Every output entry satisfies |x_adv - x| <= epsilon and lo <= x_adv <= hi
/// exactly in double arithmetic.
Tensor pgd_attack(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
                  const AttackConfig& cfg, Rng& rng);

}  // namespace fedrbn
