#include <random>

#include "doctest.h"
#include "fedrbn/adversary.hpp"
#include "fedrbn/datagen.hpp"
#include "fedrbn/errors.hpp"
#include "fedrbn/model.hpp"

using namespace fedrbn;

namespace {

Tensor uniform_box(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor x({rows, cols});
  for (auto& v : x.data()) v = u(rng);
  // Put some entries exactly on the box faces.
  for (std::size_t i = 0; i < x.size(); i += 7) x.data()[i] = (i / 7) % 2 ? 1.0 : 0.0;
  return x;
}

bool within_constraints(const Tensor& x, const Tensor& adv, const AttackConfig& cfg) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = adv.data()[i], o = x.data()[i];
    if (!(a >= cfg.lo && a <= cfg.hi)) return false;
    if (!(a - o <= cfg.epsilon && o - a <= cfg.epsilon)) return false;
  }
  return true;
}

// Standard-trained MLP on one synthetic domain.
Model trained_model(const LabeledDataset& data, std::uint64_t seed) {
  Model m = make_mlp({data.dim(), {32}, data.classes}, seed);
  m.training = true;
  std::vector<std::size_t> idx(32);
  for (int epoch = 0; epoch < 15; ++epoch)
    for (std::size_t start = 0; start + 32 <= data.size(); start += 32) {
      for (std::size_t k = 0; k < 32; ++k) idx[k] = start + k;
      const auto batch = data.subset(idx);
      const auto lg = loss_and_grad(m, batch.features, one_hot(batch.labels, data.classes));
      sgd_step(m, lg.grads, 0.1);
    }
  m.training = false;
  return m;
}

double accuracy(const Model& m, const Tensor& x, const std::vector<std::size_t>& y) {
  const auto pred = argmax_rows(eval_logits(m, x, BnPath::clean));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hit += pred[i] == y[i];
  return static_cast<double>(hit) / static_cast<double>(y.size());
}

}  // namespace

TEST_CASE("default attack configuration") {
  const AttackConfig cfg;
  CHECK(cfg.epsilon == 8.0 / 255.0);
  CHECK(cfg.steps == 7);
  CHECK(cfg.step_size == 2.0 / 255.0);
  CHECK_FALSE(cfg.random_start);
  CHECK(cfg.lo == 0.0);
  CHECK(cfg.hi == 1.0);
}

TEST_CASE("config validation") {
  AttackConfig cfg;
  cfg.epsilon = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = {};
  cfg.step_size = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg.steps = 0;
  CHECK_NOTHROW(cfg.validate());
  cfg = {};
  cfg.lo = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
}

TEST_CASE("one hand-computed step on logits (x, 0)") {
  LinearLayer lin(1, 2);
  lin.weight = {1.0, 0.0};
  Model m;
  m.layers.push_back(lin);
  AttackConfig cfg;
  cfg.epsilon = 0.1;
  cfg.steps = 1;
  cfg.step_size = 0.1;
  Rng rng(0);
  // dloss/dx = (p0 - 1) * theta < 0 for label 0, so the step goes down.
  const Tensor adv = pgd_attack(m, Tensor::matrix({{0.5}}), std::vector<std::size_t>{0}, cfg, rng);
  CHECK(adv(0, 0) == doctest::Approx(0.4).epsilon(1e-15));
}

TEST_CASE("epsilon zero returns the input exactly") {
  const Model m = make_mlp({6, {5}, 3}, 1);
  const Tensor x = uniform_box(4, 6, 2);
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  Rng rng(1);
  CHECK(pgd_attack(m, x, std::vector<std::size_t>{0, 1, 2, 0}, cfg, rng) == x);
}

TEST_CASE("contract and argument errors") {
  Model m = make_mlp({3, {4}, 2}, 1);
  Rng rng(0);
  const std::vector<std::size_t> y{0};
  CHECK_THROWS_AS(pgd_attack(m, Tensor::matrix({{0.5, 1.5, 0.2}}), y, {}, rng), ArgumentError);
  m.training = true;
  CHECK_THROWS_AS(pgd_attack(m, Tensor::matrix({{0.5, 0.5, 0.2}}), y, {}, rng), ContractError);
}

TEST_CASE("ball and box constraints hold exactly on 1000 inputs") {
  const Model m = make_mlp({8, {16}, 4}, 3);
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> eps(0.0, 0.3), step(1e-3, 0.2);
  std::size_t checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    AttackConfig cfg;
    cfg.epsilon = eps(rng);
    cfg.step_size = step(rng);
    cfg.steps = 1 + trial % 9;
    cfg.random_start = trial % 2 == 1;
    const Tensor x = uniform_box(50, 8, 100 + trial);
    std::vector<std::size_t> y(50);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = i % 4;
    Rng attack_rng(trial);
    const Tensor adv = pgd_attack(m, x, y, cfg, attack_rng);
    CHECK(within_constraints(x, adv, cfg));
    checked += x.rows();
  }
  CHECK(checked == 1000);
}

TEST_CASE("attacks are deterministic and leave the model alone") {
  const Model m = make_mlp({8, {16}, 4}, 3);
  const Tensor x = uniform_box(10, 8, 5);
  const std::vector<std::size_t> y{0, 1, 2, 3, 0, 1, 2, 3, 0, 1};
  AttackConfig cfg;
  cfg.random_start = true;
  Rng a(9), b(9);
  const Model before = m;
  CHECK(pgd_attack(m, x, y, cfg, a) == pgd_attack(m, x, y, cfg, b));
  CHECK(m == before);
}

TEST_CASE("more steps never help the defender on a standard-trained model") {
  double clean = 0.0, one = 0.0, seven = 0.0;
  int ordered = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto domains = make_domains(1, 5, 16, 1200, seed);
    const auto [train, test] = split_at(domains[0], 1000, seed);
    const Model m = trained_model(train, seed);
    AttackConfig one_step;
    one_step.steps = 1;
    Rng r1(seed), r7(seed);
    const double c = accuracy(m, test.features, test.labels);
    const double a1 = accuracy(m, pgd_attack(m, test.features, test.labels, one_step, r1), test.labels);
    const double a7 = accuracy(m, pgd_attack(m, test.features, test.labels, AttackConfig{}, r7), test.labels);
    clean += c;
    one += a1;
    seven += a7;
    ordered += a7 <= a1 && a1 <= c;
  }
  CHECK(seven <= one);
  CHECK(one <= clean);
  CHECK(ordered >= 3);
}
