#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "fedrbn/errors.hpp"
#include "fedrbn/model.hpp"
#include "oracles.hpp"

using namespace fedrbn;

namespace {

Model single_linear(std::size_t in, std::size_t out, std::vector<double> w, std::vector<double> b) {
  LinearLayer lin(in, out);
  lin.weight = std::move(w);
  lin.bias = std::move(b);
  Model m;
  m.layers.push_back(std::move(lin));
  return m;
}

Tensor random_input(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor x({rows, cols});
  for (auto& v : x.data()) v = u(rng);
  return x;
}

std::vector<std::size_t> random_labels(std::size_t n, std::size_t classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, classes - 1);
  std::vector<std::size_t> y(n);
  for (auto& v : y) v = pick(rng);
  return y;
}

}  // namespace

TEST_CASE("tensor rejects bad shapes and non-finite data") {
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor({1, 1}, std::vector<double>{std::nan("")}), ArgumentError);
  CHECK_THROWS_AS(Tensor::matrix({{1, 2}, {3}}), DimensionError);
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(m.rows() == 2);
  CHECK(m(1, 0) == 3);
  const std::vector<std::size_t> idx{1};
  CHECK(m.gather_rows(idx) == Tensor::matrix({{3, 4}}));
}

TEST_CASE("forward of hand-built linear models") {
  SUBCASE("identity map") {
    Model m = single_linear(2, 2, {1, 0, 0, 1}, {0, 0});
    CHECK(forward(m, Tensor::matrix({{1, 2}})) == Tensor::matrix({{1, 2}}));
  }
  SUBCASE("zero weights expose the bias") {
    Model m = single_linear(2, 3, std::vector<double>(6, 0.0), {1, 2, 3});
    CHECK(forward(m, Tensor::matrix({{7, -4}})) == Tensor::matrix({{1, 2, 3}}));
  }
  SUBCASE("hand matrix multiply") {
    // x W with W = [[1,0],[1,1]] (in x out); weights are stored out x in.
    Model m = single_linear(2, 2, {1, 1, 0, 1}, {0, 0});
    CHECK(forward(m, Tensor::matrix({{2, 3}})) == Tensor::matrix({{5, 3}}));
  }
}

TEST_CASE("forward argument errors") {
  Model m = make_mlp({4, {3}, 2}, 1);
  CHECK_THROWS_AS(forward(m, Tensor({1, 5})), DimensionError);
  CHECK_THROWS_AS(forward(m, Tensor()), ArgumentError);
  m.training = true;
  CHECK_THROWS_AS(forward(m, Tensor({1, 4})), ArgumentError);
}

TEST_CASE("cross-entropy examples") {
  const std::vector<std::size_t> y{3};
  CHECK(cross_entropy(Tensor({1, 10}, 0.0), y) == doctest::Approx(std::log(10.0)).epsilon(1e-12));
  Tensor big({1, 10}, 0.0);
  big(0, 3) = 1000.0;
  CHECK(cross_entropy(big, y) == doctest::Approx(0.0));
  CHECK(std::isfinite(cross_entropy(big, std::vector<std::size_t>{0})));
}

TEST_CASE("loss_and_grad rejects labels that are not one-hot") {
  Model m = make_mlp({3, {4}, 2}, 2);
  CHECK_THROWS_AS(loss_and_grad_eval(m, Tensor({1, 3}, 0.5), Tensor::matrix({{0.5, 0.5}})), ArgumentError);
  CHECK_THROWS_AS(loss_and_grad_eval(m, Tensor({1, 3}, 0.5), Tensor::matrix({{1, 1}})), ArgumentError);
}

TEST_CASE("analytic gradients match central differences") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    CAPTURE(seed);
    const std::size_t in = 2 + seed % 4, classes = 2 + seed % 3, batch = 3 + seed % 4;
    Model m = make_mlp({in, {3 + seed % 3, 4}, classes}, seed);
    // Move the statistics away from initialization so eval mode is non-trivial.
    m.training = true;
    m.bn_mode = BnPath::clean;
    forward(m, random_input(8, in, seed + 100));
    m.bn_mode = BnPath::noise;
    forward(m, random_input(8, in, seed + 200));
    const Tensor x = random_input(batch, in, seed + 300);
    const auto y = random_labels(batch, classes, seed + 400);
    const Tensor oh = one_hot(y, classes);
    for (bool training : {false, true})
      for (BnPath h : {BnPath::clean, BnPath::noise}) {
        CAPTURE(training);
        m.training = training;
        m.bn_mode = h;
        Model work = m;
        const auto lg = training ? loss_and_grad(work, x, oh) : loss_and_grad_eval(work, x, oh);
        CHECK(oracle::max_rel_error(lg.grads.flatten(), oracle::fd_param_grads(m, x, y)) < 1e-6);
        const std::vector<double> gx(lg.input_grad.data().begin(), lg.input_grad.data().end());
        CHECK(oracle::max_rel_error(gx, oracle::fd_input_grads(m, x, y)) < 1e-6);
      }
  }
}

TEST_CASE("sgd_step arithmetic") {
  Model m = single_linear(1, 1, {1.0}, {0.0});
  Gradients g = Gradients::zeros_like(m);
  std::get<LinearGrad>(g.layers[0]).weight[0] = 2.0;
  sgd_step(m, g, 0.1);
  CHECK(std::get<LinearLayer>(m.layers[0]).weight[0] == doctest::Approx(0.8));
  CHECK_THROWS_AS(sgd_step(m, g, -1.0), ArgumentError);
}

TEST_CASE("sgd_step with lr 0 and running statistics") {
  Model m = make_mlp({3, {4}, 2}, 3);
  m.training = true;
  forward(m, random_input(6, 3, 1));
  const Model before = m;
  Model frozen = m;
  frozen.training = false;
  const auto lg = loss_and_grad_eval(frozen, random_input(2, 3, 2), one_hot(std::vector<std::size_t>{0, 1}, 2));
  sgd_step(m, lg.grads, 0.0);
  CHECK(m == before);
  sgd_step(m, lg.grads, 0.5);
  const auto& bn = std::get<DBNState>(m.layers[1]);
  const auto& bn0 = std::get<DBNState>(before.layers[1]);
  CHECK(bn.mean == bn0.mean);
  CHECK(bn.var == bn0.var);
  CHECK(bn.noise_mean == bn0.noise_mean);
  CHECK(bn.noise_var == bn0.noise_var);
}

TEST_CASE("two sgd steps equal one step with summed gradients") {
  Model base = make_mlp({3, {4}, 2}, 5);
  const auto a = loss_and_grad_eval(base, random_input(4, 3, 7), one_hot(random_labels(4, 2, 8), 2)).grads;
  const auto b = loss_and_grad_eval(base, random_input(4, 3, 9), one_hot(random_labels(4, 2, 10), 2)).grads;
  Model twice = base, once = base;
  sgd_step(twice, a, 0.25);
  sgd_step(twice, b, 0.25);
  Gradients sum = a;
  sum.add_scaled(1.0, b);
  sgd_step(once, sum, 0.25);
  const auto ft = [](const Model& m) {
    std::vector<double> out;
    for (const auto& r : param_refs(m)) out.insert(out.end(), r.values.begin(), r.values.end());
    return out;
  };
  CHECK(oracle::max_rel_error(ft(twice), ft(once)) < 1e-14);
}

TEST_CASE("forward is deterministic and argmax breaks ties low") {
  Model m = make_mlp({5, {6, 6}, 3}, 11);
  const Tensor x = random_input(4, 5, 12);
  CHECK(eval_logits(m, x, BnPath::clean) == eval_logits(m, x, BnPath::clean));
  CHECK(argmax_rows(Tensor::matrix({{1, 3, 3}, {2, 2, 2}})) == std::vector<std::size_t>{1, 0});
  m.training = true;
  CHECK_THROWS_AS(eval_logits(m, x, BnPath::clean), ContractError);
}

TEST_CASE("make_mlp layout and validation") {
  const Model m = make_mlp({32, {64, 64}, 10}, 1);
  CHECK(m.layers.size() == 7);
  CHECK(m.dbn_count() == 2);
  CHECK(m.input_dim() == 32);
  CHECK(m.output_dim() == 10);
  CHECK(make_mlp({32, {64, 64}, 10}, 1) == m);
  CHECK_FALSE(make_mlp({32, {64, 64}, 10}, 2) == m);
  Model bad = m;
  bad.layers.back() = LinearLayer(32, 10);
  CHECK_THROWS_AS(bad.validate(), DimensionError);
}
