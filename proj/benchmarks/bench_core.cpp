#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "fedrbn/adversary.hpp"
#include "fedrbn/detector.hpp"
#include "fedrbn/federation.hpp"
#include "fedrbn/model.hpp"
#include "fedrbn/propagation.hpp"

using namespace fedrbn;

namespace {

Tensor random_inputs(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor x({rows, cols});
  for (auto& v : x.data()) v = u(rng);
  return x;
}

std::vector<std::size_t> random_labels(std::size_t n, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> y(n);
  for (auto& v : y) v = std::uniform_int_distribution<std::size_t>(0, classes - 1)(rng);
  return y;
}

void bm_forward_backward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  Model m = make_mlp({}, 1);
  m.training = true;
  const Tensor x = random_inputs(batch, 32, 2);
  const Tensor y = one_hot(random_labels(batch, 10, 3), 10);
  for (auto _ : state) benchmark::DoNotOptimize(loss_and_grad(m, x, y));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(bm_forward_backward)->Arg(32)->Arg(128);

void bm_pgd(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const Model m = make_mlp({}, 1);
  const Tensor x = random_inputs(batch, 32, 2);
  const auto y = random_labels(batch, 10, 3);
  Rng rng(4);
  for (auto _ : state) benchmark::DoNotOptimize(pgd_attack(m, x, y, {}, rng));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(bm_pgd)->Arg(32)->Arg(200);

void bm_smo_fit(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  DetectorDataset d{random_inputs(n, 10, 5), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = static_cast<int>(i % 2);
    for (std::size_t k = 0; k < 10; ++k) d.features(i, k) += 0.3 * d.labels[i];
  }
  for (auto _ : state) benchmark::DoNotOptimize(fit_svm(d, 10.0, 0.1));
}
BENCHMARK(bm_smo_fit)->Arg(50)->Arg(200)->Unit(benchmark::kMillisecond);

void bm_propagation(benchmark::State& state) {
  const auto sources = static_cast<std::size_t>(state.range(0));
  std::vector<UserState> users(sources + 1);
  for (std::size_t i = 0; i < users.size(); ++i) {
    users[i].user_id = static_cast<int>(i);
    users[i].q = i == 0 ? 0.0 : 0.5;
    users[i].model = make_mlp({}, i + 1);
    users[i].model.training = true;
    forward(users[i].model, random_inputs(64, 32, 10 + i));
  }
  std::vector<const UserState*> src;
  for (std::size_t i = 1; i < users.size(); ++i) src.push_back(&users[i]);
  for (auto _ : state) benchmark::DoNotOptimize(propagate(users[0], src, {}));
}
BENCHMARK(bm_propagation)->Arg(3)->Arg(12);

}  // namespace
BENCHMARK_MAIN();
