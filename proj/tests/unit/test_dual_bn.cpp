#include <random>
#include <sstream>

#include "doctest.h"
#include "fedrbn/dual_bn.hpp"
#include "fedrbn/errors.hpp"
#include "fedrbn/model.hpp"
#include "oracles.hpp"

using namespace fedrbn;

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, double mean, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> n(mean, sd);
  Tensor x({rows, cols});
  for (auto& v : x.data()) v = n(rng);
  return x;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

}  // namespace

TEST_CASE("eval with identity statistics is nearly the identity") {
  DBNState s(3);
  const Tensor x = Tensor::matrix({{0.5, -2.0, 3.0}});
  const Tensor y = dbn_forward(s, x, BnPath::clean, false);
  for (std::size_t c = 0; c < 3; ++c) CHECK(y(0, c) == doctest::Approx(x(0, c)).epsilon(1e-5));
}

TEST_CASE("the switch selects the statistic path") {
  DBNState s(1);
  s.noise_mean = {10.0};
  const Tensor x = Tensor::matrix({{10.0}});
  CHECK(dbn_forward(s, x, BnPath::clean, false)(0, 0) == doctest::Approx(10.0 / std::sqrt(1.0 + 1e-5)));
  CHECK(dbn_forward(s, x, BnPath::clean, false)(0, 0) == doctest::Approx(9.99995).epsilon(1e-9));
  CHECK(dbn_forward(s, x, BnPath::noise, false)(0, 0) == 0.0);
}

TEST_CASE("training batch {0, 2} normalizes to about -1 and +1") {
  DBNState s(1);
  const Tensor y = dbn_forward(s, Tensor::matrix({{0.0}, {2.0}}), BnPath::clean, true);
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(y(0, 0) == doctest::Approx(-expect).epsilon(1e-12));
  CHECK(y(1, 0) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(y(1, 0) == doctest::Approx(0.999995).epsilon(1e-9));
  // Running stats: 0.9 * 0 + 0.1 * 1 and 0.9 * 1 + 0.1 * 1.
  CHECK(s.mean[0] == doctest::Approx(0.1));
  CHECK(s.var[0] == doctest::Approx(1.0));
  CHECK(s.noise_mean[0] == 0.0);
  CHECK(s.noise_var[0] == 1.0);
}

TEST_CASE("argument errors") {
  DBNState s(2);
  CHECK_THROWS_AS(dbn_forward(s, Tensor::matrix({{1.0, 2.0}}), BnPath::clean, true), ArgumentError);
  CHECK_THROWS_AS(dbn_forward(s, Tensor::matrix({{1.0, 2.0, 3.0}}), BnPath::clean, false), DimensionError);
  DBNState bad(2);
  bad.var[1] = -1.0;
  CHECK_THROWS_AS(bad.validate(), ArgumentError);
}

TEST_CASE("matches a reference single-path batch norm") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t p = 1 + trial % 5;
    DBNState s(p);
    std::uniform_real_distribution<double> u(0.5, 2.0), m(-1.0, 1.0);
    for (std::size_t c = 0; c < p; ++c) {
      s.weight[c] = u(rng);
      s.bias[c] = m(rng);
      s.mean[c] = m(rng);
      s.var[c] = u(rng);
    }
    const Tensor x = gaussian(7, p, 0.3, 2.0, rng);
    DBNState train = s;
    CHECK(max_abs_diff(dbn_forward(train, x, BnPath::clean, true),
                       oracle::reference_batch_norm(x, {}, {}, s.weight, s.bias, s.eps)) <= 1e-12);
    CHECK(max_abs_diff(dbn_forward(s, x, BnPath::clean, false),
                       oracle::reference_batch_norm(x, s.mean, s.var, s.weight, s.bias, s.eps)) <= 1e-12);
  }
}

TEST_CASE("equal statistics make both paths identical") {
  std::mt19937_64 rng(3);
  DBNState s(4);
  s.mean = s.noise_mean = {0.1, -0.2, 0.3, 0.4};
  s.var = s.noise_var = {0.5, 1.5, 2.0, 0.7};
  const Tensor x = gaussian(5, 4, 0.0, 1.0, rng);
  CHECK(dbn_forward(s, x, BnPath::clean, false) == dbn_forward(s, x, BnPath::noise, false));
}

TEST_CASE("path isolation over many training forwards") {
  std::mt19937_64 rng(8);
  DBNState s(3);
  s.noise_mean = {1, 2, 3};
  const auto noise_mean = s.noise_mean, noise_var = s.noise_var;
  for (int i = 0; i < 20; ++i) dbn_forward(s, gaussian(8, 3, 1.0, 2.0, rng), BnPath::clean, true);
  CHECK(s.noise_mean == noise_mean);
  CHECK(s.noise_var == noise_var);
  const auto mean = s.mean, var = s.var;
  for (int i = 0; i < 20; ++i) dbn_forward(s, gaussian(8, 3, -1.0, 0.5, rng), BnPath::noise, true);
  CHECK(s.mean == mean);
  CHECK(s.var == var);
}

TEST_CASE("running statistics converge to the data moments") {
  // A momentum-0.1 average of batch moments keeps about 5% relative noise per
  // channel, so the check averages over many channels.
  std::mt19937_64 rng(2024);
  const std::size_t p = 64;
  DBNState s(p);
  const double m = 1.5, sd = 2.0;
  for (int b = 0; b < 500; ++b) dbn_forward(s, gaussian(32, p, m, sd, rng), BnPath::noise, true);
  double mean = 0.0, var = 0.0;
  for (std::size_t c = 0; c < p; ++c) {
    mean += s.noise_mean[c] / static_cast<double>(p);
    var += s.noise_var[c] / static_cast<double>(p);
  }
  CHECK(mean == doctest::Approx(m).epsilon(0.05));
  // The biased batch variance has expectation (31/32) v.
  CHECK(var == doctest::Approx(sd * sd).epsilon(0.05));
}

TEST_CASE("export and import of statistics") {
  Model m = make_mlp({4, {3, 5}, 2}, 1);
  const StatBundle fresh = export_stats(m);
  REQUIRE(fresh.layers.size() == 2);
  for (const auto& l : fresh.layers)
    for (std::size_t c = 0; c < l.clean.mean.size(); ++c) {
      CHECK(l.clean.mean[c] == 0.0);
      CHECK(l.clean.var[c] == 1.0);
      CHECK(l.noise.mean[c] == 0.0);
      CHECK(l.noise.var[c] == 1.0);
    }
  CHECK(fresh.channels() == std::vector<std::size_t>{3, 5});

  std::mt19937_64 rng(5);
  m.training = true;
  forward(m, gaussian(6, 4, 0.5, 1.0, rng));
  const StatBundle after_clean = export_stats(m);
  for (std::size_t i = 0; i < 2; ++i) CHECK(after_clean.layers[i].noise == fresh.layers[i].noise);
  m.training = false;

  SUBCASE("self import is a no-op") {
    std::vector<PathStats> noise;
    for (const auto& l : export_stats(m).layers) noise.push_back(l.noise);
    const Model before = m;
    import_noise_stats(m, noise);
    CHECK(m == before);
  }
  SUBCASE("imported stats drive the noise path only") {
    const Tensor x = gaussian(3, 4, 0.5, 1.0, rng);
    const Tensor clean_before = eval_logits(m, x, BnPath::clean);
    std::vector<PathStats> noise{{std::vector<double>(3, 5.0), std::vector<double>(3, 4.0)},
                                 {std::vector<double>(5, -1.0), std::vector<double>(5, 2.0)}};
    import_noise_stats(m, noise);
    CHECK(eval_logits(m, x, BnPath::clean) == clean_before);
    const auto& bn = std::get<DBNState>(m.layers[1]);
    CHECK(bn.noise_mean == noise[0].mean);
    CHECK(bn.noise_var == noise[0].var);
  }
  SUBCASE("shape and sign errors leave the model untouched") {
    const Model before = m;
    std::vector<PathStats> wrong{{std::vector<double>(3, 0.0), std::vector<double>(3, 1.0)}};
    CHECK_THROWS_AS(import_noise_stats(m, wrong), DimensionError);
    std::vector<PathStats> negative{{std::vector<double>(3, 0.0), std::vector<double>(3, 1.0)},
                                    {std::vector<double>(5, 0.0), std::vector<double>(5, -1.0)}};
    CHECK_THROWS_AS(import_noise_stats(m, negative), ArgumentError);
    CHECK(m == before);
  }
}

TEST_CASE("imported (5, 4) noise stats map x = 5 to zero") {
  DBNState s(1);
  Model m;
  m.layers.push_back(s);
  import_noise_stats(m, std::vector<PathStats>{{{5.0}, {4.0}}});
  CHECK(eval_logits(m, Tensor::matrix({{5.0}}), BnPath::noise)(0, 0) == 0.0);
}

TEST_CASE("stat bundle serialization round trips bit-exactly") {
  Model m = make_mlp({4, {3, 5}, 2}, 9);
  std::mt19937_64 rng(1);
  m.training = true;
  forward(m, gaussian(6, 4, 0.5, 1.0, rng));
  m.bn_mode = BnPath::noise;
  forward(m, gaussian(6, 4, 0.1, 3.0, rng));
  const StatBundle b = export_stats(m);
  std::stringstream ss;
  write_stat_bundle(ss, b);
  StatBundle back = read_stat_bundle(ss);
  back.owner_id = b.owner_id;
  back.domain_id = b.domain_id;
  CHECK(back == b);

  std::string bytes;
  {
    std::stringstream s2;
    write_stat_bundle(s2, b);
    bytes = s2.str();
  }
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_stat_bundle(truncated), FormatError);
}
