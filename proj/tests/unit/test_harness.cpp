#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fedrbn/errors.hpp"
#include "fedrbn/experiment.hpp"

using namespace fedrbn;

namespace {

ExperimentConfig tiny(Method method = Method::fedrbn) {
  ExperimentConfig cfg;
  cfg.seed = 4;
  cfg.data.domains = 2;
  cfg.data.users_per_domain = 2;
  cfg.data.dim = 8;
  cfg.data.classes = 4;
  cfg.data.train_per_user = 64;
  cfg.data.val_per_user = 24;
  cfg.data.test_per_user = 40;
  cfg.hidden = {16};
  cfg.set_method(method);
  cfg.federation.rounds = 3;
  cfg.federation.batch_size = 16;
  cfg.at_users.ratio = 0.5;
  return cfg;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("method names") {
  CHECK(parse_method("fedavg") == Method::fedavg);
  CHECK(std::string(method_name(Method::fedrbn)) == "fedrbn");
  CHECK_THROWS_AS(parse_method("fedprox"), ArgumentError);
}

TEST_CASE("config parsing") {
  const auto cfg = parse_config(R"({"seed": 7, "method": "fedbn", "federation": {"rounds": 2},
                                    "data": {"generator": {"noise_scale": 0.2}}, "at_users": {"ratio": 0.5}})");
  CHECK(cfg.seed == 7);
  CHECK(cfg.method == Method::fedbn);
  CHECK(cfg.federation.aggregation == AggregationMode::fedbn);
  CHECK(cfg.federation.flags == AblationFlags{false, false, false, false, false});
  CHECK(cfg.federation.rounds == 2);
  CHECK(cfg.federation.batch_size == 32);
  CHECK(cfg.data.generator.noise_scale == 0.2);
  CHECK(cfg.at_users.ratio == 0.5);
  CHECK_THROWS_AS(parse_config(R"({"sead": 1})"), FormatError);
  CHECK_THROWS_AS(parse_config(R"({"federation": {"rounds": "many"}})"), FormatError);
  CHECK_THROWS_AS(parse_config("{"), FormatError);
}

TEST_CASE("contradictory settings are rejected") {
  auto cfg = tiny();
  CHECK_NOTHROW(cfg.validate());
  SUBCASE("copy without adversarial users") {
    cfg.at_users.ratio = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  }
  SUBCASE("no adversarial users is fine for a baseline") {
    cfg.set_method(Method::fedbn);
    cfg.at_users.ratio = 0.0;
    CHECK_NOTHROW(cfg.validate());
  }
  SUBCASE("components without dual BN") {
    cfg.federation.flags.dbn = false;
    CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  }
  SUBCASE("debias without copy") {
    cfg.federation.flags.copy = false;
    CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  }
  SUBCASE("zero rounds") {
    cfg.federation.rounds = 0;
    CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  }
  SUBCASE("zero learning rate") {
    cfg.federation.lr = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  }
}

TEST_CASE("user construction") {
  const auto cfg = tiny();
  Model global;
  const auto users = build_users(cfg, global);
  REQUIRE(users.size() == 4);
  CHECK(users[0].adversarial());
  CHECK_FALSE(users[1].adversarial());
  CHECK(users[2].adversarial());
  CHECK(users[0].train.size() == 64);
  CHECK(users[0].val.size() == 24);
  CHECK(users[0].test.size() == 40);
  for (const auto& u : users) CHECK(u.model == global);

  auto by_domain = cfg;
  by_domain.at_users.rule = AtAssignment::Rule::domains;
  by_domain.at_users.domains = {1};
  const auto users2 = build_users(by_domain, global);
  CHECK_FALSE(users2[0].adversarial());
  CHECK(users2[2].adversarial());
  CHECK(users2[3].adversarial());
}

TEST_CASE("constant classifier scores 1/c under any attack") {
  auto cfg = tiny();
  Model global;
  auto users = build_users(cfg, global);
  // Balanced test set of 4 classes and a model whose output ignores x.
  for (auto& u : users) {
    std::vector<std::size_t> rows;
    std::size_t per_class[4] = {};
    for (std::size_t r = 0; r < u.test.size(); ++r)
      if (per_class[u.test.labels[r]] < 5) {
        ++per_class[u.test.labels[r]];
        rows.push_back(r);
      }
    u.test = u.test.subset(rows);
    for (auto& l : u.model.layers)
      if (auto* lin = std::get_if<LinearLayer>(&l)) std::fill(lin->weight.begin(), lin->weight.end(), 0.0);
  }
  for (const auto& e : evaluate(users, cfg.federation.attack, false, {}, 1)) {
    CHECK(e.sa == doctest::Approx(0.25));
    CHECK(e.ra == doctest::Approx(0.25));
  }
}

TEST_CASE("null attack gives RA equal to SA") {
  auto cfg = tiny();
  cfg.federation.attack.epsilon = 0.0;
  const auto result = run_pipeline(cfg);
  for (const auto& u : result.users) {
    CHECK(u.eval.ra == u.eval.sa);
    CHECK(u.eval.ra_clean_path == u.eval.sa_clean_path);
  }
}

TEST_CASE("dual BN without propagation leaves standard users at initial noise stats") {
  auto cfg = tiny();
  cfg.federation.flags = {true, false, false, false, false};
  std::vector<UserState> users;
  const auto result = run_pipeline(cfg, &users);
  for (std::size_t k = 0; k < users.size(); ++k) {
    if (!users[k].adversarial())
      for (const auto& l : export_stats(users[k].model).layers) {
        CHECK(l.noise.mean == std::vector<double>(l.noise.mean.size(), 0.0));
        CHECK(l.noise.var == std::vector<double>(l.noise.var.size(), 1.0));
      }
    CHECK(result.users[k].eval.ra == result.users[k].eval.ra_clean_path);
    CHECK(result.users[k].eval.sa == result.users[k].eval.sa_clean_path);
  }
}

TEST_CASE("copy never changes adversarial users") {
  auto cfg = tiny();
  cfg.federation.flags = {true, true, false, false, false};
  const auto without = run_pipeline(cfg);
  cfg.federation.flags.copy = true;
  const auto with = run_pipeline(cfg);
  for (std::size_t k = 0; k < with.users.size(); ++k)
    if (with.users[k].adversarial) {
      CHECK(with.users[k].eval.sa == without.users[k].eval.sa);
      CHECK(with.users[k].eval.ra == without.users[k].eval.ra);
    }
  CHECK(without.propagation.empty());
  CHECK(with.propagation.size() == 2 * 2 * 1);  // 2 targets x 2 sources x 1 layer
}

TEST_CASE("run_experiment writes reproducible outputs") {
  const auto root = std::filesystem::temp_directory_path() / "fedrbn_harness_test";
  std::filesystem::remove_all(root);
  auto cfg = tiny();
  cfg.out_dir = root / "a";
  const auto result = run_experiment(cfg);
  cfg.out_dir = root / "b";
  run_experiment(cfg);
  for (const char* f : {"history.csv", "final.csv", "final_paths.csv", "propagation.csv", "checkpoint.bin"})
    CHECK(read_file(root / "a" / f) == read_file(root / "b" / f));

  const auto history = read_file(root / "a" / "history.csv");
  CHECK(history.rfind("round,user_id,domain_id,group,loss,SA,RA,flops\n", 0) == 0);
  CHECK(read_file(root / "a" / "propagation.csv").rfind("target_id,source_id,layer,d_W,alpha\n", 0) == 0);

  // The summary rows are the means of the per-user rows.
  std::istringstream final_csv(read_file(root / "a" / "final.csv"));
  std::string line;
  std::getline(final_csv, line);
  CHECK(line == "user_id,domain_id,group,SA,RA,detector_acc");
  double sa = 0.0, ra = 0.0;
  int n = 0;
  while (std::getline(final_csv, line)) {
    std::vector<std::string> cols;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cols.push_back(c);
    REQUIRE(cols.size() == 6);
    if (cols[0] == "mean") {
      if (cols[2] == "ALL") {
        CHECK(std::abs(std::stod(cols[3]) - sa / n) <= 1e-12);
        CHECK(std::abs(std::stod(cols[4]) - ra / n) <= 1e-12);
      }
      continue;
    }
    sa += std::stod(cols[3]);
    ra += std::stod(cols[4]);
    ++n;
  }
  CHECK(n == 4);
  CHECK(std::abs(result.mean_sa() - sa / n) <= 1e-12);

  std::ifstream ck(root / "a" / "checkpoint.bin", std::ios::binary);
  const auto ckpt = read_checkpoint(ck);
  CHECK(ckpt.round == cfg.federation.rounds);
  CHECK(ckpt.users.size() == 4);
  CHECK(ckpt.users[1].detector.has_value());
  std::filesystem::remove_all(root);
}

TEST_CASE("fedavg baseline switches every component off") {
  const auto cfg = tiny(Method::fedavg);
  CHECK(cfg.federation.aggregation == AggregationMode::fedavg);
  CHECK(cfg.federation.flags == AblationFlags{false, false, false, false, false});
  const auto result = run_pipeline(cfg);
  CHECK(result.propagation.empty());
  CHECK(result.detector_flops == 0);
  CHECK_FALSE(result.mean_detector_acc().has_value());
  for (const auto& u : result.users) CHECK(u.eval.ra == u.eval.ra_clean_path);
}
