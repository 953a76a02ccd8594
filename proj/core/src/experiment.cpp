#include "fedrbn/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

#include "fedrbn/errors.hpp"
#include "fedrbn/rng.hpp"

namespace fedrbn {
namespace {

using json = nlohmann::json;

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw FormatError(where + " must be an object");
  const std::set<std::string> keys(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items())
    if (!keys.count(key)) throw FormatError("unknown config key '" + where + "." + key + "'");
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::size_t count_at_users(const ExperimentConfig& cfg, std::size_t domains) {
  const auto& rule = cfg.at_users;
  if (rule.rule == AtAssignment::Rule::per_domain_ratio)
    return domains * static_cast<std::size_t>(std::lround(rule.ratio * static_cast<double>(cfg.data.users_per_domain)));
  std::size_t n = 0;
  for (int d : rule.domains)
    if (d >= 0 && static_cast<std::size_t>(d) < domains) n += cfg.data.users_per_domain;
  return n;
}

std::size_t domain_count(const ExperimentConfig& cfg) {
  return cfg.data.raw_domains.empty() ? cfg.data.domains : cfg.data.raw_domains.size();
}

double mean_of(const std::vector<UserResult>& users, std::optional<bool> adversarial, double UserEvaluation::*field) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& u : users)
    if (!adversarial || u.adversarial == *adversarial) {
      sum += u.eval.*field;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : std::nan("");
}

// Operations spent building D_a and fitting the SVM for one user.
std::uint64_t detector_fit_flops(const Model& model, std::size_t val_rows, const AttackConfig& atk,
                                 std::uint64_t kernel_evals) {
  const std::uint64_t forward = count_flops(model, val_rows, PassKind::forward);
  const std::uint64_t classes = model.output_dim();
  return 2 * forward + pgd_flops(model, val_rows, atk.steps) + kernel_evals * (3 * classes + 1);
}

}  // namespace

Method parse_method(const std::string& name) {
  if (name == "fedavg") return Method::fedavg;
  if (name == "fedbn") return Method::fedbn;
  if (name == "fedrbn") return Method::fedrbn;
  throw ArgumentError("unknown method '" + name + "' (expected fedavg, fedbn or fedrbn)");
}

const char* method_name(Method m) {
  switch (m) {
    case Method::fedavg:
      return "fedavg";
    case Method::fedbn:
      return "fedbn";
    case Method::fedrbn:
      return "fedrbn";
  }
  return "?";
}

void ExperimentConfig::set_method(Method m) {
  method = m;
  federation.aggregation = m == Method::fedavg ? AggregationMode::fedavg : AggregationMode::fedbn;
  const bool on = m == Method::fedrbn;
  federation.flags = {on, on, on, on, on};
}

void ExperimentConfig::validate() const {
  federation.validate();
  propagation.validate();
  if (federation.rounds < 1) throw ArgumentError("rounds must be >= 1");
  if (!(federation.lr > 0.0)) throw ArgumentError("learning rate must be positive");
  if (!(detector_C > 0.0)) throw ArgumentError("detector C must be positive");
  if (detector_gamma && !(*detector_gamma > 0.0)) throw ArgumentError("detector gamma must be positive");
  if (data.users_per_domain == 0 || data.dim == 0 || data.classes < 2)
    throw ArgumentError("data needs users, a positive dimension and at least 2 classes");
  if (data.raw_domains.empty() && data.domains == 0) throw ArgumentError("need at least one domain");
  if (data.train_per_user < 2 || data.val_per_user < 2 || data.test_per_user < 2)
    throw ArgumentError("train, val and test sets need at least 2 samples per user");
  if (hidden.empty()) throw ArgumentError("model needs at least one hidden dual-BN layer");
  if (at_users.rule == AtAssignment::Rule::per_domain_ratio && !(at_users.ratio >= 0.0 && at_users.ratio <= 1.0))
    throw ArgumentError("AT ratio must lie in [0, 1]");

  const auto& f = federation.flags;
  if (!f.dbn && (f.detector || f.copy)) throw ArgumentError("detector and copy require dual BN (drop --no-dbn)");
  if (!f.copy && (f.debias || f.reweight))
    throw ArgumentError("debias and reweight modify copy; disable them too (--no-debias --no-reweight)");
  const auto at = count_at_users(*this, domain_count(*this));
  if (f.copy && at == 0) throw ArgumentError("copy needs at least one adversarially trained user");
  if (method == Method::fedrbn && at == 0) throw ArgumentError("fedrbn needs at least one adversarially trained user");
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  try {
    reject_unknown(j,
                   {"seed", "data", "model", "method", "flags", "federation", "attack", "propagation", "detector",
                    "at_users", "model_selection", "out"},
                   "config");
    read_opt(j, "seed", cfg.seed);
    if (j.contains("method")) cfg.set_method(parse_method(j.at("method").get<std::string>()));
    if (j.contains("data")) {
      const auto& d = j.at("data");
      reject_unknown(d,
                     {"domains", "users_per_domain", "dim", "classes", "train_per_user", "val_per_user",
                      "test_per_user", "partition", "dirichlet_beta", "generator", "raw_domains"},
                     "data");
      read_opt(d, "domains", cfg.data.domains);
      read_opt(d, "users_per_domain", cfg.data.users_per_domain);
      read_opt(d, "dim", cfg.data.dim);
      read_opt(d, "classes", cfg.data.classes);
      read_opt(d, "train_per_user", cfg.data.train_per_user);
      read_opt(d, "val_per_user", cfg.data.val_per_user);
      read_opt(d, "test_per_user", cfg.data.test_per_user);
      if (d.contains("partition")) {
        const auto kind = d.at("partition").get<std::string>();
        if (kind == "uniform")
          cfg.data.partition.kind = PartitionScheme::Kind::uniform;
        else if (kind == "dirichlet")
          cfg.data.partition.kind = PartitionScheme::Kind::dirichlet;
        else
          throw FormatError("data.partition must be 'uniform' or 'dirichlet'");
      }
      read_opt(d, "dirichlet_beta", cfg.data.partition.beta);
      if (d.contains("generator")) {
        const auto& g = d.at("generator");
        reject_unknown(g,
                       {"class_separation", "noise_scale", "max_condition", "offset_range", "squash_center",
                        "squash_scale"},
                       "data.generator");
        read_opt(g, "class_separation", cfg.data.generator.class_separation);
        read_opt(g, "noise_scale", cfg.data.generator.noise_scale);
        read_opt(g, "max_condition", cfg.data.generator.max_condition);
        read_opt(g, "offset_range", cfg.data.generator.offset_range);
        read_opt(g, "squash_center", cfg.data.generator.squash_center);
        read_opt(g, "squash_scale", cfg.data.generator.squash_scale);
      }
      if (d.contains("raw_domains"))
        for (const auto& r : d.at("raw_domains")) {
          reject_unknown(r, {"features", "labels"}, "data.raw_domains[]");
          cfg.data.raw_domains.push_back({r.at("features").get<std::string>(), r.at("labels").get<std::string>()});
        }
    }
    if (j.contains("model")) {
      reject_unknown(j.at("model"), {"hidden"}, "model");
      read_opt(j.at("model"), "hidden", cfg.hidden);
    }
    if (j.contains("flags")) {
      const auto& f = j.at("flags");
      reject_unknown(f, {"dbn", "detector", "copy", "debias", "reweight"}, "flags");
      auto& flags = cfg.federation.flags;
      read_opt(f, "dbn", flags.dbn);
      read_opt(f, "detector", flags.detector);
      read_opt(f, "copy", flags.copy);
      read_opt(f, "debias", flags.debias);
      read_opt(f, "reweight", flags.reweight);
    }
    if (j.contains("federation")) {
      const auto& f = j.at("federation");
      reject_unknown(f, {"rounds", "local_epochs", "batch_size", "lr", "workers", "aggregation"}, "federation");
      read_opt(f, "rounds", cfg.federation.rounds);
      read_opt(f, "local_epochs", cfg.federation.local_epochs);
      read_opt(f, "batch_size", cfg.federation.batch_size);
      read_opt(f, "lr", cfg.federation.lr);
      read_opt(f, "workers", cfg.federation.workers);
      if (f.contains("aggregation")) {
        const auto mode = f.at("aggregation").get<std::string>();
        if (mode == "fedavg")
          cfg.federation.aggregation = AggregationMode::fedavg;
        else if (mode == "fedbn")
          cfg.federation.aggregation = AggregationMode::fedbn;
        else
          throw FormatError("federation.aggregation must be 'fedavg' or 'fedbn'");
      }
    }
    if (j.contains("attack")) {
      const auto& a = j.at("attack");
      reject_unknown(a, {"epsilon", "steps", "step_size", "random_start", "lo", "hi"}, "attack");
      read_opt(a, "epsilon", cfg.federation.attack.epsilon);
      read_opt(a, "steps", cfg.federation.attack.steps);
      read_opt(a, "step_size", cfg.federation.attack.step_size);
      read_opt(a, "random_start", cfg.federation.attack.random_start);
      read_opt(a, "lo", cfg.federation.attack.lo);
      read_opt(a, "hi", cfg.federation.attack.hi);
    }
    if (j.contains("propagation")) {
      const auto& p = j.at("propagation");
      reject_unknown(p, {"lambda", "gamma_rbf"}, "propagation");
      read_opt(p, "lambda", cfg.propagation.lambda);
      if (p.contains("gamma_rbf") && !p.at("gamma_rbf").is_null()) cfg.propagation.gamma_rbf = p.at("gamma_rbf").get<double>();
    }
    if (j.contains("detector")) {
      const auto& d = j.at("detector");
      reject_unknown(d, {"C", "gamma"}, "detector");
      read_opt(d, "C", cfg.detector_C);
      if (d.contains("gamma") && !d.at("gamma").is_null()) cfg.detector_gamma = d.at("gamma").get<double>();
    }
    if (j.contains("at_users")) {
      const auto& a = j.at("at_users");
      reject_unknown(a, {"rule", "ratio", "domains"}, "at_users");
      const auto rule = a.value("rule", std::string("per_domain_ratio"));
      if (rule == "per_domain_ratio")
        cfg.at_users.rule = AtAssignment::Rule::per_domain_ratio;
      else if (rule == "domains")
        cfg.at_users.rule = AtAssignment::Rule::domains;
      else
        throw FormatError("at_users.rule must be 'per_domain_ratio' or 'domains'");
      read_opt(a, "ratio", cfg.at_users.ratio);
      read_opt(a, "domains", cfg.at_users.domains);
    }
    read_opt(j, "model_selection", cfg.model_selection);
    if (j.contains("out")) cfg.out_dir = j.at("out").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad config value: ") + e.what());
  }
  cfg.propagation.debias = cfg.federation.flags.debias;
  cfg.propagation.reweight = cfg.federation.flags.reweight;
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::vector<UserState> build_users(const ExperimentConfig& cfg, Model& global) {
  const auto& spec = cfg.data;
  std::vector<LabeledDataset> domains;
  const std::size_t per_user = spec.train_per_user + spec.val_per_user + spec.test_per_user;
  std::size_t classes = spec.classes;
  if (spec.raw_domains.empty()) {
    domains = make_domains(spec.domains, spec.classes, spec.dim, per_user * spec.users_per_domain, cfg.seed,
                           spec.generator);
  } else {
    for (std::size_t d = 0; d < spec.raw_domains.size(); ++d)
      domains.push_back(load_raw_dataset(spec.raw_domains[d].features, spec.raw_domains[d].labels, spec.classes,
                                         static_cast<int>(d)));
  }
  const std::size_t dim = domains.front().dim();
  for (const auto& d : domains)
    if (d.dim() != dim) throw DimensionError("all domains must share the feature dimension");

  global = make_mlp({dim, cfg.hidden, classes}, cfg.seed);

  std::set<int> at_domains(cfg.at_users.domains.begin(), cfg.at_users.domains.end());
  const auto at_per_domain =
      static_cast<std::size_t>(std::lround(cfg.at_users.ratio * static_cast<double>(spec.users_per_domain)));
  // Minimum shard keeps at least one full batch of training data.
  const std::size_t min_shard = static_cast<std::size_t>(
      std::ceil(static_cast<double>(2 * cfg.federation.batch_size) * static_cast<double>(per_user) /
                static_cast<double>(spec.train_per_user)));

  std::vector<UserState> users;
  for (std::size_t d = 0; d < domains.size(); ++d) {
    const std::size_t min_size = spec.partition.kind == PartitionScheme::Kind::dirichlet ? min_shard : 0;
    const auto shards = partition_users(domains[d], spec.users_per_domain, spec.partition, min_size,
                                        derive_seed(cfg.seed, {stream::partition, d}));
    for (std::size_t k = 0; k < shards.size(); ++k) {
      UserState u;
      u.user_id = static_cast<int>(d * spec.users_per_domain + k);
      u.domain_id = static_cast<int>(d);
      const bool at = cfg.at_users.rule == AtAssignment::Rule::per_domain_ratio
                          ? k < at_per_domain
                          : at_domains.count(static_cast<int>(d)) > 0;
      u.q = at ? kAdversarialFraction : 0.0;

      const auto& shard = shards[k];
      const double n = static_cast<double>(shard.size());
      const auto n_test = static_cast<std::size_t>(
          std::lround(n * static_cast<double>(spec.test_per_user) / static_cast<double>(per_user)));
      const auto n_val = static_cast<std::size_t>(
          std::lround(n * static_cast<double>(spec.val_per_user) / static_cast<double>(per_user)));
      const auto user_seed = derive_seed(cfg.seed, {stream::partition, d, k});
      auto [trainval, test] = split_at(shard, shard.size() - n_test, user_seed, SplitTag::train, SplitTag::test);
      auto [train, val] = split_at(trainval, trainval.size() - n_val, user_seed + 1);
      u.train = std::move(train);
      u.val = std::move(val);
      u.test = std::move(test);
      u.model = global;
      users.push_back(std::move(u));
    }
  }
  return users;
}

std::vector<UserEvaluation> evaluate(std::span<const UserState> users, const AttackConfig& atk, bool use_detector,
                                     std::span<const DetectorModel> detectors, std::uint64_t seed,
                                     std::size_t workers) {
  if (use_detector && detectors.size() != users.size())
    throw DimensionError("evaluate needs one detector per user");
  std::vector<UserEvaluation> out(users.size());
  parallel_for(users.size(), workers, [&](std::size_t u) {
    const auto& user = users[u];
    Model model = user.model;
    model.training = false;
    model.bn_mode = BnPath::clean;
    const auto& test = user.test;
    Rng rng = make_rng(seed, {stream::eval, static_cast<std::uint64_t>(user.user_id)});
    const Tensor adv = pgd_attack(model, test.features, test.labels, atk, rng);

    const auto clean_pred = argmax_rows(eval_logits(model, test.features, BnPath::clean));
    const auto adv_pred = argmax_rows(eval_logits(model, adv, BnPath::clean));
    std::size_t sa = 0, ra = 0, sa_pipe = 0, ra_pipe = 0;
    for (std::size_t r = 0; r < test.size(); ++r) {
      sa += clean_pred[r] == test.labels[r];
      ra += adv_pred[r] == test.labels[r];
    }
    if (use_detector) {
      const auto clean_rp = robust_predict(model, detectors[u], test.features);
      const auto adv_rp = robust_predict(model, detectors[u], adv);
      for (std::size_t r = 0; r < test.size(); ++r) {
        sa_pipe += clean_rp[r].label == test.labels[r];
        ra_pipe += adv_rp[r].label == test.labels[r];
      }
    } else {
      sa_pipe = sa;
      ra_pipe = ra;
    }
    const double n = static_cast<double>(test.size());
    out[u] = {static_cast<double>(sa_pipe) / n, static_cast<double>(ra_pipe) / n, static_cast<double>(sa) / n,
              static_cast<double>(ra) / n};
  });
  return out;
}

double ExperimentResult::mean_sa(std::optional<bool> adversarial) const {
  return mean_of(users, adversarial, &UserEvaluation::sa);
}

double ExperimentResult::mean_ra(std::optional<bool> adversarial) const {
  return mean_of(users, adversarial, &UserEvaluation::ra);
}

std::optional<double> ExperimentResult::mean_detector_acc() const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& u : users)
    if (u.detector_acc) {
      sum += *u.detector_acc;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

TrainedFederation train_federation(const ExperimentConfig& cfg) {
  cfg.validate();
  TrainedFederation out;
  out.users = build_users(cfg, out.global);
  auto& users = out.users;
  FederationConfig fed = cfg.federation;
  fed.seed = cfg.seed;
  if (cfg.data.partition.kind == PartitionScheme::Kind::dirichlet) {
    // Unequal shards: everyone runs the average per-epoch iteration count.
    double iters = 0.0;
    for (const auto& u : users) iters += std::ceil(static_cast<double>(u.train.size()) / static_cast<double>(fed.batch_size));
    fed.iterations_per_round =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(iters / static_cast<double>(users.size()))));
  }
  fed.evaluate_rounds = true;

  // Best-round snapshots: adversarial users by validation RA, others by SA.
  std::vector<std::optional<Model>> best(users.size());
  std::vector<double> best_score(users.size(), -1.0);
  auto observer = [&](int, std::vector<UserState>& us, std::span<const RoundRecord> rows) {
    if (!cfg.model_selection) return;
    for (std::size_t u = 0; u < us.size(); ++u) {
      const double score = us[u].adversarial() ? rows[u].ra : rows[u].sa;
      if (score > best_score[u]) {
        best_score[u] = score;
        best[u] = us[u].model;
      }
    }
  };

  out.history = run_federated_training(users, out.global, fed, observer);
  for (std::size_t u = 0; u < users.size(); ++u) {
    if (best[u]) users[u].model = std::move(*best[u]);
    out.training_flops += users[u].flops;
  }
  out.dbn = fed.flags.dbn;
  out.aggregation = fed.aggregation;
  return out;
}

ExperimentResult finish_pipeline(const ExperimentConfig& cfg, TrainedFederation trained,
                                 std::vector<UserState>* final_users,
                                 std::vector<std::optional<DetectorModel>>* detectors_out) {
  cfg.validate();
  if (trained.dbn != cfg.federation.flags.dbn || trained.aggregation != cfg.federation.aggregation)
    throw ArgumentError("trained federation does not match the dual-BN flag or aggregation mode of the config");
  FederationConfig fed = cfg.federation;
  fed.seed = cfg.seed;
  auto& users = trained.users;
  ExperimentResult result;
  result.history = std::move(trained.history);
  result.training_flops = trained.training_flops;

  const auto& flags = fed.flags;
  if (flags.copy) {
    std::vector<const UserState*> sources;
    for (const auto& u : users)
      if (u.adversarial()) sources.push_back(&u);
    // Targets are standard users only, so no source changes mid-loop.
    PropagationConfig pcfg = cfg.propagation;
    pcfg.debias = flags.debias;
    pcfg.reweight = flags.reweight;
    for (auto& u : users) {
      if (u.adversarial()) continue;
      auto prop = propagate(u, sources, pcfg);
      result.propagation_flops += prop.flops;
      result.propagation.insert(result.propagation.end(), prop.log.begin(), prop.log.end());
    }
  }

  std::vector<std::optional<DetectorModel>> detectors(users.size());
  std::vector<DetectorModel> fitted;
  std::vector<std::optional<double>> det_acc(users.size());
  if (flags.detector) {
    const double gamma = cfg.detector_gamma.value_or(1.0 / static_cast<double>(users.front().model.output_dim()));
    std::vector<std::uint64_t> det_flops(users.size());
    parallel_for(users.size(), fed.workers, [&](std::size_t u) {
      const auto& user = users[u];
      Rng rng = make_rng(cfg.seed, {stream::detector, static_cast<std::uint64_t>(user.user_id)});
      const auto data = build_detector_dataset(user.model, user.val.features, user.val.labels, fed.attack, rng);
      std::uint64_t kernel_evals = 0;
      detectors[u] = fit_detector(data, cfg.detector_C, gamma, &kernel_evals);
      det_flops[u] = detector_fit_flops(user.model, user.val.size(), fed.attack, kernel_evals);
      Rng test_rng = make_rng(cfg.seed, {stream::detector, static_cast<std::uint64_t>(user.user_id), 1});
      const auto held_out = build_detector_dataset(user.model, user.test.features, user.test.labels, fed.attack, test_rng);
      det_acc[u] = detector_accuracy(*detectors[u], held_out);
    });
    for (auto f : det_flops) result.detector_flops += f;
    for (const auto& d : detectors) fitted.push_back(*d);
  }

  const auto evals = evaluate(users, fed.attack, flags.detector, fitted, cfg.seed, fed.workers);
  for (std::size_t u = 0; u < users.size(); ++u)
    result.users.push_back({users[u].user_id, users[u].domain_id, users[u].adversarial(), evals[u], det_acc[u]});

  if (final_users) *final_users = std::move(users);
  if (detectors_out) *detectors_out = std::move(detectors);
  return result;
}

ExperimentResult run_pipeline(const ExperimentConfig& cfg, std::vector<UserState>* final_users,
                              std::vector<std::optional<DetectorModel>>* detectors, Model* global) {
  auto trained = train_federation(cfg);
  if (global) *global = trained.global;
  return finish_pipeline(cfg, std::move(trained), final_users, detectors);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  std::vector<UserState> users;
  std::vector<std::optional<DetectorModel>> detectors;
  Model global;
  auto result = run_pipeline(cfg, &users, &detectors, &global);

  std::filesystem::create_directories(cfg.out_dir);
  auto open = [&](const char* name) {
    std::ofstream out(cfg.out_dir / name, std::ios::binary);
    if (!out) throw FormatError("cannot write " + (cfg.out_dir / name).string());
    return out;
  };
  {
    auto out = open("history.csv");
    write_history_csv(out, result.history);
  }
  {
    auto out = open("final.csv");
    write_final_csv(out, result);
  }
  {
    auto out = open("final_paths.csv");
    write_final_paths_csv(out, result);
  }
  {
    auto out = open("propagation.csv");
    write_propagation_csv(out, result.propagation);
  }
  {
    // Users whose selected round differs from the last one carry their own
    // shared parameters in the checkpoint.
    auto out = open("checkpoint.bin");
    write_checkpoint(out, make_checkpoint(cfg.federation.rounds, global, users, detectors));
  }
  {
    json meta;
    meta["method"] = method_name(cfg.method);
    meta["seed"] = cfg.seed;
    meta["rounds"] = cfg.federation.rounds;
    meta["aggregation"] = cfg.federation.aggregation == AggregationMode::fedavg ? "fedavg" : "fedbn";
    const auto& f = cfg.federation.flags;
    meta["flags"] = {{"dbn", f.dbn}, {"detector", f.detector}, {"copy", f.copy}, {"debias", f.debias},
                     {"reweight", f.reweight}};
    meta["at_selection"] = cfg.at_users.rule == AtAssignment::Rule::per_domain_ratio
                               ? "lowest user indices within each domain"
                               : "every user of the listed domains";
    std::vector<int> at_ids;
    for (const auto& u : result.users)
      if (u.adversarial) at_ids.push_back(u.user_id);
    meta["at_user_ids"] = at_ids;
    meta["flops"] = {{"training", result.training_flops},
                     {"propagation", result.propagation_flops},
                     {"detector", result.detector_flops}};
    auto out = open("run_meta.json");
    out << meta.dump(2) << '\n';
  }
  return result;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_history_csv(std::ostream& os, std::span<const RoundRecord> rows) {
  os << "round,user_id,domain_id,group,loss,SA,RA,flops\n";
  for (const auto& r : rows)
    os << r.round << ',' << r.user_id << ',' << r.domain_id << ',' << (r.adversarial ? "AT" : "ST") << ','
       << format_double(r.loss) << ',' << format_double(r.sa) << ',' << format_double(r.ra) << ',' << r.flops << '\n';
}

void write_final_csv(std::ostream& os, const ExperimentResult& result) {
  os << "user_id,domain_id,group,SA,RA,detector_acc\n";
  for (const auto& u : result.users)
    os << u.user_id << ',' << u.domain_id << ',' << (u.adversarial ? "AT" : "ST") << ',' << format_double(u.eval.sa)
       << ',' << format_double(u.eval.ra) << ',' << (u.detector_acc ? format_double(*u.detector_acc) : "nan") << '\n';
  // Summary rows: group means over the per-user rows above.
  for (auto [label, filter] : {std::pair<const char*, std::optional<bool>>{"ALL", std::nullopt},
                               {"AT", true}, {"ST", false}}) {
    const double sa = result.mean_sa(filter);
    if (std::isnan(sa)) continue;
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& u : result.users)
      if ((!filter || u.adversarial == *filter) && u.detector_acc) {
        acc += *u.detector_acc;
        ++n;
      }
    os << "mean,-1," << label << ',' << format_double(sa) << ',' << format_double(result.mean_ra(filter)) << ','
       << (n ? format_double(acc / static_cast<double>(n)) : "nan") << '\n';
  }
}

void write_final_paths_csv(std::ostream& os, const ExperimentResult& result) {
  os << "user_id,domain_id,group,SA_clean_path,RA_clean_path,SA_pipeline,RA_pipeline\n";
  for (const auto& u : result.users)
    os << u.user_id << ',' << u.domain_id << ',' << (u.adversarial ? "AT" : "ST") << ','
       << format_double(u.eval.sa_clean_path) << ',' << format_double(u.eval.ra_clean_path) << ','
       << format_double(u.eval.sa) << ',' << format_double(u.eval.ra) << '\n';
}

void write_propagation_csv(std::ostream& os, std::span<const PropagationLogRow> rows) {
  os << "target_id,source_id,layer,d_W,alpha\n";
  for (const auto& r : rows)
    os << r.target_id << ',' << r.source_id << ',' << r.layer << ',' << format_double(r.distance) << ','
       << format_double(r.alpha) << '\n';
}

}  // namespace fedrbn
