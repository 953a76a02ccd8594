#include "fedrbn/federation.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <istream>
#include <mutex>
#include <numeric>
#include <ostream>
#include <string>
#include <thread>

#include "fedrbn/binary_io.hpp"
#include "fedrbn/errors.hpp"
#include "fedrbn/rng.hpp"

namespace fedrbn {
namespace {

constexpr std::uint16_t kCheckpointVersion = 1;

enum class LayerTag : std::uint8_t { linear = 0, relu = 1, dbn = 2 };

void write_dbn(std::ostream& os, const DBNState& bn) {
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(bn.channels));
  for (const auto* v : {&bn.mean, &bn.var, &bn.noise_mean, &bn.noise_var, &bn.weight, &bn.bias})
    binio::write_f64s(os, *v);
  binio::write_le(os, bn.eps);
  binio::write_le(os, bn.momentum);
}

DBNState read_dbn(std::istream& is) {
  DBNState bn;
  bn.channels = binio::read_le<std::uint32_t>(is);
  for (auto* v : {&bn.mean, &bn.var, &bn.noise_mean, &bn.noise_var, &bn.weight, &bn.bias})
    *v = binio::read_f64s(is, bn.channels);
  bn.eps = binio::read_le<double>(is);
  bn.momentum = binio::read_le<double>(is);
  bn.validate();
  return bn;
}

void write_model(std::ostream& os, const Model& model) {
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.layers.size()));
  for (const auto& layer : model.layers) {
    if (const auto* lin = std::get_if<LinearLayer>(&layer)) {
      binio::write_le(os, LayerTag::linear);
      binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(lin->in));
      binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(lin->out));
      binio::write_f64s(os, lin->weight);
      binio::write_f64s(os, lin->bias);
    } else if (const auto* relu = std::get_if<ReluLayer>(&layer)) {
      binio::write_le(os, LayerTag::relu);
      binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(relu->width));
    } else {
      binio::write_le(os, LayerTag::dbn);
      write_dbn(os, std::get<DBNState>(layer));
    }
  }
}

Model read_model(std::istream& is) {
  Model model;
  const auto count = binio::read_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    switch (binio::read_le<LayerTag>(is)) {
      case LayerTag::linear: {
        const std::size_t in = binio::read_le<std::uint32_t>(is);
        const std::size_t out = binio::read_le<std::uint32_t>(is);
        LinearLayer lin(in, out);
        lin.weight = binio::read_f64s(is, in * out);
        lin.bias = binio::read_f64s(is, out);
        model.layers.emplace_back(std::move(lin));
        break;
      }
      case LayerTag::relu:
        model.layers.emplace_back(ReluLayer{binio::read_le<std::uint32_t>(is)});
        break;
      case LayerTag::dbn:
        model.layers.emplace_back(read_dbn(is));
        break;
      default:
        throw FormatError("unknown layer tag in checkpoint");
    }
  }
  model.validate();
  return model;
}

void check_same_architecture(const Model& a, const Model& b) {
  const auto ra = param_refs(a), rb = param_refs(b);
  if (ra.size() != rb.size()) throw DimensionError("models differ in architecture");
  for (std::size_t k = 0; k < ra.size(); ++k)
    if (ra[k].kind != rb[k].kind || ra[k].values.size() != rb[k].values.size())
      throw DimensionError("models differ in architecture");
}

}  // namespace

void UserState::validate() const {
  if (q != 0.0 && q != kAdversarialFraction) throw ArgumentError("user q must be 0 or 0.5");
  if (train.size() == 0 || val.size() == 0 || test.size() == 0) throw ArgumentError("user datasets must be non-empty");
  model.validate();
}

void FederationConfig::validate() const {
  if (rounds < 0) throw ArgumentError("rounds must be non-negative");
  if (local_epochs < 1) throw ArgumentError("local epochs must be >= 1");
  if (batch_size < 2) throw ArgumentError("batch size must be >= 2");
  if (!(lr >= 0.0)) throw ArgumentError("learning rate must be non-negative");
  if (workers == 0) throw ArgumentError("need at least one worker");
  attack.validate();
}

std::uint64_t count_flops(const Layer& layer, std::size_t batch, PassKind pass) {
  std::uint64_t fwd = 0;
  if (const auto* lin = std::get_if<LinearLayer>(&layer))
    fwd = 2ULL * batch * lin->in * lin->out;
  else if (const auto* bn = std::get_if<DBNState>(&layer))
    fwd = 6ULL * batch * bn->channels;
  return pass == PassKind::forward ? fwd : 2 * fwd;
}

std::uint64_t count_flops(const Model& model, std::size_t batch, PassKind pass) {
  std::uint64_t total = 0;
  for (const auto& layer : model.layers) total += count_flops(layer, batch, pass);
  return total;
}

std::uint64_t pgd_flops(const Model& model, std::size_t batch, int steps) {
  return static_cast<std::uint64_t>(steps) *
         (count_flops(model, batch, PassKind::forward) + count_flops(model, batch, PassKind::backward));
}

void load_global(Model& local, const Model& global, AggregationMode mode) {
  check_same_architecture(local, global);
  auto dst = param_refs(local);
  const auto src = param_refs(global);
  for (std::size_t k = 0; k < dst.size(); ++k) {
    if (mode == AggregationMode::fedbn && is_bn_kind(dst[k].kind)) continue;
    std::copy(src[k].values.begin(), src[k].values.end(), dst[k].values.begin());
  }
}

double local_train_round(UserState& user, const Model& global, const FederationConfig& cfg, int round) {
  cfg.validate();
  load_global(user.model, global, cfg.aggregation);
  Model& model = user.model;
  const auto& data = user.train;
  const std::size_t n = data.size();
  if (n < 2) throw ArgumentError("user needs at least 2 training samples");
  Rng rng = make_rng(cfg.seed, {stream::train, static_cast<std::uint64_t>(user.user_id),
                                static_cast<std::uint64_t>(round)});

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = n;  // forces a shuffle before the first batch
  auto next_batch = [&](std::vector<std::size_t>& idx) {
    if (cursor >= n || n - cursor < 2) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const std::size_t take = std::min(cfg.batch_size, n - cursor);
    idx.assign(order.begin() + cursor, order.begin() + cursor + take);
    cursor += take;
  };

  std::size_t batches;
  if (cfg.iterations_per_round > 0) {
    batches = cfg.iterations_per_round;
  } else {
    // A trailing batch of a single sample is dropped.
    const std::size_t per_epoch = n / cfg.batch_size + (n % cfg.batch_size >= 2 ? 1 : 0);
    batches = per_epoch * static_cast<std::size_t>(cfg.local_epochs);
  }

  const BnPath adv_path = cfg.flags.dbn ? BnPath::noise : BnPath::clean;
  double loss_sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < batches; ++b) {
    next_batch(idx);
    const Tensor xb = data.features.gather_rows(idx);
    std::vector<std::size_t> yb(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) yb[k] = data.labels[idx[k]];
    const Tensor target = one_hot(yb, model.output_dim());
    const std::uint64_t fwd = count_flops(model, idx.size(), PassKind::forward);
    const std::uint64_t bwd = count_flops(model, idx.size(), PassKind::backward);

    model.training = true;
    model.bn_mode = BnPath::clean;
    LossGrad clean = loss_and_grad(model, xb, target);
    user.flops += fwd + bwd;
    double loss = clean.loss;
    Gradients grads = std::move(clean.grads);

    if (user.q > 0.0) {
      model.training = false;
      model.bn_mode = BnPath::clean;
      const Tensor adv = pgd_attack(model, xb, yb, cfg.attack, rng);
      user.flops += pgd_flops(model, idx.size(), cfg.attack.steps);

      model.training = true;
      model.bn_mode = adv_path;
      LossGrad robust = loss_and_grad(model, adv, target);
      user.flops += fwd + bwd;
      loss = (1.0 - user.q) * loss + user.q * robust.loss;
      grads.scale(1.0 - user.q).add_scaled(user.q, robust.grads);
    }
    sgd_step(model, grads, cfg.lr);
    loss_sum += loss;
  }
  model.training = false;
  model.bn_mode = BnPath::clean;
  return batches ? loss_sum / static_cast<double>(batches) : 0.0;
}

std::vector<double> aggregation_weights(std::span<const UserState> users) {
  if (users.empty()) throw ArgumentError("aggregation needs at least one user");
  double total = 0.0;
  for (const auto& u : users) total += static_cast<double>(u.train.size());
  if (!(total > 0.0)) throw ArgumentError("aggregation needs non-empty training sets");
  std::vector<double> w;
  w.reserve(users.size());
  for (const auto& u : users) w.push_back(static_cast<double>(u.train.size()) / total);
  return w;
}

void aggregate(std::span<const UserState> users, AggregationMode mode, Model& global) {
  const auto weights = aggregation_weights(users);
  for (const auto& u : users) check_same_architecture(u.model, global);
  auto dst = param_refs(global);
  std::vector<std::vector<ConstParamRef>> srcs;
  srcs.reserve(users.size());
  for (const auto& u : users) srcs.push_back(param_refs(u.model));
  for (std::size_t k = 0; k < dst.size(); ++k) {
    if (mode == AggregationMode::fedbn && is_bn_kind(dst[k].kind)) continue;
    // p_0 + sum_u a_u (p_u - p_0) equals sum_u a_u p_u because the weights
    // sum to one, and returns identical inputs bit for bit.
    auto out = dst[k].values;
    const auto base = srcs[0][k].values;
    std::vector<double> acc(out.size(), 0.0);
    for (std::size_t u = 1; u < users.size(); ++u) {
      const auto in = srcs[u][k].values;
      for (std::size_t i = 0; i < out.size(); ++i) acc[i] += weights[u] * (in[i] - base[i]);
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = base[i] + acc[i];
  }
}

Accuracy path_accuracy(const Model& model, const LabeledDataset& data, const AttackConfig& atk, BnPath predict_path,
                       std::uint64_t seed, std::size_t batch_size) {
  Model eval = model;
  eval.training = false;
  eval.bn_mode = BnPath::clean;
  Rng rng(seed);
  std::size_t clean_hits = 0, robust_hits = 0;
  std::vector<std::size_t> idx;
  const std::size_t n = data.size();
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor xb = data.features.gather_rows(idx);
    const std::span<const std::size_t> yb(data.labels.data() + start, idx.size());
    const auto clean_pred = argmax_rows(eval_logits(eval, xb, BnPath::clean));
    const Tensor adv = pgd_attack(eval, xb, yb, atk, rng);
    const auto adv_pred = argmax_rows(eval_logits(eval, adv, predict_path));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      clean_hits += clean_pred[k] == yb[k];
      robust_hits += adv_pred[k] == yb[k];
    }
  }
  return {static_cast<double>(clean_hits) / static_cast<double>(n),
          static_cast<double>(robust_hits) / static_cast<double>(n)};
}

BnPath validation_path(const UserState& user, const AblationFlags& flags) {
  return flags.dbn && user.adversarial() ? BnPath::noise : BnPath::clean;
}

std::vector<RoundRecord> run_federated_training(std::vector<UserState>& users, Model& global,
                                                const FederationConfig& cfg, const RoundObserver& observer,
                                                int start_round) {
  cfg.validate();
  if (users.empty()) throw ArgumentError("federated training needs at least one user");
  for (const auto& u : users) u.validate();

  std::vector<RoundRecord> history;
  std::vector<double> losses(users.size());
  std::vector<Accuracy> acc(users.size());
  for (int round = start_round + 1; round <= cfg.rounds; ++round) {
    parallel_for(users.size(), cfg.workers,
                 [&](std::size_t u) { losses[u] = local_train_round(users[u], global, cfg, round); });
    aggregate(users, cfg.aggregation, global);
    for (auto& u : users) load_global(u.model, global, cfg.aggregation);
    if (cfg.evaluate_rounds) {
      parallel_for(users.size(), cfg.workers, [&](std::size_t u) {
        const auto seed = derive_seed(cfg.seed, {stream::eval, static_cast<std::uint64_t>(users[u].user_id),
                                                 static_cast<std::uint64_t>(round)});
        acc[u] = path_accuracy(users[u].model, users[u].val, cfg.attack, validation_path(users[u], cfg.flags), seed);
      });
    }
    const std::size_t first = history.size();
    for (std::size_t u = 0; u < users.size(); ++u)
      history.push_back({round, users[u].user_id, users[u].domain_id, users[u].adversarial(), losses[u], acc[u].sa,
                         acc[u].ra, users[u].flops});
    if (observer) observer(round, users, std::span<const RoundRecord>(history).subspan(first));
  }
  return history;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(workers, n); ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
  }
  if (failure) std::rethrow_exception(failure);
}

Checkpoint make_checkpoint(int round, const Model& global, std::span<const UserState> users,
                           std::span<const std::optional<DetectorModel>> detectors) {
  if (!detectors.empty() && detectors.size() != users.size())
    throw DimensionError("one detector slot per user required");
  Checkpoint ckpt{round, global, {}};
  const auto global_refs = param_refs(global);
  for (std::size_t u = 0; u < users.size(); ++u) {
    const auto& user = users[u];
    check_same_architecture(user.model, global);
    Checkpoint::UserEntry entry{user.user_id, user.domain_id, user.q, user.flops, {}, std::nullopt, std::nullopt};
    for (const auto& layer : user.model.layers)
      if (const auto* bn = std::get_if<DBNState>(&layer)) entry.dbn.push_back(*bn);
    const auto refs = param_refs(user.model);
    for (std::size_t k = 0; k < refs.size(); ++k)
      if (!is_bn_kind(refs[k].kind) && !std::equal(refs[k].values.begin(), refs[k].values.end(),
                                                   global_refs[k].values.begin())) {
        entry.own_model = user.model;
        break;
      }
    if (!detectors.empty()) entry.detector = detectors[u];
    ckpt.users.push_back(std::move(entry));
  }
  return ckpt;
}

void restore_checkpoint(const Checkpoint& ckpt, Model& global, std::vector<UserState>& users) {
  if (ckpt.users.size() != users.size()) throw DimensionError("checkpoint user count differs");
  global = ckpt.global;
  for (std::size_t u = 0; u < users.size(); ++u) {
    const auto& entry = ckpt.users[u];
    auto& user = users[u];
    if (entry.user_id != user.user_id) throw DimensionError("checkpoint user order differs");
    user.domain_id = entry.domain_id;
    user.q = entry.q;
    user.flops = entry.flops;
    user.model = entry.own_model ? *entry.own_model : global;
    std::size_t i = 0;
    for (auto& layer : user.model.layers)
      if (auto* bn = std::get_if<DBNState>(&layer)) {
        if (i >= entry.dbn.size()) throw DimensionError("checkpoint dual-BN layer count differs");
        *bn = entry.dbn[i++];
      }
    if (i != entry.dbn.size()) throw DimensionError("checkpoint dual-BN layer count differs");
    user.model.training = false;
    user.model.bn_mode = BnPath::clean;
  }
}

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  binio::write_magic(os, "FRCK");
  binio::write_le<std::uint16_t>(os, kCheckpointVersion);
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.round));
  write_model(os, ckpt.global);
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.users.size()));
  for (const auto& u : ckpt.users) {
    binio::write_le<std::int32_t>(os, u.user_id);
    binio::write_le<std::int32_t>(os, u.domain_id);
    binio::write_le(os, u.q);
    binio::write_le(os, u.flops);
    binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(u.dbn.size()));
    for (const auto& bn : u.dbn) write_dbn(os, bn);
    binio::write_le<std::uint8_t>(os, u.own_model ? 1 : 0);
    if (u.own_model) write_model(os, *u.own_model);
    binio::write_le<std::uint8_t>(os, u.detector ? 1 : 0);
    if (u.detector) write_detector(os, *u.detector);
  }
}

Checkpoint read_checkpoint(std::istream& is) {
  binio::expect_magic(is, "FRCK");
  if (binio::read_le<std::uint16_t>(is) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  Checkpoint ckpt;
  ckpt.round = static_cast<int>(binio::read_le<std::uint32_t>(is));
  ckpt.global = read_model(is);
  const auto count = binio::read_le<std::uint32_t>(is);
  for (std::uint32_t k = 0; k < count; ++k) {
    Checkpoint::UserEntry u;
    u.user_id = binio::read_le<std::int32_t>(is);
    u.domain_id = binio::read_le<std::int32_t>(is);
    u.q = binio::read_le<double>(is);
    u.flops = binio::read_le<std::uint64_t>(is);
    const auto layers = binio::read_le<std::uint32_t>(is);
    for (std::uint32_t l = 0; l < layers; ++l) u.dbn.push_back(read_dbn(is));
    if (binio::read_le<std::uint8_t>(is)) u.own_model = read_model(is);
    if (binio::read_le<std::uint8_t>(is)) u.detector = read_detector(is);
    ckpt.users.push_back(std::move(u));
  }
  return ckpt;
}

}  // namespace fedrbn
