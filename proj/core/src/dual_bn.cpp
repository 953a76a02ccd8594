#include "fedrbn/dual_bn.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <string>

#include "fedrbn/binary_io.hpp"
#include "fedrbn/errors.hpp"
#include "fedrbn/model.hpp"

namespace fedrbn {

DBNState::DBNState(std::size_t ch, double eps_, double momentum_)
    : channels(ch),
      mean(ch, 0.0),
      var(ch, 1.0),
      noise_mean(ch, 0.0),
      noise_var(ch, 1.0),
      weight(ch, 1.0),
      bias(ch, 0.0),
      eps(eps_),
      momentum(momentum_) {
  validate();
}

void DBNState::validate() const {
  if (channels == 0) throw DimensionError("dual BN needs at least one channel");
  for (const auto* v : {&mean, &var, &noise_mean, &noise_var, &weight, &bias})
    if (v->size() != channels) throw DimensionError("dual BN vector length differs from channel count");
  for (std::size_t c = 0; c < channels; ++c)
    if (!(var[c] >= 0.0) || !(noise_var[c] >= 0.0)) throw ArgumentError("dual BN variances must be non-negative");
  if (!(eps > 0.0)) throw ArgumentError("dual BN eps must be positive");
  if (!(momentum > 0.0 && momentum <= 1.0)) throw ArgumentError("dual BN momentum must lie in (0, 1]");
}

Tensor dbn_apply(const DBNState& state, const Tensor& x, BnPath h, bool training, DbnCache* cache,
                 BatchMoments* moments) {
  const std::size_t batch = x.rows();
  const std::size_t p = x.cols();
  if (p != state.channels)
    throw DimensionError("dual BN expects " + std::to_string(state.channels) + " channels, got " +
                         std::to_string(p));
  if (training && batch < 2) throw ArgumentError("dual BN training needs a batch of at least 2");

  std::vector<double> mu(p), var(p);
  if (training) {
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t c = 0; c < p; ++c) mu[c] += x(r, c);
    for (auto& m : mu) m /= static_cast<double>(batch);
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t c = 0; c < p; ++c) {
        const double d = x(r, c) - mu[c];
        var[c] += d * d;
      }
    for (auto& v : var) v /= static_cast<double>(batch);
  } else if (h == BnPath::clean) {
    mu = state.mean;
    var = state.var;
  } else {
    mu = state.noise_mean;
    var = state.noise_var;
  }

  std::vector<double> inv_std(p);
  for (std::size_t c = 0; c < p; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + state.eps);

  Tensor y({batch, p});
  Tensor xhat({batch, p});
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t c = 0; c < p; ++c) {
      const double n = (x(r, c) - mu[c]) * inv_std[c];
      xhat(r, c) = n;
      y(r, c) = state.weight[c] * n + state.bias[c];
    }

  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->batch_stats = training;
  }
  if (moments && training) {
    moments->mean = std::move(mu);
    moments->var = std::move(var);
  }
  return y;
}

void dbn_update_running(DBNState& state, BnPath h, const BatchMoments& moments) {
  auto& mean = h == BnPath::clean ? state.mean : state.noise_mean;
  auto& var = h == BnPath::clean ? state.var : state.noise_var;
  const double m = state.momentum;
  for (std::size_t c = 0; c < state.channels; ++c) {
    mean[c] = (1.0 - m) * mean[c] + m * moments.mean[c];
    var[c] = (1.0 - m) * var[c] + m * moments.var[c];
  }
}

Tensor dbn_forward(DBNState& state, const Tensor& x, BnPath h, bool training) {
  BatchMoments moments;
  Tensor y = dbn_apply(state, x, h, training, nullptr, &moments);
  if (training) dbn_update_running(state, h, moments);
  return y;
}

Tensor dbn_backward(const DBNState& state, const DbnCache& cache, const Tensor& dy,
                    std::vector<double>& dweight, std::vector<double>& dbias) {
  const std::size_t batch = dy.rows();
  const std::size_t p = dy.cols();
  dweight.assign(p, 0.0);
  dbias.assign(p, 0.0);
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t c = 0; c < p; ++c) {
      dweight[c] += dy(r, c) * cache.xhat(r, c);
      dbias[c] += dy(r, c);
    }

  Tensor dx({batch, p});
  if (!cache.batch_stats) {
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t c = 0; c < p; ++c) dx(r, c) = dy(r, c) * state.weight[c] * cache.inv_std[c];
    return dx;
  }

  // Batch statistics depend on x, so the full BN Jacobian applies.
  const double n = static_cast<double>(batch);
  for (std::size_t c = 0; c < p; ++c) {
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (std::size_t r = 0; r < batch; ++r) {
      const double dxhat = dy(r, c) * state.weight[c];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * cache.xhat(r, c);
    }
    for (std::size_t r = 0; r < batch; ++r) {
      const double dxhat = dy(r, c) * state.weight[c];
      dx(r, c) = cache.inv_std[c] / n * (n * dxhat - sum_dxhat - cache.xhat(r, c) * sum_dxhat_xhat);
    }
  }
  return dx;
}

std::vector<std::size_t> StatBundle::channels() const {
  std::vector<std::size_t> out;
  out.reserve(layers.size());
  for (const auto& l : layers) out.push_back(l.clean.mean.size());
  return out;
}

void StatBundle::validate() const {
  for (const auto& l : layers) {
    const auto p = l.clean.mean.size();
    if (p == 0 || l.clean.var.size() != p || l.noise.mean.size() != p || l.noise.var.size() != p)
      throw DimensionError("stat bundle layer has inconsistent channel counts");
    for (std::size_t c = 0; c < p; ++c)
      if (!(l.clean.var[c] >= 0.0) || !(l.noise.var[c] >= 0.0))
        throw ArgumentError("stat bundle variances must be non-negative");
  }
}

StatBundle export_stats(const Model& model) {
  StatBundle bundle;
  for (const auto& layer : model.layers)
    if (const auto* bn = std::get_if<DBNState>(&layer))
      bundle.layers.push_back({{bn->mean, bn->var}, {bn->noise_mean, bn->noise_var}});
  return bundle;
}

void import_noise_stats(Model& model, std::span<const PathStats> noise) {
  if (noise.size() != model.dbn_count())
    throw DimensionError("noise stats cover " + std::to_string(noise.size()) + " layers, model has " +
                         std::to_string(model.dbn_count()));
  std::size_t i = 0;
  for (const auto& layer : model.layers) {
    const auto* bn = std::get_if<DBNState>(&layer);
    if (!bn) continue;
    const auto& s = noise[i++];
    if (s.mean.size() != bn->channels || s.var.size() != bn->channels)
      throw DimensionError("noise stats channel count mismatch");
    for (double v : s.var)
      if (!(v >= 0.0)) throw ArgumentError("imported noise variance must be non-negative");
  }
  // Validated everything before writing anything.
  i = 0;
  for (auto& layer : model.layers) {
    auto* bn = std::get_if<DBNState>(&layer);
    if (!bn) continue;
    bn->noise_mean = noise[i].mean;
    bn->noise_var = noise[i].var;
    ++i;
  }
}

void write_stat_bundle(std::ostream& os, const StatBundle& bundle) {
  bundle.validate();
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(bundle.layers.size()));
  for (auto p : bundle.channels()) binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p));
  for (const auto& l : bundle.layers) {
    binio::write_f64s(os, l.clean.mean);
    binio::write_f64s(os, l.clean.var);
    binio::write_f64s(os, l.noise.mean);
    binio::write_f64s(os, l.noise.var);
  }
}

StatBundle read_stat_bundle(std::istream& is) {
  const auto count = binio::read_le<std::uint32_t>(is);
  std::vector<std::size_t> channels(count);
  for (auto& p : channels) {
    p = binio::read_le<std::uint32_t>(is);
    if (p == 0) throw FormatError("stat bundle has a zero-width layer");
  }
  StatBundle bundle;
  bundle.layers.resize(count);
  for (std::size_t l = 0; l < count; ++l) {
    auto& layer = bundle.layers[l];
    layer.clean.mean = binio::read_f64s(is, channels[l]);
    layer.clean.var = binio::read_f64s(is, channels[l]);
    layer.noise.mean = binio::read_f64s(is, channels[l]);
    layer.noise.var = binio::read_f64s(is, channels[l]);
  }
  bundle.validate();
  return bundle;
}

}  // namespace fedrbn
