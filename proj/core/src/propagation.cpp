#include "fedrbn/propagation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fedrbn/errors.hpp"

namespace fedrbn {
namespace {

void check_same_layout(const StatBundle& a, const StatBundle& b) {
  if (a.channels() != b.channels()) throw DimensionError("stat bundles differ in layer structure");
}

}  // namespace

void PropagationConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ArgumentError("lambda must lie in [0, 1]");
  if (gamma_rbf && !(*gamma_rbf > 0.0)) throw ArgumentError("gamma_rbf must be positive");
  if (!(eps0 > 0.0)) throw ArgumentError("eps0 must be positive");
}

std::vector<PathStats> debias_copy(const StatBundle& source, const StatBundle& target, double lambda, double eps0) {
  check_same_layout(source, target);
  if (!(eps0 > 0.0)) throw ArgumentError("eps0 must be positive");
  std::vector<PathStats> out(source.layers.size());
  for (std::size_t l = 0; l < source.layers.size(); ++l) {
    const auto& s = source.layers[l];
    const auto& t = target.layers[l];
    const std::size_t p = s.clean.mean.size();
    auto& est = out[l];
    est.mean.resize(p);
    est.var.resize(p);
    for (std::size_t c = 0; c < p; ++c) {
      if (lambda == 0.0) {
        est.mean[c] = s.noise.mean[c];
        est.var[c] = s.noise.var[c];
        continue;
      }
      est.mean[c] = s.noise.mean[c] + lambda * (t.clean.mean[c] - s.clean.mean[c]);
      est.var[c] = s.noise.var[c] * std::pow(t.clean.var[c] / (s.clean.var[c] + eps0), lambda);
    }
  }
  return out;
}

double default_gamma_rbf(const StatBundle& bundle) {
  const auto ch = bundle.channels();
  if (ch.empty()) throw ArgumentError("bundle has no dual-BN layers");
  return 100.0 * static_cast<double>(*std::max_element(ch.begin(), ch.end()));
}

std::vector<double> layer_distances(const StatBundle& source, const StatBundle& target) {
  check_same_layout(source, target);
  std::vector<double> d(source.layers.size(), 0.0);
  for (std::size_t l = 0; l < d.size(); ++l) {
    const auto& s = source.layers[l].clean;
    const auto& t = target.layers[l].clean;
    for (std::size_t c = 0; c < s.mean.size(); ++c) {
      const double dm = s.mean[c] - t.mean[c];
      const double ds = std::sqrt(s.var[c]) - std::sqrt(t.var[c]);
      d[l] += dm * dm + ds * ds;
    }
  }
  return d;
}

std::vector<double> similarity_weights(std::span<const StatBundle> sources, const StatBundle& target, double gamma_rbf) {
  if (sources.empty()) throw ArgumentError("similarity weights need at least one source");
  if (!(gamma_rbf > 0.0)) throw ArgumentError("gamma_rbf must be positive");
  const auto channels = target.channels();
  if (channels.empty()) throw ArgumentError("bundles have no dual-BN layers");
  const double log_layers = std::log(static_cast<double>(channels.size()));

  std::vector<double> log_w(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto d = layer_distances(sources[i], target);
    std::vector<double> expo(d.size());
    for (std::size_t l = 0; l < d.size(); ++l) expo[l] = -gamma_rbf * d[l] / static_cast<double>(channels[l]);
    const double top = *std::max_element(expo.begin(), expo.end());
    double acc = 0.0;
    for (double e : expo) acc += std::exp(e - top);
    log_w[i] = top + std::log(acc) - log_layers;
  }
  const double top = *std::max_element(log_w.begin(), log_w.end());
  std::vector<double> w(sources.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) total += (w[i] = std::exp(log_w[i] - top));
  for (auto& v : w) v /= total;
  return w;
}

PropagationResult propagate(UserState& target, std::span<const UserState* const> sources,
                            const PropagationConfig& cfg) {
  cfg.validate();
  if (sources.empty()) throw ArgumentError("propagation needs at least one adversarially trained source");
  for (const auto* s : sources)
    if (!s || !s->adversarial()) throw ArgumentError("propagation sources must be adversarially trained users");

  StatBundle tgt = export_stats(target.model);
  tgt.owner_id = target.user_id;
  tgt.domain_id = target.domain_id;
  if (tgt.layers.empty()) throw ArgumentError("target model has no dual-BN layers");

  std::vector<StatBundle> bundles;
  bundles.reserve(sources.size());
  for (const auto* s : sources) {
    bundles.push_back(export_stats(s->model));
    bundles.back().owner_id = s->user_id;
    bundles.back().domain_id = s->domain_id;
    check_same_layout(bundles.back(), tgt);
  }

  PropagationResult result;
  const double gamma = cfg.gamma_rbf.value_or(default_gamma_rbf(tgt));
  if (cfg.reweight)
    result.alphas = similarity_weights(bundles, tgt, gamma);
  else
    result.alphas.assign(sources.size(), 1.0 / static_cast<double>(sources.size()));

  const auto channels = tgt.channels();
  std::size_t total_channels = 0;
  for (auto p : channels) total_channels += p;

  result.noise.resize(tgt.layers.size());
  for (std::size_t l = 0; l < channels.size(); ++l) {
    result.noise[l].mean.assign(channels[l], 0.0);
    result.noise[l].var.assign(channels[l], 0.0);
  }
  const double lambda = cfg.debias ? cfg.lambda : 0.0;
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    const auto est = debias_copy(bundles[i], tgt, lambda, cfg.eps0);
    const auto dist = layer_distances(bundles[i], tgt);
    for (std::size_t l = 0; l < channels.size(); ++l) {
      for (std::size_t c = 0; c < channels[l]; ++c) {
        result.noise[l].mean[c] += result.alphas[i] * est[l].mean[c];
        result.noise[l].var[c] += result.alphas[i] * est[l].var[c];
      }
      result.log.push_back({target.user_id, sources[i]->user_id, l, dist[l], result.alphas[i]});
    }
  }
  // Per source and channel: ~8 ops for the distance, ~6 for the debiased
  // estimate, 4 for the weighted sum.
  result.flops = static_cast<std::uint64_t>(bundles.size()) * total_channels * 18;

  import_noise_stats(target.model, result.noise);
  return result;
}

}  // namespace fedrbn
