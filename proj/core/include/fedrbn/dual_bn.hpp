#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "fedrbn/tensor.hpp"

namespace fedrbn {

struct Model;

/// Which statistic path a dual batch-norm layer normalizes with.
enum class BnPath : std::uint8_t { clean = 0, noise = 1 };

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

/// State of one dual batch-norm layer: two running-statistic paths and one
/// shared affine transform.
///
///   y = weight * (x - mu_h) / sqrt(var_h + eps) + bias
///
/// where (mu_h, var_h) is (mean, var) for the clean path and
/// (noise_mean, noise_var) for the noise path.
struct DBNState {
  std::size_t channels = 0;
  std::vector<double> mean, var;              // clean path
  std::vector<double> noise_mean, noise_var;  // noise path
  std::vector<double> weight, bias;           // shared by both paths
  double eps = kBnEps;
  double momentum = kBnMomentum;  // new = (1 - momentum) * old + momentum * batch

  DBNState() = default;
  explicit DBNState(std::size_t channels, double eps = kBnEps, double momentum = kBnMomentum);

  /// Throws DimensionError / ArgumentError when the invariants are broken.
  void validate() const;

  friend bool operator==(const DBNState&, const DBNState&) = default;
};

/// Per-channel biased moments of one training batch.
struct BatchMoments {
  std::vector<double> mean, var;
};

/// What the backward pass needs from a forward pass.
struct DbnCache {
  Tensor xhat;
  std::vector<double> inv_std;
  bool batch_stats = false;
};

/// Normalizes without touching `state`. In training mode the batch moments
/// are used and reported through `moments`; otherwise path `h` running stats.
Tensor dbn_apply(const DBNState& state, const Tensor& x, BnPath h, bool training,
                 DbnCache* cache = nullptr, BatchMoments* moments = nullptr);

/// Exponential moving average of path `h` toward the batch moments.
void dbn_update_running(DBNState& state, BnPath h, const BatchMoments& moments);

/// dbn_apply followed, in training mode, by the running-stat update of path h.
/// The inactive path is never read or written.
Tensor dbn_forward(DBNState& state, const Tensor& x, BnPath h, bool training);

/// Returns dL/dx and writes dL/dweight, dL/dbias.
Tensor dbn_backward(const DBNState& state, const DbnCache& cache, const Tensor& dy,
                    std::vector<double>& dweight, std::vector<double>& dbias);

struct PathStats {
  std::vector<double> mean, var;
  friend bool operator==(const PathStats&, const PathStats&) = default;
};

struct LayerStats {
  PathStats clean, noise;
  friend bool operator==(const LayerStats&, const LayerStats&) = default;
};

/// Running statistics of every dual-BN layer of one model, in layer order.
struct StatBundle {
  std::vector<LayerStats> layers;
  int owner_id = -1;
  int domain_id = -1;

  std::vector<std::size_t> channels() const;
  void validate() const;

  friend bool operator==(const StatBundle&, const StatBundle&) = default;
};

StatBundle export_stats(const Model& model);

/// Overwrites the noise-path running stats; clean stats and trainable
/// parameters are left alone.
void import_noise_stats(Model& model, std::span<const PathStats> noise);

// Bundle record: u32 layer count, u32 channel count per layer, then per layer
// mean, var, noise_mean, noise_var as little-endian float64 vectors.
void write_stat_bundle(std::ostream& os, const StatBundle& bundle);
StatBundle read_stat_bundle(std::istream& is);

}  // namespace fedrbn
