#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "fedrbn/tensor.hpp"

namespace fedrbn {

enum class SplitTag : std::uint8_t { all, train, val, test };

/// Features in [0, 1]^d with class labels. `ids` tag every row with a unique
/// sample identity so disjointness of shards can be checked.
struct LabeledDataset {
  Tensor features;
  std::vector<std::size_t> labels;
  std::vector<std::uint64_t> ids;
  std::size_t classes = 0;
  SplitTag split = SplitTag::all;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
  LabeledDataset subset(std::span<const std::size_t> rows) const;
  void validate() const;
};

/// Knobs of the synthetic generator. Latent samples are z ~ N(m_y, noise^2 I)
/// with class means m_y ~ N(0, separation^2 I) shared by all domains; domain i
/// emits clip01(center + scale * (A_i z + b_i)).
struct DomainOptions {
  double class_separation = 0.4;
  double noise_scale = 0.1;
  double max_condition = 3.0;
  double offset_range = 0.3;
  double squash_center = 0.5;
  double squash_scale = 0.25;
};

struct DomainSpec {
  int domain_id = 0;
  std::size_t dim = 0;
  std::vector<double> transform;  // d x d row-major, rotation times diagonal scaling
  std::vector<double> offset;     // d
};

struct LatentClasses {
  Tensor means;  // classes x d
  double noise_scale = 1.0;
  std::size_t classes() const { return means.rows(); }
};

LatentClasses make_latent_classes(std::size_t classes, std::size_t dim, std::uint64_t seed,
                                  const DomainOptions& opts = {});

/// Domain 0 is the identity; others get a random rotation times a diagonal
/// scaling with condition number <= opts.max_condition and a uniform offset.
DomainSpec make_domain_spec(int domain_id, std::size_t dim, std::uint64_t seed, const DomainOptions& opts = {});

LabeledDataset sample_domain(const DomainSpec& spec, const LatentClasses& latent, std::size_t n, std::uint64_t seed,
                             const DomainOptions& opts = {});

std::vector<LabeledDataset> make_domains(std::size_t num_domains, std::size_t classes, std::size_t dim,
                                         std::size_t samples_per_domain, std::uint64_t seed,
                                         const DomainOptions& opts = {});

struct PartitionScheme {
  enum class Kind : std::uint8_t { uniform, dirichlet } kind = Kind::uniform;
  double beta = 1.0;
};

/// Disjoint, exhaustive shards. Uniform shards differ in size by at most one
/// row; Dirichlet shards hold min_size rows each plus a Dirichlet(beta) share
/// of the remainder. Throws ArgumentError when the minimum is infeasible.
std::vector<LabeledDataset> partition_users(const LabeledDataset& data, std::size_t users, const PartitionScheme& scheme,
                                            std::size_t min_size, std::uint64_t seed);

inline constexpr double kDefaultValRatio = 0.5;

/// Random split into `first` rows and the rest; both sides need >= 2.
std::pair<LabeledDataset, LabeledDataset> split_at(const LabeledDataset& data, std::size_t first, std::uint64_t seed,
                                                   SplitTag first_tag = SplitTag::train,
                                                   SplitTag second_tag = SplitTag::val);

/// Random split with floor(N * (1 - ratio)) training rows; both sides need >= 2.
std::pair<LabeledDataset, LabeledDataset> split_train_val(const LabeledDataset& data, double ratio,
                                                          std::uint64_t seed);

// Raw ingestion. Tensor file: "FPRT", u16 version, u8 dtype (0 = float64),
// u8 ndim, u32 dims, row-major payload. Label file: "FPRL", u16 version,
// u32 count, u32 labels. All little-endian.
void write_raw_tensor(std::ostream& os, const Tensor& t);
Tensor read_raw_tensor(std::istream& is);
void write_raw_labels(std::ostream& os, std::span<const std::size_t> labels);
std::vector<std::size_t> read_raw_labels(std::istream& is);

/// Loads a rank-2 feature file and its label file; features must lie in [0, 1].
LabeledDataset load_raw_dataset(const std::filesystem::path& features, const std::filesystem::path& labels,
                                std::size_t classes, int domain_id);
void save_raw_dataset(const LabeledDataset& data, const std::filesystem::path& features,
                      const std::filesystem::path& labels);

}  // namespace fedrbn
