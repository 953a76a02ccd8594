#include "fedrbn/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include "fedrbn/binary_io.hpp"
#include "fedrbn/errors.hpp"
#include "fedrbn/rng.hpp"

namespace fedrbn {
namespace {

constexpr std::uint16_t kRawVersion = 1;
constexpr std::uint64_t kDomainSpecStream = 0;
constexpr std::uint64_t kDomainSampleStream = 1;
constexpr std::uint64_t kLatentStream = 0xffff;

// Gram-Schmidt on a Gaussian matrix gives a Haar-ish random orthogonal matrix.
std::vector<double> random_rotation(std::size_t d, Rng& rng) {
  std::normal_distribution<double> normal;
  std::vector<double> q(d * d);
  for (std::size_t i = 0; i < d; ++i) {
    for (;;) {
      for (std::size_t k = 0; k < d; ++k) q[i * d + k] = normal(rng);
      for (std::size_t j = 0; j < i; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += q[i * d + k] * q[j * d + k];
        for (std::size_t k = 0; k < d; ++k) q[i * d + k] -= dot * q[j * d + k];
      }
      double norm = 0.0;
      for (std::size_t k = 0; k < d; ++k) norm += q[i * d + k] * q[i * d + k];
      norm = std::sqrt(norm);
      if (norm < 1e-8) continue;
      for (std::size_t k = 0; k < d; ++k) q[i * d + k] /= norm;
      break;
    }
  }
  return q;
}

LabeledDataset from_rows(const LabeledDataset& src, std::span<const std::size_t> rows, SplitTag tag) {
  LabeledDataset out = src.subset(rows);
  out.split = tag;
  return out;
}

}  // namespace

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> rows) const {
  LabeledDataset out;
  out.features = features.gather_rows(rows);
  out.classes = classes;
  out.split = split;
  out.labels.reserve(rows.size());
  out.ids.reserve(rows.size());
  for (auto r : rows) {
    out.labels.push_back(labels[r]);
    out.ids.push_back(ids[r]);
  }
  return out;
}

void LabeledDataset::validate() const {
  if (labels.empty()) throw ArgumentError("dataset is empty");
  if (features.rank() != 2 || features.rows() != labels.size() || ids.size() != labels.size())
    throw DimensionError("dataset features, labels and ids disagree in length");
  for (auto l : labels)
    if (l >= classes) throw ArgumentError("dataset label out of range");
  for (double v : features.data())
    if (v < 0.0 || v > 1.0) throw ArgumentError("dataset features must lie in [0, 1]");
}

LatentClasses make_latent_classes(std::size_t classes, std::size_t dim, std::uint64_t seed,
                                  const DomainOptions& opts) {
  if (classes == 0 || dim == 0) throw ArgumentError("classes and dim must be positive");
  Rng rng = make_rng(seed, {stream::data, kLatentStream});
  std::normal_distribution<double> normal(0.0, opts.class_separation);
  LatentClasses latent{Tensor({classes, dim}), opts.noise_scale};
  for (auto& v : latent.means.data()) v = normal(rng);
  return latent;
}

DomainSpec make_domain_spec(int domain_id, std::size_t dim, std::uint64_t seed, const DomainOptions& opts) {
  if (dim == 0) throw ArgumentError("dim must be positive");
  if (!(opts.max_condition >= 1.0)) throw ArgumentError("max condition number must be >= 1");
  DomainSpec spec{domain_id, dim, std::vector<double>(dim * dim, 0.0), std::vector<double>(dim, 0.0)};
  if (domain_id == 0) {
    for (std::size_t k = 0; k < dim; ++k) spec.transform[k * dim + k] = 1.0;
    return spec;
  }
  Rng rng = make_rng(seed, {stream::data, static_cast<std::uint64_t>(domain_id), kDomainSpecStream});
  const auto rot = random_rotation(dim, rng);
  // Log-uniform scales in [c^-1/2, c^1/2] keep the condition number <= c.
  const double half_log = 0.5 * std::log(opts.max_condition);
  std::uniform_real_distribution<double> log_scale(-half_log, half_log);
  std::vector<double> scale(dim);
  for (auto& s : scale) s = std::exp(log_scale(rng));
  for (std::size_t i = 0; i < dim; ++i)
    for (std::size_t j = 0; j < dim; ++j) spec.transform[i * dim + j] = rot[i * dim + j] * scale[j];
  std::uniform_real_distribution<double> off(-opts.offset_range, opts.offset_range);
  for (auto& b : spec.offset) b = off(rng);
  return spec;
}

LabeledDataset sample_domain(const DomainSpec& spec, const LatentClasses& latent, std::size_t n, std::uint64_t seed,
                             const DomainOptions& opts) {
  const std::size_t d = spec.dim;
  if (n == 0) throw ArgumentError("domain sample count must be positive");
  if (latent.means.cols() != d) throw DimensionError("latent means and domain spec disagree in dimension");
  Rng rng = make_rng(seed, {stream::data, static_cast<std::uint64_t>(spec.domain_id), kDomainSampleStream});
  std::uniform_int_distribution<std::size_t> pick(0, latent.classes() - 1);
  std::normal_distribution<double> normal(0.0, latent.noise_scale);

  LabeledDataset out;
  out.features = Tensor({n, d});
  out.classes = latent.classes();
  out.labels.resize(n);
  out.ids.resize(n);
  std::vector<double> z(d);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t y = pick(rng);
    out.labels[r] = y;
    out.ids[r] = (static_cast<std::uint64_t>(spec.domain_id) << 32) | r;
    for (std::size_t k = 0; k < d; ++k) z[k] = latent.means(y, k) + normal(rng);
    auto row = out.features.row(r);
    for (std::size_t i = 0; i < d; ++i) {
      double v = spec.offset[i];
      for (std::size_t k = 0; k < d; ++k) v += spec.transform[i * d + k] * z[k];
      row[i] = std::clamp(opts.squash_center + opts.squash_scale * v, 0.0, 1.0);
    }
  }
  return out;
}

std::vector<LabeledDataset> make_domains(std::size_t num_domains, std::size_t classes, std::size_t dim,
                                         std::size_t samples_per_domain, std::uint64_t seed,
                                         const DomainOptions& opts) {
  if (num_domains == 0 || classes == 0 || dim == 0 || samples_per_domain == 0)
    throw ArgumentError("make_domains arguments must be positive");
  const auto latent = make_latent_classes(classes, dim, seed, opts);
  std::vector<LabeledDataset> out;
  out.reserve(num_domains);
  for (std::size_t i = 0; i < num_domains; ++i) {
    const auto spec = make_domain_spec(static_cast<int>(i), dim, seed, opts);
    out.push_back(sample_domain(spec, latent, samples_per_domain, seed, opts));
  }
  return out;
}

std::vector<LabeledDataset> partition_users(const LabeledDataset& data, std::size_t users, const PartitionScheme& scheme,
                                            std::size_t min_size, std::uint64_t seed) {
  if (users == 0) throw ArgumentError("need at least one user");
  const std::size_t n = data.size();
  if (users * min_size > n)
    throw ArgumentError("cannot give " + std::to_string(users) + " users at least " + std::to_string(min_size) +
                        " of " + std::to_string(n) + " samples");
  Rng rng = make_rng(seed, {stream::partition});

  std::vector<std::size_t> sizes(users);
  if (scheme.kind == PartitionScheme::Kind::uniform) {
    for (std::size_t k = 0; k < users; ++k) sizes[k] = n / users + (k < n % users ? 1 : 0);
  } else {
    if (!(scheme.beta > 0.0)) throw ArgumentError("Dirichlet beta must be positive");
    std::gamma_distribution<double> gamma(scheme.beta, 1.0);
    std::vector<double> share(users);
    for (auto& s : share) s = gamma(rng);
    const double total = std::accumulate(share.begin(), share.end(), 0.0);
    const std::size_t rest = n - users * min_size;
    std::vector<double> frac(users);
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < users; ++k) {
      const double exact = total > 0.0 ? share[k] / total * static_cast<double>(rest)
                                       : static_cast<double>(rest) / static_cast<double>(users);
      const auto whole = static_cast<std::size_t>(std::floor(exact));
      sizes[k] = min_size + whole;
      frac[k] = exact - static_cast<double>(whole);
      assigned += whole;
    }
    std::vector<std::size_t> by_frac(users);
    std::iota(by_frac.begin(), by_frac.end(), std::size_t{0});
    std::stable_sort(by_frac.begin(), by_frac.end(), [&](auto a, auto b) { return frac[a] > frac[b]; });
    for (std::size_t k = 0; assigned < rest; ++k, ++assigned) ++sizes[by_frac[k % users]];
  }

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<LabeledDataset> shards;
  std::size_t offset = 0;
  for (auto size : sizes) {
    if (size == 0) throw ArgumentError("partition produced an empty shard");
    std::vector<std::size_t> rows(perm.begin() + offset, perm.begin() + offset + size);
    std::sort(rows.begin(), rows.end());
    shards.push_back(data.subset(rows));
    offset += size;
  }
  return shards;
}

std::pair<LabeledDataset, LabeledDataset> split_at(const LabeledDataset& data, std::size_t n_train, std::uint64_t seed,
                                                   SplitTag first_tag, SplitTag second_tag) {
  const std::size_t n = data.size();
  if (n_train < 2 || n_train > n || n - n_train < 2)
    throw ArgumentError("split leaves fewer than 2 samples on one side");
  Rng rng = make_rng(seed, {stream::partition, n});
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::size_t> train(perm.begin(), perm.begin() + n_train);
  std::vector<std::size_t> val(perm.begin() + n_train, perm.end());
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {from_rows(data, train, first_tag), from_rows(data, val, second_tag)};
}

std::pair<LabeledDataset, LabeledDataset> split_train_val(const LabeledDataset& data, double ratio,
                                                          std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ArgumentError("validation ratio must lie in (0, 1)");
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(data.size()) * (1.0 - ratio)));
  return split_at(data, n_train, seed);
}

void write_raw_tensor(std::ostream& os, const Tensor& t) {
  if (t.empty()) throw ArgumentError("cannot write an empty tensor");
  binio::write_magic(os, "FPRT");
  binio::write_le<std::uint16_t>(os, kRawVersion);
  binio::write_le<std::uint8_t>(os, 0);
  binio::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  binio::write_f64s(os, t.data());
}

Tensor read_raw_tensor(std::istream& is) {
  binio::expect_magic(is, "FPRT");
  if (binio::read_le<std::uint16_t>(is) != kRawVersion) throw FormatError("unsupported FPRT version");
  if (binio::read_le<std::uint8_t>(is) != 0) throw FormatError("unsupported FPRT dtype");
  const auto ndim = binio::read_le<std::uint8_t>(is);
  if (ndim == 0) throw FormatError("FPRT tensor has no dimensions");
  std::vector<std::size_t> shape(ndim);
  std::size_t count = 1;
  for (auto& d : shape) {
    d = binio::read_le<std::uint32_t>(is);
    if (d == 0) throw FormatError("FPRT tensor has a zero dimension");
    count *= d;
  }
  return Tensor(std::move(shape), binio::read_f64s(is, count));
}

void write_raw_labels(std::ostream& os, std::span<const std::size_t> labels) {
  binio::write_magic(os, "FPRL");
  binio::write_le<std::uint16_t>(os, kRawVersion);
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(labels.size()));
  for (auto l : labels) binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l));
}

std::vector<std::size_t> read_raw_labels(std::istream& is) {
  binio::expect_magic(is, "FPRL");
  if (binio::read_le<std::uint16_t>(is) != kRawVersion) throw FormatError("unsupported FPRL version");
  std::vector<std::size_t> labels(binio::read_le<std::uint32_t>(is));
  for (auto& l : labels) l = binio::read_le<std::uint32_t>(is);
  return labels;
}

LabeledDataset load_raw_dataset(const std::filesystem::path& features, const std::filesystem::path& labels,
                                std::size_t classes, int domain_id) {
  std::ifstream fx(features, std::ios::binary), fy(labels, std::ios::binary);
  if (!fx) throw FormatError("cannot open " + features.string());
  if (!fy) throw FormatError("cannot open " + labels.string());
  LabeledDataset out;
  out.features = read_raw_tensor(fx);
  if (out.features.rank() != 2) throw FormatError("feature file must hold a rank-2 tensor");
  out.labels = read_raw_labels(fy);
  out.classes = classes;
  out.ids.resize(out.labels.size());
  for (std::size_t r = 0; r < out.ids.size(); ++r) out.ids[r] = (static_cast<std::uint64_t>(domain_id) << 32) | r;
  out.validate();
  return out;
}

void save_raw_dataset(const LabeledDataset& data, const std::filesystem::path& features,
                      const std::filesystem::path& labels) {
  std::ofstream fx(features, std::ios::binary), fy(labels, std::ios::binary);
  if (!fx || !fy) throw FormatError("cannot open raw dataset output files");
  write_raw_tensor(fx, data.features);
  write_raw_labels(fy, data.labels);
}

}  // namespace fedrbn
