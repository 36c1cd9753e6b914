#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "cdkt/random.hpp"
#include "cdkt/tensor.hpp"

namespace cdkt {

struct LabeledSet {
  Tensor examples;  // (count, per-example shape...)
  std::vector<int> labels;
  Index classes = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  bool empty() const { return labels.empty(); }
  Shape example_shape() const { return examples.row_shape(); }

  LabeledSet subset(std::span<const Index> rows) const;
  // Throws unless counts agree and every label lies in [0, classes).
  void validate() const;
};

// Stacks sets with equal example shapes and class counts, in order.
LabeledSet concat(std::span<const LabeledSet> sets);

// IDX (MNIST / Fashion-MNIST): images become (count, 1, rows, cols) in [0, 1].
LabeledSet load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

enum class CifarVariant { cifar10, cifar100 };

// CIFAR binary batches: (count, 3, 32, 32) in [0, 1]. CIFAR-100 keeps the
// fine label.
LabeledSet load_cifar_binary(std::span<const std::filesystem::path> paths, CifarVariant variant);

// Gaussian class blobs: class means are `separation * sigma` apart pairwise
// (exactly when classes <= dim), samples are mean + sigma * N(0, I).
// Examples are grouped by class in ascending order.
LabeledSet synth_generate(Index classes, Index n_per_class, Index dim, std::uint64_t seed,
                          double separation = 6.0, double sigma = 1.0);

struct ClientShard {
  LabeledSet train;
  LabeledSet test;
  std::vector<Index> train_indices;  // rows of the source set
  std::vector<Index> test_indices;
};

struct Partition {
  std::vector<ClientShard> clients;
  LabeledSet proxy;
  std::vector<Index> proxy_indices;
  std::vector<std::vector<int>> class_map;  // permitted classes per client, ascending
};

struct PartitionOptions {
  Index n_clients = 10;
  Index classes_per_client = 2;
  double test_frac = 0.2;
  Index proxy_size = 100;
  std::optional<double> median_target;
  std::uint64_t seed = 1;
  double dirichlet_concentration = 1.0;
};

Partition partition_noniid(const LabeledSet& src, const PartitionOptions& options);

// Audit manifest: proxy rows and, per client, its classes and train/test rows.
nlohmann::json partition_manifest(const Partition& partition);

// Seeded shuffled mini-batches over [0, count). Each epoch reshuffles; the
// final short batch is kept. A cycling stream never runs dry: it rolls into
// the next epoch. A non-cycling stream returns nullopt once per epoch end.
class BatchStream {
 public:
  BatchStream(Index count, Index batch_size, std::uint64_t seed, bool cycle);

  std::optional<std::vector<Index>> next();
  // All batches of one fresh epoch.
  std::vector<std::vector<Index>> next_epoch();
  // Drops the rest of the current epoch; the next batch starts a new shuffle.
  void restart();

  Index count() const { return count_; }
  Index batch_size() const { return batch_size_; }

 private:
  void reshuffle();

  Index count_;
  Index batch_size_;
  bool cycle_;
  Rng rng_;
  std::vector<Index> order_;
  Index cursor_ = 0;
  bool started_ = false;
};

BatchStream batches(const LabeledSet& set, Index batch_size, std::uint64_t seed, bool cycle);

}  // namespace cdkt
