#include "cdkt/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

namespace cdkt {

LabeledSet LabeledSet::subset(std::span<const Index> rows) const {
  LabeledSet out;
  out.classes = classes;
  if (rows.empty()) {
    Shape shape = examples.shape();
    if (shape.empty()) shape = {0};
    shape[0] = 0;
    out.examples = Tensor(shape);
    return out;
  }
  out.examples = examples.take_rows(rows);
  out.labels.reserve(rows.size());
  for (Index r : rows) out.labels.push_back(labels[static_cast<std::size_t>(r)]);
  return out;
}

void LabeledSet::validate() const {
  if (examples.rows() != size()) {
    throw ShapeError("labeled set has " + std::to_string(examples.rows()) + " examples but " +
                     std::to_string(size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

LabeledSet concat(std::span<const LabeledSet> sets) {
  if (sets.empty()) throw DataError("concat of zero sets");
  const Shape row = sets[0].example_shape();
  Index total = 0;
  for (const auto& s : sets) {
    if (s.example_shape() != row || s.classes != sets[0].classes) throw ShapeError("concat: incompatible sets");
    total += s.size();
  }
  Shape shape{total};
  shape.insert(shape.end(), row.begin(), row.end());
  LabeledSet out;
  out.classes = sets[0].classes;
  out.examples = Tensor(shape);
  Index at = 0;
  for (const auto& s : sets) {
    out.examples.data().segment(at, s.examples.size()) = s.examples.data();
    at += s.examples.size();
    out.labels.insert(out.labels.end(), s.labels.begin(), s.labels.end());
  }
  return out;
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;

}  // namespace

LabeledSet load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (img.size() < 4) throw TruncatedFileError(images_path.string() + ": missing IDX header");
  if (lab.size() < 4) throw TruncatedFileError(labels_path.string() + ": missing IDX header");
  if (be32(img, 0) != kIdxImages) throw WrongMagicError(images_path.string() + ": not an IDX image file (magic)");
  if (be32(lab, 0) != kIdxLabels) throw WrongMagicError(labels_path.string() + ": not an IDX label file (magic)");
  if (img.size() < 16) throw TruncatedFileError(images_path.string() + ": truncated IDX header");
  if (lab.size() < 8) throw TruncatedFileError(labels_path.string() + ": truncated IDX header");

  const Index count = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  const Index label_count = be32(lab, 4);
  if (static_cast<Index>(img.size()) < 16 + count * rows * cols) {
    throw TruncatedFileError(images_path.string() + ": expected " + std::to_string(count * rows * cols) + " pixel bytes");
  }
  if (static_cast<Index>(lab.size()) < 8 + label_count) {
    throw TruncatedFileError(labels_path.string() + ": expected " + std::to_string(label_count) + " label bytes");
  }
  if (count != label_count) {
    throw CountMismatchError(std::to_string(count) + " images vs " + std::to_string(label_count) + " labels");
  }

  LabeledSet out;
  out.examples = Tensor({count, 1, rows, cols});
  for (Index k = 0; k < out.examples.size(); ++k) out.examples[k] = img[16 + static_cast<std::size_t>(k)] / 255.0;
  int max_label = 0;
  out.labels.resize(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) {
    out.labels[static_cast<std::size_t>(i)] = lab[8 + static_cast<std::size_t>(i)];
    max_label = std::max(max_label, out.labels[static_cast<std::size_t>(i)]);
  }
  out.classes = count > 0 ? max_label + 1 : 0;
  return out;
}

LabeledSet load_cifar_binary(std::span<const std::filesystem::path> paths, CifarVariant variant) {
  constexpr Index kPixels = 3 * 32 * 32;
  const Index label_bytes = variant == CifarVariant::cifar10 ? 1 : 2;
  const Index record = label_bytes + kPixels;

  std::vector<std::vector<unsigned char>> files;
  Index count = 0;
  for (const auto& p : paths) {
    files.push_back(read_file(p));
    const auto size = static_cast<Index>(files.back().size());
    if (size % record != 0) {
      throw RecordSizeError(p.string() + ": size " + std::to_string(size) + " is not a multiple of the " +
                            std::to_string(record) + "-byte record");
    }
    count += size / record;
  }

  LabeledSet out;
  out.classes = variant == CifarVariant::cifar10 ? 10 : 100;
  out.examples = Tensor({count, 3, 32, 32});
  out.labels.reserve(static_cast<std::size_t>(count));
  Index row = 0;
  for (const auto& bytes : files) {
    for (std::size_t at = 0; at < bytes.size(); at += static_cast<std::size_t>(record), ++row) {
      out.labels.push_back(bytes[at + static_cast<std::size_t>(label_bytes) - 1]);
      double* dst = out.examples.data().data() + row * kPixels;
      for (Index k = 0; k < kPixels; ++k) dst[k] = bytes[at + static_cast<std::size_t>(label_bytes + k)] / 255.0;
    }
  }
  out.validate();
  return out;
}

LabeledSet synth_generate(Index classes, Index n_per_class, Index dim, std::uint64_t seed, double separation,
                          double sigma) {
  if (classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (n_per_class < 1 || dim < 1) throw ConfigError("synthetic data needs n_per_class >= 1 and dim >= 1");
  if (!(sigma > 0.0) || !(separation >= 0.0)) throw ConfigError("synthetic data needs sigma > 0, separation >= 0");

  Rng rng(seed);
  RowMatrix directions(dim, classes);
  for (Index k = 0; k < directions.size(); ++k) directions.data()[k] = rng.normal();
  if (classes <= dim) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr{Eigen::MatrixXd(directions)};
    directions = qr.householderQ() * Eigen::MatrixXd::Identity(dim, classes);
  } else {
    directions.colwise().normalize();
  }
  // Orthonormal directions scaled by s / sqrt(2) sit s apart pairwise.
  const RowMatrix means = directions * (separation * sigma / std::sqrt(2.0));

  LabeledSet out;
  out.classes = classes;
  out.examples = Tensor({classes * n_per_class, dim});
  auto x = out.examples.matrix();
  for (Index c = 0; c < classes; ++c) {
    for (Index i = 0; i < n_per_class; ++i) {
      const Index r = c * n_per_class + i;
      for (Index d = 0; d < dim; ++d) x(r, d) = means(d, c) + sigma * rng.normal();
      out.labels.push_back(static_cast<int>(c));
    }
  }
  return out;
}

namespace {

// Splits `total` into integer parts proportional to `shares`, largest
// remainder first; ties go to the lower index.
std::vector<Index> apportion(Index total, const std::vector<double>& shares) {
  std::vector<Index> out(shares.size(), 0);
  std::vector<std::pair<double, std::size_t>> rem;
  Index used = 0;
  for (std::size_t i = 0; i < shares.size(); ++i) {
    const double exact = shares[i] * static_cast<double>(total);
    out[i] = static_cast<Index>(std::floor(exact));
    used += out[i];
    rem.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < total && k < rem.size(); ++k, ++used) ++out[rem[k].second];
  return out;
}

double median_of(std::vector<Index> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n == 0) return 0.0;
  return n % 2 ? static_cast<double>(v[n / 2]) : 0.5 * static_cast<double>(v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

Partition partition_noniid(const LabeledSet& src, const PartitionOptions& opt) {
  src.validate();
  const Index classes = src.classes;
  if (opt.n_clients < 1) throw ConfigError("partition needs at least one client");
  if (opt.classes_per_client < 1 || opt.classes_per_client > classes) {
    throw ConfigError("classes_per_client must lie in [1, " + std::to_string(classes) + "]");
  }
  if (opt.proxy_size < classes) throw ConfigError("proxy_size must be >= the class count");
  if (!(opt.test_frac >= 0.0 && opt.test_frac < 1.0)) throw ConfigError("test_frac must lie in [0, 1)");

  Rng rng(opt.seed);
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(classes));
  for (Index i = 0; i < src.size(); ++i) by_class[static_cast<std::size_t>(src.labels[static_cast<std::size_t>(i)])].push_back(i);
  for (auto& pool : by_class) rng.shuffle(pool);

  Partition part;

  // Proxy first: an even split across classes, remainder to random classes.
  std::vector<Index> class_order(static_cast<std::size_t>(classes));
  std::iota(class_order.begin(), class_order.end(), Index{0});
  rng.shuffle(class_order);
  std::vector<Index> proxy_quota(static_cast<std::size_t>(classes), opt.proxy_size / classes);
  for (Index k = 0; k < opt.proxy_size % classes; ++k) ++proxy_quota[static_cast<std::size_t>(class_order[static_cast<std::size_t>(k)])];
  for (Index c = 0; c < classes; ++c) {
    auto& pool = by_class[static_cast<std::size_t>(c)];
    const Index q = proxy_quota[static_cast<std::size_t>(c)];
    if (static_cast<Index>(pool.size()) < q) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(pool.size()) +
                      " examples, proxy needs " + std::to_string(q));
    }
    part.proxy_indices.insert(part.proxy_indices.end(), pool.end() - q, pool.end());
    pool.resize(pool.size() - static_cast<std::size_t>(q));
  }
  std::sort(part.proxy_indices.begin(), part.proxy_indices.end());

  // Class assignment: distinct within a client, overlapping across clients.
  part.class_map.resize(static_cast<std::size_t>(opt.n_clients));
  std::vector<std::vector<std::size_t>> holders(static_cast<std::size_t>(classes));
  for (Index n = 0; n < opt.n_clients; ++n) {
    std::vector<int> all(static_cast<std::size_t>(classes));
    std::iota(all.begin(), all.end(), 0);
    rng.shuffle(all);
    all.resize(static_cast<std::size_t>(opt.classes_per_client));
    std::sort(all.begin(), all.end());
    for (int c : all) holders[static_cast<std::size_t>(c)].push_back(static_cast<std::size_t>(n));
    part.class_map[static_cast<std::size_t>(n)] = std::move(all);
  }

  // counts[c][h]: examples of class c given to its h-th holder. Every holder
  // gets at least one; the rest follows Dirichlet shares.
  std::vector<std::vector<Index>> counts(static_cast<std::size_t>(classes));
  std::vector<std::vector<double>> shares(static_cast<std::size_t>(classes));
  for (Index c = 0; c < classes; ++c) {
    const auto& h = holders[static_cast<std::size_t>(c)];
    if (h.empty()) continue;
    const auto avail = static_cast<Index>(by_class[static_cast<std::size_t>(c)].size());
    if (avail < static_cast<Index>(h.size())) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(avail) + " examples left for " +
                      std::to_string(h.size()) + " clients");
    }
    shares[static_cast<std::size_t>(c)] = rng.dirichlet(h.size(), opt.dirichlet_concentration);
  }
  auto allocate = [&](double fraction) {
    for (Index c = 0; c < classes; ++c) {
      const auto& h = holders[static_cast<std::size_t>(c)];
      if (h.empty()) continue;
      const auto avail = static_cast<Index>(by_class[static_cast<std::size_t>(c)].size());
      const auto hn = static_cast<Index>(h.size());
      const Index budget = std::clamp<Index>(static_cast<Index>(std::llround(fraction * static_cast<double>(avail))), hn, avail);
      auto extra = apportion(budget - hn, shares[static_cast<std::size_t>(c)]);
      for (auto& e : extra) e += 1;
      counts[static_cast<std::size_t>(c)] = std::move(extra);
    }
  };
  auto client_sizes = [&] {
    std::vector<Index> sizes(static_cast<std::size_t>(opt.n_clients), 0);
    for (Index c = 0; c < classes; ++c) {
      const auto& h = holders[static_cast<std::size_t>(c)];
      for (std::size_t k = 0; k < h.size(); ++k) sizes[h[k]] += counts[static_cast<std::size_t>(c)][k];
    }
    return sizes;
  };

  allocate(1.0);
  if (opt.median_target) {
    const double target = *opt.median_target;
    if (!(target > 0.0)) throw ConfigError("median_target must be > 0");
    // Shrink the per-class budgets until the median client size is close to
    // the target; bisection over the used fraction of each class pool.
    double lo = 0.0, hi = 1.0;
    if (median_of(client_sizes()) > target) {
      for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        allocate(mid);
        if (median_of(client_sizes()) > target) hi = mid; else lo = mid;
      }
      allocate(lo);
      const double m_lo = median_of(client_sizes());
      allocate(hi);
      const double m_hi = median_of(client_sizes());
      if (std::abs(m_lo - target) <= std::abs(m_hi - target)) allocate(lo);
    }
  }

  std::vector<std::vector<Index>> members(static_cast<std::size_t>(opt.n_clients));
  for (Index c = 0; c < classes; ++c) {
    const auto& h = holders[static_cast<std::size_t>(c)];
    const auto& pool = by_class[static_cast<std::size_t>(c)];
    std::size_t at = 0;
    for (std::size_t k = 0; k < h.size(); ++k) {
      const auto n = static_cast<std::size_t>(counts[static_cast<std::size_t>(c)][k]);
      members[h[k]].insert(members[h[k]].end(), pool.begin() + static_cast<std::ptrdiff_t>(at),
                           pool.begin() + static_cast<std::ptrdiff_t>(at + n));
      at += n;
    }
  }

  part.proxy = src.subset(part.proxy_indices);
  for (auto& rows : members) {
    rng.shuffle(rows);
    const auto n = static_cast<Index>(rows.size());
    Index n_test = static_cast<Index>(std::llround(opt.test_frac * static_cast<double>(n)));
    if (opt.test_frac > 0.0 && n >= 2) n_test = std::clamp<Index>(n_test, 1, n - 1);
    ClientShard shard;
    shard.test_indices.assign(rows.begin(), rows.begin() + n_test);
    shard.train_indices.assign(rows.begin() + n_test, rows.end());
    shard.train = src.subset(shard.train_indices);
    shard.test = src.subset(shard.test_indices);
    part.clients.push_back(std::move(shard));
  }
  return part;
}

nlohmann::json partition_manifest(const Partition& partition) {
  nlohmann::json j;
  j["proxy"] = partition.proxy_indices;
  auto& clients = j["clients"] = nlohmann::json::array();
  for (std::size_t n = 0; n < partition.clients.size(); ++n) {
    clients.push_back({{"id", n},
                       {"classes", partition.class_map[n]},
                       {"train", partition.clients[n].train_indices},
                       {"test", partition.clients[n].test_indices}});
  }
  return j;
}

BatchStream::BatchStream(Index count, Index batch_size, std::uint64_t seed, bool cycle)
    : count_(count), batch_size_(batch_size), cycle_(cycle), rng_(seed) {
  if (count < 1) throw DataError("cannot batch an empty set");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  order_.resize(static_cast<std::size_t>(count));
  cursor_ = count_;
}

void BatchStream::reshuffle() {
  std::iota(order_.begin(), order_.end(), Index{0});
  rng_.shuffle(order_);
  cursor_ = 0;
  started_ = true;
}

std::optional<std::vector<Index>> BatchStream::next() {
  if (cursor_ >= count_) {
    if (!cycle_ && started_) {
      started_ = false;
      return std::nullopt;
    }
    reshuffle();
  }
  const Index end = std::min(count_, cursor_ + batch_size_);
  std::vector<Index> batch(order_.begin() + cursor_, order_.begin() + end);
  cursor_ = end;
  return batch;
}

std::vector<std::vector<Index>> BatchStream::next_epoch() {
  restart();
  std::vector<std::vector<Index>> out;
  do {
    out.push_back(*next());
  } while (cursor_ < count_);
  if (!cycle_) started_ = false;
  return out;
}

void BatchStream::restart() {
  cursor_ = count_;
  started_ = false;
}

BatchStream batches(const LabeledSet& set, Index batch_size, std::uint64_t seed, bool cycle) {
  return BatchStream(set.size(), batch_size, seed, cycle);
}

}  // namespace cdkt
