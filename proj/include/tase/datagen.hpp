#pragma once

#include "tase/common.hpp"
#include "tase/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <variant>
#include <vector>

namespace tase::datagen {

enum class Group : uint8_t { Head, Mid, Tail };

// Long-tail count profile: counts[c] = floor(n_max * IF^(-c/(C-1))).
struct LongTailProfile {
  int num_classes = 10;
  int n_max = 500;
  double imbalance = 100.0;  // head count divided by tail count

  void validate() const {
    if (num_classes < 2) throw ConfigError("profile: num_classes must be >= 2");
    if (n_max < 1) throw ConfigError("profile: n_max must be >= 1");
    if (imbalance < 1.0) throw ConfigError("profile: imbalance factor must be >= 1");
    if (std::floor(static_cast<double>(n_max) / imbalance) < 1.0)
      throw ConfigError("profile: tail class would be empty (n_max / IF < 1)");
  }
};

inline std::vector<int> class_counts(const LongTailProfile& p) {
  p.validate();
  std::vector<int> counts(static_cast<size_t>(p.num_classes));
  const double denom = static_cast<double>(p.num_classes - 1);
  for (int c = 0; c < p.num_classes; ++c) {
    counts[static_cast<size_t>(c)] =
        static_cast<int>(std::floor(static_cast<double>(p.n_max) * std::pow(p.imbalance, -c / denom)));
  }
  return counts;
}

// Head/Mid/Tail assignment schemes (4:3:3-style ratios or count thresholds).
struct RatioSplit {
  int head, mid, tail;
};
struct ThresholdSplit {
  int head_over, tail_under;  // count > head_over -> Head, count < tail_under -> Tail
};
using GroupScheme = std::variant<RatioSplit, ThresholdSplit>;

// Default ratio rule: thirds with the remainder on Head.
// C=10 -> 4:3:3, C=100 -> 34:33:33.
inline RatioSplit default_ratio(int num_classes) {
  const int third = num_classes / 3;
  return RatioSplit{num_classes - 2 * third, third, third};
}

inline std::vector<Group> group_split(std::span<const int> counts, const GroupScheme& scheme) {
  const int c_total = static_cast<int>(counts.size());
  std::vector<Group> groups(counts.size(), Group::Mid);
  if (std::holds_alternative<RatioSplit>(scheme)) {
    const auto r = std::get<RatioSplit>(scheme);
    if (r.head < 0 || r.mid < 0 || r.tail < 0 || r.head + r.mid + r.tail != c_total)
      throw ConfigError("group_split: ratio parts must be non-negative and sum to the class count");
    std::vector<int> order(counts.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return counts[static_cast<size_t>(a)] > counts[static_cast<size_t>(b)]; });
    for (int i = 0; i < c_total; ++i) {
      const auto cls = static_cast<size_t>(order[static_cast<size_t>(i)]);
      groups[cls] = i < r.head ? Group::Head : (i < r.head + r.mid ? Group::Mid : Group::Tail);
    }
  } else {
    const auto t = std::get<ThresholdSplit>(scheme);
    if (t.head_over <= t.tail_under) throw ConfigError("group_split: head threshold must exceed tail threshold");
    for (size_t c = 0; c < counts.size(); ++c) {
      if (counts[c] > t.head_over)
        groups[c] = Group::Head;
      else if (counts[c] < t.tail_under)
        groups[c] = Group::Tail;
      else
        groups[c] = Group::Mid;
    }
  }
  return groups;
}

// Feature-vector stand-ins for image augmentations: additive Gaussian noise,
// independent coordinate masking, and a global scale jitter.
struct AugmentConfig {
  double noise_sigma = 0.0;
  double mask_prob = 0.0;
  double scale_jitter = 0.0;

  void validate() const {
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("augment: noise_sigma must be finite and >= 0");
    if (!(mask_prob >= 0.0) || !(mask_prob < 1.0)) throw ConfigError("augment: mask_prob must be in [0, 1)");
    if (!(scale_jitter >= 0.0) || !std::isfinite(scale_jitter)) throw ConfigError("augment: scale_jitter must be finite and >= 0");
  }
};

// Labeled feature dataset. True labels are needed by evaluation and probe
// splitting only; the training path never reads them, which is why the
// accessor is named the way it is.
class Dataset {
 public:
  Dataset() = default;
  Dataset(MatrixF features, std::vector<uint32_t> labels, std::vector<int> counts, const GroupScheme& scheme)
      : features_(std::move(features)),
        labels_(std::move(labels)),
        class_counts_(std::move(counts)),
        groups_(group_split(class_counts_, scheme)) {
    validate();
  }

  int size() const { return static_cast<int>(features_.rows()); }
  int dim() const { return static_cast<int>(features_.cols()); }
  int num_classes() const { return static_cast<int>(class_counts_.size()); }

  const MatrixF& features() const { return features_; }
  const std::vector<int>& class_counts() const { return class_counts_; }
  const std::vector<Group>& group_of_class() const { return groups_; }

  void regroup(const GroupScheme& scheme) { groups_ = group_split(class_counts_, scheme); }

  // Evaluation-only: ground-truth labels. Training code must not call this.
  std::span<const uint32_t> eval_labels() const { return labels_; }

  void save(const std::filesystem::path& path) const {
    io::BinaryWriter w(path);
    w.magic(std::string_view("TASEDS1\0", 8));
    w.u32(static_cast<uint32_t>(size()));
    w.u32(static_cast<uint32_t>(dim()));
    w.u32(static_cast<uint32_t>(num_classes()));
    for (int c : class_counts_) w.u32(static_cast<uint32_t>(c));
    w.matrix_f32(features_);
    w.u32_block(labels_);
    w.close();
  }

  static Dataset load(const std::filesystem::path& path, const GroupScheme* scheme = nullptr) {
    io::BinaryReader r(path);
    r.expect_magic(std::string_view("TASEDS1\0", 8));
    const auto n = r.u32();
    const auto d = r.u32();
    const auto c = r.u32();
    std::vector<int> counts(c);
    for (auto& x : counts) x = static_cast<int>(r.u32());
    MatrixF feats = r.matrix_f32<float>(n, d);
    std::vector<uint32_t> labels = r.u32_block(n);
    const GroupScheme sc = scheme ? *scheme : GroupScheme(default_ratio(static_cast<int>(c)));
    return Dataset(std::move(feats), std::move(labels), std::move(counts), sc);
  }

 private:
  void validate() const {
    const long long total = std::accumulate(class_counts_.begin(), class_counts_.end(), 0ll);
    if (total != size()) throw DataError("dataset: class_counts do not sum to N");
    if (labels_.size() != static_cast<size_t>(size())) throw DataError("dataset: label count mismatch");
    for (uint32_t l : labels_)
      if (l >= static_cast<uint32_t>(num_classes())) throw DataError("dataset: label out of range");
    for (size_t c = 1; c < class_counts_.size(); ++c)
      if (class_counts_[c] > class_counts_[c - 1]) throw DataError("dataset: class_counts must be non-increasing");
  }

  MatrixF features_;
  std::vector<uint32_t> labels_;  // sealed; see eval_labels()
  std::vector<int> class_counts_;
  std::vector<Group> groups_;
};

namespace detail {

// Class means on the radius-`class_sep` hypersphere, derived from the
// "means" substream so train/test/pool share the same geometry.
inline MatrixD class_means(int num_classes, int d_in, double class_sep, uint64_t seed) {
  Rng rng(seed, "means");
  MatrixD means(num_classes, d_in);
  for (int c = 0; c < num_classes; ++c) {
    double norm2 = 0.0;
    for (int j = 0; j < d_in; ++j) {
      means(c, j) = rng.normal();
      norm2 += means(c, j) * means(c, j);
    }
    const double norm = std::sqrt(norm2);
    for (int j = 0; j < d_in; ++j) means(c, j) = class_sep * (norm > 0 ? means(c, j) / norm : 0.0);
  }
  return means;
}

inline Dataset draw_block(const MatrixD& means, std::span<const int> per_class, double noise, Rng& rng,
                          const GroupScheme& scheme) {
  const int num_classes = static_cast<int>(means.rows());
  const int d_in = static_cast<int>(means.cols());
  int n = 0;
  for (int c : per_class) n += c;
  MatrixF feats(n, d_in);
  std::vector<uint32_t> labels(static_cast<size_t>(n));
  int row = 0;
  for (int c = 0; c < num_classes; ++c) {
    for (int i = 0; i < per_class[static_cast<size_t>(c)]; ++i, ++row) {
      labels[static_cast<size_t>(row)] = static_cast<uint32_t>(c);
      for (int j = 0; j < d_in; ++j)
        feats(row, j) = static_cast<float>(means(c, j) + noise * rng.normal());
    }
  }
  // Deterministic row shuffle so class blocks are not contiguous on disk.
  const auto perm = random_permutation(n, rng);
  MatrixF shuffled(n, d_in);
  std::vector<uint32_t> shuffled_labels(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    shuffled.row(i) = feats.row(perm[static_cast<size_t>(i)]);
    shuffled_labels[static_cast<size_t>(i)] = labels[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  }
  return Dataset(std::move(shuffled), std::move(shuffled_labels),
                 std::vector<int>(per_class.begin(), per_class.end()), scheme);
}

}  // namespace detail

struct DatasetBundle {
  Dataset train;  // long-tailed
  Dataset test;   // balanced
  Dataset pool;   // balanced reservoir for probe fine-tuning
};

// Long-tailed train set plus balanced test/pool sets drawn from the same
// class means. Pure function of its arguments.
inline DatasetBundle synthesize_bundle(const LongTailProfile& profile, int d_in, double class_sep, double noise,
                                       uint64_t seed, int test_per_class, int pool_per_class,
                                       const GroupScheme& scheme) {
  profile.validate();
  if (d_in < 2) throw ConfigError("synthesize: d_in must be >= 2");
  if (!(class_sep > 0.0)) throw ConfigError("synthesize: class_sep must be > 0");
  if (!(noise >= 0.0)) throw ConfigError("synthesize: noise must be >= 0");
  if (test_per_class < 1 || pool_per_class < 1)
    throw ConfigError("synthesize: test_per_class and pool_per_class must be >= 1");

  const auto means = detail::class_means(profile.num_classes, d_in, class_sep, seed);
  const auto train_counts = class_counts(profile);
  const std::vector<int> balanced_test(static_cast<size_t>(profile.num_classes), test_per_class);
  const std::vector<int> balanced_pool(static_cast<size_t>(profile.num_classes), pool_per_class);

  Rng train_rng(seed, "train");
  Rng test_rng(seed, "test");
  Rng pool_rng(seed, "pool");
  return DatasetBundle{detail::draw_block(means, train_counts, noise, train_rng, scheme),
                       detail::draw_block(means, balanced_test, noise, test_rng, scheme),
                       detail::draw_block(means, balanced_pool, noise, pool_rng, scheme)};
}

inline Dataset synthesize(const LongTailProfile& profile, int d_in, double class_sep, double noise, uint64_t seed) {
  return synthesize_bundle(profile, d_in, class_sep, noise, seed, 1, 1, default_ratio(profile.num_classes)).train;
}

// Two stochastic views of one sample. Always consumes the same number of rng
// draws regardless of the config values, so the draw sequence is independent
// of augmentation strength.
template <class T>
void make_views(std::span<const T> x, const AugmentConfig& cfg, Rng& rng, std::span<T> view_a, std::span<T> view_b) {
  cfg.validate();
  const size_t d = x.size();
  if (view_a.size() != d || view_b.size() != d) throw ConfigError("make_views: output size mismatch");
  for (std::span<T> v : {view_a, view_b}) {
    for (size_t j = 0; j < d; ++j) v[j] = x[j] + static_cast<T>(cfg.noise_sigma * rng.normal());
    for (size_t j = 0; j < d; ++j)
      if (rng.uniform() < cfg.mask_prob) v[j] = T(0);
    const T scale = static_cast<T>(1.0 + cfg.scale_jitter * (2.0 * rng.uniform() - 1.0));
    for (size_t j = 0; j < d; ++j) v[j] *= scale;
  }
}

}  // namespace tase::datagen
