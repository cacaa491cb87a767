#pragma once

#include "tase/common.hpp"
#include "tase/datagen.hpp"
#include "tase/io.hpp"
#include "tase/model.hpp"
#include "tase/pseudo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tase::eval {

using datagen::Group;

// Accuracy slice for one benchmark.
struct BenchmarkReport {
  std::string name;
  double overall = 0.0;
  std::vector<double> per_class;
  double head = 0.0, mid = 0.0, tail = 0.0;
  double range = 0.0;                  // max - min over per-class accuracy
  std::vector<int> absent_classes;     // probe fine-tune classes with no samples
};

namespace detail {

inline MatrixD renormalized(const MatrixD& v) {
  MatrixD out = v;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double n = out.row(r).norm();
    if (n > 0) out.row(r) /= n;
  }
  return out;
}

// per-class accuracy -> overall (count-weighted), group means, range.
inline BenchmarkReport summarize(std::string name, std::span<const uint32_t> truth, std::span<const int> predictions,
                                 int num_classes, std::span<const Group> groups) {
  std::vector<int> correct(static_cast<size_t>(num_classes), 0), total(static_cast<size_t>(num_classes), 0);
  for (size_t i = 0; i < truth.size(); ++i) {
    ++total[truth[i]];
    if (predictions[i] == static_cast<int>(truth[i])) ++correct[truth[i]];
  }
  BenchmarkReport rep;
  rep.name = std::move(name);
  rep.per_class.resize(static_cast<size_t>(num_classes), 0.0);
  long long correct_sum = 0;
  double lo = 1.0, hi = 0.0;
  double group_sum[3] = {0, 0, 0};
  int group_n[3] = {0, 0, 0};
  for (int c = 0; c < num_classes; ++c) {
    const auto ci = static_cast<size_t>(c);
    rep.per_class[ci] = total[ci] > 0 ? static_cast<double>(correct[ci]) / total[ci] : 0.0;
    correct_sum += correct[ci];
    lo = std::min(lo, rep.per_class[ci]);
    hi = std::max(hi, rep.per_class[ci]);
    const int g = static_cast<int>(groups[ci]);
    group_sum[g] += rep.per_class[ci];
    ++group_n[g];
  }
  rep.overall = truth.empty() ? 0.0 : static_cast<double>(correct_sum) / static_cast<double>(truth.size());
  rep.range = hi - lo;
  rep.head = group_n[0] ? group_sum[0] / group_n[0] : 0.0;
  rep.mid = group_n[1] ? group_sum[1] / group_n[1] : 0.0;
  rep.tail = group_n[2] ? group_sum[2] / group_n[2] : 0.0;
  return rep;
}

}  // namespace detail

// Majority vote over the k nearest training embeddings under Euclidean
// distance on re-normalized vectors. Neighbor order ties break on the lower
// training index; vote ties break on (a) smaller summed distance among the
// tied classes, then (b) lower class index.
inline int knn_predict(const MatrixD& train, std::span<const uint32_t> train_labels, const VectorD& query, int k,
                       int num_classes) {
  const Eigen::Index n = train.rows();
  std::vector<std::pair<double, int>> dist(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) dist[static_cast<size_t>(i)] = {(train.row(i).transpose() - query).norm(), static_cast<int>(i)};
  std::partial_sort(dist.begin(), dist.begin() + k, dist.end());

  std::vector<int> votes(static_cast<size_t>(num_classes), 0);
  std::vector<double> dist_sum(static_cast<size_t>(num_classes), 0.0);
  for (int i = 0; i < k; ++i) {
    const auto cls = train_labels[static_cast<size_t>(dist[static_cast<size_t>(i)].second)];
    ++votes[cls];
    dist_sum[cls] += dist[static_cast<size_t>(i)].first;
  }
  int best = -1;
  for (int c = 0; c < num_classes; ++c) {
    if (votes[static_cast<size_t>(c)] == 0) continue;
    if (best < 0 || votes[static_cast<size_t>(c)] > votes[static_cast<size_t>(best)] ||
        (votes[static_cast<size_t>(c)] == votes[static_cast<size_t>(best)] &&
         dist_sum[static_cast<size_t>(c)] < dist_sum[static_cast<size_t>(best)]))
      best = c;
  }
  return best;
}

inline BenchmarkReport knn_accuracy(const MatrixD& train_emb, std::span<const uint32_t> train_labels,
                                    const MatrixD& test_emb, std::span<const uint32_t> test_labels, int k,
                                    int num_classes, std::span<const Group> groups) {
  if (train_emb.rows() == 0) throw DataError("knn: empty training set");
  if (k < 1 || k > train_emb.rows()) throw ConfigError("knn: k out of range");
  const MatrixD train = detail::renormalized(train_emb);
  const MatrixD test = detail::renormalized(test_emb);
  std::vector<int> preds(static_cast<size_t>(test.rows()));
  for (Eigen::Index i = 0; i < test.rows(); ++i)
    preds[static_cast<size_t>(i)] = knn_predict(train, train_labels, test.row(i).transpose(), k, num_classes);
  return detail::summarize("KNN@" + std::to_string(k), test_labels, preds, num_classes, groups);
}

// ------------------------------ probes ------------------------------------

enum class ProbeRegime { FullLP, MsLP, OnePctSLP, LtLP };

struct ProbeSpec {
  ProbeRegime regime = ProbeRegime::FullLP;
  double fraction = 0.01;  // share of the pool used by the two balanced few-shot regimes
  int iterations = 500;
  double lr = 0.5;
  uint64_t seed = 0;

  void validate() const {
    if (!(fraction > 0.0) || fraction > 1.0) throw ConfigError("probe: fraction must be in (0, 1]");
    if (iterations < 0) throw ConfigError("probe: iterations must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("probe: lr must be > 0");
  }
};

// Fine-tuning subset: indices either into the long-tailed training set or
// into the balanced pool.
struct ProbeSubset {
  enum class Source { Train, Pool } source = Source::Train;
  std::vector<int> indices;
  int per_class = 0;       // balanced regimes only
  bool lowered = false;    // per-class count reduced to the tail availability
};

inline ProbeSubset probe_subset(std::span<const uint32_t> train_labels, std::span<const uint32_t> pool_labels,
                                int num_classes, const ProbeSpec& spec) {
  spec.validate();
  ProbeSubset out;
  auto by_class = [&](std::span<const uint32_t> labels) {
    std::vector<std::vector<int>> idx(static_cast<size_t>(num_classes));
    for (size_t i = 0; i < labels.size(); ++i) idx[labels[i]].push_back(static_cast<int>(i));
    return idx;
  };
  auto balanced_draw = [&](std::span<const uint32_t> labels, int per_class, std::string_view stream) {
    auto idx = by_class(labels);
    std::vector<int> chosen;
    Rng rng(spec.seed, stream);
    for (int c = 0; c < num_classes; ++c) {
      auto& pool = idx[static_cast<size_t>(c)];
      const auto perm = random_permutation(static_cast<int>(pool.size()), rng);
      for (int i = 0; i < per_class && i < static_cast<int>(pool.size()); ++i)
        chosen.push_back(pool[static_cast<size_t>(perm[static_cast<size_t>(i)])]);
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
  };

  switch (spec.regime) {
    case ProbeRegime::LtLP: {
      out.source = ProbeSubset::Source::Train;
      out.indices.resize(train_labels.size());
      std::iota(out.indices.begin(), out.indices.end(), 0);
      break;
    }
    case ProbeRegime::FullLP: {
      out.source = ProbeSubset::Source::Pool;
      out.indices.resize(pool_labels.size());
      std::iota(out.indices.begin(), out.indices.end(), 0);
      break;
    }
    case ProbeRegime::MsLP: {
      out.source = ProbeSubset::Source::Train;
      const int target = static_cast<int>(std::floor(spec.fraction * static_cast<double>(pool_labels.size()))) / num_classes;
      auto idx = by_class(train_labels);
      int available = static_cast<int>(train_labels.size());
      for (const auto& v : idx) available = std::min(available, static_cast<int>(v.size()));
      out.per_class = std::min(target, available);
      out.lowered = out.per_class < target;
      if (out.per_class < 1) throw ConfigError("probe: MS subset would be empty (fraction too small)");
      out.indices = balanced_draw(train_labels, out.per_class, "probe-ms");
      break;
    }
    case ProbeRegime::OnePctSLP: {
      out.source = ProbeSubset::Source::Pool;
      out.per_class = static_cast<int>(std::floor(spec.fraction * static_cast<double>(pool_labels.size()))) / num_classes;
      if (out.per_class < 1) throw ConfigError("probe: 1%S subset would be empty (fraction too small)");
      out.indices = balanced_draw(pool_labels, out.per_class, "probe-1pct");
      break;
    }
  }
  return out;
}

// Multinomial logistic regression on frozen features: softmax cross-entropy,
// L2 on the weight matrix only (lambda = 1e-4), full-batch gradient descent
// with a cosine-decayed step size.
struct ProbeFit {
  MatrixD weight;  // C x d
  VectorD bias;    // C
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

inline ProbeFit fit_linear_probe(const MatrixD& x, std::span<const uint32_t> labels, int num_classes,
                                 const ProbeSpec& spec) {
  constexpr double kL2 = 1e-4;
  const Eigen::Index n = x.rows(), d = x.cols();
  ProbeFit fit;
  fit.weight = MatrixD::Zero(num_classes, d);
  fit.bias = VectorD::Zero(num_classes);

  auto loss_and_grad = [&](MatrixD& g_w, VectorD& g_b) {
    MatrixD logits = x * fit.weight.transpose();
    logits.rowwise() += fit.bias.transpose();
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double mx = logits.row(i).maxCoeff();
      double z = 0.0;
      for (int c = 0; c < num_classes; ++c) z += std::exp(logits(i, c) - mx);
      loss += std::log(z) - (logits(i, labels[static_cast<size_t>(i)]) - mx);
      for (int c = 0; c < num_classes; ++c) logits(i, c) = std::exp(logits(i, c) - mx) / z;  // now probabilities
      logits(i, labels[static_cast<size_t>(i)]) -= 1.0;
    }
    loss = loss / static_cast<double>(n) + 0.5 * kL2 * fit.weight.squaredNorm();
    g_w = logits.transpose() * x / static_cast<double>(n) + kL2 * fit.weight;
    g_b = logits.colwise().sum().transpose() / static_cast<double>(n);
    return loss;
  };

  MatrixD g_w;
  VectorD g_b;
  fit.initial_loss = fit.final_loss = loss_and_grad(g_w, g_b);
  for (int t = 0; t < spec.iterations; ++t) {
    const double lr = spec.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(t) / std::max(1, spec.iterations)));
    fit.weight -= lr * g_w;
    fit.bias -= lr * g_b;
    fit.final_loss = loss_and_grad(g_w, g_b);
  }
  return fit;
}

inline BenchmarkReport linear_probe(std::string name, const MatrixD& train_x, std::span<const uint32_t> train_y,
                                    const MatrixD& test_x, std::span<const uint32_t> test_y, int num_classes,
                                    std::span<const Group> groups, const ProbeSpec& spec) {
  if (train_x.rows() == 0) throw DataError("probe: empty fine-tune subset");
  std::vector<int> seen(static_cast<size_t>(num_classes), 0);
  for (uint32_t y : train_y) ++seen[y];

  const ProbeFit fit = fit_linear_probe(train_x, train_y, num_classes, spec);

  std::vector<int> preds(static_cast<size_t>(test_x.rows()));
  MatrixD logits = test_x * fit.weight.transpose();
  logits.rowwise() += fit.bias.transpose();
  for (Eigen::Index i = 0; i < test_x.rows(); ++i) {
    int best = 0;  // argmax; ties keep the lowest class index
    for (int c = 1; c < num_classes; ++c)
      if (logits(i, c) > logits(i, best)) best = c;
    preds[static_cast<size_t>(i)] = best;
  }
  auto rep = detail::summarize(std::move(name), test_y, preds, num_classes, groups);
  for (int c = 0; c < num_classes; ++c)
    if (seen[static_cast<size_t>(c)] == 0) rep.absent_classes.push_back(c);
  return rep;
}

// ------------------------- diagnostics ------------------------------------

// log of the mean over distinct ordered pairs of exp(-2 ||v_i - v_j||^2);
// 0 when all points coincide, more negative the more spread the set is.
inline double uniformity(const MatrixD& v) {
  const Eigen::Index n = v.rows();
  if (n < 2) throw ConfigError("uniformity: needs at least two rows");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      sum += std::exp(-2.0 * (v.row(i) - v.row(j)).squaredNorm());
    }
  return std::log(sum / (static_cast<double>(n) * static_cast<double>(n - 1)));
}

// Mean cosine similarity over distinct ordered intra-class pairs; empty when
// every class has fewer than two samples.
inline std::optional<double> tolerance(const MatrixD& v, std::span<const uint32_t> labels) {
  if (v.rows() < 2) throw ConfigError("tolerance: needs at least two rows");
  const MatrixD u = detail::renormalized(v);
  double sum = 0.0;
  long long pairs = 0;
  for (Eigen::Index i = 0; i < u.rows(); ++i)
    for (Eigen::Index j = 0; j < u.rows(); ++j) {
      if (i == j || labels[static_cast<size_t>(i)] != labels[static_cast<size_t>(j)]) continue;
      sum += u.row(i).dot(u.row(j));
      ++pairs;
    }
  if (pairs == 0) return std::nullopt;
  return sum / static_cast<double>(pairs);
}

// ------------------------ embeddings & exports ----------------------------

inline void save_embeddings(const MatrixD& v, std::span<const uint32_t> labels, const std::filesystem::path& path) {
  io::BinaryWriter w(path);
  w.magic("TASEEMB1");
  w.u32(static_cast<uint32_t>(v.rows()));
  w.u32(static_cast<uint32_t>(v.cols()));
  w.matrix_f32(v);
  w.u32_block(labels);
  w.close();
}

struct EmbeddingDump {
  MatrixD vectors;
  std::vector<uint32_t> labels;
};

inline EmbeddingDump load_embeddings(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic("TASEEMB1");
  const auto n = r.u32();
  const auto d = r.u32();
  EmbeddingDump dump;
  dump.vectors = r.matrix_f32<double>(n, d);
  dump.labels = r.u32_block(n);
  return dump;
}

// Top-2 principal-component projection with deterministic sign convention.
inline MatrixD pca2d(const MatrixD& v) {
  if (v.rows() < 2 || v.cols() < 2) throw ConfigError("pca2d: needs at least a 2x2 input");
  const MatrixD centered = v.rowwise() - v.colwise().mean();
  const MatrixD cov = centered.transpose() * centered / static_cast<double>(v.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  Eigen::MatrixXd basis(v.cols(), 2);
  basis.col(0) = solver.eigenvectors().col(v.cols() - 1);
  basis.col(1) = solver.eigenvectors().col(v.cols() - 2);
  for (int c = 0; c < 2; ++c) {
    Eigen::Index arg = 0;
    basis.col(c).cwiseAbs().maxCoeff(&arg);
    if (basis(arg, c) < 0) basis.col(c) = -basis.col(c);
  }
  return centered * basis;
}

inline std::string pca2d_csv(const MatrixD& emb, std::span<const uint32_t> true_labels,
                             std::span<const int> pseudo_labels) {
  const MatrixD proj = pca2d(emb);
  std::string out = "x,y,true_label,pseudo_label\n";
  char buf[96];
  for (Eigen::Index i = 0; i < proj.rows(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.8g,%.8g,%u,%d\n", proj(i, 0), proj(i, 1),
                  true_labels[static_cast<size_t>(i)], pseudo_labels[static_cast<size_t>(i)]);
    out += buf;
  }
  return out;
}

// ---------------------------- full battery --------------------------------

enum class FeatureKind { Encoder, Projection };

// Embed a dataset with the trained model; rows come back re-normalized.
inline MatrixD embed(const model::ModelParams<float>& params, const datagen::Dataset& data, FeatureKind kind) {
  MatrixF x = data.features();
  model::ForwardCache<float> cache;
  const MatrixF v = model::forward(params, x, &cache);
  const MatrixF& raw = kind == FeatureKind::Encoder ? cache.features() : v;
  return detail::renormalized(raw.cast<double>());
}

struct BatteryInputs {
  MatrixD train_emb;
  std::vector<uint32_t> train_labels;
  MatrixD test_emb;
  std::vector<uint32_t> test_labels;
  MatrixD pool_emb;
  std::vector<uint32_t> pool_labels;
  int num_classes = 0;
  std::vector<Group> groups;
};

struct BatterySettings {
  double probe_fraction = 0.01;
  int probe_iterations = 500;
  double probe_lr = 0.5;
  uint64_t seed = 0;
};

struct FullReport {
  std::vector<BenchmarkReport> benchmarks;  // KNN@1, KNN@10, MS LP, 1%S LP, LT LP, Full LP
  double uniformity = 0.0;
  std::optional<double> tolerance;
};

inline FullReport evaluate_battery(const BatteryInputs& in, const BatterySettings& settings) {
  FullReport report;
  report.benchmarks.push_back(
      knn_accuracy(in.train_emb, in.train_labels, in.test_emb, in.test_labels, 1, in.num_classes, in.groups));
  report.benchmarks.push_back(
      knn_accuracy(in.train_emb, in.train_labels, in.test_emb, in.test_labels, 10, in.num_classes, in.groups));

  auto run_probe = [&](std::string name, ProbeRegime regime) {
    ProbeSpec spec;
    spec.regime = regime;
    spec.fraction = settings.probe_fraction;
    spec.iterations = settings.probe_iterations;
    spec.lr = settings.probe_lr;
    spec.seed = settings.seed;
    const auto subset = probe_subset(in.train_labels, in.pool_labels, in.num_classes, spec);
    const MatrixD& src = subset.source == ProbeSubset::Source::Train ? in.train_emb : in.pool_emb;
    const auto& src_labels = subset.source == ProbeSubset::Source::Train ? in.train_labels : in.pool_labels;
    MatrixD x(static_cast<Eigen::Index>(subset.indices.size()), src.cols());
    std::vector<uint32_t> y(subset.indices.size());
    for (size_t i = 0; i < subset.indices.size(); ++i) {
      x.row(static_cast<Eigen::Index>(i)) = src.row(subset.indices[i]);
      y[i] = src_labels[static_cast<size_t>(subset.indices[i])];
    }
    report.benchmarks.push_back(
        linear_probe(std::move(name), x, y, in.test_emb, in.test_labels, in.num_classes, in.groups, spec));
  };
  run_probe("MS LP", ProbeRegime::MsLP);
  run_probe("1%S LP", ProbeRegime::OnePctSLP);
  run_probe("LT LP", ProbeRegime::LtLP);
  run_probe("Full LP", ProbeRegime::FullLP);

  report.uniformity = uniformity(in.train_emb);
  report.tolerance = tolerance(in.train_emb, in.train_labels);
  return report;
}

}  // namespace tase::eval
