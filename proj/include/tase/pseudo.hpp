#pragma once

#include "tase/common.hpp"
#include "tase/datagen.hpp"
#include "tase/io.hpp"
#include "tase/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace tase::pseudo {

struct KmeansConfig {
  int k = 10;
  int max_iter = 100;
  double tol = 1e-6;  // max centroid shift that counts as converged
  int restarts = 4;
  uint64_t seed = 0;

  void validate() const {
    if (k < 1) throw ConfigError("kmeans: k must be >= 1");
    if (max_iter < 1) throw ConfigError("kmeans: max_iter must be >= 1");
    if (tol < 0.0) throw ConfigError("kmeans: tol must be >= 0");
    if (restarts < 1) throw ConfigError("kmeans: restarts must be >= 1");
  }
};

// Pseudo-label allocation: per-sample cluster index plus the cluster-size
// distribution the temperatures and weights are read from.
template <class T>
struct PseudoState {
  std::vector<int> assignment;     // length N
  std::vector<int> cluster_sizes;  // length K, all > 0
  Matrix<T> centroids;             // K x d
  int epoch_computed = -1;
  double inertia = 0.0;

  int size_of_sample(int sample) const { return cluster_sizes[static_cast<size_t>(assignment[static_cast<size_t>(sample)])]; }
};

namespace detail {

template <class T>
double sq_dist(const Matrix<T>& a, Eigen::Index i, const Matrix<T>& b, Eigen::Index j) {
  double s = 0.0;
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    const double d = static_cast<double>(a(i, c)) - static_cast<double>(b(j, c));
    s += d * d;
  }
  return s;
}

// k-means++ seeding: first centroid uniform, then D^2-weighted draws.
template <class T>
Matrix<T> seed_centroids(const Matrix<T>& points, int k, Rng& rng) {
  const Eigen::Index n = points.rows();
  Matrix<T> centroids(k, points.cols());
  centroids.row(0) = points.row(static_cast<Eigen::Index>(rng.below(static_cast<uint64_t>(n))));
  std::vector<double> d2(static_cast<size_t>(n), 0.0);
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int j = 0; j < c; ++j) best = std::min(best, sq_dist(points, i, centroids, j));
      d2[static_cast<size_t>(i)] = best;
      total += best;
    }
    if (total <= 0.0) {
      // All points coincide with chosen centroids; fall back to uniform.
      centroids.row(c) = points.row(static_cast<Eigen::Index>(rng.below(static_cast<uint64_t>(n))));
      continue;
    }
    const double target = rng.uniform() * total;
    double acc = 0.0;
    Eigen::Index pick = n - 1;
    for (Eigen::Index i = 0; i < n; ++i) {
      acc += d2[static_cast<size_t>(i)];
      if (acc >= target) {
        pick = i;
        break;
      }
    }
    centroids.row(c) = points.row(pick);
  }
  return centroids;
}

template <class T>
struct LloydResult {
  std::vector<int> assignment;
  std::vector<int> sizes;
  Matrix<T> centroids;
  double inertia = 0.0;
  std::vector<double> inertia_trace;  // after every iteration and refinement pass
};

template <class T>
LloydResult<T> lloyd(const Matrix<T>& points, const KmeansConfig& cfg, Rng& rng) {
  const Eigen::Index n = points.rows();
  const int k = cfg.k;
  Matrix<T> centroids = seed_centroids(points, k, rng);
  std::vector<int> assignment(static_cast<size_t>(n), 0);
  std::vector<int> sizes(static_cast<size_t>(k), 0);
  std::vector<double> trace;

  auto assign_all = [&]() {
    std::fill(sizes.begin(), sizes.end(), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = sq_dist(points, i, centroids, 0);
      for (int c = 1; c < k; ++c) {
        const double d = sq_dist(points, i, centroids, c);
        if (d < best_d) {  // ties keep the lower cluster index
          best_d = d;
          best = c;
        }
      }
      assignment[static_cast<size_t>(i)] = best;
      ++sizes[static_cast<size_t>(best)];
    }
  };

  // Repair empty clusters by re-seeding them at the point currently farthest
  // from its own centroid; preserves K deterministically. A donor cluster
  // always exists because n >= k.
  auto repair_empties = [&]() {
    for (int c = 0; c < k; ++c) {
      if (sizes[static_cast<size_t>(c)] > 0) continue;
      Eigen::Index far = 0;
      double far_d = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (sizes[static_cast<size_t>(assignment[static_cast<size_t>(i)])] <= 1) continue;
        const double d = sq_dist(points, i, centroids, assignment[static_cast<size_t>(i)]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      --sizes[static_cast<size_t>(assignment[static_cast<size_t>(far)])];
      assignment[static_cast<size_t>(far)] = c;
      sizes[static_cast<size_t>(c)] = 1;
      centroids.row(c) = points.row(far);
    }
  };

  auto update_centroids = [&]() {
    Matrix<T> next = Matrix<T>::Zero(k, points.cols());
    for (Eigen::Index i = 0; i < n; ++i) next.row(assignment[static_cast<size_t>(i)]) += points.row(i);
    for (int c = 0; c < k; ++c) next.row(c) /= static_cast<T>(sizes[static_cast<size_t>(c)]);
    double shift = 0.0;
    for (int c = 0; c < k; ++c) shift = std::max(shift, std::sqrt(sq_dist(next, c, centroids, c)));
    centroids = std::move(next);
    return shift;
  };

  auto current_inertia = [&]() {
    double j = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) j += sq_dist(points, i, centroids, assignment[static_cast<size_t>(i)]);
    return j;
  };

  for (int iter = 0; iter < cfg.max_iter; ++iter) {
    assign_all();
    repair_empties();
    const double shift = update_centroids();
    trace.push_back(current_inertia());
    if (shift < cfg.tol) break;
  }
  assign_all();
  repair_empties();

  // Hartigan-style single-point refinement: move a point to another cluster
  // when the size-weighted inertia change is negative. Escapes the classic
  // Lloyd fixed points that are not local optima of the partition problem.
  for (int pass = 0; pass < 100; ++pass) {
    bool moved = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int a = assignment[static_cast<size_t>(i)];
      const int n_a = sizes[static_cast<size_t>(a)];
      if (n_a <= 1) continue;
      const double out_gain = static_cast<double>(n_a) / (n_a - 1) * sq_dist(points, i, centroids, a);
      int best_c = -1;
      double best_delta = -1e-12;
      for (int c = 0; c < k; ++c) {
        if (c == a) continue;
        const int n_c = sizes[static_cast<size_t>(c)];
        const double delta = static_cast<double>(n_c) / (n_c + 1) * sq_dist(points, i, centroids, c) - out_gain;
        if (delta < best_delta) {
          best_delta = delta;
          best_c = c;
        }
      }
      if (best_c >= 0) {
        const int n_c = sizes[static_cast<size_t>(best_c)];
        centroids.row(a) = (centroids.row(a) * static_cast<T>(n_a) - points.row(i)) / static_cast<T>(n_a - 1);
        centroids.row(best_c) = (centroids.row(best_c) * static_cast<T>(n_c) + points.row(i)) / static_cast<T>(n_c + 1);
        --sizes[static_cast<size_t>(a)];
        ++sizes[static_cast<size_t>(best_c)];
        assignment[static_cast<size_t>(i)] = best_c;
        moved = true;
      }
    }
    if (!moved) break;
    trace.push_back(current_inertia());
  }

  // Recompute centroids exactly from the final assignment (the incremental
  // refinement updates accumulate rounding).
  update_centroids();

  LloydResult<T> res;
  res.inertia = current_inertia();
  trace.push_back(res.inertia);
  res.assignment = std::move(assignment);
  res.sizes = std::move(sizes);
  res.centroids = std::move(centroids);
  res.inertia_trace = std::move(trace);
  return res;
}

}  // namespace detail

// Best-of-`restarts` k-means (k-means++ seeding, Lloyd iterations, Hartigan
// refinement), kept by inertia; deterministic given cfg.seed. `trace_out`,
// when given, receives the winning restart's per-iteration inertia.
template <class T>
PseudoState<T> kmeans(const Matrix<T>& points, const KmeansConfig& cfg, std::vector<double>* trace_out = nullptr) {
  cfg.validate();
  require_finite(points, "kmeans input");
  if (points.rows() < cfg.k) throw ConfigError("kmeans: fewer points than clusters");

  PseudoState<T> best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < cfg.restarts; ++r) {
    Rng rng(cfg.seed, "kmeans-restart", static_cast<uint64_t>(r));
    auto run = detail::lloyd(points, cfg, rng);
    if (run.inertia < best.inertia) {
      best.assignment = std::move(run.assignment);
      best.cluster_sizes = std::move(run.sizes);
      best.centroids = std::move(run.centroids);
      best.inertia = run.inertia;
      if (trace_out) *trace_out = std::move(run.inertia_trace);
    }
  }
  return best;
}

// Temperature bounds and the progressive spread schedule.
//   warmup_epochs = B, horizon = S, refresh_period = F.
struct TemperatureSchedule {
  double tau_base = 0.2;
  double tau_min = 0.1;
  double tau_max = 0.6;
  int warmup_epochs = 20;
  int horizon = 80;
  int refresh_period = 10;

  void validate() const {
    if (!(tau_base > 0.0)) throw ConfigError("schedule: tau_base must be > 0");
    if (!(tau_min > 0.0) || !(tau_min <= tau_max)) throw ConfigError("schedule: need 0 < tau_min <= tau_max");
    if (warmup_epochs < 0) throw ConfigError("schedule: warmup_epochs must be >= 0");
    if (horizon < warmup_epochs) throw ConfigError("schedule: horizon must be >= warmup_epochs");
    if (refresh_period < 1) throw ConfigError("schedule: refresh_period must be >= 1");
  }

  // Half-spread ramp: 0 at epoch B, full (tau_max - tau_min)/2 from epoch S on.
  double half_spread(int epoch) const {
    const double full = 0.5 * (tau_max - tau_min);
    if (horizon == warmup_epochs) return full;
    const double t = static_cast<double>(epoch - warmup_epochs) / static_cast<double>(horizon - warmup_epochs);
    return full * std::min(1.0, t);
  }
};

// Per-sample temperatures from cluster sizes: head clusters (large n) get
// high tau, tail clusters low tau. Position on the ladder is the log-size
// interpolation phi(n) = (ln n - ln n_min) / (ln n_max - ln n_min) between
// the current distribution's extremes, mapped onto
// [center - h(epoch), center + h(epoch)] and clamped to [tau_min, tau_max].
template <class T>
Vector<T> temperatures(const PseudoState<T>& state, const TemperatureSchedule& schedule, int epoch,
                       std::span<const int> sample_ids) {
  schedule.validate();
  if (epoch < schedule.warmup_epochs) throw ConfigError("temperatures: epoch precedes warmup end");
  if (state.cluster_sizes.empty()) throw ConfigError("temperatures: pseudo state not populated");

  const auto [min_it, max_it] = std::minmax_element(state.cluster_sizes.begin(), state.cluster_sizes.end());
  const double ln_min = std::log(static_cast<double>(*min_it));
  const double ln_max = std::log(static_cast<double>(*max_it));
  const double center = 0.5 * (schedule.tau_min + schedule.tau_max);
  const double h = schedule.half_spread(epoch);

  Vector<T> tau(static_cast<Eigen::Index>(sample_ids.size()));
  for (size_t i = 0; i < sample_ids.size(); ++i) {
    const int n = state.size_of_sample(sample_ids[i]);
    const double phi = ln_max > ln_min ? (std::log(static_cast<double>(n)) - ln_min) / (ln_max - ln_min) : 0.5;
    const double t = std::clamp(center + (2.0 * phi - 1.0) * h, schedule.tau_min, schedule.tau_max);
    tau(static_cast<Eigen::Index>(i)) = static_cast<T>(t);
  }
  return tau;
}

// Negative re-weighting: w_j = 1/sqrt(|D_j|) with |D_j| the pseudo-class size.
template <class T>
Vector<T> weights(const PseudoState<T>& state, std::span<const int> row_source_ids) {
  if (state.cluster_sizes.empty()) throw ConfigError("weights: pseudo state not populated");
  Vector<T> w(static_cast<Eigen::Index>(row_source_ids.size()));
  for (size_t i = 0; i < row_source_ids.size(); ++i)
    w(static_cast<Eigen::Index>(i)) = static_cast<T>(1.0 / std::sqrt(static_cast<double>(state.size_of_sample(row_source_ids[i]))));
  return w;
}

// Embed the full training set without augmentation and re-cluster the
// unit-norm projection outputs.
template <class T>
PseudoState<T> refresh_pseudo_state(const model::ModelParams<T>& params, const datagen::Dataset& dataset,
                                    const KmeansConfig& cfg, int epoch, int warmup_epochs) {
  if (epoch < warmup_epochs) throw ConfigError("refresh_pseudo_state: epoch precedes warmup end");
  Matrix<T> x = dataset.features().cast<T>();
  const Matrix<T> v = model::forward(params, x);
  auto state = kmeans(v, cfg);
  state.epoch_computed = epoch;
  return state;
}

// Debug dump: magic, N, K, assignment, sizes, centroids (f32).
template <class T>
void save_pseudo_state(const PseudoState<T>& state, const std::filesystem::path& path) {
  io::BinaryWriter w(path);
  w.magic(std::string_view("TASEPS1\0", 8));
  w.u32(static_cast<uint32_t>(state.assignment.size()));
  w.u32(static_cast<uint32_t>(state.cluster_sizes.size()));
  for (int m : state.assignment) w.u32(static_cast<uint32_t>(m));
  for (int p : state.cluster_sizes) w.u32(static_cast<uint32_t>(p));
  w.matrix_f32(state.centroids);
  w.close();
}

template <class T>
PseudoState<T> load_pseudo_state(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic(std::string_view("TASEPS1\0", 8));
  const auto n = r.u32();
  const auto k = r.u32();
  PseudoState<T> s;
  s.assignment.resize(n);
  for (auto& m : s.assignment) m = static_cast<int>(r.u32());
  s.cluster_sizes.resize(k);
  for (auto& p : s.cluster_sizes) p = static_cast<int>(r.u32());
  const uint64_t left = r.remaining();
  if (k == 0 || left % (4ull * k) != 0) throw DataError("pseudo state: malformed centroid block in " + r.path());
  s.centroids = r.matrix_f32<T>(k, static_cast<Eigen::Index>(left / (4ull * k)));
  return s;
}

}  // namespace tase::pseudo
