#include "tase/pseudo.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

using namespace tase;
using namespace tase::pseudo;

namespace {

// Exhaustive-partition oracle: minimum inertia over all assignments of n
// points to k clusters (empty clusters allowed; they simply contribute
// nothing). Feasible for n <= 8, k <= 3.
double exhaustive_min_inertia(const MatrixD& points, int k) {
  const int n = static_cast<int>(points.rows());
  const int d = static_cast<int>(points.cols());
  std::vector<int> assign(static_cast<size_t>(n), 0);
  double best = std::numeric_limits<double>::infinity();
  const long long total = static_cast<long long>(std::pow(k, n));
  for (long long code = 0; code < total; ++code) {
    long long c = code;
    for (int i = 0; i < n; ++i) {
      assign[static_cast<size_t>(i)] = static_cast<int>(c % k);
      c /= k;
    }
    MatrixD centroid = MatrixD::Zero(k, d);
    std::vector<int> count(static_cast<size_t>(k), 0);
    for (int i = 0; i < n; ++i) {
      centroid.row(assign[static_cast<size_t>(i)]) += points.row(i);
      ++count[static_cast<size_t>(assign[static_cast<size_t>(i)])];
    }
    for (int j = 0; j < k; ++j)
      if (count[static_cast<size_t>(j)] > 0) centroid.row(j) /= count[static_cast<size_t>(j)];
    double inertia = 0.0;
    for (int i = 0; i < n; ++i) inertia += (points.row(i) - centroid.row(assign[static_cast<size_t>(i)])).squaredNorm();
    best = std::min(best, inertia);
  }
  return best;
}

PseudoState<double> state_from_sizes(const std::vector<int>& sizes) {
  PseudoState<double> st;
  st.cluster_sizes = sizes;
  // one representative sample per cluster
  st.assignment.resize(sizes.size());
  for (size_t i = 0; i < sizes.size(); ++i) st.assignment[i] = static_cast<int>(i);
  st.centroids = MatrixD::Zero(static_cast<Eigen::Index>(sizes.size()), 2);
  return st;
}

std::vector<int> iota_ids(int n) {
  std::vector<int> ids(static_cast<size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

}  // namespace

TEST_CASE("kmeans base cases", "[pseudo]") {
  SECTION("k equals n: every point is its own cluster") {
    MatrixD pts(4, 2);
    pts << 0, 0, 1, 0, 0, 1, 5, 5;
    KmeansConfig cfg;
    cfg.k = 4;
    cfg.restarts = 5;
    const auto st = kmeans(pts, cfg);
    CHECK(st.inertia == Catch::Approx(0.0).margin(1e-12));
    CHECK(st.cluster_sizes == std::vector<int>(4, 1));
  }
  SECTION("identical points, one cluster") {
    MatrixD pts = MatrixD::Constant(6, 3, 2.5);
    KmeansConfig cfg;
    cfg.k = 1;
    const auto st = kmeans(pts, cfg);
    CHECK(st.inertia == Catch::Approx(0.0).margin(1e-12));
    CHECK(st.centroids(0, 0) == Catch::Approx(2.5));
    CHECK(st.cluster_sizes == std::vector<int>{6});
  }
  SECTION("fewer points than clusters rejected") {
    MatrixD pts(2, 2);
    pts << 0, 0, 1, 1;
    KmeansConfig cfg;
    cfg.k = 3;
    CHECK_THROWS_AS(kmeans(pts, cfg), ConfigError);
  }
}

TEST_CASE("kmeans two tight blobs match the exhaustive optimum", "[pseudo]") {
  MatrixD pts(6, 2);
  pts << 0.0, 0.1, 0.1, -0.1, -0.1, 0.0, 5.0, 5.1, 5.1, 4.9, 4.9, 5.0;
  KmeansConfig cfg;
  cfg.k = 2;
  cfg.restarts = 10;
  cfg.seed = 77;
  const auto st = kmeans(pts, cfg);
  CHECK(st.inertia == Catch::Approx(exhaustive_min_inertia(pts, 2)).margin(1e-9));
  CHECK(st.assignment[0] == st.assignment[1]);
  CHECK(st.assignment[0] == st.assignment[2]);
  CHECK(st.assignment[3] == st.assignment[4]);
  CHECK(st.assignment[3] == st.assignment[5]);
  CHECK(st.assignment[0] != st.assignment[3]);
}

TEST_CASE("kmeans equals the exhaustive optimum on random small instances", "[pseudo]") {
  Rng rng(101);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(2));  // 2..3
    const int n = k + static_cast<int>(rng.below(static_cast<uint64_t>(9 - k)));
    MatrixD pts(n, 2);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < 2; ++j) pts(i, j) = rng.uniform();
    KmeansConfig cfg;
    cfg.k = k;
    cfg.restarts = 10;
    cfg.seed = 1000 + static_cast<uint64_t>(trial);
    const auto st = kmeans(pts, cfg);
    const double oracle = exhaustive_min_inertia(pts, k);
    INFO("trial " << trial << " n=" << n << " k=" << k);
    CHECK(st.inertia == Catch::Approx(oracle).margin(1e-9));
    // never an empty cluster
    for (int s : st.cluster_sizes) CHECK(s > 0);
    CHECK(std::accumulate(st.cluster_sizes.begin(), st.cluster_sizes.end(), 0) == n);
  }
}

TEST_CASE("kmeans is deterministic by seed", "[pseudo]") {
  Rng rng(55);
  MatrixD pts(30, 3);
  for (int i = 0; i < 30; ++i)
    for (int j = 0; j < 3; ++j) pts(i, j) = rng.normal();
  KmeansConfig cfg;
  cfg.k = 4;
  cfg.seed = 9;
  const auto a = kmeans(pts, cfg);
  const auto b = kmeans(pts, cfg);
  CHECK(a.assignment == b.assignment);
  CHECK(a.centroids == b.centroids);
  CHECK(a.inertia == b.inertia);
}

TEST_CASE("temperature schedule contracts", "[pseudo]") {
  TemperatureSchedule sched;
  sched.tau_min = 0.1;
  sched.tau_max = 0.6;
  sched.warmup_epochs = 20;
  sched.horizon = 80;
  const double center = 0.35;

  const auto st = state_from_sizes({500, 120, 40, 9, 2});
  const auto ids = iota_ids(5);

  SECTION("epoch B: zero spread, every temperature at the center") {
    const auto tau = temperatures<double>(st, sched, 20, ids);
    for (int i = 0; i < 5; ++i) CHECK(tau(i) == Catch::Approx(center).margin(1e-12));
  }
  SECTION("epoch >= S: endpoints of the range at the extremes") {
    for (int epoch : {80, 81, 200}) {
      const auto tau = temperatures<double>(st, sched, epoch, ids);
      CHECK(tau(0) == Catch::Approx(0.6).margin(1e-12));  // largest cluster
      CHECK(tau(4) == Catch::Approx(0.1).margin(1e-12));  // smallest cluster
    }
  }
  SECTION("monotone in cluster size and always clamped") {
    Rng rng(31);
    for (int trial = 0; trial < 40; ++trial) {
      const int k = 2 + static_cast<int>(rng.below(6));
      std::vector<int> sizes(static_cast<size_t>(k));
      for (auto& s : sizes) s = 1 + static_cast<int>(rng.below(1000));
      const auto state = state_from_sizes(sizes);
      const int epoch = 20 + static_cast<int>(rng.below(100));
      const auto tau = temperatures<double>(state, sched, epoch, iota_ids(k));
      for (int a = 0; a < k; ++a) {
        CHECK(tau(a) >= sched.tau_min - 1e-12);
        CHECK(tau(a) <= sched.tau_max + 1e-12);
        for (int b = 0; b < k; ++b)
          if (sizes[static_cast<size_t>(a)] >= sizes[static_cast<size_t>(b)]) CHECK(tau(a) >= tau(b) - 1e-12);
      }
    }
  }
  SECTION("equal cluster sizes collapse to the center at any epoch") {
    const auto state = state_from_sizes({7, 7, 7});
    for (int epoch : {20, 50, 300}) {
      const auto tau = temperatures<double>(state, sched, epoch, iota_ids(3));
      for (int i = 0; i < 3; ++i) CHECK(tau(i) == Catch::Approx(center).margin(1e-12));
    }
  }
  SECTION("S equals B means full spread immediately") {
    TemperatureSchedule flat = sched;
    flat.horizon = flat.warmup_epochs;
    const auto tau = temperatures<double>(st, flat, 20, ids);
    CHECK(tau(0) == Catch::Approx(0.6).margin(1e-12));
    CHECK(tau(4) == Catch::Approx(0.1).margin(1e-12));
  }
  SECTION("epoch before warmup end rejected") {
    CHECK_THROWS_AS(temperatures<double>(st, sched, 19, ids), ConfigError);
  }
}

TEST_CASE("weights are the inverse square root of the pseudo-class size", "[pseudo]") {
  const auto st = state_from_sizes({4, 1, 100, 9});
  const auto w = weights<double>(st, iota_ids(4));
  CHECK(w(0) == Catch::Approx(0.5));
  CHECK(w(1) == Catch::Approx(1.0));
  CHECK(w(2) == Catch::Approx(0.1));
  CHECK(w(3) == Catch::Approx(1.0 / 3.0));
  for (int i = 0; i < 4; ++i) {
    CHECK(w(i) > 0.0);
    CHECK(w(i) <= 1.0);
  }
}

TEST_CASE("refresh_pseudo_state recovers separable class sizes", "[pseudo]") {
  // Two zero-noise classes: all embeddings of a class coincide, so K=2
  // clustering must recover the exact class sizes.
  const datagen::LongTailProfile profile{2, 12, 3.0};
  const auto ds = datagen::synthesize(profile, 6, 8.0, 0.0, 5);
  Rng rng(2);
  auto params = model::init_params<float>(model::MlpSpec{{6, 8, 4}, {4, 4}}, rng);
  KmeansConfig cfg;
  cfg.k = 2;
  cfg.seed = 3;
  const auto st = refresh_pseudo_state(params, ds, cfg, 10, 5);
  CHECK(st.epoch_computed == 10);
  auto sizes = st.cluster_sizes;
  std::sort(sizes.begin(), sizes.end());
  CHECK(sizes == std::vector<int>{4, 12});  // floor(12/3)=4 tail, 12 head

  const auto st2 = refresh_pseudo_state(params, ds, cfg, 10, 5);
  CHECK(st.assignment == st2.assignment);

  CHECK_THROWS_AS(refresh_pseudo_state(params, ds, cfg, 3, 5), ConfigError);
}

TEST_CASE("pseudo state dump round trip", "[pseudo]") {
  Rng rng(8);
  MatrixF pts(20, 3);
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 3; ++j) pts(i, j) = static_cast<float>(rng.normal());
  KmeansConfig cfg;
  cfg.k = 3;
  const auto st = kmeans(pts, cfg);
  const auto dir = std::filesystem::temp_directory_path() / "tase_test_pseudo";
  std::filesystem::create_directories(dir);
  save_pseudo_state(st, dir / "ps.bin");
  const auto loaded = load_pseudo_state<float>(dir / "ps.bin");
  CHECK(loaded.assignment == st.assignment);
  CHECK(loaded.cluster_sizes == st.cluster_sizes);
  CHECK(loaded.centroids == st.centroids);
  std::filesystem::remove_all(dir);
}

TEST_CASE("inertia is non-increasing across iterations within a restart", "[pseudo]") {
  Rng rng(61);
  for (int trial = 0; trial < 10; ++trial) {
    MatrixD pts(40, 2);
    for (int i = 0; i < 40; ++i)
      for (int j = 0; j < 2; ++j) pts(i, j) = rng.uniform();
    KmeansConfig cfg;
    cfg.k = 4;
    cfg.restarts = 1;
    cfg.seed = static_cast<uint64_t>(trial);
    std::vector<double> trace;
    kmeans(pts, cfg, &trace);
    REQUIRE(trace.size() >= 2);
    for (size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1] + 1e-9);
  }
}
