#include "tase/datagen.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace tase;
using namespace tase::datagen;

namespace {

// Independent long-double oracle for the Pareto-profile floor formula.
std::vector<int> counts_oracle(int c_total, int n_max, long double imbalance) {
  std::vector<int> out;
  for (int c = 0; c < c_total; ++c) {
    const long double v =
        static_cast<long double>(n_max) * std::exp(-static_cast<long double>(c) / (c_total - 1) * std::log(imbalance));
    out.push_back(static_cast<int>(std::floor(v)));
  }
  return out;
}

std::vector<char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("class_counts reproduces the CIFAR10-LT profile exactly", "[datagen]") {
  const LongTailProfile p{10, 4500, 100.0};
  const auto counts = class_counts(p);
  const std::vector<int> expected{4500, 2697, 1617, 969, 581, 348, 208, 125, 75, 45};
  CHECK(counts == expected);
  CHECK(std::accumulate(counts.begin(), counts.end(), 0) == 11165);
  CHECK(counts == counts_oracle(10, 4500, 100.0L));
}

TEST_CASE("class_counts reproduces the CIFAR100-LT total", "[datagen]") {
  const auto counts = class_counts(LongTailProfile{100, 450, 100.0});
  const int sum = std::accumulate(counts.begin(), counts.end(), 0);
  CHECK(sum >= 9754 - 5);
  CHECK(sum <= 9754 + 5);
  // Regression anchor: the achieved total is exactly 9754.
  CHECK(sum == 9754);
  CHECK(counts == counts_oracle(100, 450, 100.0L));
}

TEST_CASE("class_counts balanced case and validation", "[datagen]") {
  CHECK(class_counts(LongTailProfile{5, 100, 1.0}) == std::vector<int>(5, 100));
  CHECK_THROWS_AS(class_counts(LongTailProfile{1, 100, 10.0}), ConfigError);
  CHECK_THROWS_AS(class_counts(LongTailProfile{10, 100, 0.5}), ConfigError);
  CHECK_THROWS_AS(class_counts(LongTailProfile{10, 10, 100.0}), ConfigError);  // empty tail
}

TEST_CASE("class_counts profile properties on random profiles", "[datagen]") {
  Rng rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    const int c_total = 2 + static_cast<int>(rng.below(60));
    const double imbalance = 1.0 + rng.uniform() * 199.0;
    const int n_max = static_cast<int>(imbalance) + 1 + static_cast<int>(rng.below(5000));
    const LongTailProfile p{c_total, n_max, imbalance};
    const auto counts = class_counts(p);
    REQUIRE(counts.size() == static_cast<size_t>(c_total));
    CHECK(counts.front() == n_max);
    CHECK(counts.back() == static_cast<int>(std::floor(n_max / imbalance)));
    for (size_t i = 1; i < counts.size(); ++i) CHECK(counts[i] <= counts[i - 1]);
    CHECK(counts.back() >= 1);
  }
}

TEST_CASE("synthesize at zero noise puts every sample on its class mean", "[datagen]") {
  const LongTailProfile p{2, 10, 1.0};
  const auto ds = synthesize(p, 4, 3.0, 0.0, 7);
  const auto means = datagen::detail::class_means(2, 4, 3.0, 7);
  const auto labels = ds.eval_labels();
  for (int i = 0; i < ds.size(); ++i)
    for (int j = 0; j < 4; ++j)
      CHECK(ds.features()(i, j) == static_cast<float>(means(labels[i], j)));
}

TEST_CASE("synthesize is a pure function of its arguments", "[datagen]") {
  const LongTailProfile p{5, 40, 8.0};
  const auto a = synthesize(p, 8, 5.0, 1.0, 123);
  const auto b = synthesize(p, 8, 5.0, 1.0, 123);
  REQUIRE(a.size() == b.size());
  CHECK(a.features() == b.features());
  CHECK(std::equal(a.eval_labels().begin(), a.eval_labels().end(), b.eval_labels().begin()));
  const auto c = synthesize(p, 8, 5.0, 1.0, 124);
  CHECK(a.features() != c.features());
}

TEST_CASE("synthesize matches the independently computed count profile", "[datagen]") {
  const LongTailProfile p{10, 500, 100.0};
  const auto expected = counts_oracle(10, 500, 100.0L);
  const auto ds = synthesize(p, 32, 6.0, 1.0, 3);
  CHECK(ds.class_counts() == expected);
  CHECK(ds.size() == std::accumulate(expected.begin(), expected.end(), 0));
  std::vector<int> seen(10, 0);
  for (uint32_t l : ds.eval_labels()) ++seen[l];
  CHECK(seen == expected);
}

TEST_CASE("make_views with a zero config is the identity", "[datagen]") {
  Rng rng(5);
  std::vector<float> x{0.5f, -1.25f, 3.0f, 0.0f};
  std::vector<float> a(4), b(4);
  make_views<float>(x, AugmentConfig{0.0, 0.0, 0.0}, rng, a, b);
  CHECK(a == x);
  CHECK(b == x);
}

TEST_CASE("make_views rejects mask_prob = 1 and is reproducible", "[datagen]") {
  std::vector<float> x{1.f, 2.f}, a(2), b(2);
  Rng rng(1);
  CHECK_THROWS_AS(make_views<float>(x, AugmentConfig{0.1, 1.0, 0.1}, rng, a, b), ConfigError);

  const AugmentConfig cfg{0.3, 0.25, 0.1};
  std::vector<float> a1(2), b1(2), a2(2), b2(2);
  Rng r1(99), r2(99);
  make_views<float>(x, cfg, r1, a1, b1);
  make_views<float>(x, cfg, r2, a2, b2);
  CHECK(a1 == a2);
  CHECK(b1 == b2);
  CHECK(a1 != b1);  // the two views use independent draws
}

TEST_CASE("group_split ratio and threshold schemes", "[datagen]") {
  const auto counts = class_counts(LongTailProfile{10, 4500, 100.0});
  const auto groups = group_split(counts, RatioSplit{4, 3, 3});
  for (int c = 0; c < 4; ++c) CHECK(groups[c] == Group::Head);
  for (int c = 4; c < 7; ++c) CHECK(groups[c] == Group::Mid);
  for (int c = 7; c < 10; ++c) CHECK(groups[c] == Group::Tail);

  const std::vector<int> imagenet_like{1280, 700, 300, 90, 40, 19, 5};
  const auto tg = group_split(imagenet_like, ThresholdSplit{100, 20});
  CHECK(tg[0] == Group::Head);
  CHECK(tg[2] == Group::Head);
  CHECK(tg[3] == Group::Mid);
  CHECK(tg[4] == Group::Mid);
  CHECK(tg[5] == Group::Tail);
  CHECK(tg[6] == Group::Tail);

  const std::vector<int> equal(6, 10);
  const auto all_head = group_split(equal, RatioSplit{6, 0, 0});
  for (auto g : all_head) CHECK(g == Group::Head);

  CHECK_THROWS_AS(group_split(equal, RatioSplit{4, 3, 3}), ConfigError);
  CHECK_THROWS_AS(group_split(equal, ThresholdSplit{10, 20}), ConfigError);
}

TEST_CASE("dataset file round trip is bit exact", "[datagen]") {
  const auto dir = std::filesystem::temp_directory_path() / "tase_test_datagen";
  std::filesystem::create_directories(dir);
  const auto ds = synthesize(LongTailProfile{4, 30, 6.0}, 5, 4.0, 0.7, 11);
  const auto p1 = dir / "ds.bin";
  const auto p2 = dir / "ds2.bin";
  ds.save(p1);
  const auto loaded = Dataset::load(p1);
  CHECK(loaded.features() == ds.features());
  CHECK(loaded.class_counts() == ds.class_counts());
  CHECK(std::equal(loaded.eval_labels().begin(), loaded.eval_labels().end(), ds.eval_labels().begin()));
  loaded.save(p2);
  CHECK(read_bytes(p1) == read_bytes(p2));
  std::filesystem::remove_all(dir);
}

TEST_CASE("bundle shares class means across train, test, and pool", "[datagen]") {
  const LongTailProfile p{3, 12, 4.0};
  const auto bundle = synthesize_bundle(p, 6, 5.0, 0.0, 21, 4, 5, default_ratio(3));
  REQUIRE(bundle.test.size() == 12);
  REQUIRE(bundle.pool.size() == 15);
  // Zero noise: every same-label row across all three blocks is identical.
  const auto ref = bundle.train.features().row(0);
  const auto ref_label = bundle.train.eval_labels()[0];
  for (int i = 0; i < bundle.test.size(); ++i)
    if (bundle.test.eval_labels()[i] == ref_label) CHECK(bundle.test.features().row(i) == ref);
  for (int i = 0; i < bundle.pool.size(); ++i)
    if (bundle.pool.eval_labels()[i] == ref_label) CHECK(bundle.pool.features().row(i) == ref);
}
