#include "tase/model.hpp"
#include "tase/objective.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

using namespace tase;
using namespace tase::model;

namespace {

MlpSpec small_spec() { return MlpSpec{{5, 8, 6}, {6, 7, 4}}; }

MatrixD random_input(int rows, int cols, Rng& rng) {
  MatrixD x(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) x(r, c) = rng.normal();
  return x;
}

// Central finite differences of a scalar function over every parameter.
template <class Fn>
double max_grad_rel_error(ModelParams<double>& params, const ModelGrads<double>& analytic, Fn&& scalar_fn,
                          double step = 1e-5) {
  double worst = 0.0;
  auto probe = [&](Matrix<double>& tensor, const Matrix<double>& grad) {
    for (Eigen::Index r = 0; r < tensor.rows(); ++r)
      for (Eigen::Index c = 0; c < tensor.cols(); ++c) {
        const double keep = tensor(r, c);
        tensor(r, c) = keep + step;
        const double up = scalar_fn();
        tensor(r, c) = keep - step;
        const double down = scalar_fn();
        tensor(r, c) = keep;
        const double fd = (up - down) / (2 * step);
        const double a = grad(r, c);
        worst = std::max(worst, std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)}));
      }
  };
  for (size_t stack = 0; stack < 2; ++stack) {
    auto& layers = stack == 0 ? params.encoder : params.projector;
    const auto& grads = stack == 0 ? analytic.encoder : analytic.projector;
    for (size_t l = 0; l < layers.size(); ++l) {
      probe(layers[l].weight, grads[l].weight);
      for (Eigen::Index i = 0; i < layers[l].bias.size(); ++i) {
        const double keep = layers[l].bias(i);
        layers[l].bias(i) = keep + step;
        const double up = scalar_fn();
        layers[l].bias(i) = keep - step;
        const double down = scalar_fn();
        layers[l].bias(i) = keep;
        const double fd = (up - down) / (2 * step);
        const double a = grads[l].bias(i);
        worst = std::max(worst, std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)}));
      }
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("forward of an identity single layer passes unit vectors through", "[model]") {
  MlpSpec spec{{3, 3}, {3, 3}};
  ModelParams<double> p;
  p.spec = spec;
  p.encoder = {Layer<double>{MatrixD::Identity(3, 3), VectorD::Zero(3)}};
  p.projector = {Layer<double>{MatrixD::Identity(3, 3), VectorD::Zero(3)}};
  MatrixD x(1, 3);
  x << 1, 0, 0;
  const MatrixD v = forward(p, x);
  CHECK(v(0, 0) == Catch::Approx(1.0));
  CHECK(v(0, 1) == 0.0);
  CHECK(v(0, 2) == 0.0);
}

TEST_CASE("forward output rows are unit norm", "[model]") {
  Rng rng(17);
  const auto spec = small_spec();
  auto params = init_params<double>(spec, rng);
  const MatrixD x = random_input(9, spec.input_dim(), rng);
  const MatrixD v = forward(params, x);
  for (Eigen::Index r = 0; r < v.rows(); ++r) CHECK(std::abs(v.row(r).norm() - 1.0) < 1e-6);
  MatrixD bad = x;
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(forward(params, bad), NumericError);
}

TEST_CASE("normalization jacobian matches the closed form", "[model]") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    VectorD u(6), cot(6);
    for (int i = 0; i < 6; ++i) {
      u(i) = rng.normal() * 2.0;
      cot(i) = rng.normal();
    }
    const double norm = u.norm();
    const VectorD v = u / norm;
    const VectorD closed = (cot - cot.dot(v) * v) / norm;
    // finite differences of <cot, normalize(u)>
    const double step = 1e-7;
    for (int i = 0; i < 6; ++i) {
      VectorD up = u, down = u;
      up(i) += step;
      down(i) -= step;
      const double fd = (cot.dot(up.normalized()) - cot.dot(down.normalized())) / (2 * step);
      CHECK(std::abs(fd - closed(i)) < 1e-6);
    }
  }
}

TEST_CASE("backprop matches finite differences for <dV, V>", "[model]") {
  const auto spec = small_spec();
  double worst = 0.0;
  int checked = 0;
  for (uint64_t seed = 1; checked < 5 && seed <= 50; ++seed) {
    Rng rng(seed);
    auto params = init_params<double>(spec, rng);
    const MatrixD x = random_input(6, spec.input_dim(), rng);
    MatrixD cot(6, spec.embed_dim());
    for (Eigen::Index r = 0; r < cot.rows(); ++r)
      for (Eigen::Index c = 0; c < cot.cols(); ++c) cot(r, c) = rng.normal();

    ForwardCache<double> cache;
    forward(params, x, &cache);
    // Finite differences are only meaningful away from the ReLU kinks and the
    // normalization singularity; degenerate draws are skipped deterministically.
    double min_pre = 1e9;
    for (const auto* stack : {&cache.enc_preact, &cache.proj_preact})
      for (size_t l = 0; l + 1 < stack->size(); ++l) min_pre = std::min(min_pre, (*stack)[l].cwiseAbs().minCoeff());
    if (cache.norms.minCoeff() < 0.1 || min_pre < 1e-3) continue;
    ++checked;

    const auto grads = backprop(params, cache, cot);
    auto scalar = [&]() {
      const MatrixD v = forward(params, x);
      return (cot.array() * v.array()).sum();
    };
    worst = std::max(worst, max_grad_rel_error(params, grads, scalar));
  }
  REQUIRE(checked == 5);
  INFO("max relative error " << worst);
  CHECK(worst < 1e-5);
}

TEST_CASE("backprop of a zero cotangent is zero", "[model]") {
  Rng rng(3);
  const auto spec = small_spec();
  auto params = init_params<double>(spec, rng);
  ForwardCache<double> cache;
  forward(params, random_input(4, spec.input_dim(), rng), &cache);
  const MatrixD zero_cot = MatrixD::Zero(4, spec.embed_dim());
  const auto grads = backprop(params, cache, zero_cot);
  grads.for_each_layer([](const Layer<double>& l) {
    CHECK(l.weight.isZero(0.0));
    CHECK(l.bias.isZero(0.0));
  });
}

TEST_CASE("sgd_step zero lr leaves parameters unchanged but moves buffers", "[model]") {
  Rng rng(9);
  const auto spec = small_spec();
  auto params = init_params<double>(spec, rng);
  const auto before = params;
  auto opt = make_optim_state(params, 0.9, 0.0, 0.5, 100);
  auto grads = zero_grads(params);
  grads.encoder[0].weight.setConstant(1.0);
  sgd_step(params, grads, opt, 0.0);
  CHECK(params.encoder[0].weight == before.encoder[0].weight);
  CHECK(opt.encoder_buf[0].weight(0, 0) == 1.0);
}

TEST_CASE("sgd_step momentum recurrence over two steps", "[model]") {
  MlpSpec spec{{1, 1}, {1, 1}};
  ModelParams<double> p;
  p.spec = spec;
  p.encoder = {Layer<double>{MatrixD::Zero(1, 1), VectorD::Zero(1)}};
  p.projector = {Layer<double>{MatrixD::Zero(1, 1), VectorD::Zero(1)}};
  auto opt = make_optim_state(p, 0.9, 0.0, 1.0, 10);
  auto g = zero_grads(p);
  const double grad = 0.25;
  g.encoder[0].weight(0, 0) = grad;
  sgd_step(p, g, opt, 1.0);
  sgd_step(p, g, opt, 1.0);
  // buf1 = g, buf2 = 0.9 g + g; displacement = -(g + 1.9 g)
  CHECK(p.encoder[0].weight(0, 0) == Catch::Approx(-(grad + 1.9 * grad)).margin(1e-15));

  g.encoder[0].weight(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(sgd_step(p, g, opt, 1.0), NumericError);
}

TEST_CASE("sgd_step without momentum or decay is plain gradient descent", "[model]") {
  MlpSpec spec{{2, 2}, {2, 2}};
  Rng rng(4);
  auto p = init_params<double>(spec, rng);
  const auto before = p;
  auto opt = make_optim_state(p, 0.0, 0.0, 0.1, 10);
  auto g = zero_grads(p);
  g.projector[0].weight.setConstant(2.0);
  sgd_step(p, g, opt, 0.1);
  CHECK((before.projector[0].weight - p.projector[0].weight).isApproxToConstant(0.2, 1e-12));
}

TEST_CASE("lr schedule: warmup peak, continuity, midpoint, endpoint", "[model]") {
  Rng rng(1);
  auto opt = make_optim_state(init_params<double>(small_spec(), rng), 0.9, 0.0, 0.5, 210);

  CHECK(lr_at(9, opt) == Catch::Approx(0.5));                     // end of warmup hits the peak
  CHECK(lr_at(10, opt) == Catch::Approx(0.5));                    // cosine starts at the peak
  CHECK(lr_at(10 + (210 - 10) / 2, opt) == Catch::Approx(0.25));  // exact midpoint
  CHECK(lr_at(209, opt) < 0.5 * 0.5 * (1 + std::cos(M_PI * 198.0 / 200.0)) + 1e-12);
  CHECK(lr_at(209, opt) > 0.0);
  CHECK(lr_at(0, opt) == Catch::Approx(0.05));
  CHECK_THROWS_AS(lr_at(210, opt), ConfigError);
  CHECK_THROWS_AS(lr_at(-1, opt), ConfigError);
}

TEST_CASE("checkpoint round trip is exact", "[model]") {
  Rng rng(31);
  auto params = init_params<float>(MlpSpec{{4, 6, 5}, {5, 3}}, rng);
  const auto dir = std::filesystem::temp_directory_path() / "tase_test_model";
  std::filesystem::create_directories(dir);
  const auto path = dir / "ckpt.bin";
  save_checkpoint(params, path);
  const auto loaded = load_checkpoint(path);
  REQUIRE(loaded.spec.encoder_dims == params.spec.encoder_dims);
  REQUIRE(loaded.spec.proj_dims == params.spec.proj_dims);
  for (size_t l = 0; l < params.encoder.size(); ++l) {
    CHECK(loaded.encoder[l].weight == params.encoder[l].weight);
    CHECK(loaded.encoder[l].bias == params.encoder[l].bias);
  }
  for (size_t l = 0; l < params.projector.size(); ++l) {
    CHECK(loaded.projector[l].weight == params.projector[l].weight);
    CHECK(loaded.projector[l].bias == params.projector[l].bias);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("zero pre-normalization rows are repaired and flagged", "[model]") {
  MlpSpec spec{{2, 2}, {2, 2}};
  ModelParams<double> p;
  p.spec = spec;
  p.encoder = {Layer<double>{MatrixD::Identity(2, 2), VectorD::Zero(2)}};
  p.projector = {Layer<double>{MatrixD::Zero(2, 2), VectorD::Zero(2)}};  // forces u = 0
  MatrixD x(1, 2);
  x << 0.3, -0.7;
  ForwardCache<double> cache;
  const MatrixD v = forward(p, x, &cache);
  CHECK(cache.zero_norm_rows == 1);
  CHECK(std::abs(v.row(0).norm() - 1.0) < 1e-9);
}
