#pragma once

#include "tase/common.hpp"
#include "tase/io.hpp"

#include <cmath>
#include <filesystem>
#include <vector>

namespace tase::model {

// Encoder f and projection head g as plain MLPs. encoder_dims runs from the
// input width to the feature width; proj_dims from the feature width to the
// embedding width. ReLU between layers, linear output on each stack.
struct MlpSpec {
  std::vector<int> encoder_dims;  // e.g. {32, 128, 128}
  std::vector<int> proj_dims;     // e.g. {128, 128}

  void validate() const {
    if (encoder_dims.size() < 2) throw ConfigError("mlp: encoder needs at least input and output widths");
    if (proj_dims.size() < 2) throw ConfigError("mlp: projector needs at least input and output widths");
    for (int w : encoder_dims)
      if (w < 1) throw ConfigError("mlp: encoder width < 1");
    for (int w : proj_dims)
      if (w < 1) throw ConfigError("mlp: projector width < 1");
    if (encoder_dims.back() != proj_dims.front())
      throw ConfigError("mlp: projector input width must equal encoder output width");
  }

  int input_dim() const { return encoder_dims.front(); }
  int feature_dim() const { return encoder_dims.back(); }
  int embed_dim() const { return proj_dims.back(); }
};

template <class T>
struct Layer {
  Matrix<T> weight;  // out x in
  Vector<T> bias;    // out
};

template <class T>
struct ModelParams {
  MlpSpec spec;
  std::vector<Layer<T>> encoder;
  std::vector<Layer<T>> projector;

  template <class F>
  void for_each_layer(F&& f) {
    for (auto& l : encoder) f(l);
    for (auto& l : projector) f(l);
  }
  template <class F>
  void for_each_layer(F&& f) const {
    for (const auto& l : encoder) f(l);
    for (const auto& l : projector) f(l);
  }

  bool all_finite() const {
    bool ok = true;
    for_each_layer([&](const Layer<T>& l) { ok = ok && l.weight.allFinite() && l.bias.allFinite(); });
    return ok;
  }
};

// Gradients share the parameter layout.
template <class T>
using ModelGrads = ModelParams<T>;

namespace detail {

template <class T>
std::vector<Layer<T>> init_stack(std::span<const int> dims, Rng& rng) {
  std::vector<Layer<T>> layers;
  for (size_t l = 0; l + 1 < dims.size(); ++l) {
    const int fan_in = dims[l], fan_out = dims[l + 1];
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    Layer<T> layer;
    layer.weight.resize(fan_out, fan_in);
    for (int r = 0; r < fan_out; ++r)
      for (int c = 0; c < fan_in; ++c) layer.weight(r, c) = static_cast<T>(rng.uniform(-bound, bound));
    layer.bias = Vector<T>::Zero(fan_out);
    layers.push_back(std::move(layer));
  }
  return layers;
}

}  // namespace detail

template <class T>
ModelParams<T> init_params(const MlpSpec& spec, Rng& rng) {
  spec.validate();
  ModelParams<T> p;
  p.spec = spec;
  p.encoder = detail::init_stack<T>(spec.encoder_dims, rng);
  p.projector = detail::init_stack<T>(spec.proj_dims, rng);
  return p;
}

template <class T>
ModelGrads<T> zero_grads(const ModelParams<T>& params) {
  ModelGrads<T> g;
  g.spec = params.spec;
  auto zero_like = [](const std::vector<Layer<T>>& src) {
    std::vector<Layer<T>> out;
    out.reserve(src.size());
    for (const auto& l : src)
      out.push_back(Layer<T>{Matrix<T>::Zero(l.weight.rows(), l.weight.cols()), Vector<T>::Zero(l.bias.size())});
    return out;
  };
  g.encoder = zero_like(params.encoder);
  g.projector = zero_like(params.projector);
  return g;
}

// Activations saved by forward() for the exact reverse pass.
template <class T>
struct ForwardCache {
  std::vector<Matrix<T>> enc_inputs;   // input of each encoder layer
  std::vector<Matrix<T>> enc_preact;   // pre-activation of each encoder layer
  std::vector<Matrix<T>> proj_inputs;  // input of each projector layer
  std::vector<Matrix<T>> proj_preact;
  Matrix<T> pre_norm;   // projector output before L2 normalization
  Vector<T> norms;      // row norms of pre_norm (after epsilon repair)
  Matrix<T> embedding;  // unit-norm rows
  int zero_norm_rows = 0;

  const Matrix<T>& features() const { return enc_preact.back(); }
};

// Batch forward pass; rows of the result have unit L2 norm. Normalization is
// part of the forward pass so cosine similarity downstream is a dot product.
template <class T>
Matrix<T> forward(const ModelParams<T>& params, const Matrix<T>& x, ForwardCache<T>* cache = nullptr) {
  require_finite(x, "forward input");
  if (x.cols() != params.spec.input_dim()) throw ConfigError("forward: input width mismatch");

  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  c = ForwardCache<T>{};

  auto run_stack = [&](const std::vector<Layer<T>>& layers, const Matrix<T>& input,
                       std::vector<Matrix<T>>& inputs, std::vector<Matrix<T>>& preacts) {
    Matrix<T> a = input;
    for (size_t l = 0; l < layers.size(); ++l) {
      inputs.push_back(a);
      Matrix<T> z = a * layers[l].weight.transpose();
      z.rowwise() += layers[l].bias.transpose();
      preacts.push_back(z);
      a = (l + 1 < layers.size()) ? z.cwiseMax(T(0)).eval() : z;
    }
    return a;
  };

  const Matrix<T> h = run_stack(params.encoder, x, c.enc_inputs, c.enc_preact);
  Matrix<T> u = run_stack(params.projector, h, c.proj_inputs, c.proj_preact);

  c.pre_norm = u;
  c.norms.resize(u.rows());
  c.embedding.resize(u.rows(), u.cols());
  constexpr T kEps = static_cast<T>(1e-12);
  for (Eigen::Index r = 0; r < u.rows(); ++r) {
    T n = u.row(r).norm();
    if (n == T(0)) {
      // Degenerate row: nudge the first coordinate so the direction is defined.
      c.pre_norm(r, 0) = kEps;
      n = kEps;
      ++c.zero_norm_rows;
    }
    c.norms(r) = n;
    c.embedding.row(r) = c.pre_norm.row(r) / n;
  }
  return c.embedding;
}

// Convenience: encoder features only (used by evaluation).
template <class T>
Matrix<T> forward_features(const ModelParams<T>& params, const Matrix<T>& x) {
  ForwardCache<T> cache;
  forward(params, x, &cache);
  return cache.features();
}

// Exact gradients of <d_embedding, embedding> with respect to all parameters.
template <class T>
ModelGrads<T> backprop(const ModelParams<T>& params, const ForwardCache<T>& cache, const Matrix<T>& d_embedding) {
  if (d_embedding.rows() != cache.embedding.rows() || d_embedding.cols() != cache.embedding.cols())
    throw ConfigError("backprop: cotangent shape mismatch");
  require_finite(d_embedding, "backprop cotangent");

  ModelGrads<T> grads = zero_grads(params);

  // Through v = u / ||u||:  du = (dv - (dv . v) v) / ||u||.
  Matrix<T> du(d_embedding.rows(), d_embedding.cols());
  for (Eigen::Index r = 0; r < du.rows(); ++r) {
    const T dot = d_embedding.row(r).dot(cache.embedding.row(r));
    du.row(r) = (d_embedding.row(r) - dot * cache.embedding.row(r)) / cache.norms(r);
  }

  auto run_stack_back = [&](const std::vector<Layer<T>>& layers, std::vector<Layer<T>>& layer_grads,
                            const std::vector<Matrix<T>>& inputs, const std::vector<Matrix<T>>& preacts,
                            Matrix<T> dz_out) {
    Matrix<T> da = std::move(dz_out);
    for (size_t li = layers.size(); li-- > 0;) {
      Matrix<T> dz = da;
      if (li + 1 < layers.size()) {
        // da is the gradient at relu(z); gate it by the sign of z.
        dz = ((preacts[li].array() > T(0)).template cast<T>() * da.array()).matrix();
      }
      layer_grads[li].weight = dz.transpose() * inputs[li];
      layer_grads[li].bias = dz.colwise().sum().transpose();
      da = dz * layers[li].weight;
    }
    return da;  // gradient at the stack input
  };

  const Matrix<T> dh = run_stack_back(params.projector, grads.projector, cache.proj_inputs, cache.proj_preact, du);
  run_stack_back(params.encoder, grads.encoder, cache.enc_inputs, cache.enc_preact, dh);
  return grads;
}

// SGD with momentum and decoupled-from-nothing L2 weight decay folded into
// the gradient: buf <- m*buf + g + wd*p;  p <- p - lr*buf.
template <class T>
struct OptimState {
  std::vector<Layer<T>> encoder_buf;
  std::vector<Layer<T>> projector_buf;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double peak_lr = 0.5;
  int total_epochs = 200;
  static constexpr int lr_warmup_epochs = 10;

  void validate() const {
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("optim: momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("optim: weight_decay must be >= 0");
    if (peak_lr < 0.0) throw ConfigError("optim: peak_lr must be >= 0");
    if (total_epochs < 1) throw ConfigError("optim: total_epochs must be >= 1");
  }
};

template <class T>
OptimState<T> make_optim_state(const ModelParams<T>& params, double momentum, double weight_decay, double peak_lr,
                               int total_epochs) {
  OptimState<T> s;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  s.peak_lr = peak_lr;
  s.total_epochs = total_epochs;
  s.validate();
  const auto z = zero_grads(params);
  s.encoder_buf = z.encoder;
  s.projector_buf = z.projector;
  return s;
}

template <class T>
void sgd_step(ModelParams<T>& params, const ModelGrads<T>& grads, OptimState<T>& opt, double lr) {
  if (lr < 0.0) throw ConfigError("sgd_step: lr must be >= 0");
  grads.for_each_layer([](const Layer<T>& l) {
    if (!l.weight.allFinite() || !l.bias.allFinite())
      throw NumericError("sgd_step: non-finite gradient, step aborted");
  });

  const T m = static_cast<T>(opt.momentum);
  const T wd = static_cast<T>(opt.weight_decay);
  const T step = static_cast<T>(lr);
  auto update = [&](std::vector<Layer<T>>& ps, const std::vector<Layer<T>>& gs, std::vector<Layer<T>>& bufs) {
    for (size_t l = 0; l < ps.size(); ++l) {
      bufs[l].weight = m * bufs[l].weight + gs[l].weight + wd * ps[l].weight;
      bufs[l].bias = m * bufs[l].bias + gs[l].bias + wd * ps[l].bias;
      ps[l].weight -= step * bufs[l].weight;
      ps[l].bias -= step * bufs[l].bias;
    }
  };
  update(params.encoder, grads.encoder, opt.encoder_buf);
  update(params.projector, grads.projector, opt.projector_buf);
}

// Cosine schedule with a 10-epoch linear warmup to peak_lr.
template <class T>
double lr_at(int epoch, const OptimState<T>& opt) {
  if (epoch < 0 || epoch >= opt.total_epochs) throw ConfigError("lr_at: epoch out of range");
  constexpr int warm = OptimState<T>::lr_warmup_epochs;
  if (epoch < warm) return opt.peak_lr * static_cast<double>(epoch + 1) / warm;
  const double t = static_cast<double>(epoch - warm) / static_cast<double>(opt.total_epochs - warm);
  return opt.peak_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

// Checkpoint: magic, layer widths, then f32 tensors with shape prefixes.
inline void save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& path) {
  io::BinaryWriter w(path);
  w.magic("TASECKP1");
  w.u32(static_cast<uint32_t>(params.spec.encoder_dims.size()));
  for (int d : params.spec.encoder_dims) w.u32(static_cast<uint32_t>(d));
  w.u32(static_cast<uint32_t>(params.spec.proj_dims.size()));
  for (int d : params.spec.proj_dims) w.u32(static_cast<uint32_t>(d));
  auto tensor = [&](const MatrixF& m) {
    w.u32(static_cast<uint32_t>(m.rows()));
    w.u32(static_cast<uint32_t>(m.cols()));
    w.matrix_f32(m);
  };
  params.for_each_layer([&](const Layer<float>& l) {
    tensor(l.weight);
    tensor(MatrixF(l.bias.transpose()));
  });
  w.close();
}

inline ModelParams<float> load_checkpoint(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic("TASECKP1");
  MlpSpec spec;
  const auto n_enc = r.u32();
  for (uint32_t i = 0; i < n_enc; ++i) spec.encoder_dims.push_back(static_cast<int>(r.u32()));
  const auto n_proj = r.u32();
  for (uint32_t i = 0; i < n_proj; ++i) spec.proj_dims.push_back(static_cast<int>(r.u32()));
  spec.validate();

  auto tensor = [&]() {
    const auto rows = r.u32();
    const auto cols = r.u32();
    return r.matrix_f32<float>(rows, cols);
  };
  ModelParams<float> p;
  p.spec = spec;
  auto read_stack = [&](size_t n_layers) {
    std::vector<Layer<float>> layers;
    for (size_t l = 0; l < n_layers; ++l) {
      Layer<float> layer;
      layer.weight = tensor();
      MatrixF b = tensor();
      layer.bias = b.row(0).transpose();
      layers.push_back(std::move(layer));
    }
    return layers;
  };
  p.encoder = read_stack(spec.encoder_dims.size() - 1);
  p.projector = read_stack(spec.proj_dims.size() - 1);
  if (!p.all_finite()) throw DataError("checkpoint contains non-finite values: " + r.path());
  return p;
}

}  // namespace tase::model
