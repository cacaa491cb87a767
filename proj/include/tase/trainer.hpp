#pragma once

#include "tase/common.hpp"
#include "tase/datagen.hpp"
#include "tase/io.hpp"
#include "tase/model.hpp"
#include "tase/objective.hpp"
#include "tase/pseudo.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace tase::trainer {

// Ablation modes: which of the two pseudo-label-driven signals are live.
// Inactive signals fall back to the constants tau_base / 1.0.
enum class Mode { Baseline, TauOnly, WeightOnly, Full };

inline bool uses_pseudo(Mode m) { return m != Mode::Baseline; }
inline bool uses_tau(Mode m) { return m == Mode::TauOnly || m == Mode::Full; }
inline bool uses_weights(Mode m) { return m == Mode::WeightOnly || m == Mode::Full; }

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::Baseline: return "baseline";
    case Mode::TauOnly: return "tau_only";
    case Mode::WeightOnly: return "weight_only";
    case Mode::Full: return "full";
  }
  return "?";
}

struct TrainConfig {
  model::MlpSpec mlp;
  datagen::AugmentConfig augment;
  pseudo::TemperatureSchedule schedule;  // warmup B, horizon S, refresh period F, tau bounds
  pseudo::KmeansConfig kmeans;
  int epochs = 200;
  int batch_size = 128;
  double peak_lr = 0.5;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  uint64_t seed = 1;
  Mode mode = Mode::Full;
  int checkpoint_period = 50;

  void validate() const {
    mlp.validate();
    augment.validate();
    schedule.validate();
    kmeans.validate();
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (schedule.warmup_epochs >= epochs) throw ConfigError("train: warmup_epochs must be < epochs");
    if (schedule.horizon > epochs) throw ConfigError("train: horizon must be <= epochs");
    if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
    if (checkpoint_period < 1) throw ConfigError("train: checkpoint_period must be >= 1");
  }
};

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  double tau_lo = 0.0, tau_mean = 0.0, tau_hi = 0.0;
  bool refreshed = false;
  double inertia = 0.0;                // valid when refreshed
  std::vector<int> cluster_sizes;      // valid when refreshed
};

struct RunHistory {
  std::vector<EpochStats> epochs;
  double wall_seconds = 0.0;  // not written to history.csv (kept reproducible)
};

// Everything needed to continue a run at `next_epoch`.
struct TrainState {
  int next_epoch = 0;
  model::ModelParams<float> params;
  model::OptimState<float> opt;
  std::optional<pseudo::PseudoState<float>> pseudo_state;
};

struct RunResult {
  model::ModelParams<float> params;
  RunHistory history;
};

namespace detail {

// Interleaved two-view batch: rows 2s, 2s+1 are the views of batch slot s.
inline MatrixF build_views(const datagen::Dataset& data, std::span<const int> sample_ids,
                           const datagen::AugmentConfig& aug, Rng& rng) {
  const int d = data.dim();
  MatrixF x(2 * static_cast<int>(sample_ids.size()), d);
  std::vector<float> row(static_cast<size_t>(d)), a(static_cast<size_t>(d)), b(static_cast<size_t>(d));
  for (size_t s = 0; s < sample_ids.size(); ++s) {
    for (int j = 0; j < d; ++j) row[static_cast<size_t>(j)] = data.features()(sample_ids[s], j);
    datagen::make_views<float>(row, aug, rng, a, b);
    for (int j = 0; j < d; ++j) {
      x(2 * static_cast<int>(s), j) = a[static_cast<size_t>(j)];
      x(2 * static_cast<int>(s) + 1, j) = b[static_cast<size_t>(j)];
    }
  }
  return x;
}

}  // namespace detail

// One shuffled pass over the dataset. The incomplete final mini-batch is
// dropped so every batch sees the same negative-set size. `pseudo_state` may
// be null during warmup or in Baseline mode.
inline EpochStats train_epoch(model::ModelParams<float>& params, model::OptimState<float>& opt,
                              const datagen::Dataset& data, const pseudo::PseudoState<float>* state,
                              const TrainConfig& cfg, int epoch, Rng& data_rng) {
  const int n = data.size();
  const int nb = n / cfg.batch_size;
  if (nb < 1) throw ConfigError("train: batch_size exceeds the dataset size");
  const double lr = model::lr_at(epoch, opt);
  const bool warm = epoch < cfg.schedule.warmup_epochs;
  const bool tau_live = !warm && uses_tau(cfg.mode) && state;
  const bool w_live = !warm && uses_weights(cfg.mode) && state;

  // Per-sample signals are fixed for the whole epoch (Alg. 1 recomputes them
  // from P once per epoch; the spread ramp moves only with the epoch index).
  VectorF tau_all, w_all;
  if (tau_live || w_live) {
    std::vector<int> all_ids(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) all_ids[static_cast<size_t>(i)] = i;
    if (tau_live) tau_all = pseudo::temperatures<float>(*state, cfg.schedule, epoch, all_ids);
    if (w_live) w_all = pseudo::weights<float>(*state, all_ids);
  }

  EpochStats stats;
  stats.epoch = epoch;
  stats.lr = lr;
  if (tau_live) {
    stats.tau_lo = tau_all.minCoeff();
    stats.tau_hi = tau_all.maxCoeff();
    stats.tau_mean = tau_all.mean();
  } else {
    stats.tau_lo = stats.tau_mean = stats.tau_hi = cfg.schedule.tau_base;
  }

  const auto perm = random_permutation(n, data_rng);
  double loss_sum = 0.0;
  for (int b = 0; b < nb; ++b) {
    const auto diagnostics = [&] {
      return " at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) + " (tau range [" +
             std::to_string(stats.tau_lo) + ", " + std::to_string(stats.tau_hi) + "])";
    };
    try {
      const std::span<const int> ids(perm.data() + static_cast<size_t>(b) * cfg.batch_size,
                                     static_cast<size_t>(cfg.batch_size));
      const MatrixF x = detail::build_views(data, ids, cfg.augment, data_rng);
      model::ForwardCache<float> cache;
      const MatrixF v = model::forward(params, x, &cache);

      const objective::BatchPairing pairing{cfg.batch_size};
      objective::LossResult<float> loss;
      if (warm || cfg.mode == Mode::Baseline) {
        loss = objective::nt_xent<float>(v, pairing, static_cast<float>(cfg.schedule.tau_base));
      } else {
        VectorF tau_vec(pairing.rows()), w_vec(pairing.rows());
        for (int r = 0; r < pairing.rows(); ++r) {
          const int sample = ids[static_cast<size_t>(objective::BatchPairing::source_of(r))];
          tau_vec(r) = tau_live ? tau_all(sample) : static_cast<float>(cfg.schedule.tau_base);
          w_vec(r) = w_live ? w_all(sample) : 1.0f;
        }
        loss = objective::tase_loss<float>(v, pairing, tau_vec, w_vec);
      }

      if (!std::isfinite(loss.loss)) throw NumericError("train: non-finite loss");

      const auto grads = model::backprop(params, cache, loss.grad);
      model::sgd_step(params, grads, opt, lr);
      loss_sum += static_cast<double>(loss.loss);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + diagnostics());
    }
  }
  stats.mean_loss = loss_sum / nb;
  return stats;
}

// Streaming sink for run artifacts; all files live under one run directory.
class RunDir {
 public:
  explicit RunDir(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  const std::filesystem::path& path() const { return dir_; }

  void write_text(const std::string& name, const std::string& contents) const {
    std::ofstream out(dir_ / name);
    if (!out) throw DataError("cannot write " + (dir_ / name).string());
    out << contents;
  }

  std::filesystem::path file(const std::string& name) const { return dir_ / name; }

 private:
  std::filesystem::path dir_;
};

inline std::string history_csv(const RunHistory& history) {
  std::string out = "epoch,lr,mean_loss,tau_min,tau_mean,tau_max,refreshed,inertia,cluster_sizes\n";
  char buf[160];
  for (const auto& e : history.epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%d,", e.epoch, e.lr, e.mean_loss, e.tau_lo,
                  e.tau_mean, e.tau_hi, e.refreshed ? 1 : 0);
    out += buf;
    if (e.refreshed) {
      std::snprintf(buf, sizeof(buf), "%.10g", e.inertia);
      out += buf;
    }
    out += ',';
    for (size_t i = 0; i < e.cluster_sizes.size(); ++i) {
      if (i) out += '|';
      out += std::to_string(e.cluster_sizes[i]);
    }
    out += '\n';
  }
  return out;
}

inline void save_train_state(const TrainState& st, const std::filesystem::path& path) {
  io::BinaryWriter w(path);
  w.magic("TASETST1");
  w.u32(static_cast<uint32_t>(st.next_epoch));
  auto tensor = [&](const MatrixF& m) {
    w.u32(static_cast<uint32_t>(m.rows()));
    w.u32(static_cast<uint32_t>(m.cols()));
    w.matrix_f32(m);
  };
  w.u32(static_cast<uint32_t>(st.params.spec.encoder_dims.size()));
  for (int d : st.params.spec.encoder_dims) w.u32(static_cast<uint32_t>(d));
  w.u32(static_cast<uint32_t>(st.params.spec.proj_dims.size()));
  for (int d : st.params.spec.proj_dims) w.u32(static_cast<uint32_t>(d));
  st.params.for_each_layer([&](const model::Layer<float>& l) {
    tensor(l.weight);
    tensor(MatrixF(l.bias.transpose()));
  });
  for (const auto& bufs : {&st.opt.encoder_buf, &st.opt.projector_buf})
    for (const auto& l : *bufs) {
      tensor(l.weight);
      tensor(MatrixF(l.bias.transpose()));
    }
  w.u32(st.pseudo_state ? 1u : 0u);
  if (st.pseudo_state) {
    const auto& ps = *st.pseudo_state;
    w.u32(static_cast<uint32_t>(ps.assignment.size()));
    w.u32(static_cast<uint32_t>(ps.cluster_sizes.size()));
    w.u32(static_cast<uint32_t>(ps.centroids.cols()));
    for (int m : ps.assignment) w.u32(static_cast<uint32_t>(m));
    for (int p : ps.cluster_sizes) w.u32(static_cast<uint32_t>(p));
    w.matrix_f32(ps.centroids);
    w.u32(static_cast<uint32_t>(ps.epoch_computed));
    w.f64(ps.inertia);
  }
  w.close();
}

inline TrainState load_train_state(const std::filesystem::path& path, const TrainConfig& cfg) {
  io::BinaryReader r(path);
  r.expect_magic("TASETST1");
  TrainState st;
  st.next_epoch = static_cast<int>(r.u32());
  model::MlpSpec spec;
  const auto ne = r.u32();
  for (uint32_t i = 0; i < ne; ++i) spec.encoder_dims.push_back(static_cast<int>(r.u32()));
  const auto np = r.u32();
  for (uint32_t i = 0; i < np; ++i) spec.proj_dims.push_back(static_cast<int>(r.u32()));
  spec.validate();
  auto tensor = [&]() {
    const auto rows = r.u32();
    const auto cols = r.u32();
    return r.matrix_f32<float>(rows, cols);
  };
  auto read_stack = [&](size_t n_layers) {
    std::vector<model::Layer<float>> layers;
    for (size_t l = 0; l < n_layers; ++l) {
      model::Layer<float> layer;
      layer.weight = tensor();
      layer.bias = tensor().row(0).transpose();
      layers.push_back(std::move(layer));
    }
    return layers;
  };
  st.params.spec = spec;
  st.params.encoder = read_stack(spec.encoder_dims.size() - 1);
  st.params.projector = read_stack(spec.proj_dims.size() - 1);
  st.opt = model::make_optim_state(st.params, cfg.momentum, cfg.weight_decay, cfg.peak_lr, cfg.epochs);
  st.opt.encoder_buf = read_stack(spec.encoder_dims.size() - 1);
  st.opt.projector_buf = read_stack(spec.proj_dims.size() - 1);
  if (r.u32() != 0) {
    pseudo::PseudoState<float> ps;
    const auto n = r.u32();
    const auto k = r.u32();
    const auto d = r.u32();
    ps.assignment.resize(n);
    for (auto& m : ps.assignment) m = static_cast<int>(r.u32());
    ps.cluster_sizes.resize(k);
    for (auto& p : ps.cluster_sizes) p = static_cast<int>(r.u32());
    ps.centroids = r.matrix_f32<float>(k, d);
    ps.epoch_computed = static_cast<int>(r.u32());
    ps.inertia = r.f64();
    st.pseudo_state = std::move(ps);
  }
  return st;
}

// Algorithm: warm up with the plain contrastive objective for B epochs,
// cluster once, then per epoch derive temperatures/weights from the stored
// cluster-size distribution, optimize the hybrid loss, and re-cluster every
// F epochs. Fully determined by (config, dataset, seed).
inline RunResult run(const TrainConfig& cfg, const datagen::Dataset& data, const RunDir* dir = nullptr,
                     const TrainState* resume = nullptr) {
  cfg.validate();
  if (data.size() < 1) throw DataError("train: empty dataset");
  const auto t0 = std::chrono::steady_clock::now();

  TrainState st;
  if (resume) {
    st = *resume;
    if (st.next_epoch > cfg.schedule.warmup_epochs && uses_pseudo(cfg.mode) && !st.pseudo_state)
      throw ConfigError("train: resume state lacks the pseudo allocation");
  } else {
    Rng init_rng(cfg.seed, "init");
    st.params = model::init_params<float>(cfg.mlp, init_rng);
    st.opt = model::make_optim_state(st.params, cfg.momentum, cfg.weight_decay, cfg.peak_lr, cfg.epochs);
    st.next_epoch = 0;
  }
  if (cfg.mlp.input_dim() != data.dim()) throw ConfigError("train: model input width does not match the dataset");

  const int b_warm = cfg.schedule.warmup_epochs;
  RunHistory history;

  auto kmeans_at = [&](int epoch) {
    pseudo::KmeansConfig kc = cfg.kmeans;
    kc.seed = derive_seed(cfg.seed, "kmeans", static_cast<uint64_t>(epoch));
    return pseudo::refresh_pseudo_state(st.params, data, kc, epoch, b_warm);
  };

  for (int e = st.next_epoch; e < cfg.epochs; ++e) {
    bool refreshed_now = false;
    if (uses_pseudo(cfg.mode) && e == b_warm && !st.pseudo_state) {
      st.pseudo_state = kmeans_at(e);
      refreshed_now = true;
    }

    Rng data_rng(cfg.seed, "data", static_cast<uint64_t>(e));
    auto stats = train_epoch(st.params, st.opt, data, st.pseudo_state ? &*st.pseudo_state : nullptr, cfg, e, data_rng);

    // Alg. 1 re-clusters after the epoch's mini-batches, every F epochs.
    if (uses_pseudo(cfg.mode) && e >= b_warm && e % cfg.schedule.refresh_period == 0) {
      st.pseudo_state = kmeans_at(e);
      refreshed_now = true;
    }
    if (refreshed_now && st.pseudo_state) {
      stats.refreshed = true;
      stats.inertia = st.pseudo_state->inertia;
      stats.cluster_sizes = st.pseudo_state->cluster_sizes;
      if (dir) pseudo::save_pseudo_state(*st.pseudo_state, dir->file("pseudo_" + std::to_string(e) + ".bin"));
    }
    history.epochs.push_back(std::move(stats));

    if (dir && (e + 1) % cfg.checkpoint_period == 0 && e + 1 < cfg.epochs) {
      model::save_checkpoint(st.params, dir->file("checkpoint_" + std::to_string(e + 1) + ".bin"));
      TrainState snap = st;
      snap.next_epoch = e + 1;
      save_train_state(snap, dir->file("trainstate_" + std::to_string(e + 1) + ".bin"));
    }
  }

  history.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (dir) {
    model::save_checkpoint(st.params, dir->file("checkpoint.bin"));
    dir->write_text("history.csv", history_csv(history));
  }
  return RunResult{std::move(st.params), std::move(history)};
}

}  // namespace tase::trainer
