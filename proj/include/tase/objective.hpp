#pragma once

#include "tase/common.hpp"

#include <cmath>
#include <limits>

namespace tase::objective {

// Two augmented views per source sample, interleaved: rows 2s and 2s+1 come
// from sample s and are each other's positive. All remaining 2N-2 rows are
// negatives for a given anchor, and both views act as anchors.
struct BatchPairing {
  int num_sources = 0;

  int rows() const { return 2 * num_sources; }
  static int positive_of(int row) { return row ^ 1; }
  static int source_of(int row) { return row / 2; }
};

template <class T>
struct LossResult {
  T loss = T(0);                  // mean over all anchors
  Vector<T> per_anchor;           // length 2N
  Matrix<T> grad;                 // dLoss/dV, 2N x d
  T mean_pos_sim = T(0);          // diagnostic
  T mean_hard_neg_sim = T(0);     // diagnostic: mean over anchors of max negative similarity
};

// Pairwise cosine similarities of unit rows (plain dot products).
template <class T>
Matrix<T> similarity_matrix(const Matrix<T>& v) {
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const T n = v.row(r).norm();
    if (std::abs(n - T(1)) > static_cast<T>(1e-4))
      throw NumericError("similarity_matrix: row " + std::to_string(r) + " is not unit norm");
  }
  return v * v.transpose();
}

namespace detail {

template <class T>
void check_batch(const Matrix<T>& v, const BatchPairing& pairing) {
  if (pairing.num_sources < 1) throw ConfigError("loss: empty batch");
  if (v.rows() != pairing.rows()) throw ConfigError("loss: embedding rows do not match pairing");
  require_finite(v, "loss embeddings");
}

}  // namespace detail

// Contrastive loss with one temperature shared by the whole batch:
//   l_i = -log S(v_i, v_i', tau) / (S(v_i, v_i', tau) + sum_j S(v_i, v_j, tau)).
// Anchors and negatives are reduced in ascending row order; the log-sum is
// max-shifted so small temperatures cannot overflow.
template <class T>
LossResult<T> nt_xent(const Matrix<T>& v, const BatchPairing& pairing, T tau) {
  if (!(tau > T(0))) throw ConfigError("nt_xent: tau must be > 0");
  detail::check_batch(v, pairing);

  const int n = pairing.rows();
  const Matrix<T> sim = v * v.transpose();

  LossResult<T> res;
  res.per_anchor = Vector<T>::Zero(n);
  res.grad = Matrix<T>::Zero(n, v.cols());
  T pos_sum = T(0), hard_sum = T(0);

  for (int i = 0; i < n; ++i) {
    const int p = BatchPairing::positive_of(i);
    const T pos_arg = sim(i, p) / tau;

    T shift = pos_arg;
    T hardest = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < n; ++j) {
      if (j == i || j == p) continue;
      shift = std::max(shift, sim(i, j) / tau);
      hardest = std::max(hardest, sim(i, j));
    }

    const T pos_exp = std::exp(pos_arg - shift);
    T denom = pos_exp;
    for (int j = 0; j < n; ++j) {
      if (j == i || j == p) continue;
      denom += std::exp(sim(i, j) / tau - shift);
    }
    res.per_anchor(i) = std::log(denom) - (pos_arg - shift);

    // d l_i / d sim(i,p) = (pos/denom - 1)/tau;  d l_i / d sim(i,j) = (e_j/denom)/tau.
    const T g_pos = (pos_exp / denom - T(1)) / tau;
    res.grad.row(i) += g_pos * v.row(p);
    res.grad.row(p) += g_pos * v.row(i);
    for (int j = 0; j < n; ++j) {
      if (j == i || j == p) continue;
      const T g = std::exp(sim(i, j) / tau - shift) / denom / tau;
      res.grad.row(i) += g * v.row(j);
      res.grad.row(j) += g * v.row(i);
    }

    pos_sum += sim(i, p);
    if (n > 2) hard_sum += hardest;
  }

  res.loss = res.per_anchor.sum() / static_cast<T>(n);
  res.grad /= static_cast<T>(n);
  res.mean_pos_sim = pos_sum / static_cast<T>(n);
  res.mean_hard_neg_sim = n > 2 ? hard_sum / static_cast<T>(n) : T(0);
  return res;
}

// TASE loss: anchor i uses its own temperature tau[i] in every term, and each
// negative row j contributes with weight w[j]; the positive term is never
// weighted:
//   l_i = -log S(v_i, v_i', tau_i) / (S(v_i, v_i', tau_i) + sum_j w_j S(v_i, v_j, tau_i)).
template <class T>
LossResult<T> tase_loss(const Matrix<T>& v, const BatchPairing& pairing, const Vector<T>& tau, const Vector<T>& w) {
  detail::check_batch(v, pairing);
  const int n = pairing.rows();
  if (tau.size() != n) throw ConfigError("tase_loss: tau length must equal the anchor count");
  if (w.size() != n) throw ConfigError("tase_loss: weight length must equal the row count");
  for (int i = 0; i < n; ++i) {
    if (!(tau(i) > T(0))) throw ConfigError("tase_loss: tau must be > 0");
    if (!(w(i) > T(0)) || w(i) > T(1)) throw ConfigError("tase_loss: weights must lie in (0, 1]");
  }

  const Matrix<T> sim = v * v.transpose();

  LossResult<T> res;
  res.per_anchor = Vector<T>::Zero(n);
  res.grad = Matrix<T>::Zero(n, v.cols());
  T pos_sum = T(0), hard_sum = T(0);

  for (int i = 0; i < n; ++i) {
    const int p = BatchPairing::positive_of(i);
    const T tau_i = tau(i);
    const T pos_arg = sim(i, p) / tau_i;

    T shift = pos_arg;
    T hardest = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < n; ++j) {
      if (j == i || j == p) continue;
      shift = std::max(shift, sim(i, j) / tau_i);
      hardest = std::max(hardest, sim(i, j));
    }

    const T pos_exp = std::exp(pos_arg - shift);
    T denom = pos_exp;
    for (int j = 0; j < n; ++j) {
      if (j == i || j == p) continue;
      denom += w(j) * std::exp(sim(i, j) / tau_i - shift);
    }
    res.per_anchor(i) = std::log(denom) - (pos_arg - shift);

    const T g_pos = (pos_exp / denom - T(1)) / tau_i;
    res.grad.row(i) += g_pos * v.row(p);
    res.grad.row(p) += g_pos * v.row(i);
    for (int j = 0; j < n; ++j) {
      if (j == i || j == p) continue;
      const T g = w(j) * std::exp(sim(i, j) / tau_i - shift) / denom / tau_i;
      res.grad.row(i) += g * v.row(j);
      res.grad.row(j) += g * v.row(i);
    }

    pos_sum += sim(i, p);
    if (n > 2) hard_sum += hardest;
  }

  res.loss = res.per_anchor.sum() / static_cast<T>(n);
  res.grad /= static_cast<T>(n);
  res.mean_pos_sim = pos_sum / static_cast<T>(n);
  res.mean_hard_neg_sim = n > 2 ? hard_sum / static_cast<T>(n) : T(0);
  return res;
}

// Share of the negative-similarity gradient carried by each negative:
//   r_k = exp(sim_k / tau) / sum_j exp(sim_j / tau).
// Low tau concentrates the mass on the hardest negative.
template <class T>
Vector<T> grad_ratio(const Vector<T>& neg_sims, T tau) {
  if (neg_sims.size() == 0) throw ConfigError("grad_ratio: needs at least one negative");
  if (!(tau > T(0))) throw ConfigError("grad_ratio: tau must be > 0");
  const T shift = neg_sims.maxCoeff() / tau;
  Vector<T> r(neg_sims.size());
  T denom = T(0);
  for (Eigen::Index k = 0; k < neg_sims.size(); ++k) {
    r(k) = std::exp(neg_sims(k) / tau - shift);
    denom += r(k);
  }
  return r / denom;
}

}  // namespace tase::objective
