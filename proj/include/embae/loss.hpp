#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "embae/core.hpp"
#include "embae/errors.hpp"
#include "embae/tensor.hpp"

namespace embae {

// Margin handling for the triplet loss: a hard hinge [m + hp - hn]_+ with a
// positive margin m, or the soft margin ln(1 + exp(hp - hn)) which keeps
// pulling positives together after the margin is met.
struct MarginMode {
  enum class Kind { Hinge, Softplus };
  Kind kind = Kind::Softplus;
  double margin = 0.2;  // used by Hinge only

  static MarginMode hinge(double m) {
    if (!(m > 0)) throw ConfigError("hinge margin must be > 0, got " + std::to_string(m));
    return MarginMode{Kind::Hinge, m};
  }
  static MarginMode softplus() { return MarginMode{Kind::Softplus, 0.0}; }
};

namespace detail {

inline double softplus_stable(double x) {
  // ln(1+exp(x)) without overflow for large x.
  if (x > 30.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Hardest positive / hardest negative per anchor, ties broken by the lowest
// batch index. Throws if some anchor lacks a positive or a negative.
struct HardIndices {
  std::vector<int> pos;
  std::vector<int> neg;
};

inline HardIndices batch_hard_indices(const MatrixD& dist, const std::vector<int>& labels) {
  const int n = dist.rows;
  HardIndices out;
  out.pos.assign(n, -1);
  out.neg.assign(n, -1);
  for (int a = 0; a < n; ++a) {
    double hp = -1.0;
    double hn = 0.0;
    for (int j = 0; j < n; ++j) {
      if (j == a) continue;
      const double d = dist(a, j);
      if (labels[j] == labels[a]) {
        if (out.pos[a] < 0 || d > hp) {
          hp = d;
          out.pos[a] = j;
        }
      } else {
        if (out.neg[a] < 0 || d < hn) {
          hn = d;
          out.neg[a] = j;
        }
      }
    }
    if (out.pos[a] < 0)
      throw ContractError("batch_hard_triplet_loss: anchor " + std::to_string(a) + " (label " +
                          std::to_string(labels[a]) + ") has no positive sample in the batch");
    if (out.neg[a] < 0)
      throw ContractError("batch_hard_triplet_loss: anchor " + std::to_string(a) + " (label " +
                          std::to_string(labels[a]) + ") has no negative sample in the batch");
  }
  return out;
}

}  // namespace detail

struct BatchHardResult {
  double loss = 0.0;
  MatrixD grad;  // d(loss)/d(embeddings), same shape as the input batch
};

// Batch-hard triplet loss over a batch of embeddings: for every anchor the
// farthest same-label and nearest different-label sample form the triplet,
// and the per-anchor terms are averaged. Distances are true Euclidean in
// double precision.
inline BatchHardResult batch_hard_triplet_loss_with_grad(const MatrixD& embeddings,
                                                         const std::vector<int>& labels,
                                                         const MarginMode& mode) {
  if (embeddings.rows != static_cast<int>(labels.size()))
    throw ContractError("batch_hard_triplet_loss: " + std::to_string(embeddings.rows) +
                        " embeddings vs " + std::to_string(labels.size()) + " labels");
  if (embeddings.rows < 2) throw ContractError("batch_hard_triplet_loss: batch needs at least 2 rows");

  const int n = embeddings.rows;
  const MatrixD dist = pairwise_distances(embeddings);
  const detail::HardIndices hard = detail::batch_hard_indices(dist, labels);

  BatchHardResult res;
  res.grad = MatrixD(n, embeddings.cols);
  MatrixD ddist(n, n);  // d(loss)/d(D_aj), accumulated per anchor

  double total = 0.0;
  for (int a = 0; a < n; ++a) {
    const double hp = dist(a, hard.pos[a]);
    const double hn = dist(a, hard.neg[a]);
    double term = 0.0;
    double w = 0.0;  // d(term)/d(hp - hn)
    if (mode.kind == MarginMode::Kind::Hinge) {
      const double t = mode.margin + hp - hn;
      term = t > 0.0 ? t : 0.0;
      w = t > 0.0 ? 1.0 : 0.0;
    } else {
      term = detail::softplus_stable(hp - hn);
      w = detail::sigmoid(hp - hn);
    }
    total += term;
    const double scale = w / n;
    ddist(a, hard.pos[a]) += scale;
    ddist(a, hard.neg[a]) -= scale;
  }
  res.loss = total / n;

  // Chain through D_aj = ||z_a - z_j||. Zero distance gets subgradient 0.
  for (int a = 0; a < n; ++a) {
    for (int j = 0; j < n; ++j) {
      const double g = ddist(a, j);
      if (g == 0.0) continue;
      const double d = dist(a, j);
      if (d <= 0.0) continue;
      const double s = g / d;
      for (int c = 0; c < embeddings.cols; ++c) {
        const double diff = embeddings(a, c) - embeddings(j, c);
        res.grad(a, c) += s * diff;
        res.grad(j, c) -= s * diff;
      }
    }
  }
  return res;
}

inline double batch_hard_triplet_loss(const MatrixD& embeddings, const std::vector<int>& labels,
                                      const MarginMode& mode) {
  if (embeddings.rows != static_cast<int>(labels.size()))
    throw ContractError("batch_hard_triplet_loss: " + std::to_string(embeddings.rows) +
                        " embeddings vs " + std::to_string(labels.size()) + " labels");
  if (embeddings.rows < 2) throw ContractError("batch_hard_triplet_loss: batch needs at least 2 rows");
  const int n = embeddings.rows;
  const MatrixD dist = pairwise_distances(embeddings);
  const detail::HardIndices hard = detail::batch_hard_indices(dist, labels);
  double total = 0.0;
  for (int a = 0; a < n; ++a) {
    const double hp = dist(a, hard.pos[a]);
    const double hn = dist(a, hard.neg[a]);
    if (mode.kind == MarginMode::Kind::Hinge) {
      const double t = mode.margin + hp - hn;
      total += t > 0.0 ? t : 0.0;
    } else {
      total += detail::softplus_stable(hp - hn);
    }
  }
  return total / n;
}

// Mean squared error over all elements: (1/(B*F)) * sum (xhat - x)^2.
inline double reconstruction_loss(const MatrixD& reconstructed, const MatrixD& target) {
  if (!reconstructed.same_shape(target))
    throw ContractError("reconstruction_loss: shape mismatch (" + std::to_string(reconstructed.rows) +
                        "x" + std::to_string(reconstructed.cols) + " vs " + std::to_string(target.rows) +
                        "x" + std::to_string(target.cols) + ")");
  double s = 0.0;
  for (std::size_t i = 0; i < reconstructed.data.size(); ++i) {
    const double d = reconstructed.data[i] - target.data[i];
    s += d * d;
  }
  return s / static_cast<double>(reconstructed.data.size());
}

// d(reconstruction_loss)/d(reconstructed).
inline MatrixD reconstruction_loss_grad(const MatrixD& reconstructed, const MatrixD& target) {
  if (!reconstructed.same_shape(target))
    throw ContractError("reconstruction_loss_grad: shape mismatch");
  MatrixD g(reconstructed.rows, reconstructed.cols);
  const double scale = 2.0 / static_cast<double>(reconstructed.data.size());
  for (std::size_t i = 0; i < reconstructed.data.size(); ++i)
    g.data[i] = scale * (reconstructed.data[i] - target.data[i]);
  return g;
}

}  // namespace embae
