#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "embae/errors.hpp"
#include "embae/rng.hpp"
#include "embae/tensor.hpp"

namespace embae {

// Identity label that marks a distractor. Distractors are kept in galleries
// but never sampled for training.
inline constexpr int kDistractorIdentity = -1;

// One sample: a backbone feature vector with its identity/camera/dataset
// labels. flip_features, when present, holds the features of the
// horizontally flipped image.
struct ImageRecord {
  std::string sample_id;
  int identity = 0;  // >= 0, or kDistractorIdentity
  int camera = 0;
  std::string dataset;
  std::vector<float> features;
  std::optional<std::vector<float>> flip_features;
};

struct Dataset {
  std::string name;
  std::vector<ImageRecord> records;
  std::set<int> cameras;
  std::set<int> identities;

  int feature_dim() const { return records.empty() ? 0 : static_cast<int>(records.front().features.size()); }

  // Builds a dataset, deriving the camera/identity sets and checking that
  // every record carries the dataset's name and a consistent feature dim.
  static Dataset from_records(std::string name, std::vector<ImageRecord> recs) {
    Dataset d;
    d.name = std::move(name);
    d.records = std::move(recs);
    const std::size_t dim = d.records.empty() ? 0 : d.records.front().features.size();
    for (const ImageRecord& r : d.records) {
      if (r.dataset != d.name)
        throw ContractError("dataset '" + d.name + "': record '" + r.sample_id +
                            "' is tagged with dataset '" + r.dataset + "'");
      if (r.features.size() != dim)
        throw ContractError("dataset '" + d.name + "': record '" + r.sample_id +
                            "' has feature dim " + std::to_string(r.features.size()) +
                            ", expected " + std::to_string(dim));
      if (r.camera < 0)
        throw ContractError("dataset '" + d.name + "': record '" + r.sample_id + "' has negative camera id");
      d.cameras.insert(r.camera);
      d.identities.insert(r.identity);
    }
    return d;
  }
};

// ---------------------------------------------------------------------------
// Distances. Always computed in double precision regardless of the element
// type, with a fixed left-to-right summation order.

template <typename VecA, typename VecB>
double euclidean_distance(const VecA& a, const VecB& b) {
  if (std::size(a) != std::size(b))
    throw ContractError("euclidean_distance: dimension mismatch (" + std::to_string(std::size(a)) +
                        " vs " + std::to_string(std::size(b)) + ")");
  double s = 0.0;
  for (std::size_t i = 0; i < std::size(a); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

namespace detail {

inline double row_distance(const MatrixD& x, int i, int j) {
  double s = 0.0;
  const double* a = x.row_ptr(i);
  const double* b = x.row_ptr(j);
  for (int c = 0; c < x.cols; ++c) {
    const double d = a[c] - b[c];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace detail

// Full symmetric distance matrix over the rows of X. Each off-diagonal pair
// is computed once and mirrored, so the result is exactly symmetric with a
// zero diagonal.
inline MatrixD pairwise_distances(const MatrixD& x) {
  if (x.rows == 0) throw ContractError("pairwise_distances: empty input");
  MatrixD d(x.rows, x.rows);
  for (int i = 0; i < x.rows; ++i) {
    for (int j = i + 1; j < x.rows; ++j) {
      const double v = detail::row_distance(x, i, j);
      d(i, j) = v;
      d(j, i) = v;
    }
  }
  return d;
}

inline MatrixD pairwise_distances(const std::vector<std::vector<double>>& xs) {
  if (xs.empty()) throw ContractError("pairwise_distances: empty input");
  const std::size_t dim = xs.front().size();
  MatrixD x(static_cast<int>(xs.size()), static_cast<int>(dim));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].size() != dim)
      throw ContractError("pairwise_distances: vector " + std::to_string(i) + " has dim " +
                          std::to_string(xs[i].size()) + ", expected " + std::to_string(dim));
    for (std::size_t c = 0; c < dim; ++c) x(static_cast<int>(i), static_cast<int>(c)) = xs[i][c];
  }
  return pairwise_distances(x);
}

}  // namespace embae
