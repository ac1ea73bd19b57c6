#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "embae/loss.hpp"

using namespace embae;

namespace {

// Exhaustive per-anchor enumeration oracle: scan all positives/negatives for
// every anchor, no shared code with the implementation.
double oracle_batch_hard(const MatrixD& z, const std::vector<int>& labels, const MarginMode& mode) {
  const int n = z.rows;
  double total = 0.0;
  for (int a = 0; a < n; ++a) {
    double hp = -1.0, hn = std::numeric_limits<double>::infinity();
    bool has_pos = false, has_neg = false;
    for (int j = 0; j < n; ++j) {
      if (j == a) continue;
      double d2 = 0.0;
      for (int c = 0; c < z.cols; ++c) d2 += (z(a, c) - z(j, c)) * (z(a, c) - z(j, c));
      const double d = std::sqrt(d2);
      if (labels[j] == labels[a]) {
        has_pos = true;
        hp = std::max(hp, d);
      } else {
        has_neg = true;
        hn = std::min(hn, d);
      }
    }
    REQUIRE(has_pos);
    REQUIRE(has_neg);
    if (mode.kind == MarginMode::Kind::Hinge)
      total += std::max(0.0, mode.margin + hp - hn);
    else
      total += std::log1p(std::exp(hp - hn));
  }
  return total / n;
}

MatrixD random_embeddings(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  MatrixD z(rows, cols);
  for (auto& v : z.data) v = g(rng);
  return z;
}

std::vector<int> random_labels(int rows, int n_classes, std::mt19937_64& rng) {
  // Every class gets at least 2 members so each anchor has a positive.
  std::vector<int> labels;
  for (int c = 0; c < n_classes; ++c) {
    labels.push_back(c);
    labels.push_back(c);
  }
  std::uniform_int_distribution<int> pick(0, n_classes - 1);
  while (static_cast<int>(labels.size()) < rows) labels.push_back(pick(rng));
  labels.resize(rows);
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

}  // namespace

TEST_CASE("margin-satisfied hinge batch has zero loss") {
  // Two well-separated pairs: hp ~ 0.1, hn ~ 5, margin 0.2.
  MatrixD z(4, 1);
  z(0, 0) = 0.0;
  z(1, 0) = 0.1;
  z(2, 0) = 5.0;
  z(3, 0) = 5.1;
  CHECK(batch_hard_triplet_loss(z, {0, 0, 1, 1}, MarginMode::hinge(0.2)) == 0.0);
}

TEST_CASE("softplus of a perfectly balanced batch is ln 2") {
  // Regular tetrahedron, one class per opposite edge: every pairwise
  // distance is 2, so hp == hn for all anchors and each term is softplus(0).
  MatrixD tet(4, 3);
  const double s = 1.0 / std::sqrt(2.0);
  tet(0, 0) = 1;  tet(0, 1) = 0;  tet(0, 2) = -s;
  tet(1, 0) = -1; tet(1, 1) = 0;  tet(1, 2) = -s;
  tet(2, 0) = 0;  tet(2, 1) = 1;  tet(2, 2) = s;
  tet(3, 0) = 0;  tet(3, 1) = -1; tet(3, 2) = s;
  const double loss = batch_hard_triplet_loss(tet, {0, 0, 1, 1}, MarginMode::softplus());
  CHECK(std::abs(loss - std::log(2.0)) <= 1e-12);
}

TEST_CASE("1-D worked example: hinge m=0.2 gives 0.3") {
  MatrixD z(4, 1);
  z(0, 0) = 0.0;
  z(1, 0) = 1.0;
  z(2, 0) = 5.0;
  z(3, 0) = 10.0;
  const double loss = batch_hard_triplet_loss(z, {0, 0, 1, 1}, MarginMode::hinge(0.2));
  // Per-anchor (hp, hn): (1,5), (1,4), (5,4), (5,9) ->
  // mean([0.2-4]_+, [0.2-3]_+, [0.2+1]_+, [0.2-4]_+) = 1.2/4.
  CHECK(std::abs(loss - 0.3) <= 1e-12);
}

TEST_CASE("anchors without positives or negatives are contract errors") {
  MatrixD z(3, 1);
  z(0, 0) = 0.0;
  z(1, 0) = 1.0;
  z(2, 0) = 2.0;
  CHECK_THROWS_AS(batch_hard_triplet_loss(z, {0, 1, 2}, MarginMode::softplus()), ContractError);
  CHECK_THROWS_AS(batch_hard_triplet_loss(z, {0, 0, 0}, MarginMode::softplus()), ContractError);
  try {
    batch_hard_triplet_loss(z, {0, 1, 1}, MarginMode::softplus());
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("label 0") != std::string::npos);
  }
}

TEST_CASE("batch-hard equals the exhaustive enumeration oracle") {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> classes(2, 8), per(2, 4), dims(1, 16);
  for (int trial = 0; trial < 100; ++trial) {
    const int n_classes = classes(rng);
    const int rows = 2 * n_classes + per(rng);
    const int cols = dims(rng);
    const MatrixD z = random_embeddings(rows, cols, rng);
    const std::vector<int> labels = random_labels(rows, n_classes, rng);
    for (const MarginMode& mode :
         {MarginMode::hinge(0.2), MarginMode::hinge(1.0), MarginMode::softplus()}) {
      const double expected = oracle_batch_hard(z, labels, mode);
      CHECK(batch_hard_triplet_loss(z, labels, mode) == Catch::Approx(expected).margin(1e-12));
    }
  }
}

TEST_CASE("loss is invariant to batch permutation and embedding translation") {
  std::mt19937_64 rng(202);
  const MatrixD z = random_embeddings(12, 6, rng);
  const std::vector<int> labels = random_labels(12, 4, rng);
  const double base = batch_hard_triplet_loss(z, labels, MarginMode::softplus());

  std::vector<int> perm(12);
  for (int i = 0; i < 12; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  MatrixD zp(12, 6);
  std::vector<int> lp(12);
  for (int i = 0; i < 12; ++i) {
    lp[i] = labels[perm[i]];
    for (int c = 0; c < 6; ++c) zp(i, c) = z(perm[i], c);
  }
  CHECK(batch_hard_triplet_loss(zp, lp, MarginMode::softplus()) == Catch::Approx(base).margin(1e-12));

  MatrixD zt = z;
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 6; ++c) zt(r, c) += 3.7;
  CHECK(batch_hard_triplet_loss(zt, labels, MarginMode::softplus()) ==
        Catch::Approx(base).margin(1e-9));
}

TEST_CASE("softplus is strictly positive, hinge non-negative") {
  std::mt19937_64 rng(303);
  for (int trial = 0; trial < 50; ++trial) {
    const MatrixD z = random_embeddings(8, 4, rng);
    const std::vector<int> labels = random_labels(8, 3, rng);
    CHECK(batch_hard_triplet_loss(z, labels, MarginMode::softplus()) > 0.0);
    CHECK(batch_hard_triplet_loss(z, labels, MarginMode::hinge(0.5)) >= 0.0);
  }
}

TEST_CASE("loss gradient matches central finite differences on embeddings") {
  std::mt19937_64 rng(404);
  const MatrixD z = random_embeddings(8, 5, rng);
  const std::vector<int> labels = random_labels(8, 3, rng);
  for (const MarginMode& mode : {MarginMode::hinge(0.5), MarginMode::softplus()}) {
    const BatchHardResult res = batch_hard_triplet_loss_with_grad(z, labels, mode);
    CHECK(res.loss == Catch::Approx(batch_hard_triplet_loss(z, labels, mode)).margin(1e-15));
    const double h = 1e-6;
    for (int r = 0; r < z.rows; ++r) {
      for (int c = 0; c < z.cols; ++c) {
        MatrixD zp = z, zm = z;
        zp(r, c) += h;
        zm(r, c) -= h;
        const double fd = (batch_hard_triplet_loss(zp, labels, mode) -
                           batch_hard_triplet_loss(zm, labels, mode)) /
                          (2 * h);
        CHECK(std::abs(res.grad(r, c) - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
      }
    }
  }
}

TEST_CASE("reconstruction loss basics") {
  MatrixD a(3, 5), b(3, 5);
  std::mt19937_64 rng(505);
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& v : a.data) v = g(rng);
  b = a;
  CHECK(reconstruction_loss(a, b) == 0.0);

  for (auto& v : b.data) v += 1.0;
  CHECK(reconstruction_loss(b, a) == Catch::Approx(1.0).margin(1e-12));

  for (auto& v : b.data) v = g(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) acc += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  CHECK(reconstruction_loss(a, b) == Catch::Approx(acc / 15.0).margin(1e-12));

  MatrixD c(2, 5);
  CHECK_THROWS_AS(reconstruction_loss(a, c), ContractError);
}
