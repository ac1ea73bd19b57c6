#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <vector>

#include "embae/core.hpp"

using namespace embae;

TEST_CASE("euclidean_distance basic values") {
  CHECK(euclidean_distance(std::vector<double>{0, 0}, std::vector<double>{0, 0}) == 0.0);
  CHECK(euclidean_distance(std::vector<double>{0, 0}, std::vector<double>{3, 4}) == 5.0);
  CHECK_THROWS_AS(euclidean_distance(std::vector<double>{1}, std::vector<double>{1, 2}), ContractError);
}

TEST_CASE("euclidean_distance matches elementwise oracle on random 128-d pairs") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(128), b(128);
    for (auto& v : a) v = g(rng);
    for (auto& v : b) v = g(rng);
    double acc = 0.0;
    for (int i = 0; i < 128; ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    const double expected = std::sqrt(acc);
    CHECK(std::abs(euclidean_distance(a, b) - expected) <= 1e-12);
  }
}

TEST_CASE("pairwise_distances small cases") {
  MatrixD one(1, 3);
  one(0, 0) = 1;
  one(0, 1) = 2;
  one(0, 2) = 3;
  MatrixD d1 = pairwise_distances(one);
  REQUIRE(d1.rows == 1);
  CHECK(d1(0, 0) == 0.0);

  std::vector<std::vector<double>> two{{0.0}, {1.0}};
  MatrixD d2 = pairwise_distances(two);
  CHECK(d2(0, 0) == 0.0);
  CHECK(d2(0, 1) == 1.0);
  CHECK(d2(1, 0) == 1.0);
  CHECK(d2(1, 1) == 0.0);

  CHECK_THROWS_AS(pairwise_distances(std::vector<std::vector<double>>{}), ContractError);
}

TEST_CASE("pairwise_distances equals looped euclidean_distance") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::vector<double>> xs(10, std::vector<double>(16));
  for (auto& x : xs)
    for (auto& v : x) v = g(rng);
  MatrixD d = pairwise_distances(xs);
  for (std::size_t i = 0; i < xs.size(); ++i)
    for (std::size_t j = 0; j < xs.size(); ++j)
      CHECK(std::abs(d(static_cast<int>(i), static_cast<int>(j)) - euclidean_distance(xs[i], xs[j])) <=
            1e-12);
}

TEST_CASE("distance properties on random triples") {
  std::mt19937_64 rng(23);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(8), b(8), c(8);
    for (auto& v : a) v = g(rng);
    for (auto& v : b) v = g(rng);
    for (auto& v : c) v = g(rng);
    const double ab = euclidean_distance(a, b);
    const double ba = euclidean_distance(b, a);
    const double ac = euclidean_distance(a, c);
    const double cb = euclidean_distance(c, b);
    CHECK(ab == ba);        // symmetry (same summation order by construction)
    CHECK(ab >= 0.0);
    CHECK(ab <= ac + cb + 1e-12);  // triangle inequality
  }
}

TEST_CASE("Dataset::from_records validates tags and dims") {
  ImageRecord r1{"a", 0, 0, "ds", {1.0f, 2.0f}, std::nullopt};
  ImageRecord r2{"b", 1, 1, "ds", {3.0f, 4.0f}, std::nullopt};
  Dataset d = Dataset::from_records("ds", {r1, r2});
  CHECK(d.identities == std::set<int>{0, 1});
  CHECK(d.cameras == std::set<int>{0, 1});
  CHECK(d.feature_dim() == 2);

  ImageRecord wrong_tag{"c", 0, 0, "other", {1.0f, 2.0f}, std::nullopt};
  CHECK_THROWS_AS(Dataset::from_records("ds", {r1, wrong_tag}), ContractError);
  ImageRecord wrong_dim{"c", 0, 0, "ds", {1.0f}, std::nullopt};
  CHECK_THROWS_AS(Dataset::from_records("ds", {r1, wrong_dim}), ContractError);
}
