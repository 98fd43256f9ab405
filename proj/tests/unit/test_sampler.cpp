#include <doctest.h>

#include <cmath>
#include <numeric>

#include "seqdiff/sampler.hpp"

using seqdiff::ImportanceSampler;
using seqdiff::RandomStream;

namespace {

void fill(ImportanceSampler& s, int n, double value) {
  for (int i = 0; i < s.history_depth(); ++i) s.update(n, value);
}

double total(const ImportanceSampler& s) {
  const auto& p = s.probabilities();
  return std::accumulate(p.begin(), p.end(), 0.0);
}

}  // namespace

TEST_CASE("uniform until every step is warm") {
  ImportanceSampler s(4);
  for (int n = 1; n <= 3; ++n) fill(s, n, static_cast<double>(n));
  CHECK_FALSE(s.warm());
  for (int n = 1; n <= 4; ++n) CHECK(s.probability(n) == 0.25);
  fill(s, 4, 9.0);
  CHECK(s.warm());
  CHECK(s.probability(4) > s.probability(1));
  CHECK(total(s) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("constant histories give a uniform distribution") {
  ImportanceSampler s(7);
  for (int n = 1; n <= 7; ++n) fill(s, n, 3.5);
  for (int n = 1; n <= 7; ++n) CHECK(s.probability(n) == doctest::Approx(1.0 / 7).epsilon(1e-12));
}

TEST_CASE("probabilities follow the root mean square of recorded losses") {
  ImportanceSampler s(2);
  fill(s, 1, 1.0);
  fill(s, 2, 2.0);
  CHECK(s.probability(1) == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(s.probability(2) == doctest::Approx(2.0 / 3).epsilon(1e-12));

  // mean squares 1 and 4 from mixed values: step 1 alternates 0 and sqrt 2
  ImportanceSampler t(2, 2);
  t.update(1, 0.0);
  t.update(1, std::sqrt(2.0));
  t.update(2, 2.0);
  t.update(2, -2.0);
  CHECK(t.probability(1) == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("ring buffer evicts the oldest value") {
  ImportanceSampler s(1);
  for (int i = 1; i <= 11; ++i) s.update(1, static_cast<double>(i));
  const auto h = s.history(1);
  REQUIRE(h.size() == 10);
  CHECK(h.front() == 2.0);
  CHECK(h.back() == 11.0);
}

TEST_CASE("zero losses keep every step reachable") {
  ImportanceSampler s(3);
  fill(s, 1, 0.0);
  fill(s, 2, 0.0);
  fill(s, 3, 5.0);
  for (int n = 1; n <= 3; ++n) CHECK(s.probability(n) > 0.0);
  CHECK(total(s) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("sampled frequencies match the distribution") {
  ImportanceSampler s(5);
  const double losses[] = {1.0, 2.0, 0.5, 4.0, 3.0};
  for (int n = 1; n <= 5; ++n) fill(s, n, losses[n - 1]);
  RandomStream rng(3, "step-sampler");
  const int M = 100000;
  std::vector<int> counts(6, 0);
  for (int i = 0; i < M; ++i) ++counts[static_cast<std::size_t>(s.sample(rng))];
  for (int n = 1; n <= 5; ++n) {
    const double p = s.probability(n);
    CHECK(std::abs(counts[static_cast<std::size_t>(n)] - M * p) <= 3 * std::sqrt(M * p * (1 - p)));
  }
}

TEST_CASE("weighting by 1/p gives an unbiased estimate of the total loss") {
  const int N = 20;
  ImportanceSampler s(N);
  std::vector<double> L(N + 1);
  for (int n = 1; n <= N; ++n) {
    L[static_cast<std::size_t>(n)] = 0.2 + std::sqrt(static_cast<double>(n));
    fill(s, n, L[static_cast<std::size_t>(n)] * (1 + 0.3 * std::sin(n)));
  }
  RandomStream rng(5, "step-sampler");
  const int M = 100000;
  double est = 0.0;
  for (int i = 0; i < M; ++i) {
    const int n = s.sample(rng);
    est += L[static_cast<std::size_t>(n)] / s.probability(n);
  }
  const double truth = std::accumulate(L.begin() + 1, L.end(), 0.0);
  CHECK(std::abs(est / M - truth) < 0.01 * truth);
}

TEST_CASE("history can be restored exactly") {
  ImportanceSampler a(3, 4);
  RandomStream rng(1, "x");
  for (int i = 0; i < 40; ++i) a.update(1 + static_cast<int>(rng.below(3)), rng.uniform());
  ImportanceSampler b(3, 4);
  for (int n = 1; n <= 3; ++n) b.set_history(n, a.history(n));
  CHECK(a == b);
  CHECK(a.probabilities() == b.probabilities());
  a.update(2, 0.7);
  b.update(2, 0.7);
  CHECK(a == b);
}

TEST_CASE("invalid steps are rejected") {
  ImportanceSampler s(3);
  CHECK_THROWS_AS(s.update(0, 1.0), std::out_of_range);
  CHECK_THROWS_AS(s.probability(4), std::out_of_range);
  CHECK_THROWS(ImportanceSampler(0));
}
