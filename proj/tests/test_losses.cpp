#include <cmath>
#include <random>

#include "doctest.h"
#include "eegdg/errors.hpp"
#include "eegdg/log.hpp"
#include "eegdg/losses.hpp"
#include "gradcheck.hpp"

using namespace eegdg;
using eegdg::testing::gradcheck;
using eegdg::testing::random_tensor;

namespace {

const KernelSpec kLinear{KernelKind::linear, false, 1.0};

double rbf(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j, double sigma) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.dim(1); ++k) {
    const double d = a.at({i, k}) - b.at({j, k});
    s += d * d;
  }
  return std::exp(-s / (2.0 * sigma * sigma));
}

double dot(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.dim(1); ++k) s += a.at({i, k}) * b.at({j, k});
  return s;
}

// Explicit O(m·M) double sums.
double mmd_oracle(const Tensor& x, const Tensor& z, bool linear, double sigma) {
  auto k = [&](const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
    return linear ? dot(a, i, b, j) : rbf(a, i, b, j, sigma);
  };
  const std::size_t m = x.dim(0), M = z.dim(0);
  double xx = 0.0, xz = 0.0, zz = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) xx += k(x, i, x, j);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < M; ++j) xz += k(x, i, z, j);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < M; ++j) zz += k(z, i, z, j);
  return xx / double(m * m) - 2.0 * xz / double(m * M) + zz / double(M * M);
}

std::vector<int> random_labels(std::size_t n, int classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, classes - 1);
  std::vector<int> y(n);
  for (int& v : y) v = u(rng);
  return y;
}

}  // namespace

TEST_CASE("mmd_to_mean hand values") {
  Tensor x = Tensor::from({3, 2}, {1, 2, -1, 0.5, 3, 3});
  CHECK(std::abs(mmd_to_mean(x, x, KernelSpec{}).item()) < 1e-12);
  CHECK(std::abs(mmd_to_mean(x, x, kLinear).item()) < 1e-12);

  Tensor f = Tensor::from({1, 2}, {0, 0});
  Tensor pooled = Tensor::from({2, 2}, {0, 0, 2, 0});
  CHECK(mmd_to_mean(f, pooled, kLinear).item() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK_THROWS_AS(mmd_to_mean(f, Tensor::zeros({2, 3}), kLinear), DimensionError);
}

TEST_CASE("mmd_to_mean matches the explicit double sum") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = random_tensor({5, 3}, rng, false, -2, 2);
    Tensor z = random_tensor({9, 3}, rng, false, -1, 3);
    const double sigma = median_pairwise_distance(z);
    CHECK(std::abs(mmd_to_mean(x, z, KernelSpec{}).item() - mmd_oracle(x, z, false, sigma)) < 1e-10);
    KernelSpec fixed{KernelKind::rbf, false, 0.7};
    CHECK(std::abs(mmd_to_mean(x, z, fixed).item() - mmd_oracle(x, z, false, 0.7)) < 1e-10);
    CHECK(std::abs(mmd_to_mean(x, z, kLinear).item() - mmd_oracle(x, z, true, 1.0)) < 1e-10);
    CHECK(mmd_to_mean(x, z, KernelSpec{}).item() >= -1e-12);
  }
}

TEST_CASE("median heuristic") {
  // distances 1, 2, 3 -> median 2; one pair -> that distance; identical -> fallback 1
  CHECK(median_pairwise_distance(Tensor::from({3, 1}, {0, 1, 3})) == 2.0);
  CHECK(median_pairwise_distance(Tensor::from({2, 2}, {0, 0, 3, 4})) == 5.0);
  CHECK(median_pairwise_distance(Tensor::from({3, 1}, {2, 2, 2})) == 1.0);
  CHECK(median_pairwise_distance(Tensor::from({1, 1}, {2})) == 1.0);
  // four points on a line: distances 1,1,1,2,2,3 -> (1+2)/2
  CHECK(median_pairwise_distance(Tensor::from({4, 1}, {0, 1, 2, 3})) == 1.5);
  KernelSpec bad{KernelKind::rbf, false, 0.0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("margin invariant loss") {
  std::mt19937_64 rng(2);
  Tensor a = random_tensor({6, 3}, rng, false);
  CHECK(std::abs(margin_invariant_loss({a, a, a}, KernelSpec{}).item()) < 1e-10);

  Tensor s1 = Tensor::from({1, 2}, {0, 0});
  Tensor s2 = Tensor::from({1, 2}, {2, 0});
  CHECK(margin_invariant_loss({s1, s2}, kLinear).item() == doctest::Approx(1.0).epsilon(1e-14));

  Tensor b = random_tensor({4, 3}, rng, false);
  Tensor c = random_tensor({5, 3}, rng, false, 0, 2);
  const double abc = margin_invariant_loss({a, b, c}, KernelSpec{}).item();
  CHECK(abc > 0.0);
  CHECK(std::abs(margin_invariant_loss({c, a, b}, KernelSpec{}).item() - abc) < 1e-12);
  CHECK(std::abs(margin_invariant_loss({b, c, a}, KernelSpec{}).item() - abc) < 1e-12);
  CHECK_THROWS_AS(margin_invariant_loss({a}, KernelSpec{}), ConfigError);
}

TEST_CASE("compactness and separability hand values") {
  Tensor same = Tensor::from({3, 2}, {1, 1, 1, 1, 1, 1});
  std::vector<int> y3{0, 1, 0};
  CHECK(intra_class_compactness(same, y3).item() == 0.0);
  CHECK(inter_class_separability(same, y3).item() == 0.0);

  Tensor p = Tensor::from({2, 2}, {0, 0, 3, 4});
  std::vector<int> together{0, 0};
  std::vector<int> apart{0, 1};
  CHECK(intra_class_compactness(p, together).item() == 5.0);
  CHECK(inter_class_separability(p, together).item() == 0.0);
  CHECK(intra_class_compactness(p, apart).item() == 0.0);
  CHECK(inter_class_separability(p, apart).item() == 5.0);
  CHECK_THROWS_AS(intra_class_compactness(p, y3), DimensionError);
}

TEST_CASE("class centers") {
  Tensor x = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  std::vector<int> y{2, 0, 1};
  auto cc = class_centers(x, y, 3);
  CHECK(cc.centers.to_vector() == std::vector<double>{3, 4, 5, 6, 1, 2});
  CHECK(cc.present == std::vector<bool>{true, true, true});

  auto missing = class_centers(x, std::vector<int>{0, 0, 2}, 3);
  CHECK(missing.present == std::vector<bool>{true, false, true});
  CHECK(missing.centers.at({1, 0}) == 0.0);

  auto mean2 = class_centers(Tensor::from({2, 2}, {0, 0, 2, 2}), std::vector<int>{1, 1}, 2);
  CHECK(mean2.centers.at({1, 0}) == 1.0);
  CHECK(mean2.centers.at({1, 1}) == 1.0);
  CHECK_THROWS_AS(class_centers(x, std::vector<int>{0, 3, 1}, 3), ContractError);
}

TEST_CASE("cross-domain center distance") {
  ClassCenters a{Tensor::from({2, 2}, {0, 0, 0, 0}), {true, true}};
  ClassCenters b{Tensor::from({2, 2}, {3, 4, 0, 0}), {true, true}};
  CHECK(cross_domain_center_distance(a, a).item() == 0.0);
  CHECK(cross_domain_center_distance(a, b).item() == 2.5);

  ClassCenters only0{a.centers, {true, false}};
  ClassCenters only1{b.centers, {false, true}};
  std::vector<std::string> warnings;
  auto previous = set_warning_sink([&](const std::string& m) { warnings.push_back(m); });
  CHECK(cross_domain_center_distance(only0, only1).item() == 0.0);
  set_warning_sink(previous);
  CHECK(warnings.size() == 1);

  ClassCenters partial{b.centers, {true, false}};
  CHECK(cross_domain_center_distance(a, partial).item() == 5.0);
}

TEST_CASE("condition invariant loss") {
  Tensor pts = Tensor::from({2, 2}, {0, 0, 3, 4});
  std::vector<int> one_class{0, 0};
  CHECK(condition_invariant_loss({pts, pts}, {one_class, one_class}, 0.1, 2).item() == 10.0);

  Tensor coincident = Tensor::from({2, 2}, {1, 1, 1, 1});
  std::vector<int> per_class{0, 1};
  CHECK(condition_invariant_loss({coincident, coincident}, {per_class, per_class}, 0.1, 2).item() == 0.0);

  std::mt19937_64 rng(3);
  std::vector<Tensor> feats;
  std::vector<std::vector<int>> labels;
  for (int n = 0; n < 3; ++n) {
    feats.push_back(random_tensor({6, 3}, rng, false));
    labels.push_back(random_labels(6, 3, rng));
  }
  const double base = condition_invariant_loss(feats, labels, 0.1, 3).item();
  const double perm = condition_invariant_loss({feats[2], feats[0], feats[1]}, {labels[2], labels[0], labels[1]},
                                               0.1, 3)
                          .item();
  CHECK(std::abs(base - perm) < 1e-12);

  auto terms = condition_invariant_terms(feats, labels, 0.1, 3);
  double manual = 0.0;
  for (std::size_t n = 0; n < 3; ++n) manual += terms.delta_c[n] - 0.1 * terms.delta_s[n];
  for (double d : terms.pair_d) manual += d;
  CHECK(terms.pair_d.size() == 3);
  CHECK(std::abs(manual - base) < 1e-12);

  CHECK(condition_invariant_loss(feats, labels, 0.1, 3, 1e6).item() == 1e6);
  CHECK_THROWS_AS(condition_invariant_loss({pts}, {one_class}, 0.1, 2), ConfigError);
  CHECK_THROWS_AS(condition_invariant_loss({pts, pts}, {one_class, one_class}, 0.0, 2), ConfigError);
}

TEST_CASE("pulling same-class centers together lowers the condition loss") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor a = random_tensor({6, 2}, rng, false);
    Tensor b = random_tensor({6, 2}, rng, false, 1, 3);
    std::vector<int> y{0, 0, 0, 1, 1, 1};
    auto ca = class_centers(a, y, 2);
    auto cb = class_centers(b, y, 2);
    const double before = condition_invariant_loss({a, b}, {y, y}, 0.1, 2).item();
    // translate each class of domain b rigidly toward domain a's center
    std::vector<double> moved = b.to_vector();
    for (std::size_t i = 0; i < 6; ++i) {
      const std::size_t c = static_cast<std::size_t>(y[i]);
      for (std::size_t k = 0; k < 2; ++k) moved[i * 2 + k] -= 0.1 * (cb.centers.at({c, k}) - ca.centers.at({c, k}));
    }
    Tensor b2 = Tensor::from({6, 2}, moved);
    const double after = condition_invariant_loss({a, b2}, {y, y}, 0.1, 2).item();
    // δ_c unchanged by a rigid per-class shift; δ_s may move, so compare D alone too
    auto t0 = condition_invariant_terms({a, b}, {y, y}, 0.1, 2);
    auto t1 = condition_invariant_terms({a, b2}, {y, y}, 0.1, 2);
    CHECK(t1.pair_d[0] < t0.pair_d[0]);
    CHECK(std::abs(t1.delta_c[1] - t0.delta_c[1]) < 1e-12);
    CHECK(after - before == doctest::Approx((t1.pair_d[0] - t0.pair_d[0]) - 0.1 * (t1.delta_s[1] - t0.delta_s[1])));
  }
}

TEST_CASE("classification losses") {
  std::vector<int> y{0, 3};
  Tensor uniform = Tensor::zeros({2, 4});
  CHECK(classification_loss(uniform, y).item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  CHECK(domain_classification_loss(Tensor::zeros({3, 3}), std::vector<int>{0, 1, 2}).item() ==
        doctest::Approx(std::log(3.0)).epsilon(1e-14));

  double prev = 1e9;
  for (double margin : {0.0, 1.0, 5.0, 20.0, 100.0}) {
    Tensor l = Tensor::from({1, 3}, {margin, 0, 0});
    const double v = classification_loss(l, std::vector<int>{0}).item();
    CHECK(v < prev);
    prev = v;
  }
  CHECK(prev < 1e-40);

  std::mt19937_64 rng(5);
  Tensor logits = random_tensor({6, 4}, rng, false, -5, 5);
  auto labels = random_labels(6, 4, rng);
  double want = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    double z = 0.0;
    for (std::size_t k = 0; k < 4; ++k) z += std::exp(logits.at({i, k}));
    want -= std::log(std::exp(logits.at({i, static_cast<std::size_t>(labels[i])})) / z);
  }
  want /= 6.0;
  CHECK(std::abs(classification_loss(logits, labels).item() - want) < 1e-12);
  CHECK(std::abs(domain_classification_loss(logits, labels).item() - want) < 1e-12);
  CHECK_THROWS_AS(classification_loss(logits, std::vector<int>{0, 1}), DimensionError);
  CHECK_THROWS_AS(classification_loss(logits, std::vector<int>{0, 1, 2, 3, 4, 0}), ContractError);

  Tensor big = Tensor::from({1, 2}, {1000.0, 0.0});
  CHECK(std::isfinite(classification_loss(big, std::vector<int>{1}).item()));
}

TEST_CASE("loss gradients match finite differences") {
  for (std::uint64_t seed = 10; seed < 15; ++seed) {
    CAPTURE(seed);
    std::mt19937_64 rng(seed);
    Tensor a = random_tensor({5, 3}, rng);
    Tensor b = random_tensor({4, 3}, rng, true, 0, 2);
    Tensor c = random_tensor({6, 3}, rng, true, -2, 0);
    auto ya = random_labels(5, 3, rng);
    auto yb = random_labels(4, 3, rng);
    auto yc = random_labels(6, 3, rng);

    // the median bandwidth is a constant of the loss, so freeze it at the base point
    KernelSpec frozen{KernelKind::rbf, false, median_pairwise_distance(concat({a, b, c}, 0))};
    auto mir = [&](const std::vector<Tensor>& in) { return margin_invariant_loss(in, frozen); };
    CHECK(gradcheck(mir, {a, b, c}).rel_error < 1e-4);
    auto mir_lin = [](const std::vector<Tensor>& in) { return margin_invariant_loss(in, kLinear); };
    CHECK(gradcheck(mir_lin, {a, b, c}).rel_error < 1e-4);
    auto cir = [&](const std::vector<Tensor>& in) {
      return condition_invariant_loss(in, {ya, yb, yc}, 0.1, 3);
    };
    CHECK(gradcheck(cir, {a, b, c}).rel_error < 1e-4);
    auto clc = [&](const std::vector<Tensor>& in) { return classification_loss(in[0], ya); };
    CHECK(gradcheck(clc, {a}).rel_error < 1e-4);
    auto dom = [&](const std::vector<Tensor>& in) { return domain_classification_loss(in[0], yc); };
    CHECK(gradcheck(dom, {c}).rel_error < 1e-4);
  }
}

TEST_CASE("call counters track invariance-loss evaluations") {
  reset_loss_call_counts();
  Tensor a = Tensor::from({2, 2}, {0, 0, 1, 1});
  std::vector<int> y{0, 1};
  classification_loss(a, y);
  auto c = loss_call_counts();
  CHECK(c.mmd == 0);
  CHECK(c.margin_invariant == 0);
  margin_invariant_loss({a, a}, KernelSpec{});
  condition_invariant_loss({a, a}, {y, y}, 0.1, 2);
  c = loss_call_counts();
  CHECK(c.margin_invariant == 1);
  CHECK(c.mmd == 2);
  CHECK(c.condition_invariant == 1);
  CHECK(c.class_centers == 2);
}
