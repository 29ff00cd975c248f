#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "support/gradcheck.hpp"
#include "tido/prototypes.hpp"
#include "tido/rng.hpp"

namespace tido {
namespace {

PrototypeSet single(ClassId c, std::vector<double> mean, std::vector<double> var,
                    std::size_t count = 10) {
  PrototypeSet ps(mean.size());
  ps.insert({c, std::move(mean), std::move(var), count});
  return ps;
}

TEST(FitPrototypes, MeanAndPopulationVariance) {
  Tensor x({4, 1}, {1.0, 3.0, 10.0, 14.0});
  const std::vector<ClassId> y{0, 0, 1, 1};
  const auto ps = fit_prototypes(x, y);
  EXPECT_DOUBLE_EQ(ps.at(0).mean[0], 2.0);
  EXPECT_DOUBLE_EQ(ps.at(0).var[0], 1.0);
  EXPECT_DOUBLE_EQ(ps.at(1).mean[0], 12.0);
  EXPECT_DOUBLE_EQ(ps.at(1).var[0], 4.0);
  EXPECT_EQ(ps.at(1).count, 2u);
}

TEST(FitPrototypes, SingleSampleGetsFlooredVariance) {
  Tensor x({1, 2}, {5.0, -1.0});
  const std::vector<ClassId> y{3};
  const auto ps = fit_prototypes(x, y);
  EXPECT_EQ(ps.at(3).var, (std::vector<double>{kVarianceFloor, kVarianceFloor}));
}

TEST(FitPrototypes, ReportsOmittedClasses) {
  Tensor x({2, 1}, {0.0, 1.0});
  const std::vector<ClassId> y{0, 0};
  const std::vector<ClassId> expected{0, 1};
  const auto fit = fit_prototypes(x, y, expected);
  EXPECT_EQ(fit.omitted, std::vector<ClassId>{1});
}

TEST(FitPrototypes, RejectsEmptyAndNonFinite) {
  EXPECT_THROW(fit_prototypes(Tensor::matrix(0, 2), std::vector<ClassId>{}), InvalidArgument);
  Tensor x({1, 1}, {std::nan("")});
  EXPECT_THROW(fit_prototypes(x, std::vector<ClassId>{0}), InvalidArgument);
}

TEST(SampleProxy, RoundTripMomentsWithinTenth) {
  Rng rng(99);
  Tensor x = Tensor::matrix(4000, 3);
  std::vector<ClassId> y(4000);
  for (std::size_t r = 0; r < 4000; ++r) {
    y[r] = static_cast<ClassId>(r % 2);
    x(r, 0) = rng.normal(y[r] ? 2.0 : -1.0, 0.5);
    x(r, 1) = rng.normal(0.5, 1.5);
    x(r, 2) = rng.normal(-3.0, 0.2);
  }
  const auto ps = fit_prototypes(x, y);
  const auto batch = sample_proxy_batch(ps, 5000, 123);
  const auto refit = fit_prototypes(batch.x, batch.labels);
  for (ClassId c : {0, 1}) {
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_NEAR(refit.at(c).mean[j], ps.at(c).mean[j], 0.1);
      EXPECT_NEAR(std::sqrt(refit.at(c).var[j]), std::sqrt(ps.at(c).var[j]), 0.1);
    }
  }
}

TEST(SampleProxy, DeterministicPerSeed) {
  const auto ps = single(0, {0.0, 1.0}, {1.0, 2.0});
  EXPECT_EQ(sample_proxy(ps, 0, 20, 5), sample_proxy(ps, 0, 20, 5));
  EXPECT_NE(sample_proxy(ps, 0, 20, 5), sample_proxy(ps, 0, 20, 6));
}

TEST(SampleProxy, FlooredVarianceStaysAtMean) {
  const auto ps = single(0, {1.0, 2.0}, {1e-6, 1e-6});
  const Tensor s = sample_proxy(ps, 0, 1000, 1);
  for (std::size_t r = 0; r < s.rows(); ++r) {
    EXPECT_NEAR(s(r, 0), 1.0, 0.01);
    EXPECT_NEAR(s(r, 1), 2.0, 0.01);
  }
}

TEST(IsOod, ExactBoundaryIsInside) {
  const auto ps = single(0, {0.0, 0.0}, {4.0, 1.0});
  EXPECT_FALSE(is_ood(ps, std::vector<double>{6.0, 0.0}, 3.0).ood);  // 3 sigma
  EXPECT_TRUE(is_ood(ps, std::vector<double>{8.0, 0.0}, 3.0).ood);   // 4 sigma
  EXPECT_TRUE(is_ood(ps, std::vector<double>{0.0, -4.0}, 3.0).ood);
}

TEST(IsOod, NeedsEveryClassToReject) {
  PrototypeSet ps(1);
  ps.insert({0, {0.0}, {1.0}, 5});
  ps.insert({1, {10.0}, {1.0}, 5});
  EXPECT_FALSE(is_ood(ps, std::vector<double>{9.0}).ood);
  EXPECT_TRUE(is_ood(ps, std::vector<double>{5.0}).ood);
  const auto v = is_ood(ps, std::vector<double>{5.0});
  EXPECT_DOUBLE_EQ(v.normalized_distance.at(0), 5.0);
}

TEST(IsOod, MonotoneInK) {
  Rng rng(4);
  const auto ps = testing::random_prototypes(rng, {0, 1, 2}, 3);
  for (int i = 0; i < 2000; ++i) {
    std::vector<double> u{rng.normal(0, 4), rng.normal(0, 4), rng.normal(0, 4)};
    bool prev_inside = false;
    for (double k : {1.0, 2.0, 3.0, 4.0, 5.0}) {
      const bool inside = !is_ood(ps, u, k).ood;
      if (prev_inside) EXPECT_TRUE(inside);
      prev_inside = inside;
    }
  }
}

// Per-dimension rule: the false-OOD rate of a d-dim Gaussian draw is
// 1 - P(|z| <= 3)^d, about 0.54% at d = 2 and 0.81% at d = 3.
TEST(IsOod, ProxySamplesRarelyFlagged) {
  for (std::size_t d : {2u, 3u}) {
    Rng rng(d);
    const auto ps = testing::random_prototypes(rng, {0}, d);
    const Tensor s = sample_proxy(ps, 0, 10000, 17);
    std::size_t flagged = 0;
    for (std::size_t r = 0; r < s.rows(); ++r) flagged += is_ood(ps, s.row(r), 3.0).ood;
    EXPECT_LT(static_cast<double>(flagged) / 10000.0, 0.01) << "d=" << d;
  }
}

TEST(LogDensity, MatchesClosedForm) {
  const auto ps = single(0, {1.0}, {4.0});
  const double expect = -0.5 * std::log(2 * std::numbers::pi * 4.0) - 0.5 * 4.0 / 4.0;
  EXPECT_NEAR(log_density(ps.at(0), std::vector<double>{3.0}), expect, 1e-14);
}

TEST(Separability, LossIsNegativeLogPosterior) {
  PrototypeSet ps(1);
  ps.insert({0, {0.0}, {1.0}, 5});
  ps.insert({1, {2.0}, {1.0}, 5});
  const std::vector<double> u{0.5};
  const double l0 = log_density(ps.at(0), u), l1 = log_density(ps.at(1), u);
  const double expect = -(l0 - std::log(std::exp(l0) + std::exp(l1)));
  EXPECT_NEAR(class_separability_loss(ps, u, 0).loss, expect, 1e-14);
}

TEST(Separability, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ps = testing::random_prototypes(rng, {0, 1, 2}, 3);
    Tensor u = testing::random_matrix(rng, 4, 3, 1.5);
    const std::vector<ClassId> y{0, 1, 2, 1};
    const auto lg = separability_loss_batch(ps, u, y);
    testing::GradStats st;
    testing::check_tensor(u, lg.grad, [&] { return separability_loss_batch(ps, u, y).loss; },
                          "u", st);
    EXPECT_EQ(st.failed, 0u) << st.first_failure;
  }
}

TEST(Separability, UnknownClassThrows) {
  const auto ps = single(0, {0.0}, {1.0});
  EXPECT_THROW(class_separability_loss(ps, std::vector<double>{0.0}, 7), InvalidArgument);
}

TEST(Merge, CountWeightedMomentsMatchPooledFit) {
  Tensor a({3, 1}, {1.0, 2.0, 6.0});
  Tensor b({2, 1}, {4.0, 8.0});
  const std::vector<ClassId> ya(3, 0), yb(2, 0);
  const auto merged = merge_prototypes(fit_prototypes(a, ya), fit_prototypes(b, yb));
  Tensor all({5, 1}, {1.0, 2.0, 6.0, 4.0, 8.0});
  const auto pooled = fit_prototypes(all, std::vector<ClassId>(5, 0));
  EXPECT_NEAR(merged.at(0).mean[0], pooled.at(0).mean[0], 1e-12);
  EXPECT_NEAR(merged.at(0).var[0], pooled.at(0).var[0], 1e-12);
  EXPECT_EQ(merged.at(0).count, 5u);
}

TEST(Merge, DisjointClassesAreCopied) {
  const auto a = single(0, {0.0}, {1.0});
  const auto b = single(1, {5.0}, {2.0});
  const auto m = merge_prototypes(a, b);
  EXPECT_EQ(m.classes(), (std::vector<ClassId>{0, 1}));
  EXPECT_EQ(m.at(1), b.at(1));
}

TEST(PrototypeSet, DuplicateAndDimMismatchThrow) {
  PrototypeSet ps(2);
  ps.insert({0, {0.0, 0.0}, {1.0, 1.0}, 1});
  EXPECT_THROW(ps.insert({0, {0.0, 0.0}, {1.0, 1.0}, 1}), InvalidArgument);
  EXPECT_THROW(ps.insert({1, {0.0}, {1.0}, 1}), InvalidArgument);
}

TEST(PrototypeJson, RoundTripIsExact) {
  Rng rng(12);
  const auto ps = testing::random_prototypes(rng, {0, 3, 9}, 4);
  EXPECT_EQ(prototypes_from_json(to_json(ps)), ps);
  const auto path = std::filesystem::temp_directory_path() / "tido_proto_rt.json";
  save_prototypes(ps, path);
  EXPECT_EQ(load_prototypes(path), ps);
  std::filesystem::remove(path);
}

TEST(PrototypeJson, VersionChecked) {
  auto j = to_json(single(0, {0.0}, {1.0}));
  j["version"] = 99;
  EXPECT_THROW(prototypes_from_json(j), InvalidArgument);
  j["version"] = 1;
  j["format"] = "other";
  EXPECT_THROW(prototypes_from_json(j), InvalidArgument);
}

}  // namespace
}  // namespace tido
