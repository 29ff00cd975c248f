#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "support/gradcheck.hpp"
#include "tido/datagen.hpp"
#include "tido/foresight.hpp"
#include "tido/incremental.hpp"
#include "tido/metrics.hpp"

namespace tido {
namespace {

GuideSet make_guides(std::map<ClassId, std::vector<double>> g) {
  GuideSet out;
  for (const auto& [c, v] : g) out.shared.insert(c);
  out.guides = std::move(g);
  return out;
}

// 2-D identity state: f_t, f_e, f_d identity, g_s linear with the given
// weights, no private head.
IncrementState identity_state(std::size_t classes = 2) {
  IncrementState s;
  for (std::size_t c = 0; c < classes; ++c) s.source.classes.push_back(static_cast<ClassId>(c));
  s.source.f_s = Mlp::identity(2);
  s.source.g_s = Mlp({2, classes + 1});
  s.target.f_t = Mlp::identity(2);
  s.ae = {Mlp::identity(2), Mlp::identity(2)};
  s.disc.d = Mlp({2, 2});
  s.prototypes = PrototypeSet(2);
  for (std::size_t c = 0; c < classes; ++c) {
    s.prototypes.insert({static_cast<ClassId>(c),
                         {static_cast<double>(c), -static_cast<double>(c)},
                         {1.0, 1.0},
                         10});
  }
  s.registry.steps.push_back({s.source.classes, {}});
  return s;
}

// --- pseudo_label ----------------------------------------------------------

TEST(PseudoLabel, ExactGuideGivesZeroDistance) {
  const auto g = make_guides({{3, {1.0, 1.0}}, {7, {2.5, -1.0}}});
  const auto pl = pseudo_label(std::vector<double>{2.5, -1.0}, g);
  EXPECT_EQ(pl.label, 7u);
  EXPECT_EQ(pl.distance, 0.0);
}

TEST(PseudoLabel, NearestOfTwo) {
  const auto g = make_guides({{0, {0.0, 0.0}}, {1, {10.0, 0.0}}});
  const auto pl = pseudo_label(std::vector<double>{1.0, 0.0}, g);
  EXPECT_EQ(pl.label, 0u);
  EXPECT_DOUBLE_EQ(pl.distance, 1.0);
}

TEST(PseudoLabel, TiesGoToLowestClassId) {
  const auto g = make_guides({{9, {1.0, 0.0}}, {4, {-1.0, 0.0}}, {6, {0.0, 1.0}}});
  EXPECT_EQ(pseudo_label(std::vector<double>{0.0, 0.0}, g).label, 4u);
}

TEST(PseudoLabel, EmptyGuidesIsInvalidState) {
  EXPECT_THROW(pseudo_label(std::vector<double>{0.0}, GuideSet{}), InvalidState);
}

TEST(PseudoLabel, DimMismatchThrows) {
  const auto g = make_guides({{0, {0.0, 0.0}}});
  EXPECT_THROW(pseudo_label(std::vector<double>{0.0}, g), InvalidArgument);
}

TEST(PseudoLabel, MatchesBruteForceOnTenThousandCases) {
  Rng rng(2024);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t dim = 1 + rng.index(4);
    const std::size_t n = 1 + rng.index(50);
    // Small integer grids make exact ties common.
    const bool integer = rng.uniform() < 0.5;
    auto draw = [&] { return integer ? std::floor(rng.uniform(-3.0, 3.0)) : rng.normal(); };
    std::map<ClassId, std::vector<double>> guides;
    while (guides.size() < n) {
      std::vector<double> g(dim);
      for (auto& x : g) x = draw();
      guides[static_cast<ClassId>(rng.index(200))] = g;
    }
    std::vector<double> v(dim);
    for (auto& x : v) x = draw();

    ClassId best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto& [c, g] : guides) {
      double d = 0.0;
      for (std::size_t j = 0; j < dim; ++j) d += (v[j] - g[j]) * (v[j] - g[j]);
      if (d < best_d || (d == best_d && c < best)) {
        best = c;
        best_d = d;
      }
    }
    const auto pl = pseudo_label(v, make_guides(guides));
    if (pl.label != best || pl.distance != std::sqrt(best_d)) ++mismatches;
  }
  EXPECT_EQ(mismatches, 0u);
}

// --- select_confident ------------------------------------------------------

TEST(SelectConfident, FullFractionKeepsEverything) {
  std::vector<LabeledSample> l{{0, 1, 0.5}, {1, 1, 0.2}, {2, 3, 9.0}};
  const auto cs = select_confident(l, 1.0);
  EXPECT_EQ(cs.size(), 3u);
  EXPECT_EQ(cs.by_class.at(1).front().sample, 1u);
}

TEST(SelectConfident, TenthOfTwentyKeepsTwoNearest) {
  Rng rng(5);
  std::vector<LabeledSample> l;
  for (std::size_t i = 0; i < 20; ++i) l.push_back({i, 4, rng.uniform(0.0, 10.0)});
  auto sorted = l;
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.distance < b.distance; });
  const auto cs = select_confident(l, 0.1);
  ASSERT_EQ(cs.by_class.at(4).size(), 2u);
  EXPECT_EQ(cs.by_class.at(4)[0].sample, sorted[0].sample);
  EXPECT_EQ(cs.by_class.at(4)[1].sample, sorted[1].sample);
}

TEST(SelectConfident, AbsentClassIsAbsent) {
  std::vector<LabeledSample> l{{0, 1, 0.5}};
  EXPECT_EQ(select_confident(l, 0.5).by_class.count(2), 0u);
}

TEST(SelectConfident, RejectsBadFraction) {
  std::vector<LabeledSample> l{{0, 1, 0.5}};
  EXPECT_THROW(select_confident(l, 0.0), InvalidArgument);
  EXPECT_THROW(select_confident(l, 1.5), InvalidArgument);
}

TEST(SelectConfident, QuotaIsCeiling) {
  EXPECT_EQ(confident_quota(0.5, 3), 2u);
  EXPECT_EQ(confident_quota(0.1, 20), 2u);
  EXPECT_EQ(confident_quota(0.3, 10), 3u);
  EXPECT_EQ(confident_quota(0.01, 1), 1u);
  EXPECT_EQ(confident_quota(1.0, 0), 0u);
}

TEST(SelectConfident, MatchesSortOracle) {
  Rng rng(77);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = rng.index(60);
    const double frac = rng.uniform(0.01, 1.0);
    std::vector<LabeledSample> l;
    for (std::size_t i = 0; i < n; ++i) {
      l.push_back({i, static_cast<ClassId>(rng.index(5)),
                   std::floor(rng.uniform(0.0, 8.0))});  // ties on purpose
    }
    const auto cs = select_confident(l, frac);
    for (ClassId c = 0; c < 5; ++c) {
      std::vector<LabeledSample> bucket;
      for (const auto& x : l) {
        if (x.label == c) bucket.push_back(x);
      }
      if (bucket.empty()) {
        EXPECT_EQ(cs.by_class.count(c), 0u);
        continue;
      }
      std::stable_sort(bucket.begin(), bucket.end(),
                       [](const auto& a, const auto& b) { return a.distance < b.distance; });
      const auto keep = static_cast<std::size_t>(
          std::ceil(frac * static_cast<double>(bucket.size()) - 1e-9));
      const auto& got = cs.by_class.at(c);
      ASSERT_EQ(got.size(), keep);
      for (std::size_t i = 0; i < keep; ++i) {
        EXPECT_EQ(got[i].sample, bucket[i].sample);
        EXPECT_EQ(got[i].distance, bucket[i].distance);
      }
    }
  }
}

// --- init_guides -----------------------------------------------------------

TEST(InitGuides, NoPrivateClassesGivesImageOfAllMeans) {
  Rng rng(3);
  auto s = identity_state(3);
  s.ae.f_e = testing::random_mlp(rng, {2, 4, 2});
  const auto g = init_guides(s, {}, {});
  ASSERT_EQ(g.size(), 3u);
  EXPECT_TRUE(g.private_classes.empty());
  for (const auto& [c, p] : s.prototypes) {
    EXPECT_EQ(g.guides.at(c), s.ae.f_e.forward_one(p.mean));
    EXPECT_TRUE(g.shared.count(c));
  }
}

TEST(InitGuides, IdentityProjectionKeepsMeans) {
  const auto s = identity_state(2);
  const auto g = init_guides(s, {}, {});
  for (const auto& [c, p] : s.prototypes) EXPECT_EQ(g.guides.at(c), p.mean);
}

TEST(InitGuides, PrivateGuideIsTargetEncoding) {
  Rng rng(4);
  auto s = identity_state(2);
  s.target.f_t = testing::random_mlp(rng, {2, 3, 2});
  const std::map<ClassId, std::vector<double>> shot{{5, {0.3, -0.7}}};
  const std::vector<ClassId> priv{5};
  const auto g = init_guides(s, shot, priv, std::vector<ClassId>{1});
  EXPECT_EQ(g.size(), 2u);
  EXPECT_EQ(g.guides.at(5), s.target.f_t.forward_one(shot.at(5)));
  EXPECT_EQ(g.shared, (std::set<ClassId>{1}));
  EXPECT_EQ(g.private_classes, (std::set<ClassId>{5}));
}

TEST(InitGuides, MissingOneShotNamesTheClass) {
  const auto s = identity_state(2);
  const std::vector<ClassId> priv{8};
  try {
    init_guides(s, {}, priv);
    FAIL() << "expected InvalidArgument";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("8"), std::string::npos);
  }
}

TEST(InitGuides, RecomputedAfterEncoderUpdate) {
  Rng rng(6);
  auto s = identity_state(2);
  s.ae.f_e = testing::random_mlp(rng, {2, 3, 2});
  const auto before = init_guides(s, {}, {});
  Gradients g = s.ae.f_e.zero_gradients();
  for (auto& t : g) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 1.0;
  }
  auto opt = AdamState::with_rate(1e-2);
  adam_step({{&s.ae.f_e, &g}}, opt);
  const auto after = init_guides(s, {}, {});
  EXPECT_NE(before.guides.at(0), after.guides.at(0));
}

// --- joint_predict ---------------------------------------------------------

TEST(JointPredict, ShapeAndNormalization) {
  Rng rng(8);
  for (int i = 0; i < 10; ++i) {
    const auto s = testing::random_state(rng);
    const Tensor x = testing::random_matrix(rng, 5, s.target.f_t.input_dim());
    const auto p = joint_predict(s, x);
    ASSERT_EQ(p.probs.cols(), s.source.classes.size() + s.target.classes.size());
    for (std::size_t r = 0; r < 5; ++r) {
      const auto row = p.probs.row(r);
      EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-9);
    }
  }
}

TEST(JointPredict, NoPrivateHeadReducesToSourceArgmax) {
  Rng rng(9);
  auto s = identity_state(3);
  s.source.g_s = testing::random_mlp(rng, {2, 4});
  const Tensor x = testing::random_matrix(rng, 50, 2, 2.0);
  const auto pred = joint_predict(s, x).predicted;
  EXPECT_EQ(pred, source_predict(s.source, x));
}

TEST(JointPredict, MatchesManualComposition) {
  // f_t: y = 2x (linear), f_d: identity, g_s: 1x3 (two classes + negative),
  // g_t: 1x1.
  IncrementState s;
  s.source.classes = {0, 1};
  s.source.f_s = Mlp::identity(1);
  s.source.g_s = Mlp({1, 3});
  {
    auto& p = s.source.g_s.mutable_params();
    p[0][0] = 1.0;
    p[0][1] = -1.0;
    p[0][2] = 50.0;  // negative class, must be ignored
    p[1][0] = 0.1;
  }
  s.target.f_t = Mlp({1, 1});
  s.target.f_t.mutable_params()[0][0] = 2.0;
  s.target.g_t = Mlp({1, 1});
  s.target.g_t.mutable_params()[0][0] = 0.5;
  s.target.g_t.mutable_params()[1][0] = -0.2;
  s.target.classes = {2};
  s.ae = {Mlp::identity(1), Mlp::identity(1)};

  const double x = 0.7;
  const double v = 2.0 * x;
  const std::vector<double> z{v + 0.1, -v, 0.5 * v - 0.2};
  const double zmax = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double zi : z) total += std::exp(zi - zmax);
  const auto p = joint_predict(s, Tensor({1, 1}, {x}));
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(p.probs(0, k), std::exp(z[k] - zmax) / total, 1e-12);
  }
  EXPECT_EQ(p.predicted[0], 0u);
}

TEST(JointPredict, DimMismatchThrows) {
  const auto s = identity_state();
  EXPECT_THROW(joint_predict(s, Tensor::matrix(1, 3)), InvalidArgument);
}

// --- losses ----------------------------------------------------------------

TEST(LossR1, LargeGapNearZero) {
  auto s = identity_state(2);
  auto& p = s.source.g_s.mutable_params();
  p[1][0] = 40.0;  // class 0 logit leads by 40 everywhere
  const LabeledBatch b{Tensor({2, 2}, {0.1, 0.2, -0.3, 0.4}), {0, 0}};
  EXPECT_LT(loss_r1(s, b, 2.0).loss, 1e-6);
}

TEST(LossR1, UniformLogitsGiveLnK) {
  const auto s = identity_state(3);
  const LabeledBatch b{Tensor({2, 2}, {0.1, 0.2, -0.3, 0.4}), {0, 2}};
  for (double tau : {1.0, 2.0, 5.0}) EXPECT_NEAR(loss_r1(s, b, tau).loss, std::log(3.0), 1e-12);
}

TEST(LossR1, ClassOutsideRegistryThrows) {
  const auto s = identity_state(2);
  const LabeledBatch b{Tensor({1, 2}, {0.1, 0.2}), {9}};
  EXPECT_THROW(loss_r1(s, b, 2.0), InvalidArgument);
}

TEST(LossR2, IdentityAutoencoderIsZero) {
  const auto s = identity_state(2);
  const Tensor u({3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(loss_r2(s, u, u).loss, 0.0);
}

TEST(LossR2, ProxyTermMatchesManualMse) {
  auto s = identity_state(2);
  // f_e(u) = diag(2, 1) u, f_d(v) = v + (1, 0)
  s.ae.f_e = Mlp({2, 2});
  s.ae.f_e.mutable_params()[0][0] = 2.0;
  s.ae.f_e.mutable_params()[0][3] = 1.0;
  s.ae.f_d = Mlp::identity(2);
  s.ae.f_d.mutable_params()[1][0] = 1.0;
  const Tensor u({2, 2}, {1.0, 0.0, -1.0, 2.0});
  // reconstructions (3, 0) and (-1, 2): squared errors 4 + 0 + 0 + 0
  EXPECT_DOUBLE_EQ(loss_r2(s, u, Tensor::matrix(0, 2)).loss, 4.0 / 4.0);
}

TEST(LossC, EmptySetIsZeroWithFlag) {
  const auto s = identity_state();
  const auto l = loss_c(s, Tensor({1, 2}, {0.0, 0.0}), ConfidentSet{});
  EXPECT_EQ(l.loss, 0.0);
  EXPECT_TRUE(l.empty);
}

TEST(LossC, PerfectPredictionsNearZero) {
  auto s = identity_state(2);
  auto& w = s.source.g_s.mutable_params()[0];  // (out x in)
  w(0, 0) = 100.0;   // class 0 favoured for x0 > 0
  w(1, 0) = -100.0;  // class 1 favoured for x0 < 0
  const Tensor x({2, 2}, {1.0, 0.0, -1.0, 0.0});
  ConfidentSet cs;
  cs.by_class[0].push_back({0, {}, 0.0});
  cs.by_class[1].push_back({1, {}, 0.0});
  EXPECT_LT(loss_c(s, x, cs).loss, 1e-6);
}

TEST(LossD, ChanceDiscriminatorGivesLn2) {
  const auto s = identity_state();
  const Tensor a({2, 2}, {0.1, 0.2, 0.3, 0.4});
  const auto l = loss_d(s, a, a);
  EXPECT_NEAR(l.discriminator, std::log(2.0), 1e-12);
  EXPECT_NEAR(l.confusion, -std::log(2.0), 1e-12);
}

TEST(LossD, SeparatingDiscriminatorNearZero) {
  auto s = identity_state();
  s.disc.d = Mlp({2, 2});
  auto& w = s.disc.d.mutable_params()[0];
  w(0, 0) = -100.0;  // source on negative x0
  w(1, 0) = 100.0;
  const Tensor src({2, 2}, {-1.0, 0.0, -2.0, 0.5});
  const Tensor tgt({2, 2}, {1.0, 0.0, 2.0, -0.5});
  const auto l = loss_d(s, src, tgt);
  EXPECT_LT(l.discriminator, 1e-6);
}

TEST(LossD, EmptyBatchThrows) {
  const auto s = identity_state();
  EXPECT_THROW(loss_d(s, Tensor::matrix(0, 2), Tensor({1, 2}, {0.0, 0.0})), InvalidArgument);
}

TEST(Stage2Losses, GradientsMatchFiniteDifferences) {
  testing::GradStats total;
  for (std::uint64_t seed = 0; seed < 25; ++seed) total.merge(testing::check_stage2_losses(seed));
  EXPECT_GT(total.checked, 1000u);
  EXPECT_EQ(total.failed, 0u) << total.first_failure;
}

// --- update_gradients ------------------------------------------------------

EpochLosses zero_losses(const IncrementState& s) {
  EpochLosses l;
  l.c.grads = StageGrads::zeros(s);
  l.r1.grads = StageGrads::zeros(s);
  l.r2.grads = StageGrads::zeros(s);
  l.d.disc_grads = StageGrads::zeros(s);
  l.d.conf_grads = StageGrads::zeros(s);
  return l;
}

TEST(UpdateGradients, ZeroGradientsLeaveWeightsUnchanged) {
  Rng rng(11);
  auto s = testing::random_state(rng);
  const auto before = s;
  auto opt = StageOptimizers::from(IncrementConfig{});
  const auto rep = update_gradients(s, zero_losses(s), opt);
  EXPECT_TRUE(rep.skipped.empty());
  EXPECT_EQ(s, before);
  EXPECT_EQ(opt.classify.step_count, 1u);
  EXPECT_EQ(opt.reconstruct.step_count, 1u);
}

TEST(UpdateGradients, ReversalStepIncreasesFrozenDiscriminatorLoss) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    auto s = testing::random_state(rng);
    const Tensor proxy = testing::random_matrix(rng, 16, s.source.latent_dim(), 1.5);
    const Tensor target = testing::random_matrix(rng, 16, s.target.f_t.input_dim());
    const auto d0 = loss_d(s, proxy, target);
    auto l = zero_losses(s);
    l.d.conf_grads = d0.conf_grads;
    IncrementConfig cfg;
    cfg.lr_confusion = 1e-3;
    auto opt = StageOptimizers::from(cfg);
    update_gradients(s, l, opt, 1.0);
    EXPECT_GT(loss_d(s, proxy, target).discriminator, d0.discriminator) << "seed " << seed;
  }
}

TEST(UpdateGradients, NonFiniteGroupSkipped) {
  Rng rng(12);
  auto s = testing::random_state(rng);
  const auto before = s;
  auto l = zero_losses(s);
  l.d.disc_grads.d[0][0] = std::numeric_limits<double>::quiet_NaN();
  auto opt = StageOptimizers::from(IncrementConfig{});
  const auto rep = update_gradients(s, l, opt);
  EXPECT_EQ(rep.skipped, std::vector<std::string>{"discriminate"});
  EXPECT_EQ(s.disc, before.disc);
}

TEST(UpdateGradients, Deterministic) {
  auto run = [] {
    Rng rng(13);
    auto s = testing::random_state(rng);
    const auto proxy = testing::random_proxy(rng, s, 6);
    const Tensor target = testing::random_matrix(rng, 6, s.target.f_t.input_dim());
    const auto conf = testing::random_confident(rng, s, 6);
    EpochLosses l{loss_c(s, target, conf), loss_d(s, proxy.x, target), loss_r1(s, proxy, 2.0),
                  loss_r2(s, proxy.x, target)};
    auto opt = StageOptimizers::from(IncrementConfig{});
    update_gradients(s, l, opt);
    return s;
  };
  EXPECT_EQ(run(), run());
}

// --- pretrain_autoencoder --------------------------------------------------

PrototypeSet two_d_prototypes() {
  PrototypeSet ps(2);
  ps.insert({0, {-1.0, 0.5}, {0.3, 0.2}, 50});
  ps.insert({1, {1.5, -0.5}, {0.2, 0.4}, 50});
  return ps;
}

TEST(PretrainAutoencoder, LinearAutoencoderReachesLowError) {
  Rng rng(14);
  AutoEncoder ae{Mlp::random({2, 2}, rng), Mlp::random({2, 2}, rng)};
  const auto r = pretrain_autoencoder(two_d_prototypes(), ae, 200, 64, 1, 5e-2);
  EXPECT_LT(r.log.back(), 1e-3);
}

TEST(PretrainAutoencoder, ZeroEpochsUnchanged) {
  Rng rng(15);
  AutoEncoder ae{Mlp::random({2, 2}, rng), Mlp::random({2, 2}, rng)};
  EXPECT_EQ(pretrain_autoencoder(two_d_prototypes(), ae, 0, 64, 1).ae, ae);
}

TEST(PretrainAutoencoder, SameSeedBitIdentical) {
  Rng rng(16);
  AutoEncoder ae{Mlp::random({2, 3, 2}, rng), Mlp::random({2, 3, 2}, rng)};
  const auto a = pretrain_autoencoder(two_d_prototypes(), ae, 30, 32, 9);
  const auto b = pretrain_autoencoder(two_d_prototypes(), ae, 30, 32, 9);
  EXPECT_EQ(a.ae, b.ae);
  EXPECT_EQ(a.log, b.log);
}

TEST(PretrainAutoencoder, ReconstructionLogDecreases) {
  Rng rng(17);
  AutoEncoder ae{Mlp::random({2, 2}, rng), Mlp::random({2, 2}, rng)};
  const auto r = pretrain_autoencoder(two_d_prototypes(), ae, 100, 64, 2, 1e-2);
  for (std::size_t i = 1; i < r.log.size(); ++i) {
    EXPECT_LE(r.log[i], r.log[i - 1] + 1e-12) << "epoch " << i;
  }
}

TEST(PretrainAutoencoder, DimMismatchThrows) {
  AutoEncoder ae{Mlp::identity(3), Mlp::identity(3)};
  EXPECT_THROW(pretrain_autoencoder(two_d_prototypes(), ae, 1, 4, 0), InvalidArgument);
}

// --- run_increment ---------------------------------------------------------

struct Fixture {
  std::vector<StreamBundle> stream;
  IncrementState state;
  IncrementConfig icfg;
  ForesightConfig fcfg;
};

Fixture small_fixture(std::uint64_t seed) {
  Fixture f;
  auto spec = standard_stream_spec(seed);
  spec.samples_per_class = 60;
  f.stream = build_stream(standard_schedule(), spec);
  f.fcfg.latent_dim = 4;
  f.fcfg.epochs = 40;
  f.fcfg.seed = seed;
  f.icfg.epochs = 20;
  f.icfg.ae_epochs = 20;
  f.icfg.proxy_per_class = 16;
  f.icfg.seed = seed;
  const auto fr = train_foresight(*f.stream[0].inputs.source, f.fcfg);
  f.state = make_initial_state(fr.model, fr.prototypes, f.icfg);
  return f;
}

TEST(RunIncrement, RegistersPrivateClassesAndWidensHead) {
  auto f = small_fixture(1);
  std::size_t width = 0;
  for (std::size_t t = 0; t < f.stream.size(); ++t) {
    StepInputs in = f.stream[t].inputs;
    in.source.reset();
    auto r = run_increment(f.state, in, f.icfg, f.fcfg);
    ASSERT_TRUE(r.ok) << r.failure;
    f.state = std::move(r.state);
    EXPECT_EQ(f.state.step, t + 1);
    EXPECT_GE(f.state.target.g_t.output_dim(), width);
    width = f.state.target.g_t.output_dim();
    EXPECT_EQ(width, 2 * (t + 1));
    EXPECT_EQ(f.state.registry.steps.back().private_classes,
              f.stream[t].eval.private_classes);
  }
  EXPECT_EQ(f.state.registry.known().size(), 10u);
  // prototypes cover exactly the known classes
  const auto known = f.state.registry.known();
  const auto covered = f.state.prototypes.classes();
  EXPECT_EQ(std::set<ClassId>(covered.begin(), covered.end()), known);
}

TEST(RunIncrement, GuideCoverageEveryEpoch) {
  auto f = small_fixture(2);
  StepInputs in = f.stream[0].inputs;
  in.source.reset();
  std::size_t epochs_seen = 0;
  auto r = run_increment(f.state, in, f.icfg, f.fcfg,
                         [&](std::size_t, const IncrementState& s) {
                           ++epochs_seen;
                           EXPECT_EQ(s.guides.size(), 6u);
                           EXPECT_EQ(s.guides.shared.size(), 4u);
                           EXPECT_EQ(s.guides.private_classes.size(), 2u);
                           for (ClassId c : s.guides.shared) {
                             EXPECT_EQ(s.guides.private_classes.count(c), 0u);
                           }
                         });
  ASSERT_TRUE(r.ok);
  EXPECT_EQ(epochs_seen, f.icfg.epochs);
  EXPECT_EQ(r.log.size(), f.icfg.epochs);
}

TEST(RunIncrement, DivergenceRollsBack) {
  auto f = small_fixture(3);
  StepInputs in = f.stream[0].inputs;
  in.source.reset();
  in.target_unlabeled(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const auto r = run_increment(f.state, in, f.icfg, f.fcfg);
  EXPECT_FALSE(r.ok);
  EXPECT_FALSE(r.failure.empty());
  EXPECT_EQ(r.state, f.state);
}

TEST(RunIncrement, RejectsEmptyClassSets) {
  auto f = small_fixture(4);
  StepInputs in = f.stream[0].inputs;
  in.source.reset();
  in.one_shot.clear();
  in.target_shared.clear();
  EXPECT_THROW(run_increment(f.state, in, f.icfg, f.fcfg), InvalidArgument);
}

TEST(RunIncrement, Deterministic) {
  auto f = small_fixture(5);
  StepInputs in = f.stream[0].inputs;
  in.source.reset();
  const auto a = run_increment(f.state, in, f.icfg, f.fcfg);
  const auto b = run_increment(f.state, in, f.icfg, f.fcfg);
  EXPECT_EQ(a.state, b.state);
}

TEST(RunIncrement, SharedOnlyUnshiftedStepKeepsAccuracy) {
  auto f = small_fixture(6);
  StreamSchedule sched;
  StreamStep step;
  step.target_shared = {0, 1, 2, 3};
  step.shared_only = true;
  sched.steps.push_back(step);
  auto spec = standard_stream_spec(60);
  spec.samples_per_class = 60;
  const auto same = build_stream(sched, spec);
  const double before = evaluate(f.state, same[0].eval).all_acc;
  auto r = run_increment(f.state, same[0].inputs, f.icfg, f.fcfg);
  ASSERT_TRUE(r.ok) << r.failure;
  const double after = evaluate(r.state, same[0].eval).all_acc;
  EXPECT_GE(after, before - 0.02);
  EXPECT_FALSE(r.state.target.has_head());
}

TEST(RunIncrement, OfficeShapedFirstStepHoldsTenClasses) {
  StreamSpec spec;
  spec.feature_dim = 2;
  spec.class_means = grid_class_means(31, 2, 4.0);
  spec.stddev = 0.4;
  spec.samples_per_class = 30;
  const auto stream = build_stream(office_shaped_schedule(standard_shift()), spec);
  ForesightConfig fcfg;
  fcfg.latent_dim = 4;
  fcfg.epochs = 20;
  IncrementConfig icfg;
  icfg.epochs = 5;
  icfg.ae_epochs = 5;
  icfg.proxy_per_class = 8;
  const auto fr = train_foresight(*stream[0].inputs.source, fcfg);
  auto s = make_initial_state(fr.model, fr.prototypes, icfg);
  StepInputs in = stream[0].inputs;
  in.source.reset();
  const auto r = run_increment(s, in, icfg, fcfg);
  ASSERT_TRUE(r.ok) << r.failure;
  EXPECT_EQ(r.state.registry.known().size(), 10u);
  EXPECT_EQ(r.state.joint_classes().size(), 10u);
}

TEST(RunIncrement, NewSourceDataExtendsSourceHead) {
  auto f = small_fixture(7);
  StepInputs in = f.stream[0].inputs;
  in.source.reset();
  auto r = run_increment(f.state, in, f.icfg, f.fcfg);
  ASSERT_TRUE(r.ok);
  // Labeled data for a previously private class arrives as new source data.
  StepInputs next = f.stream[1].inputs;
  DomainSpec extra{2, {{11, {4.0, 4.0}, 0.35, 0}}, 40, 3, "source"};
  next.source = make_domain(extra);
  next.target_shared.push_back(11);
  auto r2 = run_increment(r.state, next, f.icfg, f.fcfg);
  ASSERT_TRUE(r2.ok) << r2.failure;
  const auto& cls = r2.state.source.classes;
  EXPECT_NE(std::find(cls.begin(), cls.end(), 11), cls.end());
  EXPECT_EQ(r2.state.source.g_s.output_dim(), cls.size() + 1);
  EXPECT_FALSE(r2.foresight_log.empty());
}

}  // namespace
}  // namespace tido
