#include <cmath>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "schoolmap/augment.hpp"
#include "schoolmap/model.hpp"
#include "schoolmap/synthetic.hpp"
#include "test_util.hpp"

using namespace schoolmap;
using namespace schoolmap::model;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 3.0f);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

// Vertical vs horizontal stripes at a fixed phase: the class templates
// differ, so a linear readout of the pixels separates them.
std::vector<Sample> stripes(std::size_t n, std::uint64_t seed, int size = 16) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.1f);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    Tensor t({3, std::size_t(size), std::size_t(size)});
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const int k = label ? x : y;
          t.at(c, y, x) = std::clamp(((k / 2) % 2 ? 0.8f : 0.2f) + noise(rng), 0.0f, 1.0f);
        }
    out.push_back({t, label});
  }
  return out;
}

ToyArch small_arch() {
  ToyArch a;
  a.image_size = 16;
  a.block_channels = {4, 6, 6};
  a.final_channels = 6;
  return a;
}

}  // namespace

// --- GTEN -----------------------------------------------------------------

TEST(Gten, TwoByTwoIsThirtyOneBytes) {
  const Tensor t({2, 2}, {1, 2, 3, 4});
  const auto bytes = gten::encode(t);
  EXPECT_EQ(bytes.size(), 31u);
  EXPECT_EQ(bytes[0], 'G');
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 2);
  EXPECT_EQ(bytes[7], 2);  // first dim, little-endian
  EXPECT_EQ(bytes[11], 2);
  // 1.0f = 0x3f800000
  EXPECT_EQ(bytes[15], 0x00);
  EXPECT_EQ(bytes[18], 0x3f);
}

TEST(Gten, FileRoundTripIsBitExact) {
  schoolmap::testing::TempDir dir;
  const auto t = random_tensor({3, 5, 7}, 42);
  write_tensor(t, dir.file("t.gten"));
  const auto back = read_tensor(dir.file("t.gten"));
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(std::memcmp(back.data().data(), t.data().data(), 4 * t.size()), 0);
}

TEST(Gten, TruncatedPayloadReportsCounts) {
  auto bytes = gten::encode(Tensor({2, 2}, {1, 2, 3, 4}));
  bytes.resize(bytes.size() - 4);
  try {
    gten::decode(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 16 payload bytes, found 12"), std::string::npos);
    EXPECT_EQ(e.offset(), 27u);
  }
}

TEST(Gten, BadMagicAndVersion) {
  auto bytes = gten::encode(Tensor({1}, {1}));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(gten::decode(bad), FormatError);
  bad = bytes;
  bad[4] = 2;
  try {
    gten::decode(bad);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(Gten, ReadErrorNamesPath) {
  schoolmap::testing::TempDir dir;
  const auto path = dir.write("bad.gten", "GTEN\x01");
  try {
    read_tensor(path);
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(path), std::string::npos);
    EXPECT_EQ(msg.find("(at byte", msg.find("(at byte") + 1), std::string::npos);
  }
}

TEST(TensorType, ShapeMismatchThrows) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), DataError);
}

// --- loss and softmax --------------------------------------------------------

TEST(Loss, EqualLogitsGiveLogTwo) {
  const std::vector<double> l{0.3, 0.3};
  EXPECT_NEAR(cross_entropy_smoothed<double>(l, 0, 0.1), std::log(2.0), 1e-12);
  EXPECT_NEAR(cross_entropy_smoothed<double>(l, 1, 0.1), std::log(2.0), 1e-12);
}

TEST(Loss, ZeroSmoothingIsPlainCrossEntropy) {
  const std::vector<double> l{1.0, -2.0, 0.5};
  const auto p = softmax<double>(l);
  EXPECT_NEAR(cross_entropy_smoothed<double>(l, 2, 0.0), -std::log(p[2]), 1e-12);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t s = 0; s < 20; ++s) EXPECT_LT(schoolmap::testing::gradcheck_loss(s), 1e-4) << s;
}

TEST(Loss, RejectsBadInputs) {
  const std::vector<double> one{1.0};
  EXPECT_THROW(cross_entropy_smoothed<double>(one, 0, 0.1), DataError);
  const std::vector<double> two{1.0, 2.0};
  EXPECT_THROW(cross_entropy_smoothed<double>(two, 2, 0.1), DataError);
  EXPECT_THROW(cross_entropy_smoothed<double>(two, 0, 1.0), ConfigError);
}

TEST(Softmax, SumsToOneAndShiftInvariant) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 10.0);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> l(5);
    for (auto& v : l) v = n(rng);
    const auto p = softmax<double>(l);
    double s = 0;
    for (double v : p) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
    auto shifted = l;
    for (auto& v : shifted) v += 123.0;
    const auto q = softmax<double>(shifted);
    for (std::size_t k = 0; k < p.size(); ++k) EXPECT_NEAR(p[k], q[k], 1e-12);
  }
}

// --- toy model ---------------------------------------------------------------

TEST(ToyModel, ZeroImageGivesEvenOdds) {
  const ToyClassifier<float> m({}, 5);
  const auto b = m.bundle(Tensor({3, 64, 64}));
  EXPECT_FLOAT_EQ(b.logits[0], 0.0f);
  EXPECT_FLOAT_EQ(b.logits[1], 0.0f);
  EXPECT_FLOAT_EQ(b.softmax[0], 0.5f);
  EXPECT_FLOAT_EQ(b.softmax[1], 0.5f);
}

TEST(ToyModel, TargetLayerShapeAfterThreePools) {
  const ToyClassifier<float> m({}, 5);
  const auto b = m.bundle(synthetic::make_tile(1, 1).image);
  EXPECT_EQ(b.activations.shape(), (std::vector<std::size_t>{16, 8, 8}));
  EXPECT_EQ(b.gradients.shape(), b.activations.shape());
  EXPECT_NO_THROW(b.validate());
  EXPECT_TRUE(b.gradients.all_finite());
}

TEST(ToyModel, RejectsWrongShapes) {
  const ToyClassifier<float> m({}, 5);
  EXPECT_THROW(m.bundle(Tensor({3, 32, 32})), DataError);
  ToyArch bad;
  bad.image_size = 60;
  EXPECT_THROW(ToyClassifier<float>(bad, 0), ConfigError);
}

TEST(ToyModel, AnalyticGradientsMatchFiniteDifferences) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto r = schoolmap::testing::gradcheck_model(s);
    EXPECT_EQ(r.checked, 902u + 24u);  // parameters + target activations
    EXPECT_LT(r.worst_rel, 1e-3) << "seed " << s << " worst at " << r.worst_name;
  }
}

TEST(ToyModel, FloatAndDoubleAgree) {
  const ToyClassifier<float> f({}, 11);
  const auto d = f.cast<double>();
  const auto img = synthetic::make_tile(4, 1).image;
  const std::vector<double> x(img.data().begin(), img.data().end());
  const auto lf = f.logits(img.data());
  const auto ld = d.logits(x);
  for (int k = 0; k < 2; ++k) EXPECT_NEAR(lf[k], ld[k], 1e-4);
}

TEST(ToyModel, SaveLoadReproducesBundles) {
  schoolmap::testing::TempDir dir;
  const ToyClassifier<float> m({}, 8);
  save_model(dir.path() / "model", m, {{"note", "x"}});
  nlohmann::json extra;
  const auto back = load_model(dir.path() / "model", &extra);
  EXPECT_EQ(extra["note"], "x");
  const auto img = synthetic::make_tile(2, 1).image;
  const auto a = m.bundle(img), b = back.bundle(img);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.gradients, b.gradients);
}

TEST(ToyModel, BundleDirectoryRoundTrip) {
  schoolmap::testing::TempDir dir;
  const ToyBackend be(ToyClassifier<float>({}, 8), "toy-8");
  const auto b = be.infer(synthetic::make_tile(3, 1).image);
  write_bundle_dir(dir.path() / "img1", b, {{"image_id", "img1"}, {"model_id", be.model_id()}});
  nlohmann::json meta;
  const auto r = read_bundle_dir(dir.path() / "img1", &meta);
  EXPECT_EQ(r.activations, b.activations);
  EXPECT_EQ(meta["model_id"], "toy-8");
}

// --- schedule ----------------------------------------------------------------

TEST(Plateau, ConstantLossDecaysEverySevenEpochsUntilFloor) {
  PlateauScheduler s(1e-5, 0.1, 7);
  std::vector<int> decays;
  int stopped_at = 0;
  for (int epoch = 1; epoch <= 60; ++epoch) {
    if (s.step(0.5)) decays.push_back(epoch);
    if (below_floor(s.lr(), 1e-7)) {
      stopped_at = epoch;
      break;
    }
  }
  EXPECT_EQ(decays, (std::vector<int>{8, 15, 22}));
  EXPECT_EQ(stopped_at, 22);
  EXPECT_NEAR(s.lr(), 1e-8, 1e-20);
}

TEST(Plateau, ImprovementResetsPatience) {
  PlateauScheduler s(1.0, 0.1, 3);
  EXPECT_FALSE(s.step(1.0));
  EXPECT_FALSE(s.step(1.0));
  EXPECT_FALSE(s.step(1.0));
  EXPECT_FALSE(s.step(0.5));  // improvement
  EXPECT_EQ(s.bad_epochs(), 0);
  EXPECT_FALSE(s.step(0.5));
  EXPECT_FALSE(s.step(0.5));
  EXPECT_TRUE(s.step(0.5));
  EXPECT_DOUBLE_EQ(s.lr(), 0.1);
}

TEST(Plateau, FloorHasRoundingSlack) {
  EXPECT_FALSE(below_floor(1e-5 * 0.1 * 0.1, 1e-7));
  EXPECT_TRUE(below_floor(1e-5 * 0.1 * 0.1 * 0.1, 1e-7));
}

// --- training ------------------------------------------------------------------

TEST(TrainToy, SeparableSetReachesHighAccuracy) {
  const auto train = stripes(128, 1), val = stripes(64, 2);
  TrainConfig cfg;
  cfg.max_epochs = 15;
  cfg.augment = false;
  cfg.seed = 3;
  const auto r = train_toy(train, val, small_arch(), cfg);
  EXPECT_GE(evaluate(r.model, val, 0.1).accuracy, 0.95);
  ASSERT_FALSE(r.history.empty());
  EXPECT_DOUBLE_EQ(r.history.front().lr, 1e-3);
  EXPECT_GE(r.best_epoch, 1);
}

TEST(TrainToy, SameSeedSameHistory) {
  const auto train = stripes(40, 1), val = stripes(10, 2);
  TrainConfig cfg;
  cfg.max_epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 9;
  const auto a = train_toy(train, val, small_arch(), cfg);
  const auto b = train_toy(train, val, small_arch(), cfg);
  EXPECT_EQ(a.history, b.history);
  cfg.seed = 10;
  const auto c = train_toy(train, val, small_arch(), cfg);
  EXPECT_NE(a.history, c.history);
}

TEST(TrainToy, LrFloorStopsTraining) {
  // A starting LR just above the floor decays below it after one plateau.
  const auto train = stripes(8, 1), val = stripes(4, 2);
  TrainConfig cfg;
  cfg.initial_lr = 1.5e-7;
  cfg.plateau_patience = 1;
  cfg.max_epochs = 60;
  cfg.augment = false;
  const auto r = train_toy(train, val, small_arch(), cfg);
  EXPECT_EQ(r.stop_reason, "lr_floor");
  EXPECT_LT(r.history.size(), 60u);
}

TEST(TrainToy, RejectsEmptyAndMismatched) {
  const auto ok = stripes(4, 1);
  EXPECT_THROW(train_toy({}, ok, small_arch(), {}), DataError);
  EXPECT_THROW(train_toy(ok, {}, small_arch(), {}), DataError);
  auto bad = ok;
  bad[0].image = Tensor({3, 8, 8});
  EXPECT_THROW(train_toy(bad, ok, small_arch(), {}), DataError);
}

// --- LR range test ---------------------------------------------------------------

TEST(LrRange, EndpointsAndMidpoint) {
  EXPECT_DOUBLE_EQ(lr_at(0, 1000, 1e-6, 1e-3), 1e-6);
  EXPECT_NEAR(lr_at(999, 1000, 1e-6, 1e-3), 1e-3, 1e-15);
  // The geometric midpoint sqrt(1e-9) falls between iterations 499 and 500.
  EXPECT_NEAR(lr_at(500, 1000, 1e-6, 1e-3), 3.163e-5, 0.005 * 3.163e-5);
  EXPECT_NEAR(std::sqrt(lr_at(499, 1000, 1e-6, 1e-3) * lr_at(500, 1000, 1e-6, 1e-3)),
              std::sqrt(1e-9), 1e-15);
  double prev = 0.0;
  for (std::size_t i = 0; i < 1000; ++i) {
    const double v = lr_at(i, 1000, 1e-6, 1e-3);
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(LrRange, SteepestDescentIndex) {
  // Loss plateau, a cliff centred at 30, then a rise.
  std::vector<double> loss(60);
  for (std::size_t i = 0; i < loss.size(); ++i) {
    loss[i] = 1.0 / (1.0 + std::exp((static_cast<double>(i) - 30.0) / 2.0)) +
              (i > 45 ? 0.1 * (static_cast<double>(i) - 45.0) : 0.0);
  }
  EXPECT_EQ(steepest_descent_index(loss, 10, 5), 30u);
}

TEST(LrRange, RunProducesLogUniformCurve) {
  const auto train = stripes(32, 4);
  TrainConfig cfg;
  cfg.batch_size = 8;
  LrRangeConfig rc;
  rc.iterations = 30;
  const auto r = lr_range_test(train, small_arch(), cfg, rc);
  ASSERT_EQ(r.lrs.size(), 30u);
  EXPECT_DOUBLE_EQ(r.lrs.front(), 1e-6);
  EXPECT_NEAR(r.lrs.back(), 1e-3, 1e-15);
  EXPECT_GE(r.suggested_lr, 1e-6);
  EXPECT_LE(r.suggested_lr, 1e-3);
  EXPECT_DOUBLE_EQ(r.suggested_lr, r.lrs[r.suggested_index]);
}

// --- ensembling ------------------------------------------------------------------

TEST(Ensemble, MeanOfSoftmaxVectors) {
  const std::vector<Tensor> one{Tensor({2}, {0.3f, 0.7f})};
  EXPECT_EQ(ensemble_softmax(one), one[0]);
  const std::vector<Tensor> two{Tensor({2}, {0.2f, 0.8f}), Tensor({2}, {0.6f, 0.4f})};
  const auto e = ensemble_softmax(two);
  EXPECT_NEAR(e[0], 0.4f, 1e-7);
  EXPECT_NEAR(e[1], 0.6f, 1e-7);
  const std::vector<Tensor> bad{Tensor({2}, {0.5f, 0.5f}), Tensor({3}, {0.2f, 0.3f, 0.5f})};
  EXPECT_THROW(ensemble_softmax(bad), DataError);
}

TEST(Ensemble, SumsToOneAndKeepsUnanimousArgmax) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<Tensor> members;
    for (int m = 0; m < 1 + t % 4; ++m) {
      std::vector<double> l(4);
      for (auto& v : l) v = n(rng);
      l[2] += 20.0;  // class 2 wins for everyone
      members.push_back(softmax(Tensor({4}, std::vector<float>(l.begin(), l.end()))));
    }
    const auto e = ensemble_softmax(members);
    double s = 0;
    for (float v : e.data()) s += v;
    EXPECT_NEAR(s, 1.0, 1e-6);
    EXPECT_EQ(std::max_element(e.data().begin(), e.data().end()) - e.data().begin(), 2);
  }
}

// --- augmentation ---------------------------------------------------------------

TEST(Augment, FlipsAndTurnsAreInvolutions) {
  const auto t = random_tensor({3, 9, 9}, 5);
  EXPECT_EQ(augment::hflip(augment::hflip(t)), t);
  EXPECT_EQ(augment::vflip(augment::vflip(t)), t);
  EXPECT_EQ(augment::rot90(augment::rot90(augment::rot90(augment::rot90(t, 1), 1), 1), 1), t);
  EXPECT_EQ(augment::rot90(t, 2), augment::hflip(augment::vflip(t)));
}

TEST(Augment, FreeRotationMatchesQuarterTurns) {
  const auto t = random_tensor({2, 8, 8}, 6);
  const auto r0 = augment::rotate(t, 0.0);
  const auto r90 = augment::rotate(t, 90.0), q = augment::rot90(t, 1);
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_NEAR(r0[i], t[i], 1e-5);
    EXPECT_NEAR(r90[i], q[i], 1e-4);
  }
}

TEST(Augment, ReflectPaddingStaysInRange) {
  EXPECT_DOUBLE_EQ(augment::reflect_coord(-1.0, 5), 1.0);
  EXPECT_DOUBLE_EQ(augment::reflect_coord(5.0, 5), 3.0);
  EXPECT_DOUBLE_EQ(augment::reflect_coord(2.5, 5), 2.5);
  // A rotated constant image stays constant.
  Tensor c({1, 10, 10});
  for (auto& v : c.data()) v = 0.25f;
  const auto r = augment::rotate(c, 33.0);
  for (float v : r.data()) EXPECT_NEAR(v, 0.25f, 1e-6);
}

// --- synthetic tiles -------------------------------------------------------------

TEST(Synthetic, DeterministicWithMotifInsideMargin) {
  const auto a = synthetic::make_dataset(30, 7), b = synthetic::make_dataset(30, 7);
  int positives = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    if (a[i].label == 1) {
      ++positives;
      EXPECT_GE(a[i].cx, 11.5);
      EXPECT_LE(a[i].cx, 52.0);
      EXPECT_GE(a[i].cy, 11.5);
    }
    for (float v : a[i].image.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  EXPECT_EQ(positives, 10);
}
