#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "schoolmap/model.hpp"
#include "schoolmap/roadeval.hpp"
#include "schoolmap/synthetic.hpp"
#include "oracles.hpp"

using namespace schoolmap;
using namespace schoolmap::roadeval;
using namespace schoolmap::testing;

namespace {

cam::Cam cam_from(std::size_t h, std::size_t w, std::vector<float> v) {
  return cam::Cam{Tensor({h, w}, std::move(v)), cam::Method::gradcam, false};
}

Tensor checkerboard(std::size_t S, std::size_t period, std::size_t C = 3) {
  Tensor t({C, S, S});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x)
        t.at(c, y, x) = ((x / (period / 2) + y / (period / 2)) % 2) ? 1.0f : 0.0f;
  return t;
}

// Scores 0.9 on the reference image and 0.3 on anything else.
class ScriptedBackend : public Backend {
 public:
  explicit ScriptedBackend(Tensor ref) : ref_(std::move(ref)) {}
  FeatureBundle infer(const Tensor& image) const override {
    const float p = image == ref_ ? 0.9f : 0.3f;
    FeatureBundle b;
    b.logits = Tensor({2}, {0.0f, std::log(p / (1 - p))});
    b.softmax = Tensor({2}, {1 - p, p});
    b.activations = Tensor({1, 2, 2}, {1, 2, 3, 4});
    b.gradients = Tensor({1, 2, 2}, {grad_, grad_, grad_, grad_});
    return b;
  }
  std::string model_id() const override { return "scripted"; }
  float grad_ = 1.0f;

 private:
  Tensor ref_;
};

}  // namespace

// --- MoRF ---------------------------------------------------------------------

TEST(Morf, TenPercentOfHundredIsTen) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> v(100);
  for (auto& x : v) x = u(rng);
  EXPECT_EQ(morf_mask(cam_from(10, 10, v), 0.1).count(), 10u);
}

TEST(Morf, DecreasingRasterSelectsFirstPixels) {
  std::vector<float> v(100);
  for (int i = 0; i < 100; ++i) v[i] = 1.0f - i / 100.0f;
  const auto m = morf_mask(cam_from(10, 10, v), 0.1);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(m[i], i < 10) << i;
}

TEST(Morf, TiesAtCutoffUseRowMajorOrder) {
  std::vector<float> v(100, 0.5f);
  v[99] = 1.0f;
  const auto m = morf_mask(cam_from(10, 10, v), 0.05);
  EXPECT_TRUE(m[99]);
  for (int i = 0; i < 4; ++i) EXPECT_TRUE(m[i]);
  EXPECT_EQ(m.count(), 5u);
}

TEST(Morf, DegenerateCamRejected) {
  auto c = cam_from(4, 4, std::vector<float>(16, 0.0f));
  c.degenerate = true;
  EXPECT_THROW(morf_mask(c, 0.1), DataError);
}

TEST(Morf, CardinalityIsCeilingOfQuota) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (std::size_t h : {1u, 3u, 7u, 10u, 64u})
    for (std::size_t w : {2u, 5u, 10u, 33u})
      for (int qp : {1, 5, 10, 25, 50, 90}) {
        std::vector<float> v(h * w);
        for (auto& x : v) x = u(rng);
        // Smallest k with 100 k >= qp h w, in integers.
        std::size_t k = 0;
        while (100 * k < static_cast<std::size_t>(qp) * h * w) ++k;
        EXPECT_EQ(morf_mask(cam_from(h, w, v), qp / 100.0).count(), k) << h << "x" << w << " q" << qp;
      }
}

// --- imputation ----------------------------------------------------------------

TEST(Impute, EmptyMaskLeavesImage) {
  const auto img = random_image(3, 8, 1);
  const Mask m{8, 8, std::vector<std::uint8_t>(64, 0)};
  EXPECT_EQ(noisy_linear_impute(img, m, 0.01, 1).image, img);
}

TEST(Impute, SinglePixelTakesNeighborMean) {
  Tensor img({1, 5, 5});
  for (auto& v : img.data()) v = 10.0f;
  img.at(0, 2, 2) = -3.0f;
  Mask m{5, 5, std::vector<std::uint8_t>(25, 0)};
  m.bits[12] = 1;
  const auto r = noisy_linear_impute(img, m, 0.0, 0);
  EXPECT_NEAR(r.image.at(0, 2, 2), 10.0, 1e-6);
}

TEST(Impute, BorderWeightsRenormalize) {
  const auto nb = neighbor_weights(0, 0, 4, 4);
  ASSERT_EQ(nb.size(), 3u);
  double total = 0;
  for (const auto& n : nb) total += n.weight;
  EXPECT_NEAR(total, 1.0, 1e-15);
  for (const auto& n : nb) EXPECT_NEAR(n.weight, n.index == 5 ? 0.2 : 0.4, 1e-15);
}

TEST(Impute, ConstantImageRestoredExactly) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Tensor img({3, 24, 24});
    for (auto& v : img.data()) v = 0.37f;
    const auto m = random_mask(24, 200, s);
    const auto r = noisy_linear_impute(img, m, 0.0, s);
    for (float v : r.image.data()) EXPECT_NEAR(v, 0.37f, 1e-6);
  }
}

TEST(Impute, SparseSolveMatchesDenseOracle) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto img = random_image(2, 24, s);
    const auto m = random_mask(24, 200, s + 50);
    for (double sigma : {0.0, 0.01}) {
      const auto r = noisy_linear_impute(img, m, sigma, s);
      // Replay the solver's noise stream: channel-major, masked pixels in raster order.
      std::mt19937_64 rng(s);
      std::normal_distribution<double> n(0.0, sigma > 0 ? sigma : 1.0);
      for (std::size_t c = 0; c < 2; ++c) {
        std::vector<double> noise(m.count());
        for (auto& e : noise) e = sigma > 0 ? n(rng) : 0.0;
        const auto x = dense_impute_channel(img, c, m, noise);
        std::size_t k = 0;
        for (std::size_t i = 0; i < 24 * 24; ++i)
          if (m[i]) {
            EXPECT_NEAR(r.image[c * 576 + i], x[k++], 1e-6);
          }
      }
    }
  }
}

TEST(Impute, MaximumPrincipleUnmaskedUnchangedAndIdempotent) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto img = random_image(1, 20, s + 7);
    const auto m = random_mask(20, 150, s + 9);
    const auto r = noisy_linear_impute(img, m, 0.0, 0);
    // Boundary: unmasked pixels 8-adjacent to the mask.
    float lo = 1e9f, hi = -1e9f;
    for (std::size_t i = 0; i < 400; ++i) {
      if (m[i]) continue;
      const long y = long(i / 20), x = long(i % 20);
      bool touches = false;
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          const long ny = y + dy, nx = x + dx;
          if (ny >= 0 && nx >= 0 && ny < 20 && nx < 20 && m[std::size_t(ny * 20 + nx)]) touches = true;
        }
      if (touches) {
        lo = std::min(lo, img[i]);
        hi = std::max(hi, img[i]);
      }
      EXPECT_EQ(r.image[i], img[i]);
    }
    for (std::size_t i = 0; i < 400; ++i)
      if (m[i]) {
        EXPECT_GE(r.image[i], lo - 1e-6);
        EXPECT_LE(r.image[i], hi + 1e-6);
      }
    const auto again = noisy_linear_impute(r.image, m, 0.0, 0);
    for (std::size_t i = 0; i < 400; ++i) EXPECT_NEAR(again.image[i], r.image[i], 1e-6);
    EXPECT_LE(r.max_residual, kResidualTolerance);
  }
}

TEST(Impute, FullMaskAndShapeErrors) {
  const auto img = random_image(1, 4, 1);
  EXPECT_THROW(noisy_linear_impute(img, Mask{4, 4, std::vector<std::uint8_t>(16, 1)}, 0.0, 0), DataError);
  EXPECT_THROW(noisy_linear_impute(img, Mask{3, 3, std::vector<std::uint8_t>(9, 0)}, 0.0, 0), DataError);
}

TEST(Impute, SeededNoise) {
  const auto img = random_image(3, 16, 4);
  const auto m = random_mask(16, 60, 5);
  EXPECT_EQ(noisy_linear_impute(img, m, 0.01, 9).image, noisy_linear_impute(img, m, 0.01, 9).image);
  EXPECT_NE(noisy_linear_impute(img, m, 0.01, 9).image, noisy_linear_impute(img, m, 0.01, 10).image);
}

// --- Canny -------------------------------------------------------------------------

TEST(Canny, UniformImageHasNoEdges) {
  Tensor t({3, 32, 32});
  for (auto& v : t.data()) v = 0.5f;
  EXPECT_EQ(canny(t).fraction(), 0.0);
  EXPECT_TRUE(degenerate_check(t));
}

TEST(Canny, HalfSplitGivesOneEdgePixelPerRow) {
  for (std::size_t W : {16u, 32u, 64u}) {
    Tensor t({3, W, W});
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < W; ++y)
        for (std::size_t x = W / 2; x < W; ++x) t.at(c, y, x) = 1.0f;
    const auto e = canny(t);
    EXPECT_DOUBLE_EQ(e.fraction(), 1.0 / static_cast<double>(W));
    for (std::size_t y = 0; y < W; ++y) {
      EXPECT_TRUE(e.edges[y * W + W / 2 - 1] || e.edges[y * W + W / 2]);
    }
    EXPECT_FALSE(degenerate_check(t));
  }
}

TEST(Canny, CheckerboardIsNotDegenerate) {
  const auto t = checkerboard(64, 8);
  EXPECT_GT(canny(t).fraction(), 0.05);
  EXPECT_FALSE(degenerate_check(t));
}

// --- confidence drop ------------------------------------------------------------------

TEST(ConfidenceDrop, ScoresPointNineThenPointThree) {
  const auto img = checkerboard(16, 8, 1);
  const ScriptedBackend be(img);
  std::vector<float> v(256);
  for (int i = 0; i < 256; ++i) v[i] = static_cast<float>((i * 37) % 256) / 255.0f;
  const auto r = confidence_drop(be, img, cam_from(16, 16, v), {}, 1);
  EXPECT_FALSE(r.degenerate);
  EXPECT_NEAR(r.drop, 0.6, 1e-6);
}

TEST(ConfidenceDrop, UnchangedScoreGivesZero) {
  const auto img = checkerboard(16, 8, 1);
  ScriptedBackend be(Tensor({1, 16, 16}));  // never matches: always 0.3
  std::vector<float> v(256);
  for (int i = 0; i < 256; ++i) v[i] = static_cast<float>(i) / 255.0f;
  EXPECT_NEAR(confidence_drop(be, img, cam_from(16, 16, v), {}, 1).drop, 0.0, 1e-9);
}

TEST(ConfidenceDrop, WashedOutImageForcesZero) {
  Tensor flat({1, 16, 16});
  for (auto& v : flat.data()) v = 0.5f;
  const ScriptedBackend be(flat);
  std::vector<float> v(256);
  for (int i = 0; i < 256; ++i) v[i] = static_cast<float>(i) / 255.0f;
  PerturbationConfig cfg;
  cfg.noise_std = 0.0;
  const auto r = confidence_drop(be, flat, cam_from(16, 16, v), cfg, 1);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.reason, "washed out");
  EXPECT_EQ(r.drop, 0.0);
}

TEST(ConfidenceDrop, DegenerateCamForcesZero) {
  const auto img = checkerboard(16, 8, 1);
  const ScriptedBackend be(img);
  auto c = cam_from(16, 16, std::vector<float>(256, 0.0f));
  c.degenerate = true;
  const auto r = confidence_drop(be, img, c, {}, 1);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.reason, "degenerate cam");
  EXPECT_EQ(r.drop, 0.0);
}

// --- evaluate_methods ----------------------------------------------------------------

TEST(EvaluateMethods, SingleImageSingleMethod) {
  const auto img = checkerboard(16, 8, 1);
  const ScriptedBackend be(img);
  const std::vector<Tensor> imgs{img};
  const std::vector<std::string> ids{"a"};
  const std::vector<cam::Method> ms{cam::Method::gradcam};
  const auto rep = evaluate_methods(imgs, ids, be, ms, {});
  ASSERT_EQ(rep.rows.size(), 1u);
  EXPECT_DOUBLE_EQ(rep.summary("gradcam").mean_drop, rep.rows[0].result.drop);
  EXPECT_NEAR(rep.rows[0].result.drop, 0.6, 1e-6);
}

TEST(EvaluateMethods, AllDegenerateMethodMeansZero) {
  const auto img = checkerboard(16, 8, 1);
  ScriptedBackend be(img);
  be.grad_ = -1.0f;  // gradcam map is ReLU(negative) = 0
  const std::vector<Tensor> imgs{img, img};
  const std::vector<std::string> ids{"a", "b"};
  const std::vector<cam::Method> ms{cam::Method::gradcam};
  const auto rep = evaluate_methods(imgs, ids, be, ms, {});
  EXPECT_EQ(rep.summary("gradcam").mean_drop, 0.0);
  EXPECT_EQ(rep.summary("gradcam").degenerate, 2u);
}

TEST(EvaluateMethods, DeterministicAcrossWorkersWithReport) {
  const model::ToyBackend be(model::ToyClassifier<float>({}, 3));
  std::vector<Tensor> imgs;
  std::vector<std::string> ids;
  for (int i = 0; i < 6; ++i) {
    imgs.push_back(synthetic::make_tile(i, i % 2).image);
    ids.push_back("t" + std::to_string(i));
  }
  const std::vector<cam::Method> ms{cam::Method::gradcam, cam::Method::layercam};
  PerturbationConfig cfg;
  cfg.seed = 4;
  const auto a = evaluate_methods(imgs, ids, be, ms, cfg, true, 1);
  const auto b = evaluate_methods(imgs, ids, be, ms, cfg, true, 3);
  const auto ja = to_json(a, cfg), jb = to_json(b, cfg);
  EXPECT_EQ(ja, jb);
  EXPECT_EQ(ja["rows"].size(), 18u);
  EXPECT_EQ(ja["methods"][2]["method"], "random");
  const auto table = render_table(a);
  EXPECT_NE(table.find("layercam"), std::string::npos);
  EXPECT_NE(table.find("random"), std::string::npos);
}
