#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "lingm/imgparam.hpp"
#include "lingm/ops.hpp"
#include "support/fd.hpp"
#include "support/tmpdir.hpp"

using namespace lingm;
using testing_support::max_rel_error;
using testing_support::numeric_gradient;

namespace {

ColorTransform random_color(RngStream& rng) {
  ColorTransform ct;
  for (double& v : ct.matrix) v = 0.5 * rng.normal();
  for (int i = 0; i < 3; ++i) ct.matrix[static_cast<std::size_t>(4 * i)] += 1.0;
  return ct;
}

// Images whose per-pixel channel covariance is exactly sigma = L0 L0^T.
std::vector<Tensor> images_with_covariance(const Eigen::Matrix3d& l0, RngStream& rng) {
  const int n = 4 * 8 * 8;
  Eigen::MatrixXd w(3, n);
  for (int j = 0; j < n; ++j)
    for (int c = 0; c < 3; ++c) w(c, j) = rng.normal();
  Eigen::Vector3d mean = w.rowwise().mean();
  w.colwise() -= mean;
  const Eigen::Matrix3d cov = w * w.transpose() / n;
  const Eigen::Matrix3d white = Eigen::LLT<Eigen::Matrix3d>(cov).matrixL().solve(Eigen::Matrix3d::Identity());
  const Eigen::MatrixXd data = l0 * (white * w);
  std::vector<Tensor> out;
  for (int img = 0; img < 4; ++img) {
    Tensor t(Dims{3, 8, 8});
    for (int p = 0; p < 64; ++p)
      for (int c = 0; c < 3; ++c) t[static_cast<std::size_t>(c * 64 + p)] = 0.5 + data(c, img * 64 + p);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

TEST(Pyramid, ResolutionsDouble) {
  EXPECT_EQ(pyramid_resolutions(8), (std::vector<std::size_t>{1, 2, 4, 8}));
  EXPECT_THROW(pyramid_resolutions(12), InvalidArgument);
}

TEST(Pyramid, InitIsSeededStandardNormal) {
  RngStream a(5, 1), b(5, 1);
  const PyramidImage p = init_pyramid(a, 64), q = init_pyramid(b, 64);
  ASSERT_EQ(p.levels.size(), 7u);
  EXPECT_EQ(p.active_count, 1u);
  double s = 0, s2 = 0, n = 0;
  for (std::size_t i = 0; i < p.levels.size(); ++i) {
    EXPECT_EQ(p.levels[i], q.levels[i]);
    for (double v : p.levels[i].data()) s += v, s2 += v * v, n += 1;
  }
  const double mean = s / n, sd = std::sqrt(s2 / n - mean * mean);
  EXPECT_LT(std::abs(mean), 3.0 / std::sqrt(n));
  EXPECT_LT(std::abs(sd - 1.0), 3.0 * std::sqrt(0.5 / n));
}

TEST(Pyramid, ActivationCapsAtLevelCount) {
  RngStream rng(1, 1);
  PyramidImage p = init_pyramid(rng, 4);
  for (std::size_t n = 1; n <= 5; ++n) {
    p = activate_next_level(p);
    EXPECT_EQ(p.active_count, std::min<std::size_t>(1 + n, 3));
  }
}

TEST(Render, ZeroLevelsGiveHalfGrey) {
  PyramidImage p;
  p.levels = {Tensor(Dims{3, 1, 1}), Tensor(Dims{3, 2, 2})};
  p.active_count = 2;
  const Tensor out = render(p, ColorTransform::identity());
  for (double v : out.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Render, SaturatesForLargeCoarseValue) {
  PyramidImage p;
  p.levels = {Tensor(Dims{3, 1, 1}, 20.0), Tensor(Dims{3, 2, 2}, -50.0)};
  p.active_count = 1;
  const Tensor out = render(p, ColorTransform::identity());
  for (double v : out.data()) EXPECT_GT(v, 0.999);
}

TEST(Render, TwoLevelsAverageBeforeSigmoid) {
  PyramidImage p;
  p.levels = {Tensor(Dims{3, 1, 1}), Tensor(Dims{3, 2, 2})};
  RngStream rng(8, 8);
  for (auto& l : p.levels)
    for (double& v : l.data()) v = rng.normal();
  p.active_count = 2;
  const Tensor img = render(p, ColorTransform::identity());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) {
        const double a = p.levels[0].at(c, 0, 0), b = p.levels[1].at(c, y, x);
        EXPECT_NEAR(img.at(c, y, x), 1.0 / (1.0 + std::exp(-(a + b) / 2.0)), 1e-15);
      }
}

TEST(Render, AddingZeroLevelHalvesPreActivation) {
  PyramidImage p;
  p.levels = {Tensor(Dims{3, 1, 1}, 1.3), Tensor(Dims{3, 2, 2})};
  p.active_count = 1;
  const Tensor before = render(p, ColorTransform::identity());
  const Tensor after = render(activate_next_level(p), ColorTransform::identity());
  for (std::size_t i = 0; i < before.size(); ++i) {
    EXPECT_NEAR(before[i], sigmoid(1.3), 1e-15);
    EXPECT_NEAR(after[i], sigmoid(0.65), 1e-15);
  }
}

TEST(Render, GainTwoMatchesHalfTanhForm) {
  RngStream rng(2, 3);
  PyramidImage p = init_pyramid(rng, 4);
  p.active_count = 3;
  const Tensor a = render(p, ColorTransform::identity(), 2.0);
  const Tensor pre = detail::pyramid_pre_activation(p, ColorTransform::identity());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], 0.5 + 0.5 * std::tanh(pre[i]), 1e-15);
}

TEST(Render, InactiveLevelsDoNotAffectOutput) {
  RngStream rng(4, 4);
  PyramidImage p = init_pyramid(rng, 8);
  p.active_count = 2;
  const Tensor before = render(p, ColorTransform::identity());
  p.levels[3][5] += 100.0;
  p.levels[2][0] -= 7.0;
  EXPECT_EQ(render(p, ColorTransform::identity()), before);
}

TEST(Render, OutputStrictlyInsideUnitInterval) {
  RngStream rng(6, 6);
  PyramidImage p = init_pyramid(rng, 8);
  p.active_count = 4;
  for (auto& l : p.levels) l *= 5.0;
  const Tensor out = render(p, random_color(rng));
  for (double v : out.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(RenderVjp, MatchesFiniteDifferences) {
  RngStream rng(10, 10);
  for (std::size_t active : {1u, 2u, 3u}) {
    PyramidImage p = init_pyramid(rng, 4);
    p.active_count = active;
    const ColorTransform ct = random_color(rng);
    Tensor up(Dims{3, 4, 4});
    for (double& v : up.data()) v = rng.normal();
    for (double gain : {1.0, 2.0}) {
      const auto grads = render_vjp(p, ct, up, gain);
      for (std::size_t l = 0; l < p.levels.size(); ++l) {
        auto f = [&](const Tensor& level) {
          PyramidImage q = p;
          q.levels[l] = level;
          return dot(render(q, ct, gain).data(), up.data());
        };
        const Tensor num = numeric_gradient(f, p.levels[l]);
        if (l < active) {
          EXPECT_LT(max_rel_error(grads[l], num), 1e-6) << "level " << l << " active " << active;
        } else {
          for (double v : grads[l].data()) EXPECT_EQ(v, 0.0);
        }
      }
    }
  }
}

TEST(RenderVjp, ZeroUpstreamGivesZero) {
  RngStream rng(1, 2);
  PyramidImage p = init_pyramid(rng, 4);
  p.active_count = 3;
  for (const Tensor& g : render_vjp(p, random_color(rng), Tensor(Dims{3, 4, 4})))
    for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(ColorMatrix, EqualChannelsFallBackToIdentity) {
  RngStream rng(3, 3);
  Tensor img(Dims{3, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) img[i] = img[16 + i] = img[32 + i] = rng.uniform01();
  std::vector<Tensor> imgs{img};
  EXPECT_EQ(color_matrix_from_dataset(imgs).matrix, ColorTransform::identity().matrix);
}

TEST(ColorMatrix, IndependentUnitChannelsGiveNearIdentity) {
  RngStream rng(12, 0);
  std::vector<Tensor> imgs;
  for (int k = 0; k < 20; ++k) {
    Tensor t(Dims{3, 32, 32});
    for (double& v : t.data()) v = rng.normal();
    imgs.push_back(std::move(t));
  }
  const ColorTransform ct = color_matrix_from_dataset(imgs);
  // 20480 samples per channel: sampling error of each covariance entry is about 0.007.
  for (int i = 0; i < 9; ++i) EXPECT_NEAR(ct.matrix[static_cast<std::size_t>(i)], i % 4 == 0 ? 1.0 : 0.0, 0.03);
}

TEST(ColorMatrix, RecoversKnownCovariance) {
  RngStream rng(21, 0);
  Eigen::Matrix3d l0;
  l0 << 0.30, 0, 0, 0.12, 0.25, 0, -0.05, 0.08, 0.20;
  const auto imgs = images_with_covariance(l0, rng);
  const ColorTransform ct = color_matrix_from_dataset(imgs);
  Eigen::Matrix3d l;
  for (int i = 0; i < 9; ++i) l(i / 3, i % 3) = ct.matrix[static_cast<std::size_t>(i)];
  const Eigen::Matrix3d sigma = l0 * l0.transpose();
  EXPECT_LT((l * l.transpose() - sigma).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((l - l0).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_NO_THROW(ct.validate());
}

TEST(ColorMatrix, InverseComposesToIdentity) {
  RngStream rng(22, 0);
  Eigen::Matrix3d l0 = Eigen::Matrix3d::Identity();
  const ColorTransform ct = color_matrix_from_dataset(images_with_covariance(l0, rng));
  Eigen::Matrix3d l;
  for (int i = 0; i < 9; ++i) l(i / 3, i % 3) = ct.matrix[static_cast<std::size_t>(i)];
  EXPECT_LT((l * l.inverse() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((l - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(ColorMatrix, ValidateRejectsSingular) {
  ColorTransform ct;
  ct.matrix = {1, 2, 3, 2, 4, 6, 0, 0, 1};
  EXPECT_THROW(ct.validate(), InvalidArgument);
}

TEST(Pyramid, CheckpointRoundTrip) {
  testing_support::TempDir dir;
  RngStream rng(30, 0);
  PyramidImage p = init_pyramid(rng, 8);
  p.active_count = 3;
  save_pyramid(dir.path(), p, 417);
  const auto ck = load_pyramid(dir.path());
  EXPECT_EQ(ck.iteration, 417u);
  EXPECT_EQ(ck.pyramid.active_count, 3u);
  ASSERT_EQ(ck.pyramid.levels.size(), p.levels.size());
  for (std::size_t i = 0; i < p.levels.size(); ++i) EXPECT_EQ(ck.pyramid.levels[i], p.levels[i]);
}
