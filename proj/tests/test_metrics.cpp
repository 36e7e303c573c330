#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "ttrd3/metrics.hpp"

using namespace ttrd3;
using testing::random_tensor;

namespace {

ImagePlane rand_img(Rng& rng, int c = 3, int h = 16, int w = 16) {
  return ImagePlane(random_tensor({c, h, w}, rng, 0.0, 1.0), PlaneRole::SR);
}

// Direct 2-D window SSIM on luminance.
double ssim_oracle(const ImagePlane& a, const ImagePlane& b) {
  const int h = a.height(), w = a.width(), k = 11;
  auto lum = [](const ImagePlane& p, int y, int x) {
    return p.channels() == 3 ? 0.299 * p.at(0, y, x) + 0.587 * p.at(1, y, x) + 0.114 * p.at(2, y, x) : p.at(0, y, x);
  };
  double g[11][11], gs = 0.0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) gs += g[i][j] = std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) / 4.5);
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0.0;
  int count = 0;
  for (int y = 0; y + k <= h; ++y)
    for (int x = 0; x + k <= w; ++x) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          const double wt = g[i][j] / gs, u = lum(a, y + i, x + j), v = lum(b, y + i, x + j);
          mx += wt * u;
          my += wt * v;
          sxx += wt * u * u;
          syy += wt * v * v;
          sxy += wt * u * v;
        }
      const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
      total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / count;
}

Eigen::MatrixXd random_psd(Rng& rng, int d) {
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) a(i, j) = rng.normal();
  return a * a.transpose() / d;
}

// Denman-Beavers iteration for the principal square root.
Eigen::MatrixXd sqrtm_db(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd y = m, z = Eigen::MatrixXd::Identity(m.rows(), m.cols());
  for (int i = 0; i < 100; ++i) {
    const Eigen::MatrixXd yn = 0.5 * (y + z.inverse());
    const Eigen::MatrixXd zn = 0.5 * (z + y.inverse());
    y = yn;
    z = zn;
  }
  return y;
}

GaussianStats stats(Eigen::VectorXd mu, Eigen::MatrixXd sigma) { return {std::move(mu), std::move(sigma), 2}; }

}  // namespace

TEST_CASE("psnr") {
  Rng rng(70);
  const auto a = rand_img(rng), b = rand_img(rng);
  CHECK(psnr(a, a) == kPsnrCap);
  ImagePlane c = a;
  c.data.fill(0.0);
  ImagePlane d = c;
  d.data.fill(0.1);
  CHECK(psnr(c, d) == doctest::Approx(20.0));
  double se = 0.0;
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) se += std::pow(a.at(ch, y, x) - b.at(ch, y, x), 2);
  CHECK(std::abs(psnr(a, b) - 10.0 * std::log10(1.0 / (se / (3 * 16 * 16)))) < 1e-9);
  double last = kPsnrCap + 1;
  for (double amp : {0.01, 0.02, 0.05, 0.1, 0.2}) {
    Rng nr(71);
    ImagePlane noisy = a;
    for (double& v : noisy.data.vec()) v += amp * nr.uniform(-1, 1);
    const double p = psnr(a, noisy);
    CHECK(p < last);
    last = p;
  }
  CHECK_THROWS_AS(psnr(a, rand_img(rng, 3, 8, 16)), std::invalid_argument);
}

TEST_CASE("ssim") {
  Rng rng(72);
  const auto a = rand_img(rng, 3, 20, 24), b = rand_img(rng, 3, 20, 24);
  CHECK(ssim(a, a) == 1.0);
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-14));
  CHECK(std::abs(ssim(a, b) - ssim_oracle(a, b)) < 1e-6);
  const auto g1 = rand_img(rng, 1, 16, 16), g2 = rand_img(rng, 1, 16, 16);
  CHECK(std::abs(ssim(g1, g2) - ssim_oracle(g1, g2)) < 1e-6);
  ImagePlane c(1, 16, 16, PlaneRole::SR, 0.3), d(1, 16, 16, PlaneRole::SR, 0.7);
  const double c1 = 1e-4;
  CHECK(ssim(c, d) == doctest::Approx((2 * 0.3 * 0.7 + c1) / (0.09 + 0.49 + c1)).epsilon(1e-10));
  const double v = ssim(a, b);
  CHECK(v >= -1.0);
  CHECK(v <= 1.0);
  CHECK_THROWS_AS(ssim(rand_img(rng, 3, 8, 8), rand_img(rng, 3, 8, 8)), std::invalid_argument);
}

TEST_CASE("frechet distance closed forms") {
  Eigen::VectorXd z(1), o(1);
  z << 0.0;
  o << 1.0;
  Eigen::MatrixXd one(1, 1);
  one << 1.0;
  CHECK(std::abs(frechet_distance(stats(z, one), stats(o, one)) - 1.0) < 1e-9);
  Rng rng(73);
  const auto s = random_psd(rng, 5);
  Eigen::VectorXd mu = Eigen::VectorXd::Random(5);
  CHECK(frechet_distance(stats(mu, s), stats(mu, s)) < 1e-9);
  for (int i = 0; i < 50; ++i) {
    const auto a = stats(Eigen::VectorXd::Random(4), random_psd(rng, 4));
    const auto b = stats(Eigen::VectorXd::Random(4), random_psd(rng, 4));
    CHECK(std::abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8);
  }
}

TEST_CASE("frechet distance against a Denman-Beavers oracle") {
  Rng rng(74);
  for (int i = 0; i < 10; ++i) {
    const auto a = stats(Eigen::VectorXd::Random(4), random_psd(rng, 4) + 0.1 * Eigen::MatrixXd::Identity(4, 4));
    const auto b = stats(Eigen::VectorXd::Random(4), random_psd(rng, 4) + 0.1 * Eigen::MatrixXd::Identity(4, 4));
    const double oracle = (a.mu - b.mu).squaredNorm() + a.sigma.trace() + b.sigma.trace() -
                          2.0 * sqrtm_db(a.sigma * b.sigma).trace();
    CHECK(std::abs(frechet_distance(a, b) - oracle) < 1e-6);
  }
  Eigen::MatrixXd bad = Eigen::MatrixXd::Identity(2, 2);
  bad(1, 1) = -1.0;
  CHECK_THROWS_AS(frechet_distance(stats(Eigen::VectorXd::Zero(2), bad), stats(Eigen::VectorXd::Zero(2), bad)),
                  std::domain_error);
  CHECK_THROWS_AS(frechet_distance(stats(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2)),
                                   stats(Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3))),
                  std::invalid_argument);
}

TEST_CASE("feature statistics") {
  Rng rng(75);
  const auto img = rand_img(rng, 1, 4, 4);
  IdentityExtractor id;
  const auto rep = feature_stats(std::vector<ImagePlane>{img, img, img}, id);
  CHECK(rep.sigma.cwiseAbs().maxCoeff() < 1e-24);
  const auto s2 = feature_stats(std::vector<std::vector<double>>{{1.0, 2.0}, {3.0, 6.0}});
  CHECK(s2.mu(0) == 2.0);
  CHECK(s2.mu(1) == 4.0);
  CHECK(s2.sigma(0, 0) == 2.0);
  CHECK(s2.sigma(0, 1) == 4.0);
  CHECK(s2.sigma(1, 1) == 8.0);

  std::vector<std::vector<double>> rows(30, std::vector<double>(3));
  for (auto& r : rows)
    for (double& v : r) v = rng.normal();
  const auto s = feature_stats(rows);
  for (int i = 0; i < 3; ++i) {
    double m = 0.0;
    for (const auto& r : rows) m += r[i] / 30.0;
    CHECK(s.mu(i) == doctest::Approx(m));
    for (int j = 0; j < 3; ++j) {
      double c = 0.0;
      for (const auto& r : rows) c += (r[i] - s.mu(i)) * (r[j] - s.mu(j)) / 29.0;
      CHECK(s.sigma(i, j) == doctest::Approx(c));
    }
  }
  const auto pooled = feature_stats(std::vector<ImagePlane>{rand_img(rng), rand_img(rng)}, ConvStackExtractor{},
                                    FeatureReduce::MeanStd);
  CHECK(pooled.mu.size() == 16);
  CHECK_THROWS_AS(feature_stats(std::vector<ImagePlane>{img}, id), std::invalid_argument);
}
