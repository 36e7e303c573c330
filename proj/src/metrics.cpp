#include "ttrd3/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ttrd3 {

double psnr(const ImagePlane& a, const ImagePlane& b, double peak) {
  require_same_shape(a.data, b.data, "psnr");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(a.data.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

Tensor luminance(const ImagePlane& img) {
  const int h = img.height(), w = img.width();
  Tensor y(Shape{h, w});
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      y[static_cast<std::size_t>(r) * w + c] =
          img.channels() == 3 ? 0.299 * img.at(0, r, c) + 0.587 * img.at(1, r, c) + 0.114 * img.at(2, r, c)
                              : img.at(0, r, c);
    }
  return y;
}

namespace {

// Separable "valid" Gaussian filtering of an [H, W] map.
Tensor filter_valid(const Tensor& x, const std::vector<double>& g) {
  const int h = x.dim(0), w = x.dim(1), k = static_cast<int>(g.size());
  const int oh = h - k + 1, ow = w - k + 1;
  Tensor mid(Shape{h, ow});
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (int i = 0; i < k; ++i) acc += g[i] * x[static_cast<std::size_t>(r) * w + c + i];
      mid[static_cast<std::size_t>(r) * ow + c] = acc;
    }
  Tensor out(Shape{oh, ow});
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (int i = 0; i < k; ++i) acc += g[i] * mid[static_cast<std::size_t>(r + i) * ow + c];
      out[static_cast<std::size_t>(r) * ow + c] = acc;
    }
  return out;
}

}  // namespace

double ssim(const ImagePlane& a, const ImagePlane& b, const SsimOptions& opt) {
  require_same_shape(a.data, b.data, "ssim");
  if (opt.window < 1 || a.height() < opt.window || a.width() < opt.window) {
    throw std::invalid_argument("ssim: image smaller than the " + std::to_string(opt.window) + "px window");
  }
  // Contracted multiply-adds round the numerator and denominator differently,
  // so identical inputs are answered directly.
  if (a.data.vec() == b.data.vec()) return 1.0;
  std::vector<double> g(static_cast<std::size_t>(opt.window));
  double total = 0.0;
  const double mid = (opt.window - 1) / 2.0;
  for (int i = 0; i < opt.window; ++i) {
    g[i] = std::exp(-(i - mid) * (i - mid) / (2.0 * opt.sigma * opt.sigma));
    total += g[i];
  }
  for (double& v : g) v /= total;

  const Tensor x = luminance(a), y = luminance(b);
  Tensor xx = x, yy = y, xy = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const Tensor mx = filter_valid(x, g), my = filter_valid(y, g);
  const Tensor sxx = filter_valid(xx, g), syy = filter_valid(yy, g), sxy = filter_valid(xy, g);
  const double c1 = (opt.k1 * opt.peak) * (opt.k1 * opt.peak);
  const double c2 = (opt.k2 * opt.peak) * (opt.k2 * opt.peak);
  double acc = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
    acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
           ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return acc / static_cast<double>(mx.size());
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, double tol, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw std::runtime_error(std::string("eigendecomposition failed for ") + what);
  Eigen::VectorXd ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  if (ev.minCoeff() < -tol * scale) throw std::domain_error(std::string(what) + " is not positive semidefinite");
  ev = ev.cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const GaussianStats& s1, const GaussianStats& s2, double psd_tol) {
  const auto d = s1.mu.size();
  if (s2.mu.size() != d || s1.sigma.rows() != d || s1.sigma.cols() != d || s2.sigma.rows() != d ||
      s2.sigma.cols() != d) {
    throw std::invalid_argument("frechet_distance: feature dimensions differ");
  }
  const Eigen::MatrixXd a = 0.5 * (s1.sigma + s1.sigma.transpose());
  const Eigen::MatrixXd b = 0.5 * (s2.sigma + s2.sigma.transpose());
  const Eigen::MatrixXd ra = psd_sqrt(a, psd_tol, "first covariance");
  psd_sqrt(b, psd_tol, "second covariance");
  Eigen::MatrixXd inner = ra * b * ra;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (s1.mu - s2.mu).squaredNorm() + a.trace() + b.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, value);
}

GaussianStats feature_stats(const std::vector<std::vector<double>>& features) {
  if (features.size() < 2) throw std::invalid_argument("feature_stats needs at least two samples");
  const auto dim = static_cast<Eigen::Index>(features[0].size());
  Eigen::MatrixXd x(static_cast<Eigen::Index>(features.size()), dim);
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (static_cast<Eigen::Index>(features[i].size()) != dim) throw std::invalid_argument("feature length mismatch");
    x.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(features[i].data(), dim);
  }
  GaussianStats s;
  s.n = static_cast<int>(features.size());
  s.mu = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - s.mu.transpose();
  s.sigma = centered.transpose() * centered / static_cast<double>(s.n - 1);
  return s;
}

GaussianStats feature_stats(const std::vector<ImagePlane>& images, const PerceptualExtractor& ext,
                            FeatureReduce reduce) {
  if (images.size() < 2) throw std::invalid_argument("feature_stats needs at least two images");
  ag::NoGradGuard guard;
  std::vector<std::vector<double>> rows;
  for (const auto& img : images) {
    const Tensor f = ext.features(ag::constant(batch_of_one(img.data))).value();
    if (reduce == FeatureReduce::Flatten) {
      rows.push_back(f.vec());
      continue;
    }
    const int c = f.dim(1);
    const std::size_t hw = f.size() / static_cast<std::size_t>(c);
    std::vector<double> row;
    for (int ch = 0; ch < c; ++ch) {
      double m = 0.0, v = 0.0;
      for (std::size_t i = 0; i < hw; ++i) m += f[ch * hw + i];
      m /= static_cast<double>(hw);
      for (std::size_t i = 0; i < hw; ++i) v += (f[ch * hw + i] - m) * (f[ch * hw + i] - m);
      row.push_back(m);
      row.push_back(std::sqrt(v / static_cast<double>(hw)));
    }
    rows.push_back(std::move(row));
  }
  return feature_stats(rows);
}

}  // namespace ttrd3
