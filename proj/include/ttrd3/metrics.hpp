#pragma once

#include <Eigen/Dense>
#include <vector>

#include "ttrd3/losses.hpp"
#include "ttrd3/rddm.hpp"

namespace ttrd3 {

/// Value returned by psnr for identical inputs.
inline constexpr double kPsnrCap = 100.0;

/// Joint over all channels; capped at kPsnrCap.
double psnr(const ImagePlane& a, const ImagePlane& b, double peak = 1.0);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double peak = 1.0;
};

/// ITU-R 601 luminance for 3-channel planes, the single channel otherwise.
Tensor luminance(const ImagePlane& img);

/// Mean SSIM over all valid window positions of the luminance planes.
double ssim(const ImagePlane& a, const ImagePlane& b, const SsimOptions& opt = {});

struct GaussianStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  int n = 0;
};

/// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}). Throws if a covariance has
/// an eigenvalue below -psd_tol (relative to its largest magnitude).
double frechet_distance(const GaussianStats& s1, const GaussianStats& s2, double psd_tol = 1e-8);

/// Mean and unbiased covariance of row vectors. Needs at least two rows.
GaussianStats feature_stats(const std::vector<std::vector<double>>& features);

enum class FeatureReduce {
  Flatten,  // full feature map as one vector
  MeanStd,  // per-channel spatial mean and standard deviation
};

GaussianStats feature_stats(const std::vector<ImagePlane>& images, const PerceptualExtractor& ext,
                            FeatureReduce reduce = FeatureReduce::Flatten);

}  // namespace ttrd3
