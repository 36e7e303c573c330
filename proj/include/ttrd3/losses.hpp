#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ttrd3/nn.hpp"
#include "ttrd3/rddm.hpp"
#include "ttrd3/schedule.hpp"

namespace ttrd3 {

struct LossWeights {
  double lambda1 = 1.0;  // diffusion
  double lambda2 = 1e-3; // pixel
  double lambda3 = 1e-4; // perceptual
  double lambda_res = 1.0;
  double lambda_eps = 1.0;
};

struct LossParts {
  double diffusion = 0.0;
  double pixel = 0.0;
  double perceptual = 0.0;
};

/// Deterministic image-to-feature mapping for the perceptual loss and the
/// Fréchet statistics. Inputs are NCHW.
class PerceptualExtractor {
 public:
  virtual ~PerceptualExtractor() = default;
  [[nodiscard]] virtual ag::Var features(const ag::Var& images) const = 0;
  [[nodiscard]] virtual std::string name() const = 0;
};

class IdentityExtractor final : public PerceptualExtractor {
 public:
  [[nodiscard]] ag::Var features(const ag::Var& images) const override { return images; }
  [[nodiscard]] std::string name() const override { return "identity"; }
};

/// Three frozen 3x3 conv layers (ReLU between) drawn from a fixed seed.
class ConvStackExtractor final : public PerceptualExtractor {
 public:
  explicit ConvStackExtractor(int in_channels = 3, int width = 8, std::uint64_t seed = 1234);
  [[nodiscard]] ag::Var features(const ag::Var& images) const override;
  [[nodiscard]] std::string name() const override { return "convstack"; }
  [[nodiscard]] int in_channels() const { return in_channels_; }

 private:
  int in_channels_;
  std::vector<Conv2d> layers_;
};

/// "identity" or "convstack".
std::unique_ptr<PerceptualExtractor> make_extractor(const std::string& name, int in_channels = 3);

ag::Var diffusion_loss(const ag::Var& res_true, const ag::Var& res_pred, const ag::Var& eps_true,
                       const ag::Var& eps_pred, const LossWeights& w);
ag::Var pixel_loss(const ag::Var& sr, const ag::Var& hr);
ag::Var perceptual_loss(const ag::Var& sr, const ag::Var& hr, const PerceptualExtractor& ext);

/// lambda1 * diffusion + lambda2 * pixel + lambda3 * perceptual. Throws
/// std::domain_error on a non-finite part.
ag::Var total_loss(const ag::Var& diffusion, const ag::Var& pixel, const ag::Var& perceptual, const LossWeights& w);
double total_loss(const LossParts& parts, const LossWeights& w);

/// Batched clean-image estimate I_t - abar_t res - bbar_t eps, one step per item.
ag::Var estimate_x0(const ag::Var& noised, const ag::Var& res_pred, const ag::Var& eps_pred,
                    const std::vector<int>& steps, const CoeffSchedule& sched);

double diffusion_loss(const ImagePlane& res_true, const ImagePlane& res_pred, const ImagePlane& eps_true,
                      const ImagePlane& eps_pred, const LossWeights& w);
double pixel_loss(const ImagePlane& sr, const ImagePlane& hr);
double perceptual_loss(const ImagePlane& sr, const ImagePlane& hr, const PerceptualExtractor& ext);

}  // namespace ttrd3
