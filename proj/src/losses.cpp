#include "ttrd3/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace ttrd3 {

ConvStackExtractor::ConvStackExtractor(int in_channels, int width, std::uint64_t seed) : in_channels_(in_channels) {
  if (in_channels < 1 || width < 1) throw std::invalid_argument("extractor widths must be positive");
  ParamStore scratch;
  Rng rng(seed);
  const int cin[3] = {in_channels, width, width};
  for (int i = 0; i < 3; ++i) {
    Conv2d c = make_conv_same(scratch, "l" + std::to_string(i), cin[i], width, 3, rng);
    layers_.push_back(Conv2d{ag::constant(c.weight.value()), ag::constant(c.bias.value()), c.spec});
  }
}

ag::Var ConvStackExtractor::features(const ag::Var& images) const {
  if (images.value().rank() != 4 || images.value().dim(1) != in_channels_) {
    throw std::invalid_argument("extractor expects " + std::to_string(in_channels_) + " channels, got " +
                                shape_str(images.shape()));
  }
  ag::Var h = images;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size()) h = ag::relu(h);
  }
  return h;
}

std::unique_ptr<PerceptualExtractor> make_extractor(const std::string& name, int in_channels) {
  if (name == "identity") return std::make_unique<IdentityExtractor>();
  if (name == "convstack") return std::make_unique<ConvStackExtractor>(in_channels);
  throw std::invalid_argument("unknown perceptual extractor '" + name + "'");
}

ag::Var diffusion_loss(const ag::Var& res_true, const ag::Var& res_pred, const ag::Var& eps_true,
                       const ag::Var& eps_pred, const LossWeights& w) {
  return ag::weighted_sum({ag::mse(res_true, res_pred), ag::mse(eps_true, eps_pred)}, {w.lambda_res, w.lambda_eps});
}

ag::Var pixel_loss(const ag::Var& sr, const ag::Var& hr) { return ag::l1(sr, hr); }

ag::Var perceptual_loss(const ag::Var& sr, const ag::Var& hr, const PerceptualExtractor& ext) {
  require_same_shape(sr.value(), hr.value(), "perceptual_loss");
  return ag::mse(ext.features(sr), ext.features(hr));
}

namespace {

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw std::domain_error(std::string("non-finite ") + what + " loss");
}

}  // namespace

ag::Var total_loss(const ag::Var& diffusion, const ag::Var& pixel, const ag::Var& perceptual, const LossWeights& w) {
  require_finite(diffusion.value()[0], "diffusion");
  require_finite(pixel.value()[0], "pixel");
  require_finite(perceptual.value()[0], "perceptual");
  return ag::weighted_sum({diffusion, pixel, perceptual}, {w.lambda1, w.lambda2, w.lambda3});
}

double total_loss(const LossParts& parts, const LossWeights& w) {
  require_finite(parts.diffusion, "diffusion");
  require_finite(parts.pixel, "pixel");
  require_finite(parts.perceptual, "perceptual");
  return w.lambda1 * parts.diffusion + w.lambda2 * parts.pixel + w.lambda3 * parts.perceptual;
}

ag::Var estimate_x0(const ag::Var& noised, const ag::Var& res_pred, const ag::Var& eps_pred,
                    const std::vector<int>& steps, const CoeffSchedule& sched) {
  std::vector<double> abar, bbar;
  for (int t : steps) {
    if (t < 1 || t > sched.T()) throw std::out_of_range("estimate_x0: step outside [1, T]");
    abar.push_back(sched.alpha_bar(t));
    bbar.push_back(sched.beta_bar(t));
  }
  return ag::sub(ag::sub(noised, ag::scale_per_item(res_pred, abar)), ag::scale_per_item(eps_pred, bbar));
}

namespace {

ag::Var as_batch(const ImagePlane& p) { return ag::constant(batch_of_one(p.data)); }

}  // namespace

double diffusion_loss(const ImagePlane& res_true, const ImagePlane& res_pred, const ImagePlane& eps_true,
                      const ImagePlane& eps_pred, const LossWeights& w) {
  ag::NoGradGuard guard;
  return diffusion_loss(as_batch(res_true), as_batch(res_pred), as_batch(eps_true), as_batch(eps_pred), w).value()[0];
}

double pixel_loss(const ImagePlane& sr, const ImagePlane& hr) {
  ag::NoGradGuard guard;
  return pixel_loss(as_batch(sr), as_batch(hr)).value()[0];
}

double perceptual_loss(const ImagePlane& sr, const ImagePlane& hr, const PerceptualExtractor& ext) {
  ag::NoGradGuard guard;
  return perceptual_loss(as_batch(sr), as_batch(hr), ext).value()[0];
}

}  // namespace ttrd3
