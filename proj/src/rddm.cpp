#include "ttrd3/rddm.hpp"

#include <algorithm>
#include <cmath>

namespace ttrd3 {

std::string to_string(PlaneRole role) {
  switch (role) {
    case PlaneRole::HR:
      return "hr";
    case PlaneRole::LRup:
      return "lr_up";
    case PlaneRole::Residual:
      return "residual";
    case PlaneRole::Noised:
      return "noised";
    case PlaneRole::Noise:
      return "noise";
    case PlaneRole::SR:
      return "sr";
  }
  return "unknown";
}

namespace {

void check_step(int t, int lo, const CoeffSchedule& sched, const char* what) {
  if (t < lo || t > sched.T()) {
    throw std::out_of_range(std::string(what) + ": step " + std::to_string(t) + " outside [" + std::to_string(lo) +
                            ", " + std::to_string(sched.T()) + "]");
  }
}

}  // namespace

ImagePlane make_residual(const ImagePlane& lr_up, const ImagePlane& hr) {
  require_same_shape(lr_up.data, hr.data, "make_residual");
  return ImagePlane(lr_up.data - hr.data, PlaneRole::Residual);
}

ImagePlane forward_diffuse(const ImagePlane& hr, const ImagePlane& residual, int t, const ImagePlane& eps,
                           const CoeffSchedule& sched) {
  check_step(t, 0, sched, "forward_diffuse");
  require_same_shape(hr.data, residual.data, "forward_diffuse");
  require_same_shape(hr.data, eps.data, "forward_diffuse");
  const double a = sched.alpha_bar(t), b = sched.beta_bar(t);
  Tensor out = hr.data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += a * residual.data[i] + b * eps.data[i];
  return ImagePlane(std::move(out), PlaneRole::Noised);
}

ImagePlane degrade_terminal(const ImagePlane& lr_up, const ImagePlane& eps, const CoeffSchedule& sched) {
  require_same_shape(lr_up.data, eps.data, "degrade_terminal");
  const double b = sched.beta_bar(sched.T());
  Tensor out = lr_up.data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b * eps.data[i];
  return ImagePlane(std::move(out), PlaneRole::Noised);
}

ImagePlane reconstruct_x0(const ImagePlane& noised, const ImagePlane& res_pred, const ImagePlane& eps_pred, int t,
                          const CoeffSchedule& sched) {
  check_step(t, 1, sched, "reconstruct_x0");
  require_same_shape(noised.data, res_pred.data, "reconstruct_x0");
  require_same_shape(noised.data, eps_pred.data, "reconstruct_x0");
  const double a = sched.alpha_bar(t), b = sched.beta_bar(t);
  Tensor out = noised.data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= a * res_pred.data[i] + b * eps_pred.data[i];
  return ImagePlane(std::move(out), PlaneRole::SR);
}

ImagePlane reverse_step(const ImagePlane& noised, const ImagePlane& res_pred, const ImagePlane& eps_pred, int t,
                        int prev, double eta, const ImagePlane& noise, const CoeffSchedule& sched) {
  if (!(prev >= 0 && prev < t)) throw std::invalid_argument("reverse_step requires 0 <= prev < t");
  check_step(t, 1, sched, "reverse_step");
  require_same_shape(noised.data, res_pred.data, "reverse_step");
  require_same_shape(noised.data, eps_pred.data, "reverse_step");
  const double sigma = prev == 0 ? 0.0 : sigma_t(sched, t, prev, eta);
  const double bp = sched.beta_bar(prev);
  const double rem = bp * bp - sigma * sigma;
  if (rem < 0.0) {
    throw std::domain_error("reverse_step: sigma^2 exceeds beta_bar_prev^2 (schedule/eta inconsistent)");
  }
  const double res_coef = sched.alpha_bar(t) - sched.alpha_bar(prev);
  const double eps_coef = sched.beta_bar(t) - std::sqrt(rem);
  const bool noisy = sigma > 0.0;
  if (noisy) require_same_shape(noised.data, noise.data, "reverse_step noise");
  Tensor out = noised.data;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] -= res_coef * res_pred.data[i] + eps_coef * eps_pred.data[i];
    if (noisy) out[i] += sigma * noise.data[i];
  }
  return ImagePlane(std::move(out), prev == 0 ? PlaneRole::SR : PlaneRole::Noised);
}

std::vector<int> timestep_plan(int T, int T_sample) {
  if (T_sample < 2) throw std::invalid_argument("timestep_plan: T_sample must be >= 2");
  if (T_sample > T) throw std::invalid_argument("timestep_plan: T_sample must not exceed T");
  const int stride = T / (T_sample - 1);
  std::vector<int> plan;
  plan.reserve(static_cast<std::size_t>(T_sample));
  for (int i = 0; i < T_sample; ++i) {
    const int t = std::max(T - i * stride, 1);
    if (!plan.empty() && plan.back() == t) break;
    plan.push_back(t);
  }
  return plan;
}

}  // namespace ttrd3
