#pragma once

#include <string>
#include <vector>

#include "ttrd3/schedule.hpp"
#include "ttrd3/tensor.hpp"

namespace ttrd3 {

enum class PlaneRole { HR, LRup, Residual, Noised, Noise, SR };

std::string to_string(PlaneRole role);

/// Multi-channel raster stored channel-major as a [C, H, W] tensor.
struct ImagePlane {
  Tensor data;
  PlaneRole role = PlaneRole::HR;
  double range_lo = 0.0;
  double range_hi = 1.0;

  ImagePlane() = default;
  ImagePlane(Tensor t, PlaneRole r) : data(std::move(t)), role(r) {
    if (data.rank() != 3) throw std::invalid_argument("image plane must be [C, H, W], got " + shape_str(data.shape()));
  }
  ImagePlane(int channels, int height, int width, PlaneRole r, double fill = 0.0)
      : data(Shape{channels, height, width}, fill), role(r) {}

  [[nodiscard]] int channels() const { return data.dim(0); }
  [[nodiscard]] int height() const { return data.dim(1); }
  [[nodiscard]] int width() const { return data.dim(2); }
  [[nodiscard]] double& at(int c, int h, int w) { return data[(static_cast<std::size_t>(c) * height() + h) * width() + w]; }
  [[nodiscard]] double at(int c, int h, int w) const {
    return data[(static_cast<std::size_t>(c) * height() + h) * width() + w];
  }
};

/// I_res = I_in - I_0.
ImagePlane make_residual(const ImagePlane& lr_up, const ImagePlane& hr);

/// I_t = I_0 + alpha_bar_t I_res + beta_bar_t eps, for t in [0, T].
ImagePlane forward_diffuse(const ImagePlane& hr, const ImagePlane& residual, int t, const ImagePlane& eps,
                           const CoeffSchedule& sched);

/// I_T = I_in + beta_bar_T eps.
ImagePlane degrade_terminal(const ImagePlane& lr_up, const ImagePlane& eps, const CoeffSchedule& sched);

/// I_0 estimate: I_t - alpha_bar_t res_pred - beta_bar_t eps_pred, for t in [1, T].
ImagePlane reconstruct_x0(const ImagePlane& noised, const ImagePlane& res_pred, const ImagePlane& eps_pred, int t,
                          const CoeffSchedule& sched);

/// One reverse move from step t to an earlier step prev:
///   I_prev = I_t - (abar_t - abar_prev) res_pred
///                - (bbar_t - sqrt(bbar_prev^2 - sigma^2)) eps_pred + sigma noise.
/// sigma is forced to 0 when prev == 0. `noise` may be empty when sigma is 0.
ImagePlane reverse_step(const ImagePlane& noised, const ImagePlane& res_pred, const ImagePlane& eps_pred, int t,
                        int prev, double eta, const ImagePlane& noise, const CoeffSchedule& sched);

/// Descending visiting order of the subsampled reverse loop. The stride is
/// floor(T / (T_sample - 1)); entries below 1 clip to 1 and duplicates drop.
/// The step after the last entry is 0.
std::vector<int> timestep_plan(int T, int T_sample);

}  // namespace ttrd3
