#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ttrd3/nn.hpp"
#include "ttrd3/rddm.hpp"
#include "ttrd3/sttg.hpp"

namespace ttrd3 {

/// OneNetA: one U-Net whose head emits residual and noise halves.
/// OneNetB: one encoder shared by a residual decoder and a noise decoder.
/// TwoNet: two independent U-Nets.
enum class DenoiserVariant { OneNetA, OneNetB, TwoNet };

DenoiserVariant parse_variant(const std::string& name);
std::string to_string(DenoiserVariant v);

struct DenoiserConfig {
  DenoiserVariant variant = DenoiserVariant::OneNetA;
  int image_channels = 3;
  int base_channels = 16;
  std::vector<int> channel_multipliers{1, 2, 2, 4};
  /// Channel width of the guidance map injected at decoder levels 0..2;
  /// 0 disables injection at that level.
  std::array<int, 3> guidance_channels{16, 32, 64};
  int time_embedding_dim = 32;

  [[nodiscard]] std::vector<int> stage_widths() const;
};

/// Sinusoidal features of integer timesteps: [N, dim].
Tensor timestep_features(const std::vector<int>& steps, int dim);

struct DenoiserOutput {
  ag::Var eps;
  ag::Var res;
};

class Denoiser {
 public:
  Denoiser(const DenoiserConfig& cfg, ParamStore& store, Rng& rng, const std::string& prefix = "denoiser");
  ~Denoiser();
  Denoiser(Denoiser&&) noexcept;
  Denoiser& operator=(Denoiser&&) noexcept;

  /// x_t, x_in: [N, image_channels, H, W]; guidance maps per level (may be
  /// undefined Vars to skip); steps: one per batch item in [1, T].
  [[nodiscard]] DenoiserOutput forward(const ag::Var& x_t, const ag::Var& x_in, const std::array<ag::Var, 3>& guidance,
                                       const std::vector<int>& steps) const;

  [[nodiscard]] const DenoiserConfig& config() const { return cfg_; }
  [[nodiscard]] std::size_t param_count() const;

  /// Channel count emitted by the final layer of each decoder head.
  [[nodiscard]] std::vector<int> head_channels() const;

 private:
  struct Net;
  DenoiserConfig cfg_;
  std::vector<ag::Var> params_;
  std::unique_ptr<Net> net_;
};

Denoiser build_denoiser(const DenoiserConfig& cfg, ParamStore& store, Rng& rng);

/// Single-image convenience wrapper (eval mode, no gradient recording).
std::pair<ImagePlane, ImagePlane> predict(const Denoiser& den, const ImagePlane& noised, const ImagePlane& lr_up,
                                          const TextureGuidance& guidance, int t, int T);

std::size_t param_count(const Denoiser& den);

}  // namespace ttrd3
