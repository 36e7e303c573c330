#pragma once

#include <array>
#include <string>
#include <vector>

#include "ttrd3/nn.hpp"
#include "ttrd3/rddm.hpp"

namespace ttrd3 {

struct MfabConfig {
  int in_channels = 16;
  int branch_channels = 8;
  int cbam_reduction = 8;
  int sam_kernel = 7;

  /// Branch width defaults to ceil(C / 2).
  static MfabConfig for_channels(int channels, int cbam_reduction = 8, int sam_kernel = 7);
};

inline constexpr std::array<int, 3> kMfabKernels{3, 5, 7};

/// Channel attention (shared MLP over avg- and max-pooled descriptors)
/// followed by spatial attention (conv over channelwise mean/max maps).
class Cbam {
 public:
  Cbam(ParamStore& store, const std::string& name, int channels, int reduction, int sam_kernel, Rng& rng);

  [[nodiscard]] ag::Var operator()(const ag::Var& x) const;

  Linear fc1;
  Linear fc2;
  Conv2d spatial;
};

/// Multi-scale feature aggregation block: LN, 1x1 expand to 3C', chunk,
/// depthwise 3/5/7 + ReLU, concat, second depthwise 3/5/7 bank over the
/// concatenation + ReLU, concat, CBAM, 1x1 project back to C, residual add.
class Mfab {
 public:
  Mfab(ParamStore& store, const std::string& name, const MfabConfig& cfg, Rng& rng);

  [[nodiscard]] ag::Var operator()(const ag::Var& x) const;
  [[nodiscard]] const MfabConfig& config() const { return cfg_; }

  LayerNorm norm;
  Conv2d expand;
  std::array<Conv2d, 3> first_bank;
  std::array<Conv2d, 3> second_bank;
  Cbam cbam;
  Conv2d project;

 private:
  MfabConfig cfg_;
};

struct MfamConfig {
  int image_channels = 3;
  std::array<int, 3> widths{16, 32, 64};
  std::array<int, 3> block_counts{2, 2, 2};
  int cbam_reduction = 8;
  int sam_kernel = 7;
};

/// Three feature maps whose spatial size halves from one scale to the next.
struct PyramidFeatures {
  std::array<Tensor, 3> scales;
};

/// Pyramid of MFAB stages. Scale s runs block_counts[s] MFABs at width
/// widths[s]; a stride-2 convolution moves to the next scale.
class Mfam {
 public:
  Mfam(const MfamConfig& cfg, ParamStore& store, Rng& rng, const std::string& prefix = "mfam");

  /// images: [N, image_channels, H, W], H and W divisible by 4.
  [[nodiscard]] std::array<ag::Var, 3> forward(const ag::Var& images) const;
  [[nodiscard]] PyramidFeatures pyramid_forward(const ImagePlane& img) const;

  [[nodiscard]] const MfamConfig& config() const { return cfg_; }
  [[nodiscard]] const std::vector<Mfab>& blocks(int scale) const { return blocks_.at(static_cast<std::size_t>(scale)); }

 private:
  MfamConfig cfg_;
  Conv2d stem_;
  std::array<std::vector<Mfab>, 3> blocks_;
  std::array<Conv2d, 2> down_;
};

}  // namespace ttrd3
