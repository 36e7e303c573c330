#include "ttrd3/mfam.hpp"

#include <algorithm>
#include <stdexcept>

namespace ttrd3 {

MfabConfig MfabConfig::for_channels(int channels, int cbam_reduction, int sam_kernel) {
  MfabConfig cfg;
  cfg.in_channels = channels;
  cfg.branch_channels = (channels + 1) / 2;
  cfg.cbam_reduction = cbam_reduction;
  cfg.sam_kernel = sam_kernel;
  return cfg;
}

Cbam::Cbam(ParamStore& store, const std::string& name, int channels, int reduction, int sam_kernel, Rng& rng)
    : fc1(make_linear(store, name + ".fc1", channels, std::max(1, channels / std::max(1, reduction)), rng)),
      fc2(make_linear(store, name + ".fc2", std::max(1, channels / std::max(1, reduction)), channels, rng)),
      spatial(make_conv_same(store, name + ".spatial", 2, 1, sam_kernel, rng)) {}

ag::Var Cbam::operator()(const ag::Var& x) const {
  auto mlp = [this](const ag::Var& d) { return fc2(ag::relu(fc1(d))); };
  const ag::Var channel_logits = ag::add(mlp(ag::global_avg_pool(x)), mlp(ag::global_max_pool(x)));
  const ag::Var xc = ag::channel_gate(x, ag::sigmoid(channel_logits));
  const ag::Var maps = ag::concat_channels({ag::channel_mean_map(xc), ag::channel_max_map(xc)});
  return ag::spatial_gate(xc, ag::sigmoid(spatial(maps)));
}

namespace {

std::array<Conv2d, 3> make_depthwise_bank(ParamStore& store, const std::string& name, int channels, Rng& rng) {
  std::array<Conv2d, 3> bank;
  for (std::size_t i = 0; i < 3; ++i) {
    const int k = kMfabKernels[i];
    bank[i] = make_conv_same(store, name + ".dw" + std::to_string(k), channels, channels, k, rng, channels);
  }
  return bank;
}

}  // namespace

Mfab::Mfab(ParamStore& store, const std::string& name, const MfabConfig& cfg, Rng& rng)
    : norm(make_layer_norm(store, name + ".norm", cfg.in_channels)),
      expand(make_conv(store, name + ".expand", cfg.in_channels, 3 * cfg.branch_channels, 1, rng)),
      first_bank(make_depthwise_bank(store, name + ".first", cfg.branch_channels, rng)),
      second_bank(make_depthwise_bank(store, name + ".second", 3 * cfg.branch_channels, rng)),
      cbam(store, name + ".cbam", 9 * cfg.branch_channels, cfg.cbam_reduction, cfg.sam_kernel, rng),
      project(make_conv(store, name + ".project", 9 * cfg.branch_channels, cfg.in_channels, 1, rng)),
      cfg_(cfg) {
  if (cfg.in_channels < 1 || cfg.branch_channels < 1) throw std::invalid_argument("MFAB widths must be positive");
}

ag::Var Mfab::operator()(const ag::Var& x) const {
  if (x.value().rank() != 4 || x.value().dim(1) != cfg_.in_channels) {
    throw std::invalid_argument("MFAB expects " + std::to_string(cfg_.in_channels) + " channels, got " +
                                shape_str(x.shape()));
  }
  const int cb = cfg_.branch_channels;
  const ag::Var expanded = expand(norm(x));
  std::vector<ag::Var> shallow;
  for (int i = 0; i < 3; ++i) shallow.push_back(ag::relu(first_bank[i](ag::slice_channels(expanded, i * cb, cb))));
  const ag::Var xa = ag::concat_channels(shallow);
  std::vector<ag::Var> deep;
  for (int i = 0; i < 3; ++i) deep.push_back(ag::relu(second_bank[i](xa)));
  const ag::Var xb = ag::concat_channels(deep);
  return ag::add(x, project(cbam(xb)));
}

Mfam::Mfam(const MfamConfig& cfg, ParamStore& store, Rng& rng, const std::string& prefix) : cfg_(cfg) {
  for (int s = 0; s < 3; ++s) {
    if (cfg.widths[s] < 1 || cfg.block_counts[s] < 0) throw std::invalid_argument("invalid MFAM widths/counts");
  }
  stem_ = make_conv_same(store, prefix + ".stem", cfg.image_channels, cfg.widths[0], 3, rng);
  for (int s = 0; s < 3; ++s) {
    const auto bcfg = MfabConfig::for_channels(cfg.widths[s], cfg.cbam_reduction, cfg.sam_kernel);
    for (int b = 0; b < cfg.block_counts[s]; ++b) {
      blocks_[s].emplace_back(store, prefix + ".s" + std::to_string(s + 1) + ".mfab" + std::to_string(b), bcfg, rng);
    }
    if (s < 2) {
      down_[s] = make_conv(store, prefix + ".down" + std::to_string(s + 1), cfg.widths[s], cfg.widths[s + 1], 3, rng,
                           ag::Conv2dSpec{2, 1, 1});
    }
  }
}

std::array<ag::Var, 3> Mfam::forward(const ag::Var& images) const {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != cfg_.image_channels) {
    throw std::invalid_argument("MFAM expects [N, " + std::to_string(cfg_.image_channels) + ", H, W], got " +
                                shape_str(s));
  }
  if (s[2] % 4 != 0 || s[3] % 4 != 0) {
    throw std::invalid_argument("MFAM input spatial dims must be divisible by 4, got " + shape_str(s));
  }
  std::array<ag::Var, 3> out;
  ag::Var x = stem_(images);
  for (int sc = 0; sc < 3; ++sc) {
    for (const auto& block : blocks_[sc]) x = block(x);
    out[sc] = x;
    if (sc < 2) x = down_[sc](x);
  }
  return out;
}

PyramidFeatures Mfam::pyramid_forward(const ImagePlane& img) const {
  ag::NoGradGuard guard;
  auto vars = forward(ag::constant(batch_of_one(img.data)));
  PyramidFeatures pf;
  for (int s = 0; s < 3; ++s) pf.scales[s] = unstack(vars[s].value(), 0);
  return pf;
}

}  // namespace ttrd3
