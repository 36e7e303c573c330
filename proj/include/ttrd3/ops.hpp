#pragma once

#include <vector>

#include "ttrd3/autograd.hpp"

/// Differentiable tensor operations used by the networks. Image-like
/// operands are NCHW.
namespace ttrd3::ag {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// Multiplies batch item n of `x` by coeffs[n].
Var scale_per_item(const Var& x, std::vector<double> coeffs);
/// Sum of single-element vars weighted by constants.
Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights);

Var relu(const Var& x);
Var silu(const Var& x);
Var sigmoid(const Var& x);

struct Conv2dSpec {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// weight: [Cout, Cin/groups, k, k]; bias: [Cout] or undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dSpec spec = {});

Var upsample_nearest2x(const Var& x);
Var avg_pool(const Var& x, int factor);

Var concat_channels(const std::vector<Var>& parts);
Var slice_channels(const Var& x, int start, int count);

/// Normalizes over channels at each (n, h, w) site, then applies per-channel
/// gamma/beta ([C] each).
Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);

/// x: [N, in], weight: [out, in], bias: [out] -> [N, out].
Var linear(const Var& x, const Var& weight, const Var& bias);

/// y = x * (1 + scale[n,c]) + shift[n,c]; scale/shift are [N, C].
Var channel_modulate(const Var& x, const Var& scale, const Var& shift);

/// [N,C,H,W] -> [N,C] pooled over space.
Var global_avg_pool(const Var& x);
Var global_max_pool(const Var& x);
/// [N,C,H,W] -> [N,1,H,W] pooled over channels.
Var channel_mean_map(const Var& x);
Var channel_max_map(const Var& x);

/// y[n,c,h,w] = x[n,c,h,w] * gate[n,c]
Var channel_gate(const Var& x, const Var& gate);
/// y[n,c,h,w] = x[n,c,h,w] * gate[n,0,h,w]
Var spatial_gate(const Var& x, const Var& gate);

/// Mean of squared differences over all elements.
Var mse(const Var& a, const Var& b);
/// Mean of absolute differences over all elements.
Var l1(const Var& a, const Var& b);
Var mean_all(const Var& x);

}  // namespace ttrd3::ag
