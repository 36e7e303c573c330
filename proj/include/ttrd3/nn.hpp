#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ttrd3/ops.hpp"

namespace ttrd3 {

/// Seeded random source. All stochastic inputs (initialization, diffusion
/// noise, Gumbel noise, data sampling) flow from explicit instances.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  double gumbel();
  std::uint64_t next_u64() { return engine_(); }

  Tensor normal_tensor(Shape shape, double stddev = 1.0);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Named learnable arrays in registration order.
class ParamStore {
 public:
  ag::Var add(const std::string& name, Tensor init);
  [[nodiscard]] ag::Var get(const std::string& name) const;
  [[nodiscard]] bool contains(const std::string& name) const;
  [[nodiscard]] const std::vector<std::pair<std::string, ag::Var>>& entries() const { return entries_; }
  [[nodiscard]] std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, ag::Var>> entries_;
};

struct Conv2d {
  ag::Var weight;
  ag::Var bias;
  ag::Conv2dSpec spec;

  [[nodiscard]] ag::Var operator()(const ag::Var& x) const { return ag::conv2d(x, weight, bias, spec); }
};

/// He-uniform initialized convolution registered under `name`.weight/.bias.
Conv2d make_conv(ParamStore& store, const std::string& name, int cin, int cout, int kernel, Rng& rng,
                 ag::Conv2dSpec spec = {}, bool with_bias = true);
/// "Same"-padded convolution helper.
Conv2d make_conv_same(ParamStore& store, const std::string& name, int cin, int cout, int kernel, Rng& rng,
                      int groups = 1);

struct Linear {
  ag::Var weight;
  ag::Var bias;

  [[nodiscard]] ag::Var operator()(const ag::Var& x) const { return ag::linear(x, weight, bias); }
};

Linear make_linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng);

struct LayerNorm {
  ag::Var gamma;
  ag::Var beta;

  [[nodiscard]] ag::Var operator()(const ag::Var& x) const { return ag::layer_norm_channels(x, gamma, beta); }
};

LayerNorm make_layer_norm(ParamStore& store, const std::string& name, int channels);

/// Adds a leading batch axis: [C,H,W] -> [1,C,H,W].
Tensor batch_of_one(const Tensor& chw);
/// Stacks same-shaped [C,H,W] tensors into [N,C,H,W].
Tensor stack(const std::vector<Tensor>& items);
/// Batch item n of an [N,C,H,W] tensor as [C,H,W].
Tensor unstack(const Tensor& nchw, int n);

}  // namespace ttrd3
