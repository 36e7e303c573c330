#include "ttrd3/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace ttrd3 {

double Rng::gumbel() {
  double u = uniform();
  while (u <= 0.0) u = uniform();
  return -std::log(-std::log(u));
}

Tensor Rng::normal_tensor(Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.vec()) v = stddev * normal();
  return t;
}

ag::Var ParamStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  entries_.emplace_back(name, ag::parameter(std::move(init)));
  return entries_.back().second;
}

ag::Var ParamStore::get(const std::string& name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return v;
  throw std::out_of_range("no parameter named '" + name + "'");
}

bool ParamStore::contains(const std::string& name) const {
  for (const auto& entry : entries_)
    if (entry.first == name) return true;
  return false;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& entry : entries_) n += entry.second.value().size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& entry : entries_) entry.second.zero_grad();
}

Conv2d make_conv(ParamStore& store, const std::string& name, int cin, int cout, int kernel, Rng& rng,
                 ag::Conv2dSpec spec, bool with_bias) {
  if (cin % spec.groups != 0 || cout % spec.groups != 0) {
    throw std::invalid_argument("conv '" + name + "': channels not divisible by groups");
  }
  const int fan_in = (cin / spec.groups) * kernel * kernel;
  const double bound = std::sqrt(6.0 / fan_in);
  Tensor w(Shape{cout, cin / spec.groups, kernel, kernel});
  for (double& v : w.vec()) v = rng.uniform(-bound, bound);
  Conv2d conv;
  conv.spec = spec;
  conv.weight = store.add(name + ".weight", std::move(w));
  if (with_bias) conv.bias = store.add(name + ".bias", Tensor(Shape{cout}));
  return conv;
}

Conv2d make_conv_same(ParamStore& store, const std::string& name, int cin, int cout, int kernel, Rng& rng,
                      int groups) {
  return make_conv(store, name, cin, cout, kernel, rng, ag::Conv2dSpec{1, kernel / 2, groups});
}

Linear make_linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng) {
  const double bound = std::sqrt(6.0 / in);
  Tensor w(Shape{out, in});
  for (double& v : w.vec()) v = rng.uniform(-bound, bound);
  Linear lin;
  lin.weight = store.add(name + ".weight", std::move(w));
  lin.bias = store.add(name + ".bias", Tensor(Shape{out}));
  return lin;
}

LayerNorm make_layer_norm(ParamStore& store, const std::string& name, int channels) {
  LayerNorm ln;
  ln.gamma = store.add(name + ".gamma", Tensor(Shape{channels}, 1.0));
  ln.beta = store.add(name + ".beta", Tensor(Shape{channels}));
  return ln;
}

Tensor batch_of_one(const Tensor& chw) {
  if (chw.rank() != 3) throw std::invalid_argument("batch_of_one expects [C,H,W]");
  return chw.reshaped(Shape{1, chw.dim(0), chw.dim(1), chw.dim(2)});
}

Tensor stack(const std::vector<Tensor>& items) {
  if (items.empty()) throw std::invalid_argument("stack: no items");
  const Shape& s = items[0].shape();
  if (s.size() != 3) throw std::invalid_argument("stack expects [C,H,W] items");
  Tensor out(Shape{static_cast<int>(items.size()), s[0], s[1], s[2]});
  const std::size_t per = items[0].size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != s) throw std::invalid_argument("stack: shape mismatch");
    std::copy(items[i].ptr(), items[i].ptr() + per, out.ptr() + i * per);
  }
  return out;
}

Tensor unstack(const Tensor& nchw, int n) {
  if (nchw.rank() != 4 || n < 0 || n >= nchw.dim(0)) throw std::invalid_argument("unstack: bad index or rank");
  Tensor out(Shape{nchw.dim(1), nchw.dim(2), nchw.dim(3)});
  const std::size_t per = out.size();
  std::copy(nchw.ptr() + static_cast<std::size_t>(n) * per, nchw.ptr() + (n + 1) * per, out.ptr());
  return out;
}

}  // namespace ttrd3
