#include "ttrd3/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace ttrd3::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_rank(const Var& x, int rank, const char* what) {
  if (x.value().rank() != rank) {
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_str(x.shape()));
  }
}

template <typename F, typename G>
Var unary(const Var& x, F f, G df_from_xy) {
  Tensor y = Tensor::zeros_like(x.value());
  const auto xs = x.value().data();
  auto ys = y.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = f(xs[i]);
  return make_result(std::move(y), {x}, [df_from_xy](Node& self) {
    const auto xs = self.inputs[0]->value.data();
    const auto ys = self.value.data();
    const auto gy = self.grad.data();
    auto gx = self.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < xs.size(); ++i) gx[i] += gy[i] * df_from_xy(xs[i], ys[i]);
  });
}

// Column matrix [cg*k*k, ho*wo] for channels [c0, c0+cg) of image n.
void im2col(const double* img, int cg, int h, int w, int k, int stride, int pad, int ho, int wo, double* col) {
  for (int c = 0; c < cg; ++c) {
    const double* plane = img + static_cast<std::size_t>(c) * h * w;
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        double* row = col + (static_cast<std::size_t>(c) * k * k + kh * k + kw) * ho * wo;
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * stride - pad + kh;
          double* out = row + static_cast<std::size_t>(oh) * wo;
          if (ih < 0 || ih >= h) {
            std::fill(out, out + wo, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(ih) * w;
          for (int ow = 0; ow < wo; ++ow) {
            const int iw = ow * stride - pad + kw;
            out[ow] = (iw >= 0 && iw < w) ? src[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, int cg, int h, int w, int k, int stride, int pad, int ho, int wo, double* img) {
  for (int c = 0; c < cg; ++c) {
    double* plane = img + static_cast<std::size_t>(c) * h * w;
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const double* row = col + (static_cast<std::size_t>(c) * k * k + kh * k + kw) * ho * wo;
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= h) continue;
          double* dst = plane + static_cast<std::size_t>(ih) * w;
          const double* in = row + static_cast<std::size_t>(oh) * wo;
          for (int ow = 0; ow < wo; ++ow) {
            const int iw = ow * stride - pad + kw;
            if (iw >= 0 && iw < w) dst[iw] += in[ow];
          }
        }
      }
    }
  }
}

struct ConvGeom {
  int n, cin, h, w, cout, k, ho, wo, groups, cg, coutg;
  Conv2dSpec spec;
};

// Depthwise (one input and one output channel per group) forward/backward.
void depthwise_forward(const ConvGeom& g, const double* x, const double* wt, double* y) {
  const int k = g.k, s = g.spec.stride, p = g.spec.padding;
  for (int n = 0; n < g.n; ++n) {
    for (int c = 0; c < g.cout; ++c) {
      const double* xp = x + (static_cast<std::size_t>(n) * g.cin + c) * g.h * g.w;
      double* yp = y + (static_cast<std::size_t>(n) * g.cout + c) * g.ho * g.wo;
      const double* kp = wt + static_cast<std::size_t>(c) * k * k;
      for (int kh = 0; kh < k; ++kh) {
        for (int kw = 0; kw < k; ++kw) {
          const double kv = kp[kh * k + kw];
          for (int oh = 0; oh < g.ho; ++oh) {
            const int ih = oh * s - p + kh;
            if (ih < 0 || ih >= g.h) continue;
            const double* xr = xp + static_cast<std::size_t>(ih) * g.w;
            double* yr = yp + static_cast<std::size_t>(oh) * g.wo;
            const int ow_lo = std::max(0, (p - kw + s - 1) / s);
            const int ow_hi = (g.w - 1 + p - kw) < 0 ? 0 : std::min(g.wo, (g.w - 1 + p - kw) / s + 1);
            if (s == 1) {
              const double* xs = xr - p + kw;
              for (int ow = ow_lo; ow < ow_hi; ++ow) yr[ow] += kv * xs[ow];
            } else {
              for (int ow = ow_lo; ow < ow_hi; ++ow) yr[ow] += kv * xr[ow * s - p + kw];
            }
          }
        }
      }
    }
  }
}

void depthwise_backward(const ConvGeom& g, const double* x, const double* wt, const double* gy, double* gx,
                        double* gw) {
  const int k = g.k, s = g.spec.stride, p = g.spec.padding;
  for (int n = 0; n < g.n; ++n) {
    for (int c = 0; c < g.cout; ++c) {
      const double* xp = x + (static_cast<std::size_t>(n) * g.cin + c) * g.h * g.w;
      const double* gyp = gy + (static_cast<std::size_t>(n) * g.cout + c) * g.ho * g.wo;
      double* gxp = gx ? gx + (static_cast<std::size_t>(n) * g.cin + c) * g.h * g.w : nullptr;
      const double* kp = wt + static_cast<std::size_t>(c) * k * k;
      double* gkp = gw ? gw + static_cast<std::size_t>(c) * k * k : nullptr;
      for (int kh = 0; kh < k; ++kh) {
        for (int kw = 0; kw < k; ++kw) {
          const double kv = kp[kh * k + kw];
          double acc = 0.0;
          for (int oh = 0; oh < g.ho; ++oh) {
            const int ih = oh * s - p + kh;
            if (ih < 0 || ih >= g.h) continue;
            const int ow_lo = std::max(0, (p - kw + s - 1) / s);
            const int ow_hi = (g.w - 1 + p - kw) < 0 ? 0 : std::min(g.wo, (g.w - 1 + p - kw) / s + 1);
            const double* gyr = gyp + static_cast<std::size_t>(oh) * g.wo;
            const double* xr = xp + static_cast<std::size_t>(ih) * g.w;
            double* gxr = gxp ? gxp + static_cast<std::size_t>(ih) * g.w : nullptr;
            for (int ow = ow_lo; ow < ow_hi; ++ow) {
              const int iw = ow * s - p + kw;
              acc += gyr[ow] * xr[iw];
              if (gxr) gxr[iw] += kv * gyr[ow];
            }
          }
          if (gkp) gkp[kh * k + kw] += acc;
        }
      }
    }
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  return make_result(a.value() + b.value(), {a, b}, [](Node& self) {
    for (std::size_t i = 0; i < 2; ++i)
      if (wants_grad(self, i)) self.inputs[i]->grad_buffer() += self.grad;
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  return make_result(a.value() - b.value(), {a, b}, [](Node& self) {
    if (wants_grad(self, 0)) self.inputs[0]->grad_buffer() += self.grad;
    if (wants_grad(self, 1)) self.inputs[1]->grad_buffer() -= self.grad;
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return make_result(std::move(y), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (wants_grad(self, 0)) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (wants_grad(self, 1)) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, double s) {
  return make_result(a.value() * s, {a}, [s](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var scale_per_item(const Var& x, std::vector<double> coeffs) {
  const int n = x.value().dim(0);
  if (static_cast<int>(coeffs.size()) != n) throw std::invalid_argument("scale_per_item: coefficient count != batch");
  const std::size_t per = x.value().size() / static_cast<std::size_t>(n);
  Tensor y = x.value();
  for (int i = 0; i < n; ++i)
    for (std::size_t j = 0; j < per; ++j) y[i * per + j] *= coeffs[i];
  return make_result(std::move(y), {x}, [coeffs = std::move(coeffs), per](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < coeffs.size(); ++i)
      for (std::size_t j = 0; j < per; ++j) g[i * per + j] += coeffs[i] * self.grad[i * per + j];
  });
}

Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size()) throw std::invalid_argument("weighted_sum: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().size() != 1) throw std::invalid_argument("weighted_sum: terms must be scalars");
    total += weights[i] * terms[i].value()[0];
  }
  return make_result(Tensor::scalar(total), terms, [weights](Node& self) {
    for (std::size_t i = 0; i < weights.size(); ++i)
      if (wants_grad(self, i)) self.inputs[i]->grad_buffer()[0] += weights[i] * self.grad[0];
  });
}

Var relu(const Var& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var silu(const Var& x) {
  return unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Var sigmoid(const Var& x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dSpec spec) {
  require_rank(x, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  ConvGeom g{};
  g.spec = spec;
  g.n = x.value().dim(0);
  g.cin = x.value().dim(1);
  g.h = x.value().dim(2);
  g.w = x.value().dim(3);
  g.cout = weight.value().dim(0);
  g.k = weight.value().dim(2);
  g.groups = spec.groups;
  if (g.groups < 1 || g.cin % g.groups != 0 || g.cout % g.groups != 0 || weight.value().dim(1) != g.cin / g.groups ||
      weight.value().dim(3) != g.k) {
    throw std::invalid_argument("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                                shape_str(x.shape()) + " and groups " + std::to_string(g.groups));
  }
  if (bias.defined() && (bias.value().rank() != 1 || bias.value().dim(0) != g.cout)) {
    throw std::invalid_argument("conv2d: bias must be [Cout]");
  }
  g.cg = g.cin / g.groups;
  g.coutg = g.cout / g.groups;
  g.ho = (g.h + 2 * spec.padding - g.k) / spec.stride + 1;
  g.wo = (g.w + 2 * spec.padding - g.k) / spec.stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw std::invalid_argument("conv2d: kernel larger than padded input");

  Tensor y(Shape{g.n, g.cout, g.ho, g.wo});
  const bool depthwise = g.cg == 1 && g.coutg == 1;
  const bool pointwise = g.k == 1 && spec.stride == 1 && spec.padding == 0;
  const std::size_t out_plane = static_cast<std::size_t>(g.ho) * g.wo;
  const std::size_t in_plane = static_cast<std::size_t>(g.h) * g.w;
  const int ckk = g.cg * g.k * g.k;

  if (depthwise) {
    depthwise_forward(g, x.value().ptr(), weight.value().ptr(), y.ptr());
  } else {
    std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(ckk) * out_plane);
    for (int n = 0; n < g.n; ++n) {
      for (int gi = 0; gi < g.groups; ++gi) {
        const double* xin = x.value().ptr() + (static_cast<std::size_t>(n) * g.cin + gi * g.cg) * in_plane;
        const double* colp = xin;
        if (!pointwise) {
          im2col(xin, g.cg, g.h, g.w, g.k, spec.stride, spec.padding, g.ho, g.wo, col.data());
          colp = col.data();
        }
        ConstMapMat wm(weight.value().ptr() + static_cast<std::size_t>(gi) * g.coutg * ckk, g.coutg, ckk);
        ConstMapMat cm(colp, ckk, static_cast<Eigen::Index>(out_plane));
        MapMat ym(y.ptr() + (static_cast<std::size_t>(n) * g.cout + gi * g.coutg) * out_plane, g.coutg,
                  static_cast<Eigen::Index>(out_plane));
        ym.noalias() = wm * cm;
      }
    }
  }
  if (bias.defined()) {
    for (int n = 0; n < g.n; ++n)
      for (int c = 0; c < g.cout; ++c) {
        double* yp = y.ptr() + (static_cast<std::size_t>(n) * g.cout + c) * out_plane;
        const double b = bias.value()[c];
        for (std::size_t i = 0; i < out_plane; ++i) yp[i] += b;
      }
  }

  std::vector<Var> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(std::move(y), std::move(inputs), [g, depthwise, pointwise, ckk](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& wv = self.inputs[1]->value;
    const bool need_x = wants_grad(self, 0);
    const bool need_w = wants_grad(self, 1);
    const std::size_t out_plane = static_cast<std::size_t>(g.ho) * g.wo;
    const std::size_t in_plane = static_cast<std::size_t>(g.h) * g.w;
    if (self.inputs.size() > 2 && wants_grad(self, 2)) {
      auto& gb = self.inputs[2]->grad_buffer();
      for (int n = 0; n < g.n; ++n)
        for (int c = 0; c < g.cout; ++c) {
          const double* gy = self.grad.ptr() + (static_cast<std::size_t>(n) * g.cout + c) * out_plane;
          double acc = 0.0;
          for (std::size_t i = 0; i < out_plane; ++i) acc += gy[i];
          gb[c] += acc;
        }
    }
    if (!need_x && !need_w) return;
    double* gx = need_x ? self.inputs[0]->grad_buffer().ptr() : nullptr;
    double* gw = need_w ? self.inputs[1]->grad_buffer().ptr() : nullptr;
    if (depthwise) {
      depthwise_backward(g, xv.ptr(), wv.ptr(), self.grad.ptr(), gx, gw);
      return;
    }
    std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(ckk) * out_plane);
    std::vector<double> dcol(static_cast<std::size_t>(ckk) * out_plane);
    for (int n = 0; n < g.n; ++n) {
      for (int gi = 0; gi < g.groups; ++gi) {
        const double* xin = xv.ptr() + (static_cast<std::size_t>(n) * g.cin + gi * g.cg) * in_plane;
        ConstMapMat gym(self.grad.ptr() + (static_cast<std::size_t>(n) * g.cout + gi * g.coutg) * out_plane,
                        g.coutg, static_cast<Eigen::Index>(out_plane));
        if (need_w) {
          const double* colp = xin;
          if (!pointwise) {
            im2col(xin, g.cg, g.h, g.w, g.k, g.spec.stride, g.spec.padding, g.ho, g.wo, col.data());
            colp = col.data();
          }
          ConstMapMat cm(colp, ckk, static_cast<Eigen::Index>(out_plane));
          MapMat gwm(gw + static_cast<std::size_t>(gi) * g.coutg * ckk, g.coutg, ckk);
          gwm.noalias() += gym * cm.transpose();
        }
        if (need_x) {
          ConstMapMat wm(wv.ptr() + static_cast<std::size_t>(gi) * g.coutg * ckk, g.coutg, ckk);
          double* gxin = gx + (static_cast<std::size_t>(n) * g.cin + gi * g.cg) * in_plane;
          if (pointwise) {
            MapMat gxm(gxin, ckk, static_cast<Eigen::Index>(out_plane));
            gxm.noalias() += wm.transpose() * gym;
          } else {
            MapMat dcm(dcol.data(), ckk, static_cast<Eigen::Index>(out_plane));
            dcm.noalias() = wm.transpose() * gym;
            col2im(dcol.data(), g.cg, g.h, g.w, g.k, g.spec.stride, g.spec.padding, g.ho, g.wo, gxin);
          }
        }
      }
    }
  });
}

Var upsample_nearest2x(const Var& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const auto& s = x.shape();
  const int n = s[0], c = s[1], h = s[2], w = s[3];
  Tensor y(Shape{n, c, 2 * h, 2 * w});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j) y.at(b, ch, i, j) = x.value().at(b, ch, i / 2, j / 2);
  return make_result(std::move(y), {x}, [](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    const auto& s = gx.shape();
    for (int b = 0; b < s[0]; ++b)
      for (int ch = 0; ch < s[1]; ++ch)
        for (int i = 0; i < 2 * s[2]; ++i)
          for (int j = 0; j < 2 * s[3]; ++j) gx.at(b, ch, i / 2, j / 2) += self.grad.at(b, ch, i, j);
  });
}

Var avg_pool(const Var& x, int factor) {
  require_rank(x, 4, "avg_pool");
  const auto& s = x.shape();
  if (factor < 1 || s[2] % factor != 0 || s[3] % factor != 0) {
    throw std::invalid_argument("avg_pool: spatial dims not divisible by factor");
  }
  if (factor == 1) return x;
  const int ho = s[2] / factor, wo = s[3] / factor;
  const double inv = 1.0 / (factor * factor);
  Tensor y(Shape{s[0], s[1], ho, wo});
  for (int b = 0; b < s[0]; ++b)
    for (int c = 0; c < s[1]; ++c)
      for (int i = 0; i < s[2]; ++i)
        for (int j = 0; j < s[3]; ++j) y.at(b, c, i / factor, j / factor) += inv * x.value().at(b, c, i, j);
  return make_result(std::move(y), {x}, [factor, inv](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    const auto& s = gx.shape();
    for (int b = 0; b < s[0]; ++b)
      for (int c = 0; c < s[1]; ++c)
        for (int i = 0; i < s[2]; ++i)
          for (int j = 0; j < s[3]; ++j) gx.at(b, c, i, j) += inv * self.grad.at(b, c, i / factor, j / factor);
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const auto& s0 = parts[0].shape();
  if (s0.size() != 4) throw std::invalid_argument("concat_channels: expected NCHW");
  int total = 0;
  std::vector<int> widths;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw std::invalid_argument("concat_channels: incompatible " + shape_str(s) + " vs " + shape_str(s0));
    }
    widths.push_back(s[1]);
    total += s[1];
  }
  const std::size_t plane = static_cast<std::size_t>(s0[2]) * s0[3];
  Tensor y(Shape{s0[0], total, s0[2], s0[3]});
  for (int n = 0; n < s0[0]; ++n) {
    int off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const double* src = parts[p].value().ptr() + static_cast<std::size_t>(n) * widths[p] * plane;
      std::copy(src, src + widths[p] * plane, y.ptr() + (static_cast<std::size_t>(n) * total + off) * plane);
      off += widths[p];
    }
  }
  return make_result(std::move(y), parts, [widths, total, plane](Node& self) {
    const int batch = self.value.dim(0);
    for (int n = 0; n < batch; ++n) {
      int off = 0;
      for (std::size_t p = 0; p < widths.size(); ++p) {
        if (wants_grad(self, p)) {
          double* dst = self.inputs[p]->grad_buffer().ptr() + static_cast<std::size_t>(n) * widths[p] * plane;
          const double* src = self.grad.ptr() + (static_cast<std::size_t>(n) * total + off) * plane;
          for (std::size_t i = 0; i < widths[p] * plane; ++i) dst[i] += src[i];
        }
        off += widths[p];
      }
    }
  });
}

Var slice_channels(const Var& x, int start, int count) {
  require_rank(x, 4, "slice_channels");
  const auto& s = x.shape();
  if (start < 0 || count < 0 || start + count > s[1]) throw std::invalid_argument("slice_channels: out of range");
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  Tensor y(Shape{s[0], count, s[2], s[3]});
  for (int n = 0; n < s[0]; ++n) {
    const double* src = x.value().ptr() + (static_cast<std::size_t>(n) * s[1] + start) * plane;
    std::copy(src, src + count * plane, y.ptr() + static_cast<std::size_t>(n) * count * plane);
  }
  const int c = s[1];
  return make_result(std::move(y), {x}, [start, count, c, plane](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (int n = 0; n < self.value.dim(0); ++n) {
      double* dst = gx.ptr() + (static_cast<std::size_t>(n) * c + start) * plane;
      const double* src = self.grad.ptr() + static_cast<std::size_t>(n) * count * plane;
      for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
    }
  });
}

Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_rank(x, 4, "layer_norm_channels");
  const auto& s = x.shape();
  const int n = s[0], c = s[1];
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  if (gamma.value().size() != static_cast<std::size_t>(c) || beta.value().size() != static_cast<std::size_t>(c)) {
    throw std::invalid_argument("layer_norm_channels: gamma/beta must have C entries");
  }
  Tensor xhat = Tensor::zeros_like(x.value());
  std::vector<double> inv_std(static_cast<std::size_t>(n) * plane);
  Tensor y = Tensor::zeros_like(x.value());
  for (int b = 0; b < n; ++b) {
    const std::size_t base = static_cast<std::size_t>(b) * c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      double mean = 0.0;
      for (int ch = 0; ch < c; ++ch) mean += x.value()[base + ch * plane + p];
      mean /= c;
      double var = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        const double d = x.value()[base + ch * plane + p] - mean;
        var += d * d;
      }
      var /= c;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[b * plane + p] = is;
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t i = base + ch * plane + p;
        xhat[i] = (x.value()[i] - mean) * is;
        y[i] = gamma.value()[ch] * xhat[i] + beta.value()[ch];
      }
    }
  }
  return make_result(std::move(y), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, plane](Node& self) {
                       const Tensor& gv = self.inputs[1]->value;
                       if (wants_grad(self, 1) || wants_grad(self, 2)) {
                         for (int b = 0; b < n; ++b)
                           for (int ch = 0; ch < c; ++ch) {
                             const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * plane;
                             double dg = 0.0, db = 0.0;
                             for (std::size_t p = 0; p < plane; ++p) {
                               dg += self.grad[base + p] * xhat[base + p];
                               db += self.grad[base + p];
                             }
                             if (wants_grad(self, 1)) self.inputs[1]->grad_buffer()[ch] += dg;
                             if (wants_grad(self, 2)) self.inputs[2]->grad_buffer()[ch] += db;
                           }
                       }
                       if (!wants_grad(self, 0)) return;
                       auto& gx = self.inputs[0]->grad_buffer();
                       for (int b = 0; b < n; ++b) {
                         const std::size_t base = static_cast<std::size_t>(b) * c * plane;
                         for (std::size_t p = 0; p < plane; ++p) {
                           double m1 = 0.0, m2 = 0.0;
                           for (int ch = 0; ch < c; ++ch) {
                             const std::size_t i = base + ch * plane + p;
                             const double dxh = self.grad[i] * gv[ch];
                             m1 += dxh;
                             m2 += dxh * xhat[i];
                           }
                           m1 /= c;
                           m2 /= c;
                           const double is = inv_std[b * plane + p];
                           for (int ch = 0; ch < c; ++ch) {
                             const std::size_t i = base + ch * plane + p;
                             const double dxh = self.grad[i] * gv[ch];
                             gx[i] += is * (dxh - m1 - xhat[i] * m2);
                           }
                         }
                       }
                     });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  const int n = x.value().dim(0), in = x.value().dim(1), out = weight.value().dim(0);
  if (weight.value().dim(1) != in) throw std::invalid_argument("linear: weight/input width mismatch");
  Tensor y(Shape{n, out});
  {
    ConstMapMat xm(x.value().ptr(), n, in);
    ConstMapMat wm(weight.value().ptr(), out, in);
    MapMat ym(y.ptr(), n, out);
    ym.noalias() = xm * wm.transpose();
  }
  if (bias.defined())
    for (int b = 0; b < n; ++b)
      for (int o = 0; o < out; ++o) y[b * out + o] += bias.value()[o];
  std::vector<Var> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(std::move(y), std::move(inputs), [n, in, out](Node& self) {
    ConstMapMat gy(self.grad.ptr(), n, out);
    if (wants_grad(self, 0)) {
      MapMat gx(self.inputs[0]->grad_buffer().ptr(), n, in);
      gx.noalias() += gy * ConstMapMat(self.inputs[1]->value.ptr(), out, in);
    }
    if (wants_grad(self, 1)) {
      MapMat gw(self.inputs[1]->grad_buffer().ptr(), out, in);
      gw.noalias() += gy.transpose() * ConstMapMat(self.inputs[0]->value.ptr(), n, in);
    }
    if (self.inputs.size() > 2 && wants_grad(self, 2)) {
      auto& gb = self.inputs[2]->grad_buffer();
      for (int b = 0; b < n; ++b)
        for (int o = 0; o < out; ++o) gb[o] += self.grad[b * out + o];
    }
  });
}

Var channel_modulate(const Var& x, const Var& scale_v, const Var& shift) {
  require_rank(x, 4, "channel_modulate");
  const auto& s = x.shape();
  const int n = s[0], c = s[1];
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  if (scale_v.shape() != Shape{n, c} || shift.shape() != Shape{n, c}) {
    throw std::invalid_argument("channel_modulate: scale/shift must be [N, C]");
  }
  Tensor y = x.value();
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const double a = 1.0 + scale_v.value()[b * c + ch], sh = shift.value()[b * c + ch];
      double* p = y.ptr() + (static_cast<std::size_t>(b) * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = p[i] * a + sh;
    }
  return make_result(std::move(y), {x, scale_v, shift}, [n, c, plane](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& sv = self.inputs[1]->value;
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * plane;
        double ds = 0.0, dsh = 0.0;
        const double a = 1.0 + sv[b * c + ch];
        double* gx = wants_grad(self, 0) ? self.inputs[0]->grad_buffer().ptr() + base : nullptr;
        for (std::size_t i = 0; i < plane; ++i) {
          const double g = self.grad[base + i];
          ds += g * xv[base + i];
          dsh += g;
          if (gx) gx[i] += g * a;
        }
        if (wants_grad(self, 1)) self.inputs[1]->grad_buffer()[b * c + ch] += ds;
        if (wants_grad(self, 2)) self.inputs[2]->grad_buffer()[b * c + ch] += dsh;
      }
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  const auto& s = x.shape();
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  Tensor y(Shape{s[0], s[1]});
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double* p = x.value().ptr() + i * plane;
    double acc = 0.0;
    for (std::size_t j = 0; j < plane; ++j) acc += p[j];
    y[i] = acc / static_cast<double>(plane);
  }
  return make_result(std::move(y), {x}, [plane](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      const double g = self.grad[i] / static_cast<double>(plane);
      for (std::size_t j = 0; j < plane; ++j) gx[i * plane + j] += g;
    }
  });
}

Var global_max_pool(const Var& x) {
  require_rank(x, 4, "global_max_pool");
  const auto& s = x.shape();
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  Tensor y(Shape{s[0], s[1]});
  std::vector<std::size_t> arg(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double* p = x.value().ptr() + i * plane;
    std::size_t best = 0;
    for (std::size_t j = 1; j < plane; ++j)
      if (p[j] > p[best]) best = j;
    arg[i] = i * plane + best;
    y[i] = p[best];
  }
  return make_result(std::move(y), {x}, [arg = std::move(arg)](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += self.grad[i];
  });
}

Var channel_mean_map(const Var& x) {
  require_rank(x, 4, "channel_mean_map");
  const auto& s = x.shape();
  const int n = s[0], c = s[1];
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  Tensor y(Shape{n, 1, s[2], s[3]});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const double* p = x.value().ptr() + (static_cast<std::size_t>(b) * c + ch) * plane;
      double* out = y.ptr() + static_cast<std::size_t>(b) * plane;
      for (std::size_t j = 0; j < plane; ++j) out[j] += p[j] / c;
    }
  return make_result(std::move(y), {x}, [n, c, plane](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch) {
        double* g = gx.ptr() + (static_cast<std::size_t>(b) * c + ch) * plane;
        const double* gy = self.grad.ptr() + static_cast<std::size_t>(b) * plane;
        for (std::size_t j = 0; j < plane; ++j) g[j] += gy[j] / c;
      }
  });
}

Var channel_max_map(const Var& x) {
  require_rank(x, 4, "channel_max_map");
  const auto& s = x.shape();
  const int n = s[0], c = s[1];
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  Tensor y(Shape{n, 1, s[2], s[3]});
  std::vector<std::size_t> arg(static_cast<std::size_t>(n) * plane);
  for (int b = 0; b < n; ++b)
    for (std::size_t j = 0; j < plane; ++j) {
      std::size_t best = static_cast<std::size_t>(b) * c * plane + j;
      for (int ch = 1; ch < c; ++ch) {
        const std::size_t i = (static_cast<std::size_t>(b) * c + ch) * plane + j;
        if (x.value()[i] > x.value()[best]) best = i;
      }
      arg[b * plane + j] = best;
      y[b * plane + j] = x.value()[best];
    }
  return make_result(std::move(y), {x}, [arg = std::move(arg)](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += self.grad[i];
  });
}

Var channel_gate(const Var& x, const Var& gate) {
  require_rank(x, 4, "channel_gate");
  const auto& s = x.shape();
  const int n = s[0], c = s[1];
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  if (gate.shape() != Shape{n, c}) throw std::invalid_argument("channel_gate: gate must be [N, C]");
  Tensor y = x.value();
  for (int i = 0; i < n * c; ++i) {
    double* p = y.ptr() + static_cast<std::size_t>(i) * plane;
    for (std::size_t j = 0; j < plane; ++j) p[j] *= gate.value()[i];
  }
  return make_result(std::move(y), {x, gate}, [n, c, plane](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& gv = self.inputs[1]->value;
    for (int i = 0; i < n * c; ++i) {
      const std::size_t base = static_cast<std::size_t>(i) * plane;
      double acc = 0.0;
      for (std::size_t j = 0; j < plane; ++j) acc += self.grad[base + j] * xv[base + j];
      if (wants_grad(self, 1)) self.inputs[1]->grad_buffer()[i] += acc;
      if (wants_grad(self, 0)) {
        double* gx = self.inputs[0]->grad_buffer().ptr() + base;
        for (std::size_t j = 0; j < plane; ++j) gx[j] += self.grad[base + j] * gv[i];
      }
    }
  });
}

Var spatial_gate(const Var& x, const Var& gate) {
  require_rank(x, 4, "spatial_gate");
  const auto& s = x.shape();
  const int n = s[0], c = s[1];
  const std::size_t plane = static_cast<std::size_t>(s[2]) * s[3];
  if (gate.shape() != Shape{n, 1, s[2], s[3]}) throw std::invalid_argument("spatial_gate: gate must be [N,1,H,W]");
  Tensor y = x.value();
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      double* p = y.ptr() + (static_cast<std::size_t>(b) * c + ch) * plane;
      const double* g = gate.value().ptr() + static_cast<std::size_t>(b) * plane;
      for (std::size_t j = 0; j < plane; ++j) p[j] *= g[j];
    }
  return make_result(std::move(y), {x, gate}, [n, c, plane](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& gv = self.inputs[1]->value;
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * plane;
        const std::size_t gbase = static_cast<std::size_t>(b) * plane;
        if (wants_grad(self, 0)) {
          double* gx = self.inputs[0]->grad_buffer().ptr() + base;
          for (std::size_t j = 0; j < plane; ++j) gx[j] += self.grad[base + j] * gv[gbase + j];
        }
        if (wants_grad(self, 1)) {
          double* gg = self.inputs[1]->grad_buffer().ptr() + gbase;
          for (std::size_t j = 0; j < plane; ++j) gg[j] += self.grad[base + j] * xv[base + j];
        }
      }
  });
}

Var mse(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mse");
  const std::size_t n = a.value().size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  return make_result(Tensor::scalar(acc / static_cast<double>(n)), {a, b}, [n](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    const double k = 2.0 * self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = k * (av[i] - bv[i]);
      if (wants_grad(self, 0)) self.inputs[0]->grad_buffer()[i] += d;
      if (wants_grad(self, 1)) self.inputs[1]->grad_buffer()[i] -= d;
    }
  });
}

Var l1(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "l1");
  const std::size_t n = a.value().size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(a.value()[i] - b.value()[i]);
  return make_result(Tensor::scalar(acc / static_cast<double>(n)), {a, b}, [n](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    const double k = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = av[i] - bv[i];
      const double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
      if (wants_grad(self, 0)) self.inputs[0]->grad_buffer()[i] += k * sgn;
      if (wants_grad(self, 1)) self.inputs[1]->grad_buffer()[i] -= k * sgn;
    }
  });
}

Var mean_all(const Var& x) {
  const std::size_t n = x.value().size();
  return make_result(Tensor::scalar(x.value().mean()), {x}, [n](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    const double g = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) gx[i] += g;
  });
}

}  // namespace ttrd3::ag
