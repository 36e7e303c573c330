#include "ttrd3/denoiser.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>

namespace ttrd3 {

DenoiserVariant parse_variant(const std::string& name) {
  if (name == "1net-a" || name == "OneNetA") return DenoiserVariant::OneNetA;
  if (name == "1net-b" || name == "OneNetB") return DenoiserVariant::OneNetB;
  if (name == "2net" || name == "TwoNet") return DenoiserVariant::TwoNet;
  throw std::invalid_argument("unknown denoiser variant '" + name + "' (expected 1net-a, 1net-b or 2net)");
}

std::string to_string(DenoiserVariant v) {
  switch (v) {
    case DenoiserVariant::OneNetA:
      return "1net-a";
    case DenoiserVariant::OneNetB:
      return "1net-b";
    case DenoiserVariant::TwoNet:
      return "2net";
  }
  return "unknown";
}

std::vector<int> DenoiserConfig::stage_widths() const {
  std::vector<int> w;
  for (int m : channel_multipliers) w.push_back(base_channels * m);
  return w;
}

Tensor timestep_features(const std::vector<int>& steps, int dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("timestep embedding dim must be even and >= 2");
  const int half = dim / 2;
  Tensor out(Shape{static_cast<int>(steps.size()), dim});
  for (std::size_t n = 0; n < steps.size(); ++n)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      out[n * dim + i] = std::sin(steps[n] * freq);
      out[n * dim + half + i] = std::cos(steps[n] * freq);
    }
  return out;
}

namespace {

struct TimeMlp {
  Linear fc1, fc2;
  ag::Var operator()(const Tensor& feats) const { return ag::silu(fc2(ag::silu(fc1(ag::constant(feats))))); }
};

/// conv -> time modulation -> SiLU -> conv, plus identity skip.
struct ResBlock {
  Conv2d conv1, conv2;
  Linear mod_scale, mod_shift;

  ag::Var operator()(const ag::Var& x, const ag::Var& temb) const {
    const ag::Var h = ag::silu(ag::channel_modulate(conv1(x), mod_scale(temb), mod_shift(temb)));
    return ag::add(x, conv2(h));
  }
};

// He init assumes a rectifier follows; linear convs get unit gain instead.
constexpr double kLinearGain = 0.70710678118654752;
// Residual branches and the head start damped so the net begins near identity.
constexpr double kBranchGain = 0.1;

Conv2d scaled(Conv2d c, double s) {
  c.weight.mutable_value() *= s;
  return c;
}

ResBlock make_resblock(ParamStore& store, const std::string& name, int width, int temb_dim, Rng& rng) {
  ResBlock rb;
  rb.conv1 = make_conv_same(store, name + ".conv1", width, width, 3, rng);
  rb.conv2 = scaled(make_conv_same(store, name + ".conv2", width, width, 3, rng), kBranchGain);
  rb.mod_scale = make_linear(store, name + ".mod_scale", temb_dim, width, rng);
  rb.mod_shift = make_linear(store, name + ".mod_shift", temb_dim, width, rng);
  rb.mod_scale.weight.mutable_value() *= 0.1;
  rb.mod_shift.weight.mutable_value() *= 0.1;
  return rb;
}

struct Encoder {
  Conv2d in_conv;
  std::vector<ResBlock> blocks;
  std::vector<Conv2d> down;
  ResBlock middle;
};

struct Decoder {
  std::vector<Conv2d> up;       // up[l] maps level l+1 -> l
  std::vector<Conv2d> merge;    // skip merge per level
  std::vector<std::optional<Conv2d>> fuse;  // guidance fusion per level
  std::vector<ResBlock> blocks;
  Conv2d head;
};

Encoder make_encoder(ParamStore& store, const std::string& name, const DenoiserConfig& cfg, Rng& rng) {
  const auto widths = cfg.stage_widths();
  Encoder e;
  e.in_conv = scaled(make_conv_same(store, name + ".in", 2 * cfg.image_channels, widths[0], 3, rng), kLinearGain);
  for (std::size_t l = 0; l < widths.size(); ++l) {
    e.blocks.push_back(make_resblock(store, name + ".enc" + std::to_string(l), widths[l], cfg.time_embedding_dim, rng));
    if (l + 1 < widths.size()) {
      e.down.push_back(scaled(make_conv(store, name + ".down" + std::to_string(l), widths[l], widths[l + 1], 3, rng,
                                        ag::Conv2dSpec{2, 1, 1}),
                              kLinearGain));
    }
  }
  e.middle = make_resblock(store, name + ".mid", widths.back(), cfg.time_embedding_dim, rng);
  return e;
}

Decoder make_decoder(ParamStore& store, const std::string& name, const DenoiserConfig& cfg, int out_channels,
                     Rng& rng) {
  const auto widths = cfg.stage_widths();
  const std::size_t levels = widths.size();
  Decoder d;
  d.up.resize(levels > 0 ? levels - 1 : 0);
  d.merge.resize(levels);
  d.fuse.resize(levels);
  d.blocks.resize(levels);
  for (std::size_t li = levels; li-- > 0;) {
    const std::string lvl = name + ".dec" + std::to_string(li);
    if (li + 1 < levels)
      d.up[li] = scaled(make_conv_same(store, lvl + ".up", widths[li + 1], widths[li], 3, rng), kLinearGain);
    d.merge[li] = scaled(make_conv(store, lvl + ".merge", 2 * widths[li], widths[li], 1, rng), kLinearGain);
    if (li < 3 && cfg.guidance_channels[li] > 0) {
      d.fuse[li] = scaled(
          make_conv(store, lvl + ".guid", widths[li] + cfg.guidance_channels[li], widths[li], 1, rng), kLinearGain);
      // Guidance columns start damped: unnormalized texture features would
      // otherwise swamp the decoder path early in training.
      Tensor& fw = d.fuse[li]->weight.mutable_value();
      const int cin = widths[li] + cfg.guidance_channels[li];
      for (int o = 0; o < widths[li]; ++o)
        for (int c = widths[li]; c < cin; ++c) fw[static_cast<std::size_t>(o) * cin + c] *= kBranchGain;
    }
    d.blocks[li] = make_resblock(store, lvl + ".block", widths[li], cfg.time_embedding_dim, rng);
  }
  d.head = scaled(make_conv_same(store, name + ".head", widths[0], out_channels, 3, rng), kBranchGain);
  return d;
}

struct EncoderOut {
  std::vector<ag::Var> skips;
  ag::Var bottom;
};

EncoderOut run_encoder(const Encoder& e, const ag::Var& x, const ag::Var& temb) {
  EncoderOut out;
  ag::Var h = e.in_conv(x);
  for (std::size_t l = 0; l < e.blocks.size(); ++l) {
    h = e.blocks[l](h, temb);
    out.skips.push_back(h);
    if (l < e.down.size()) h = e.down[l](h);
  }
  out.bottom = e.middle(h, temb);
  return out;
}

ag::Var run_decoder(const Decoder& d, const EncoderOut& enc, const std::array<ag::Var, 3>& guidance,
                    const ag::Var& temb) {
  ag::Var h = enc.bottom;
  for (std::size_t li = d.blocks.size(); li-- > 0;) {
    if (li + 1 < d.blocks.size()) h = d.up[li](ag::upsample_nearest2x(h));
    h = d.merge[li](ag::concat_channels({h, enc.skips[li]}));
    if (d.fuse[li] && guidance[li].defined()) {
      const auto& gs = guidance[li].shape();
      const auto& hs = h.shape();
      if (gs.size() != 4 || gs[0] != hs[0] || gs[2] != hs[2] || gs[3] != hs[3]) {
        throw std::invalid_argument("guidance map " + shape_str(gs) + " does not match decoder level " +
                                    std::to_string(li) + " " + shape_str(hs));
      }
      h = (*d.fuse[li])(ag::concat_channels({h, guidance[li]}));
    }
    h = d.blocks[li](h, temb);
  }
  return d.head(ag::silu(h));
}

TimeMlp make_time_mlp(ParamStore& store, const std::string& name, int dim, Rng& rng) {
  return TimeMlp{make_linear(store, name + ".fc1", dim, dim, rng), make_linear(store, name + ".fc2", dim, dim, rng)};
}

}  // namespace

struct Denoiser::Net {
  std::vector<TimeMlp> time;
  std::vector<Encoder> encoders;
  std::vector<Decoder> decoders;
};

Denoiser::Denoiser(const DenoiserConfig& cfg, ParamStore& store, Rng& rng, const std::string& prefix)
    : cfg_(cfg), net_(std::make_unique<Net>()) {
  if (cfg.image_channels < 1 || cfg.base_channels < 1) throw std::invalid_argument("denoiser widths must be positive");
  for (int m : cfg.channel_multipliers)
    if (m < 1) throw std::invalid_argument("channel multipliers must be positive");
  const std::size_t first = store.entries().size();
  if (!cfg.channel_multipliers.empty()) {
    const int ch = cfg.image_channels;
    switch (cfg.variant) {
      case DenoiserVariant::OneNetA:
        net_->time.push_back(make_time_mlp(store, prefix + ".time", cfg.time_embedding_dim, rng));
        net_->encoders.push_back(make_encoder(store, prefix + ".unet", cfg, rng));
        net_->decoders.push_back(make_decoder(store, prefix + ".unet", cfg, 2 * ch, rng));
        break;
      case DenoiserVariant::OneNetB:
        net_->time.push_back(make_time_mlp(store, prefix + ".time", cfg.time_embedding_dim, rng));
        net_->encoders.push_back(make_encoder(store, prefix + ".unet", cfg, rng));
        net_->decoders.push_back(make_decoder(store, prefix + ".res_dec", cfg, ch, rng));
        net_->decoders.push_back(make_decoder(store, prefix + ".eps_dec", cfg, ch, rng));
        break;
      case DenoiserVariant::TwoNet:
        for (const char* branch : {".res_net", ".eps_net"}) {
          net_->time.push_back(make_time_mlp(store, prefix + branch + ".time", cfg.time_embedding_dim, rng));
          net_->encoders.push_back(make_encoder(store, prefix + branch, cfg, rng));
          net_->decoders.push_back(make_decoder(store, prefix + branch, cfg, ch, rng));
        }
        break;
    }
  }
  for (std::size_t i = first; i < store.entries().size(); ++i) params_.push_back(store.entries()[i].second);
}

Denoiser::~Denoiser() = default;
Denoiser::Denoiser(Denoiser&&) noexcept = default;
Denoiser& Denoiser::operator=(Denoiser&&) noexcept = default;

std::size_t Denoiser::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value().size();
  return n;
}

std::vector<int> Denoiser::head_channels() const {
  std::vector<int> out;
  for (const auto& d : net_->decoders) out.push_back(d.head.weight.value().dim(0));
  return out;
}

DenoiserOutput Denoiser::forward(const ag::Var& x_t, const ag::Var& x_in, const std::array<ag::Var, 3>& guidance,
                                 const std::vector<int>& steps) const {
  require_same_shape(x_t.value(), x_in.value(), "denoiser inputs");
  const auto& s = x_t.shape();
  if (s.size() != 4 || s[1] != cfg_.image_channels) {
    throw std::invalid_argument("denoiser expects [N, " + std::to_string(cfg_.image_channels) + ", H, W], got " +
                                shape_str(s));
  }
  if (static_cast<int>(steps.size()) != s[0]) throw std::invalid_argument("denoiser needs one timestep per item");
  const int ch = cfg_.image_channels;
  if (net_->encoders.empty()) {
    return {ag::constant(Tensor(s)), ag::constant(Tensor(s))};
  }
  const int levels = static_cast<int>(cfg_.channel_multipliers.size());
  const int div = 1 << (levels - 1);
  if (s[2] % div != 0 || s[3] % div != 0) {
    throw std::invalid_argument("denoiser input dims must be divisible by " + std::to_string(div));
  }
  const Tensor tfeat = timestep_features(steps, cfg_.time_embedding_dim);
  const ag::Var x = ag::concat_channels({x_t, x_in});
  switch (cfg_.variant) {
    case DenoiserVariant::OneNetA: {
      const ag::Var temb = net_->time[0](tfeat);
      const ag::Var out = run_decoder(net_->decoders[0], run_encoder(net_->encoders[0], x, temb), guidance, temb);
      return {ag::slice_channels(out, ch, ch), ag::slice_channels(out, 0, ch)};
    }
    case DenoiserVariant::OneNetB: {
      const ag::Var temb = net_->time[0](tfeat);
      const EncoderOut enc = run_encoder(net_->encoders[0], x, temb);
      const ag::Var res = run_decoder(net_->decoders[0], enc, guidance, temb);
      const ag::Var eps = run_decoder(net_->decoders[1], enc, guidance, temb);
      return {eps, res};
    }
    case DenoiserVariant::TwoNet: {
      ag::Var outs[2];
      for (int b = 0; b < 2; ++b) {
        const ag::Var temb = net_->time[b](tfeat);
        outs[b] = run_decoder(net_->decoders[b], run_encoder(net_->encoders[b], x, temb), guidance, temb);
      }
      return {outs[1], outs[0]};
    }
  }
  throw std::logic_error("unreachable denoiser variant");
}

Denoiser build_denoiser(const DenoiserConfig& cfg, ParamStore& store, Rng& rng) { return Denoiser(cfg, store, rng); }

std::pair<ImagePlane, ImagePlane> predict(const Denoiser& den, const ImagePlane& noised, const ImagePlane& lr_up,
                                          const TextureGuidance& guidance, int t, int T) {
  if (t < 1 || t > T) throw std::out_of_range("predict: step outside [1, T]");
  require_same_shape(noised.data, lr_up.data, "predict");
  ag::NoGradGuard guard;
  std::array<ag::Var, 3> g;
  for (int s = 0; s < 3; ++s)
    if (!guidance.maps[s].empty()) g[s] = ag::constant(batch_of_one(guidance.maps[s]));
  const auto out = den.forward(ag::constant(batch_of_one(noised.data)), ag::constant(batch_of_one(lr_up.data)), g, {t});
  return {ImagePlane(unstack(out.eps.value(), 0), PlaneRole::Noise),
          ImagePlane(unstack(out.res.value(), 0), PlaneRole::Residual)};
}

std::size_t param_count(const Denoiser& den) { return den.param_count(); }

}  // namespace ttrd3
