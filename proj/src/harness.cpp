#include "ttrd3/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <stdexcept>

#include "ttrd3/metrics.hpp"

namespace ttrd3 {

using nlohmann::json;

// --- Optimizer ------------------------------------------------------------

double global_grad_norm(const std::vector<ag::Var>& params) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad().data()) sq += g * g;
  return std::sqrt(sq);
}

Adam::Adam(std::vector<ag::Var> params, const OptimConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros_like(p.value()));
    v_.push_back(Tensor::zeros_like(p.value()));
  }
}

double Adam::step() {
  const double norm = global_grad_norm(params_);
  const double clip = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, t_), c2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto g = params_[i].grad().data();
    auto w = params_[i].mutable_value().data();
    auto m = m_[i].data(), v = v_[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * clip;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      w[j] -= cfg_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
    }
  }
  return norm;
}

void Adam::restore(int steps, std::vector<Tensor> m, std::vector<Tensor> v) {
  if (m.size() != params_.size() || v.size() != params_.size()) throw std::invalid_argument("optimizer state size");
  t_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

// --- Model ----------------------------------------------------------------

Model::Model(const ExperimentConfig& c) : cfg(c), schedule(build_schedule(c.T, c.beta_bar_T, c.schedule_shape)) {
  validate(cfg);
  cfg.mfam.image_channels = cfg.denoiser.image_channels;
  cfg.denoiser.guidance_channels = cfg.mfam.widths;
  Rng rng(cfg.seed);
  mfam = std::make_unique<Mfam>(cfg.mfam, store, rng);
  sttg = std::make_unique<Sttg>(cfg.sttg, store);
  denoiser = std::make_unique<Denoiser>(cfg.denoiser, store, rng);
}

std::vector<ag::Var> Model::parameters() const {
  std::vector<ag::Var> out;
  for (const auto& [name, v] : store.entries()) out.push_back(v);
  return out;
}

TextureGuidance compute_guidance(const Model& m, const ImagePlane& lr_up, const ImagePlane& ref) {
  return sttg_forward(lr_up, make_ref_pair(ref, m.cfg.data.sr_factor), ref, *m.mfam, *m.sttg);
}

// --- Training -------------------------------------------------------------

namespace {

double window_mean(const std::vector<TrainRecord>& h, std::size_t from, std::size_t to) {
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) s += h[i].loss;
  return to > from ? s / static_cast<double>(to - from) : std::nan("");
}

struct Prepared {
  Tensor hr, lr_up, ref, ref_du;
};

Prepared prepare(const ImagePlane& hr, const ImagePlane& ref, int factor) {
  const ImagePlane ref_sized =
      (ref.height() == hr.height() && ref.width() == hr.width()) ? ref : resize_bicubic(ref, hr.height(), hr.width());
  return {hr.data, upsample_bicubic(degrade_bicubic(hr, factor), factor).data, ref_sized.data,
          make_ref_pair(ref_sized, factor).data};
}

ImagePlane random_crop(const ImagePlane& img, int size, Rng& rng) {
  if (img.height() < size || img.width() < size) return resize_bicubic(img, size, size);
  return crop(img, rng.uniform_int(0, img.height() - size), rng.uniform_int(0, img.width() - size), size, size);
}

}  // namespace

double TrainResult::initial_loss(int window) const {
  return window_mean(history, 0, std::min(history.size(), static_cast<std::size_t>(window)));
}

double TrainResult::final_loss(int window) const {
  const std::size_t n = history.size();
  return window_mean(history, n - std::min(n, static_cast<std::size_t>(window)), n);
}

TrainResult train(Model& model, Adam& opt, const std::vector<TrainSample>& data, const TrainHooks& hooks) {
  const ExperimentConfig& cfg = model.cfg;
  if (data.empty()) throw std::invalid_argument("train: no training samples");
  const int f = cfg.data.sr_factor, patch = cfg.data.patch_size, mult = size_multiple(cfg);
  if (patch > 0 && patch % mult != 0)
    throw std::invalid_argument("data.patch_size must be a multiple of " + std::to_string(mult));

  // Separate streams so that changing the batch size does not shift the model init.
  Rng data_rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  Rng noise_rng(cfg.seed ^ 0x14057b7ef767814fULL);
  Rng gumbel_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const auto ext = make_extractor(cfg.perceptual, cfg.denoiser.image_channels);

  bool cropping = false;
  for (const auto& s : data) {
    if (patch > 0 && (s.hr.height() != patch || s.hr.width() != patch)) cropping = true;
    if (patch == 0 && (s.hr.height() % mult != 0 || s.hr.width() % mult != 0))
      throw std::invalid_argument("training image " + s.id + " is not a multiple of " + std::to_string(mult));
  }
  std::vector<Prepared> cache;
  if (!cropping)
    for (const auto& s : data) cache.push_back(prepare(s.hr, s.ref, f));

  TrainResult result;
  const auto params = model.parameters();
  const int n = static_cast<int>(data.size());
  for (int step = 1; step <= cfg.optim.iterations; ++step) {
    std::vector<Tensor> hr, lr, ref, rdu, eps, noised;
    std::vector<int> ts;
    for (int b = 0; b < cfg.optim.batch_size; ++b) {
      const int i = data_rng.uniform_int(0, n - 1);
      const Prepared p = cropping ? prepare(random_crop(data[static_cast<std::size_t>(i)].hr, patch, data_rng),
                                            random_crop(data[static_cast<std::size_t>(i)].ref, patch, data_rng), f)
                                  : cache[static_cast<std::size_t>(i)];
      const int t = noise_rng.uniform_int(1, cfg.T);
      Tensor e = noise_rng.normal_tensor(p.hr.shape());
      noised.push_back(p.hr + model.schedule.alpha_bar(t) * (p.lr_up - p.hr) + model.schedule.beta_bar(t) * e);
      hr.push_back(p.hr);
      lr.push_back(p.lr_up);
      ref.push_back(p.ref);
      rdu.push_back(p.ref_du);
      eps.push_back(std::move(e));
      ts.push_back(t);
    }
    const Tensor hr_b = stack(hr), lr_b = stack(lr), noised_b = stack(noised), eps_b = stack(eps);

    const auto f_lr = model.mfam->forward(ag::constant(lr_b));
    const auto f_rdu = model.mfam->forward(ag::constant(stack(rdu)));
    const auto f_ref = model.mfam->forward(ag::constant(stack(ref)));
    TrainRecord rec;
    rec.step = step;
    const auto guidance = model.sttg->forward(f_lr, f_rdu, f_ref, &gumbel_rng, &rec.k);
    const auto out = model.denoiser->forward(ag::constant(noised_b), ag::constant(lr_b), guidance, ts);

    const ag::Var d = diffusion_loss(ag::constant(lr_b - hr_b), out.res, ag::constant(eps_b), out.eps, cfg.loss);
    const ag::Var x0 = estimate_x0(ag::constant(noised_b), out.res, out.eps, ts, model.schedule);
    const ag::Var px = pixel_loss(x0, ag::constant(hr_b));
    const ag::Var per = perceptual_loss(x0, ag::constant(hr_b), *ext);
    rec.parts = {d.value()[0], px.value()[0], per.value()[0]};
    ag::Var total;
    try {
      total = total_loss(d, px, per, cfg.loss);
    } catch (const std::domain_error& err) {
      json snap = {{"step", step},
                   {"steps", ts},
                   {"diffusion", rec.parts.diffusion},
                   {"pixel", rec.parts.pixel},
                   {"perceptual", rec.parts.perceptual},
                   {"k", rec.k},
                   {"error", err.what()}};
      std::string where;
      if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        where = (std::filesystem::path(cfg.out_dir) / "diagnostic.json").string();
        std::ofstream(where) << snap.dump(2) << "\n";
      }
      throw std::runtime_error("non-finite loss at step " + std::to_string(step) +
                               (where.empty() ? "" : " (snapshot: " + where + ")") + ": " + err.what());
    }
    rec.loss = total.value()[0];
    model.store.zero_grad();
    ag::backward(total);
    rec.grad_norm = opt.step();
    result.history.push_back(rec);

    if (hooks.log && (step % cfg.train.log_every == 0 || step == 1 || step == cfg.optim.iterations)) {
      *hooks.log << kv_line({{"kind", "train"},
                             {"step", std::to_string(step)},
                             {"loss", format_number(rec.loss)},
                             {"diffusion", format_number(rec.parts.diffusion)},
                             {"pixel", format_number(rec.parts.pixel)},
                             {"perceptual", format_number(rec.parts.perceptual)},
                             {"grad_norm", format_number(rec.grad_norm)},
                             {"k1", std::to_string(rec.k[0])},
                             {"k2", std::to_string(rec.k[1])},
                             {"k3", std::to_string(rec.k[2])}})
                   << "\n";
      hooks.log->flush();
    }
    if (hooks.on_validate && cfg.train.val_every > 0 && step % cfg.train.val_every == 0) hooks.on_validate(step, model);
    if (hooks.on_checkpoint && cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0)
      hooks.on_checkpoint(step, model, opt);
  }
  return result;
}

// --- Sampling -------------------------------------------------------------

ImagePlane run_sampler(const ImagePlane& lr_up, const CoeffSchedule& sched, int steps, double eta, Rng& rng,
                       const DenoiseFn& fn, SampleStats* stats) {
  const ImagePlane eps(rng.normal_tensor(lr_up.data.shape()), PlaneRole::Noise);
  ImagePlane x = degrade_terminal(lr_up, eps, sched);
  const auto plan = timestep_plan(sched.T(), steps);
  int calls = 0;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const int t = plan[i], prev = i + 1 < plan.size() ? plan[i + 1] : 0;
    const auto [res, e] = fn(x, t);
    ++calls;
    ImagePlane noise;
    if (sigma_t(sched, t, prev, eta) > 0.0) noise = ImagePlane(rng.normal_tensor(lr_up.data.shape()), PlaneRole::Noise);
    x = reverse_step(x, res, e, t, prev, eta, noise, sched);
  }
  for (double& v : x.data.data()) v = std::clamp(v, 0.0, 1.0);
  x.role = PlaneRole::SR;
  if (stats) *stats = {plan, calls};
  return x;
}

ImagePlane infer(const Model& m, const ImagePlane& lr_up, const ImagePlane& ref, std::uint64_t noise_seed,
                 SampleStats* stats) {
  const int mult = size_multiple(m.cfg);
  if (lr_up.height() % mult != 0 || lr_up.width() % mult != 0)
    throw std::invalid_argument("infer: image sides must be multiples of " + std::to_string(mult) + ", got " +
                                shape_str(lr_up.data.shape()));
  const ImagePlane ref_sized = (ref.height() == lr_up.height() && ref.width() == lr_up.width())
                                   ? ref
                                   : resize_bicubic(ref, lr_up.height(), lr_up.width());
  const TextureGuidance guidance = compute_guidance(m, lr_up, ref_sized);
  Rng rng(noise_seed);
  const DenoiseFn fn = [&](const ImagePlane& x, int t) {
    auto [eps, res] = predict(*m.denoiser, x, lr_up, guidance, t, m.cfg.T);
    return std::pair{std::move(res), std::move(eps)};
  };
  return run_sampler(lr_up, m.schedule, m.cfg.sample_steps, m.cfg.eta, rng, fn, stats);
}

// --- Checkpoints ----------------------------------------------------------

const Tensor& Checkpoint::array(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return t;
  throw std::out_of_range("checkpoint has no array '" + name + "'");
}

void save_checkpoint(const std::string& path, const Model& m, const Adam* opt, int step, const json& metrics) {
  std::vector<std::pair<std::string, const Tensor*>> arrays;
  for (const auto& [name, v] : m.store.entries()) arrays.emplace_back("param/" + name, &v.value());
  if (opt) {
    const auto& e = m.store.entries();
    for (std::size_t i = 0; i < e.size(); ++i) arrays.emplace_back("adam.m/" + e[i].first, &opt->first_moments()[i]);
    for (std::size_t i = 0; i < e.size(); ++i) arrays.emplace_back("adam.v/" + e[i].first, &opt->second_moments()[i]);
  }
  const Tensor alphas(Shape{m.schedule.T()}, m.schedule.alphas());
  const Tensor betas(Shape{m.schedule.T()}, m.schedule.betas());
  arrays.emplace_back("schedule/alphas", &alphas);
  arrays.emplace_back("schedule/betas", &betas);

  json dir = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : arrays) {
    dir.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
    offset += t->size();
  }
  const json manifest = {{"format", "ttrd3-checkpoint"},
                         {"version", kCheckpointVersion},
                         {"config", to_json(m.cfg)},
                         {"config_hash", config_hash(m.cfg)},
                         {"step", step},
                         {"optimizer_steps", opt ? opt->steps() : 0},
                         {"metrics", metrics},
                         {"arrays", dir}};
  const std::string text = manifest.dump();

  if (const auto parent = std::filesystem::path(path).parent_path(); !parent.empty())
    std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = text.size();
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : arrays)
    out.write(reinterpret_cast<const char*>(t->ptr()), static_cast<std::streamsize>(t->size() * sizeof(double)));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path);
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw std::runtime_error(path + " is not a checkpoint");
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || version != kCheckpointVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  Checkpoint ck;
  ck.manifest = json::parse(text);
  for (const auto& entry : ck.manifest.at("arrays")) {
    Tensor t(entry.at("shape").get<Shape>());
    in.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw std::runtime_error(path + ": truncated array " + entry.at("name").get<std::string>());
    ck.arrays.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

std::unique_ptr<Model> load_model(const std::string& path, const ExperimentConfig* expected) {
  const Checkpoint ck = read_checkpoint(path);
  const ExperimentConfig cfg = config_from_json(ck.manifest.at("config"));
  const std::string stored = ck.manifest.at("config_hash").get<std::string>();
  if (config_hash(cfg) != stored) throw std::runtime_error(path + ": stored config does not match its hash");
  if (expected && config_hash(*expected) != stored)
    throw std::runtime_error("checkpoint hash mismatch: " + path + " has " + stored + ", config has " +
                             config_hash(*expected));
  auto m = std::make_unique<Model>(cfg);
  if (ck.array("schedule/alphas").vec() != m->schedule.alphas() ||
      ck.array("schedule/betas").vec() != m->schedule.betas())
    throw std::runtime_error(path + ": stored schedule differs from the rebuilt one");
  for (const auto& [name, v] : m->store.entries()) {
    const Tensor& t = ck.array("param/" + name);
    if (!t.same_shape(v.value())) throw std::runtime_error(path + ": shape mismatch for " + name);
    ag::Var var = v;
    var.mutable_value() = t;
  }
  return m;
}

}  // namespace ttrd3
