#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "ttrd3/harness.hpp"
#include "ttrd3/metrics.hpp"

namespace ttrd3 {

using nlohmann::json;
namespace fs = std::filesystem;

// --- Evaluation -----------------------------------------------------------

namespace {

double mean_of(const std::vector<EvalImage>& v, double EvalImage::*field) {
  double s = 0.0;
  for (const auto& e : v) s += e.*field;
  return s / static_cast<double>(v.size());
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

ImagePlane clamped(ImagePlane img) {
  for (double& v : img.data.data()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

}  // namespace

json EvalReport::summary() const {
  return {{"images", images.size()},
          {"psnr", psnr},
          {"ssim", ssim},
          {"fd", number_or_null(fd)},
          {"psnr_bicubic", psnr_bicubic},
          {"ssim_bicubic", ssim_bicubic},
          {"fd_bicubic", number_or_null(fd_bicubic)},
          {"delta_psnr", delta_psnr()},
          {"delta_ssim", delta_ssim()},
          {"delta_fd", number_or_null(delta_fd())}};
}

EvalReport evaluate(const std::vector<EvalSample>& samples, int sr_factor, const SrFn& sr,
                    const PerceptualExtractor& ext, std::ostream* log) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty split");
  EvalReport rep;
  std::vector<ImagePlane> hrs, srs, bics;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    // The baseline is clamped like every SR output.
    const ImagePlane bic = clamped(upsample_bicubic(degrade_bicubic(s.hr, sr_factor), sr_factor));
    const ImagePlane out = sr(bic, s.ref, i);
    EvalImage rec{s.id, psnr(out, s.hr), ssim(out, s.hr), psnr(bic, s.hr), ssim(bic, s.hr)};
    if (log) {
      *log << kv_line({{"kind", "image"},
                       {"id", s.id},
                       {"psnr", format_number(rec.psnr)},
                       {"ssim", format_number(rec.ssim)},
                       {"psnr_bicubic", format_number(rec.psnr_bicubic)},
                       {"ssim_bicubic", format_number(rec.ssim_bicubic)}})
           << "\n";
    }
    rep.images.push_back(rec);
    hrs.push_back(s.hr);
    srs.push_back(out);
    bics.push_back(bic);
  }
  rep.psnr = mean_of(rep.images, &EvalImage::psnr);
  rep.ssim = mean_of(rep.images, &EvalImage::ssim);
  rep.psnr_bicubic = mean_of(rep.images, &EvalImage::psnr_bicubic);
  rep.ssim_bicubic = mean_of(rep.images, &EvalImage::ssim_bicubic);
  rep.fd = rep.fd_bicubic = std::numeric_limits<double>::quiet_NaN();
  if (samples.size() >= 2) {
    const auto ref_stats = feature_stats(hrs, ext, FeatureReduce::MeanStd);
    rep.fd = frechet_distance(feature_stats(srs, ext, FeatureReduce::MeanStd), ref_stats);
    rep.fd_bicubic = frechet_distance(feature_stats(bics, ext, FeatureReduce::MeanStd), ref_stats);
  }
  if (log) {
    KvRecord rec{{"kind", "summary"}};
    const json summary = rep.summary();
    for (const auto& [k, v] : summary.items()) rec.emplace_back(k, v.is_null() ? "nan" : format_number(v.get<double>()));
    *log << kv_line(rec) << "\n";
  }
  return rep;
}

EvalReport evaluate_model(const Model& m, const std::vector<EvalSample>& samples, std::uint64_t noise_seed,
                          std::ostream* log) {
  const auto ext = make_extractor(m.cfg.perceptual, m.cfg.denoiser.image_channels);
  return evaluate(
      samples, m.cfg.data.sr_factor,
      [&](const ImagePlane& lr_up, const ImagePlane& ref, std::size_t i) {
        return infer(m, lr_up, ref, noise_seed + i);
      },
      *ext, log);
}

// --- Data assembly --------------------------------------------------------

int size_multiple(const ExperimentConfig& cfg) {
  const int levels = static_cast<int>(cfg.denoiser.channel_multipliers.size());
  return std::lcm(std::lcm(cfg.data.sr_factor, 4), 1 << std::max(0, levels - 1));
}

std::vector<EvalSample> load_split(const ExperimentConfig& cfg, Split split, int crop_size) {
  if (cfg.data.manifest.empty()) throw std::invalid_argument("data.manifest is not set");
  const DatasetManifest manifest = read_manifest(cfg.data.manifest);
  const fs::path root = fs::path(cfg.data.manifest).parent_path();
  const auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (root / p).string(); };
  const PairingPolicy policy = parse_pairing(cfg.data.pairing);
  const int mult = size_multiple(cfg);
  std::vector<EvalSample> out;
  for (const auto& e : manifest.in_split(split)) {
    ImagePlane hr = load_png(resolve(e.path));
    int h = hr.height() - hr.height() % mult, w = hr.width() - hr.width() % mult;
    if (crop_size > 0) h = std::min(h, crop_size), w = std::min(w, crop_size);
    if (h < mult || w < mult) throw std::invalid_argument(e.path + " is smaller than " + std::to_string(mult));
    hr = crop(hr, 0, 0, h, w);
    const std::string ref_path = pair_reference(e, manifest, policy, cfg.seed);
    std::uint64_t noise_seed = 0;
    ImagePlane ref;
    if (parse_noise_token(ref_path, &noise_seed)) {
      ref = make_noise_reference(hr.channels(), h, w, noise_seed);
    } else {
      ref = load_png(resolve(ref_path));
      ref = (ref.height() >= h && ref.width() >= w) ? crop(ref, 0, 0, h, w) : resize_bicubic(ref, h, w);
    }
    out.push_back({e.path, std::move(hr), std::move(ref)});
  }
  if (out.empty()) throw std::invalid_argument("split '" + to_string(split) + "' is empty");
  return out;
}

std::string write_toy_dataset(const std::string& dir, int categories, int per_category, int size,
                              std::uint64_t seed) {
  if (categories < 1 || per_category < 1) throw std::invalid_argument("toy dataset needs at least one image");
  fs::create_directories(dir);
  Rng rng(seed);
  std::vector<std::pair<std::string, std::string>> items;
  for (int c = 0; c < categories; ++c) {
    const std::string cat = "scene" + std::to_string(c);
    const std::uint64_t scene = rng.next_u64();
    fs::create_directories(fs::path(dir) / cat);
    for (int j = 0; j < per_category; ++j) {
      const double dx = j == 0 ? 0.0 : rng.uniform_int(-6, 6), dy = j == 0 ? 0.0 : rng.uniform_int(-6, 6);
      const std::string rel = cat + "/view" + std::to_string(j) + ".png";
      save_png(render_toy_scene(size, size, scene, dx, dy), (fs::path(dir) / rel).string());
      items.emplace_back(rel, cat);
    }
  }
  const std::string path = (fs::path(dir) / "manifest.tsv").string();
  write_manifest(split_dataset(items, seed), path);
  return path;
}

std::vector<TrainSample> to_train_samples(const std::vector<EvalSample>& s) {
  std::vector<TrainSample> out;
  for (const auto& e : s) out.push_back({e.id, e.hr, e.ref});
  return out;
}

// --- Ablation -------------------------------------------------------------

ExperimentConfig apply_axis(const ExperimentConfig& base, const std::string& axis, const std::string& value) {
  ExperimentConfig c = base;
  try {
    if (axis == "variant") {
      c.denoiser.variant = parse_variant(value);
    } else if (axis == "noise") {
      c.beta_bar_T = std::stod(value);
    } else if (axis == "steps") {
      c.sample_steps = std::stoi(value);
    } else if (axis == "topk") {
      if (value == "on" || value == "true") c.sttg.topk_enabled = true;
      else if (value == "off" || value == "false") c.sttg.topk_enabled = false;
      else throw std::invalid_argument("topk value must be on or off");
    } else if (axis == "reference") {
      c.data.pairing = to_string(parse_pairing(value));
    } else {
      throw std::invalid_argument("unknown ablation axis '" + axis + "' (variant, noise, steps, topk, reference)");
    }
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const std::invalid_argument*>(&e) && std::string(e.what()).find("axis") != std::string::npos)
      throw;
    throw std::invalid_argument("bad value '" + value + "' for axis " + axis + ": " + e.what());
  }
  validate(c);
  return c;
}

json AblationRecord::to_json() const {
  json j = {{"axis", axis}, {"value", value}, {"iterations", iterations}, {"final_loss", number_or_null(final_loss)}};
  j.update(report.summary());
  return j;
}

std::vector<AblationRecord> ablate(const ExperimentConfig& base, const std::string& axis,
                                   const std::vector<std::string>& values,
                                   const std::function<DataBundle(const ExperimentConfig&)>& data_for,
                                   std::ostream* log) {
  if (values.empty()) throw std::invalid_argument("ablate: no values");
  std::vector<AblationRecord> out;
  std::unique_ptr<Model> shared;  // the steps axis only changes sampling
  double shared_loss = std::numeric_limits<double>::quiet_NaN();
  for (const auto& value : values) {
    ExperimentConfig cfg = apply_axis(base, axis, value);
    cfg.out_dir = (fs::path(base.out_dir) / (axis + "-" + value)).string();
    const DataBundle data = data_for(cfg);
    std::unique_ptr<Model> own;
    Model* m = nullptr;
    double final_loss = std::numeric_limits<double>::quiet_NaN();
    if (axis == "steps" && shared) {
      m = shared.get();
      final_loss = shared_loss;
    } else {
      own = std::make_unique<Model>(cfg);
      Adam opt(own->parameters(), cfg.optim);
      if (cfg.optim.iterations > 0) final_loss = train(*own, opt, data.train).final_loss();
      m = own.get();
      if (axis == "steps") {
        shared = std::move(own);
        shared_loss = final_loss;
        m = shared.get();
      }
    }
    m->cfg.sample_steps = cfg.sample_steps;
    AblationRecord rec{axis, value, cfg.optim.iterations, final_loss, evaluate_model(*m, data.eval, cfg.seed)};
    if (log) {
      KvRecord kv{{"kind", "ablation"}, {"axis", axis}, {"value", value}};
      const json fields = rec.to_json();
      for (const auto& [k, v] : fields.items()) {
        if (k == "axis" || k == "value") continue;
        kv.emplace_back(k, v.is_null() ? "nan" : format_number(v.get<double>()));
      }
      *log << kv_line(kv) << "\n";
      log->flush();
    }
    out.push_back(std::move(rec));
  }
  return out;
}

// --- Logs and plots -------------------------------------------------------

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string kv_line(const KvRecord& rec) {
  std::string s;
  for (const auto& [k, v] : rec) {
    if (!s.empty()) s += ' ';
    s += k + '=' + v;
  }
  return s;
}

KvRecord parse_kv_line(const std::string& line) {
  KvRecord rec;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0) continue;
    rec.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
  }
  return rec;
}

std::vector<KvRecord> read_kv_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read log " + path);
  std::vector<KvRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    auto rec = parse_kv_line(line);
    if (!rec.empty()) out.push_back(std::move(rec));
  }
  return out;
}

namespace {

void put_pixel(ImagePlane& img, int x, int y, const std::array<double, 3>& rgb) {
  if (x < 0 || y < 0 || x >= img.width() || y >= img.height()) return;
  for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb[static_cast<std::size_t>(c)];
}

void draw_line(ImagePlane& img, int x0, int y0, int x1, int y1, const std::array<double, 3>& rgb) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    put_pixel(img, x0, y0, rgb);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) err += dy, x0 += sx;
    if (e2 <= dx) err += dx, y0 += sy;
  }
}

constexpr std::array<std::array<double, 3>, 6> kPalette{{{0.12, 0.47, 0.71},
                                                         {0.84, 0.15, 0.16},
                                                         {0.17, 0.63, 0.17},
                                                         {1.00, 0.50, 0.05},
                                                         {0.58, 0.40, 0.74},
                                                         {0.55, 0.34, 0.29}}};

}  // namespace

ImagePlane render_line_chart(const std::vector<Series>& series, int width, int height, bool log_y) {
  if (width < 64 || height < 64) throw std::invalid_argument("chart must be at least 64x64");
  ImagePlane img(3, height, width, PlaneRole::SR, 1.0);
  const int left = 40, right = width - 12, top = 12, bottom = height - 30;
  double x_lo = INFINITY, x_hi = -INFINITY, y_lo = INFINITY, y_hi = -INFINITY;
  const auto ty = [&](double y) { return log_y ? std::log10(std::max(y, 1e-300)) : y; };
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x_lo = std::min(x_lo, s.x[i]), x_hi = std::max(x_hi, s.x[i]);
      y_lo = std::min(y_lo, ty(s.y[i])), y_hi = std::max(y_hi, ty(s.y[i]));
    }
  }
  const std::array<double, 3> black{0, 0, 0}, grey{0.85, 0.85, 0.85};
  for (int g = 1; g < 5; ++g) {
    const int y = top + (bottom - top) * g / 5;
    draw_line(img, left, y, right, y, grey);
  }
  draw_line(img, left, bottom, right, bottom, black);
  draw_line(img, left, top, left, bottom, black);
  if (!std::isfinite(x_lo)) return img;
  if (x_hi == x_lo) x_hi = x_lo + 1.0;
  if (y_hi == y_lo) y_hi = y_lo + 1.0;
  const auto px = [&](double x) { return left + static_cast<int>(std::lround((x - x_lo) / (x_hi - x_lo) * (right - left))); };
  const auto py = [&](double y) {
    return bottom - static_cast<int>(std::lround((ty(y) - y_lo) / (y_hi - y_lo) * (bottom - top)));
  };
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const auto& col = kPalette[k % kPalette.size()];
    bool have = false;
    int lx = 0, ly = 0;
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      const int x = px(s.x[i]), y = py(s.y[i]);
      if (have) draw_line(img, lx, ly, x, y, col);
      else put_pixel(img, x, y, col);
      lx = x, ly = y, have = true;
    }
  }
  return img;
}

std::string summarize_series(const std::vector<Series>& series) {
  std::string out;
  for (const auto& s : series) {
    KvRecord rec{{"series", s.name}, {"points", std::to_string(s.y.size())}};
    if (!s.y.empty()) {
      rec.emplace_back("first", format_number(s.y.front()));
      rec.emplace_back("min", format_number(*std::min_element(s.y.begin(), s.y.end())));
      rec.emplace_back("last", format_number(s.y.back()));
    }
    out += kv_line(rec) + "\n";
  }
  return out;
}

std::string metric_table(const std::vector<KvRecord>& records) {
  std::vector<std::string> keys;
  for (const auto& r : records)
    for (const auto& [k, v] : r)
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  const auto lookup = [](const KvRecord& r, const std::string& k) -> std::string {
    for (const auto& [rk, v] : r)
      if (rk == k) return v;
    return "-";
  };
  std::vector<std::size_t> width;
  for (const auto& k : keys) {
    std::size_t w = k.size();
    for (const auto& r : records) w = std::max(w, lookup(r, k).size());
    width.push_back(w);
  }
  const auto row = [&](const auto& cell) {
    std::string line;
    for (std::size_t i = 0; i < keys.size(); ++i) {
      std::string c = cell(i);
      c.resize(width[i], ' ');
      line += (i ? "  " : "") + c;
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    return line + "\n";
  };
  std::string out = row([&](std::size_t i) { return keys[i]; });
  for (const auto& r : records) out += row([&](std::size_t i) { return lookup(r, keys[i]); });
  return out;
}

}  // namespace ttrd3
