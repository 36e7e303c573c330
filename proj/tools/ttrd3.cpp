// Command-line front end: prepare-data, train, infer, evaluate, ablate, plot.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "ttrd3/harness.hpp"

namespace fs = std::filesystem;
using namespace ttrd3;
using nlohmann::json;

namespace {

struct ConfigArgs {
  std::string file;
  std::string preset = "desk";
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "JSON config file");
    app->add_option("--preset", preset, "Base defaults: desk, toy or paper")
        ->check(CLI::IsMember({"desk", "toy", "paper"}));
    app->add_option("--set", sets, "Override a config key, e.g. --set model.k_max=5");
    app->allow_extras();
  }

  /// Base preset, then the file, then dotted overrides (--set a.b=v or --a.b=v).
  [[nodiscard]] json document(const CLI::App* app) const {
    json doc = json::object();
    if (!file.empty()) {
      std::ifstream in(file);
      if (!in) throw std::runtime_error("cannot read config " + file);
      doc = json::parse(in, nullptr, true, true);
    }
    for (const auto& s : sets) apply_override(doc, s);
    const auto extras = app->remaining();
    for (std::size_t i = 0; i < extras.size(); ++i) {
      const std::string& a = extras[i];
      if (a.rfind("--", 0) != 0 || a.find('.') == std::string::npos)
        throw std::invalid_argument("unexpected argument '" + a + "'");
      std::string assignment = a.substr(2);
      if (assignment.find('=') == std::string::npos) {
        if (i + 1 >= extras.size()) throw std::invalid_argument("missing value for " + a);
        assignment += "=" + extras[++i];
      }
      apply_override(doc, assignment);
    }
    return doc;
  }

  [[nodiscard]] ExperimentConfig base() const {
    if (preset == "paper") return paper_config();
    if (preset == "toy") return toy_config();
    return desk_config();
  }

  [[nodiscard]] bool given(const CLI::App* app) const {
    return !file.empty() || !sets.empty() || !app->remaining().empty() || preset != "desk";
  }

  [[nodiscard]] ExperimentConfig resolve(const CLI::App* app) const { return config_from_json(document(app), base()); }
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

void write_json(const std::string& path, const json& j) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream(path) << j.dump(2) << "\n";
}

/// Logs to stdout and to `path` at once.
class TeeLog {
 public:
  explicit TeeLog(const std::string& path) : file_(path) {}
  std::ostream& stream() { return out_; }

 private:
  struct Buf : std::streambuf {
    std::ofstream* f = nullptr;
    int overflow(int c) override {
      if (c != EOF) {
        std::cout.put(static_cast<char>(c));
        f->put(static_cast<char>(c));
      }
      return c;
    }
    int sync() override {
      std::cout.flush();
      f->flush();
      return 0;
    }
  };
  std::ofstream file_;
  Buf buf_ = [this] {
    Buf b;
    b.f = &file_;
    return b;
  }();
  std::ostream out_{&buf_};
};

int cmd_prepare(const std::string& input, const std::string& out, std::uint64_t seed, int factor, bool synthetic,
                int categories, int per_category, int size) {
  if (synthetic) {
    const std::string path = write_toy_dataset(out, categories, per_category, size, seed);
    std::cout << kv_line({{"kind", "manifest"}, {"path", path}}) << "\n";
    return 0;
  }
  if (input.empty()) throw std::invalid_argument("prepare-data needs --input or --synthetic");
  std::vector<std::pair<std::string, std::string>> items;
  for (const auto& cat : fs::directory_iterator(input)) {
    if (!cat.is_directory()) continue;
    for (const auto& f : fs::directory_iterator(cat.path())) {
      if (f.path().extension() != ".png") continue;
      items.emplace_back(fs::relative(f.path(), input).string(), cat.path().filename().string());
    }
  }
  std::sort(items.begin(), items.end());
  if (items.empty()) throw std::invalid_argument("no PNG files under " + input + "/<category>/");
  const DatasetManifest m = split_dataset(items, seed, factor);
  const std::string path = (fs::path(out.empty() ? input : out) / "manifest.tsv").string();
  if (!out.empty() && fs::absolute(out) != fs::absolute(input)) {
    // Keep paths valid relative to the manifest location.
    DatasetManifest abs = m;
    for (auto& e : abs.entries) e.path = fs::absolute(fs::path(input) / e.path).string();
    fs::create_directories(out);
    write_manifest(abs, path);
  } else {
    write_manifest(m, path);
  }
  for (Split s : {Split::Train, Split::Reference, Split::Validation})
    std::cout << kv_line({{"kind", "split"}, {"split", to_string(s)}, {"count", std::to_string(m.in_split(s).size())}})
              << "\n";
  std::cout << kv_line({{"kind", "manifest"}, {"path", path}}) << "\n";
  return 0;
}

int cmd_train(ExperimentConfig cfg) {
  fs::create_directories(cfg.out_dir);
  write_json((fs::path(cfg.out_dir) / "config.json").string(), to_json(cfg));
  const auto train_set = to_train_samples(load_split(cfg, Split::Train));
  std::vector<EvalSample> val;
  try {
    val = load_split(cfg, Split::Validation, cfg.data.patch_size);
    if (val.size() > 4) val.resize(4);
  } catch (const std::invalid_argument&) {
  }
  TeeLog log((fs::path(cfg.out_dir) / "train.log").string());
  Model model(cfg);
  Adam opt(model.parameters(), cfg.optim);
  TrainHooks hooks;
  hooks.log = &log.stream();
  if (!val.empty()) {
    hooks.on_validate = [&](int step, Model& m) {
      const EvalReport r = evaluate_model(m, val, cfg.seed);
      log.stream() << kv_line({{"kind", "val"},
                               {"step", std::to_string(step)},
                               {"psnr", format_number(r.psnr)},
                               {"ssim", format_number(r.ssim)},
                               {"delta_psnr", format_number(r.delta_psnr())}})
                   << std::endl;
    };
  }
  hooks.on_checkpoint = [&](int step, const Model& m, const Adam& o) {
    save_checkpoint((fs::path(cfg.out_dir) / ("step" + std::to_string(step) + ".ckpt")).string(), m, &o, step);
  };
  const TrainResult res = train(model, opt, train_set, hooks);
  const json metrics = {{"initial_loss", res.history.empty() ? 0.0 : res.initial_loss()},
                        {"final_loss", res.history.empty() ? 0.0 : res.final_loss()}};
  const std::string ckpt = (fs::path(cfg.out_dir) / "final.ckpt").string();
  save_checkpoint(ckpt, model, &opt, cfg.optim.iterations, metrics);
  log.stream() << kv_line({{"kind", "checkpoint"}, {"path", ckpt}}) << std::endl;
  return 0;
}

ImagePlane load_reference(const std::string& ref, int channels, int h, int w, std::uint64_t seed) {
  std::uint64_t noise_seed = 0;
  if (ref == "noise") return make_noise_reference(channels, h, w, seed);
  if (parse_noise_token(ref, &noise_seed)) return make_noise_reference(channels, h, w, noise_seed);
  ImagePlane r = load_png(ref);
  return (r.height() == h && r.width() == w) ? r : resize_bicubic(r, h, w);
}

int cmd_infer(const std::unique_ptr<Model>& m, const std::string& lr_path, const std::string& ref_path,
              const std::string& out, std::uint64_t noise_seed) {
  const int f = m->cfg.data.sr_factor, mult = size_multiple(m->cfg);
  ImagePlane lr = load_png(lr_path);
  // The upsampled image must tile the U-Net, so trim the LR input if needed.
  const int lr_mult = mult / f;
  const int lh = lr.height() - lr.height() % lr_mult, lw = lr.width() - lr.width() % lr_mult;
  if (lh == 0 || lw == 0) throw std::invalid_argument("LR image is too small");
  if (lh != lr.height() || lw != lr.width()) lr = crop(lr, 0, 0, lh, lw);
  const ImagePlane lr_up = upsample_bicubic(lr, f);
  const ImagePlane ref = load_reference(ref_path, lr.channels(), lr_up.height(), lr_up.width(), noise_seed);
  SampleStats stats;
  const ImagePlane sr = infer(*m, lr_up, ref, noise_seed, &stats);
  save_png(sr, out);
  std::string plan;
  for (int t : stats.plan) plan += (plan.empty() ? "" : ",") + std::to_string(t);
  std::cout << kv_line({{"kind", "infer"},
                        {"out", out},
                        {"steps", std::to_string(m->cfg.sample_steps)},
                        {"denoiser_calls", std::to_string(stats.denoiser_calls)},
                        {"plan", plan}})
            << "\n";
  return 0;
}

std::vector<Series> series_from(const std::vector<KvRecord>& recs, const std::string& kind, const std::string& x_key,
                                const std::vector<std::string>& y_keys) {
  std::vector<Series> out;
  for (const auto& y : y_keys) {
    Series s{y, {}, {}};
    for (const auto& r : recs) {
      std::string k, xv, yv;
      for (const auto& [key, v] : r) {
        if (key == "kind") k = v;
        if (key == x_key) xv = v;
        if (key == y) yv = v;
      }
      if (k != kind || xv.empty() || yv.empty()) continue;
      s.x.push_back(std::stod(xv));
      s.y.push_back(std::stod(yv));
    }
    if (!s.x.empty()) out.push_back(std::move(s));
  }
  return out;
}

int cmd_plot(const std::vector<std::string>& logs, const std::string& out_png, const std::string& summary_path,
             const std::vector<std::string>& keys, bool log_y) {
  std::vector<KvRecord> recs, tables;
  for (const auto& p : logs) {
    auto r = read_kv_log(p);
    recs.insert(recs.end(), r.begin(), r.end());
  }
  for (const auto& r : recs)
    if (!r.empty() && r.front().first == "kind" && (r.front().second == "ablation" || r.front().second == "summary"))
      tables.push_back(r);
  const auto series = series_from(recs, "train", "step", keys);
  std::string text = summarize_series(series);
  if (!tables.empty()) text += "\n" + metric_table(tables);
  if (!series.empty()) {
    save_png(render_line_chart(series, 640, 400, log_y), out_png);
    text += kv_line({{"kind", "chart"}, {"path", out_png}}) + "\n";
  }
  std::cout << text;
  if (!summary_path.empty()) std::ofstream(summary_path) << text;
  if (series.empty() && tables.empty()) throw std::invalid_argument("no plottable records in the given logs");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reference-guided residual diffusion super-resolution"};
  app.name("ttrd3");
  app.require_subcommand(1);

  // prepare-data
  auto* prep = app.add_subcommand("prepare-data", "Split a <category>/<image>.png tree (or a synthetic set) into a manifest");
  std::string prep_in, prep_out;
  std::uint64_t prep_seed = 0;
  int prep_factor = 4, prep_cats = 4, prep_per = 10, prep_size = 64;
  bool prep_synth = false;
  prep->add_option("--input", prep_in, "Dataset root with one directory per category");
  prep->add_option("--out", prep_out, "Output directory for manifest.tsv");
  prep->add_option("--seed", prep_seed, "Split seed");
  prep->add_option("--sr-factor", prep_factor, "Recorded SR factor");
  prep->add_flag("--synthetic", prep_synth, "Render a synthetic dataset into --out");
  prep->add_option("--categories", prep_cats, "Synthetic categories");
  prep->add_option("--per-category", prep_per, "Synthetic views per category");
  prep->add_option("--size", prep_size, "Synthetic image side");

  // train
  auto* tr = app.add_subcommand("train", "Train from the manifest's train split");
  ConfigArgs tr_cfg;
  tr_cfg.attach(tr);
  std::uint64_t tr_seed = 0;
  std::string tr_out;
  tr->add_option("--seed", tr_seed, "Seed for init, batches and noise")->required();
  tr->add_option("--out", tr_out, "Run directory (overrides out_dir)");

  // infer
  auto* inf = app.add_subcommand("infer", "Super-resolve one LR image");
  ConfigArgs inf_cfg;
  inf_cfg.attach(inf);
  std::string inf_ckpt, inf_lr, inf_ref = "noise", inf_out = "sr.png";
  int inf_steps = 0;
  double inf_eta = -1.0;
  std::uint64_t inf_noise = 0;
  inf->add_option("--checkpoint", inf_ckpt, "Checkpoint file")->required();
  inf->add_option("--lr", inf_lr, "LR input PNG")->required();
  inf->add_option("--ref", inf_ref, "Reference PNG, or 'noise'");
  inf->add_option("--out", inf_out, "Output PNG");
  inf->add_option("--steps", inf_steps, "Sampling steps (default: config)");
  inf->add_option("--eta", inf_eta, "Sampler randomness in [0,1] (default: config)");
  inf->add_option("--noise-seed", inf_noise, "Seed of the sampler noise");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "PSNR/SSIM/Frechet report over a split");
  ConfigArgs ev_cfg;
  ev_cfg.attach(ev);
  std::string ev_ckpt, ev_split = "validation", ev_out, ev_manifest;
  int ev_steps = 0;
  std::uint64_t ev_noise = 0;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--split", ev_split, "train, reference or validation");
  ev->add_option("--manifest", ev_manifest, "Manifest (default: the checkpoint's)");
  ev->add_option("--steps", ev_steps, "Sampling steps (default: config)");
  ev->add_option("--noise-seed", ev_noise, "Seed of the sampler noise");
  ev->add_option("--out", ev_out, "Directory for eval.log and summary.json");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train and evaluate one run per axis value");
  ConfigArgs ab_cfg;
  ab_cfg.attach(ab);
  std::string ab_axis, ab_values, ab_out;
  std::uint64_t ab_seed = 0;
  ab->add_option("--axis", ab_axis, "variant, noise, steps, topk or reference")->required();
  ab->add_option("--values", ab_values, "Comma-separated values")->required();
  ab->add_option("--seed", ab_seed, "Seed shared by all runs");
  ab->add_option("--out", ab_out, "Output directory (overrides out_dir)");

  // plot
  auto* pl = app.add_subcommand("plot", "Loss curves and metric tables from key=value logs");
  std::vector<std::string> pl_logs, pl_keys{"loss"};
  std::string pl_out = "curves.png", pl_summary;
  bool pl_logy = false;
  pl->add_option("--log", pl_logs, "Log files")->required();
  pl->add_option("--keys", pl_keys, "Train record keys to plot");
  pl->add_option("--out", pl_out, "Chart PNG");
  pl->add_option("--summary", pl_summary, "Text summary file");
  pl->add_flag("--log-y", pl_logy, "Logarithmic y axis");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*prep) return cmd_prepare(prep_in, prep_out, prep_seed, prep_factor, prep_synth, prep_cats, prep_per, prep_size);
    if (*tr) {
      json doc = tr_cfg.document(tr);
      doc["seed"] = tr_seed;
      if (!tr_out.empty()) doc["out_dir"] = tr_out;
      return cmd_train(config_from_json(doc, tr_cfg.base()));
    }
    if (*inf) {
      std::unique_ptr<Model> m;
      if (inf_cfg.given(inf)) {
        const ExperimentConfig expected = inf_cfg.resolve(inf);
        m = load_model(inf_ckpt, &expected);
        m->cfg.sample_steps = expected.sample_steps;
        m->cfg.eta = expected.eta;
      } else {
        m = load_model(inf_ckpt);
      }
      if (inf_steps > 0) m->cfg.sample_steps = inf_steps;
      if (inf_eta >= 0.0) m->cfg.eta = inf_eta;
      validate(m->cfg);
      return cmd_infer(m, inf_lr, inf_ref, inf_out, inf_noise);
    }
    if (*ev) {
      std::unique_ptr<Model> m;
      if (ev_cfg.given(ev)) {
        const ExperimentConfig expected = ev_cfg.resolve(ev);
        m = load_model(ev_ckpt, &expected);
        m->cfg = expected;
      } else {
        m = load_model(ev_ckpt);
      }
      if (!ev_manifest.empty()) m->cfg.data.manifest = ev_manifest;
      if (ev_steps > 0) m->cfg.sample_steps = ev_steps;
      validate(m->cfg);
      const std::string dir = ev_out.empty() ? (fs::path(ev_ckpt).parent_path() / "eval").string() : ev_out;
      fs::create_directories(dir);
      const auto samples = load_split(m->cfg, parse_split(ev_split), m->cfg.data.patch_size);
      TeeLog log((fs::path(dir) / "eval.log").string());
      const EvalReport rep = evaluate_model(*m, samples, ev_noise, &log.stream());
      json summary = rep.summary();
      summary["split"] = ev_split;
      summary["checkpoint"] = ev_ckpt;
      json per = json::array();
      for (const auto& im : rep.images)
        per.push_back({{"id", im.id},
                       {"psnr", im.psnr},
                       {"ssim", im.ssim},
                       {"psnr_bicubic", im.psnr_bicubic},
                       {"ssim_bicubic", im.ssim_bicubic}});
      summary["per_image"] = per;
      write_json((fs::path(dir) / "summary.json").string(), summary);
      return 0;
    }
    if (*ab) {
      json doc = ab_cfg.document(ab);
      if (ab->count("--seed")) doc["seed"] = ab_seed;
      if (!ab_out.empty()) doc["out_dir"] = ab_out;
      const ExperimentConfig cfg = config_from_json(doc, ab_cfg.base());
      fs::create_directories(cfg.out_dir);
      TeeLog log((fs::path(cfg.out_dir) / "ablate.log").string());
      const auto records = ablate(
          cfg, ab_axis, split_list(ab_values),
          [](const ExperimentConfig& c) {
            return DataBundle{to_train_samples(load_split(c, Split::Train)),
                              load_split(c, Split::Validation, c.data.patch_size)};
          },
          &log.stream());
      json all = json::array();
      for (const auto& r : records) all.push_back(r.to_json());
      write_json((fs::path(cfg.out_dir) / "ablate.json").string(), all);
      return 0;
    }
    if (*pl) return cmd_plot(pl_logs, pl_out, pl_summary, pl_keys, pl_logy);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
