#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "doctest.h"
#include "test_util.hpp"
#include "ttrd3/harness.hpp"
#include "ttrd3/metrics.hpp"

using namespace ttrd3;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny() {
  ExperimentConfig c = toy_config();
  c.denoiser.base_channels = 4;
  c.denoiser.channel_multipliers = {1, 1, 1};
  c.denoiser.time_embedding_dim = 8;
  c.mfam.widths = {4, 4, 4};
  c.mfam.block_counts = {1, 0, 0};
  c.mfam.cbam_reduction = 2;
  c.denoiser.guidance_channels = c.mfam.widths;
  c.sttg.k_max = 3;
  c.sttg.geometry.stride = 1;
  c.optim.iterations = 3;
  c.optim.batch_size = 2;
  c.train.log_every = 1;
  c.out_dir = "";
  return c;
}

std::vector<TrainSample> tiny_data(int n = 3, int size = 16) {
  std::vector<TrainSample> out;
  for (int i = 0; i < n; ++i) {
    auto [hr, ref] = toy_pair(size, 40 + i);
    out.push_back({"img" + std::to_string(i), hr, ref});
  }
  return out;
}

std::vector<EvalSample> as_eval(const std::vector<TrainSample>& s) {
  std::vector<EvalSample> out;
  for (const auto& t : s) out.push_back({t.id, t.hr, t.ref});
  return out;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ttrd3_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("paper defaults") {
  const ExperimentConfig c = paper_config();
  CHECK(c.T == 1000);
  CHECK(c.sample_steps == 10);
  CHECK(c.beta_bar_T == 0.1);
  CHECK(c.sttg.k_max == 10);
  CHECK(c.mfam.block_counts == std::array<int, 3>{2, 2, 2});
  CHECK(c.denoiser.base_channels == 64);
  CHECK(c.denoiser.channel_multipliers == std::vector<int>{1, 2, 4, 8});
  CHECK(c.optim.lr == 1e-4);
  CHECK(c.optim.batch_size == 2);
  CHECK(c.optim.iterations == 300000);
  CHECK(c.optim.beta1 == 0.9);
  CHECK(c.optim.beta2 == 0.99);
  CHECK(c.loss.lambda1 == 1.0);
  CHECK(c.loss.lambda2 == 1e-3);
  CHECK(c.loss.lambda3 == 1e-4);
  CHECK(c.eta == 1.0);
  CHECK(c.denoiser.guidance_channels == c.mfam.widths);
  for (const auto& cfg : {paper_config(), desk_config(), toy_config()}) CHECK_NOTHROW(validate(cfg));
}

TEST_CASE("config json round trip and validation") {
  const ExperimentConfig c = toy_config();
  const json j = to_json(c);
  CHECK(to_json(config_from_json(j)) == j);

  json partial = {{"model", {{"variant", "2net"}, {"k_max", 5}}}, {"sampler", {{"steps", 20}}}};
  const ExperimentConfig p = config_from_json(partial, c);
  CHECK(p.denoiser.variant == DenoiserVariant::TwoNet);
  CHECK(p.sttg.k_max == 5);
  CHECK(p.sample_steps == 20);
  CHECK(p.optim.lr == c.optim.lr);

  CHECK_THROWS_AS(config_from_json(json{{"modle", json::object()}}), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(json{{"model", {{"kmax", 3}}}}), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(json{{"model", {{"k_max", "five"}}}}), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(json{{"sampler", {{"steps", 1}}}}), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(json{{"model", {{"fixed_k", 11}}}}), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(json{{"data", {{"pairing", "closest"}}}}), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(json{{"model", {{"mfam_widths", {8, 8}}}}}), std::invalid_argument);
}

TEST_CASE("dotted overrides") {
  json doc = json::object();
  apply_override(doc, "model.k_max=4");
  apply_override(doc, "data.pairing=random");
  apply_override(doc, "model.topk=false");
  apply_override(doc, "schedule.beta_bar_T=0.5");
  CHECK(doc["model"]["k_max"] == 4);
  CHECK(doc["data"]["pairing"] == "random");
  const ExperimentConfig c = config_from_json(doc);
  CHECK(c.sttg.k_max == 4);
  CHECK_FALSE(c.sttg.topk_enabled);
  CHECK(c.beta_bar_T == 0.5);
  CHECK_THROWS_AS(apply_override(doc, "novalue"), std::invalid_argument);
}

TEST_CASE("config hash covers model and schedule only") {
  const ExperimentConfig a = toy_config();
  ExperimentConfig b = a;
  b.optim.lr = 0.5;
  b.sample_steps = 50;
  b.seed = 3;
  CHECK(config_hash(a) == config_hash(b));
  b.sttg.k_max = 4;
  CHECK(config_hash(a) != config_hash(b));
  ExperimentConfig c = a;
  c.beta_bar_T = 0.5;
  CHECK(config_hash(a) != config_hash(c));
}

TEST_CASE("adam step and gradient clipping") {
  OptimConfig oc;
  oc.lr = 0.1;
  oc.grad_clip = 0.0;
  auto p = ag::parameter(Tensor(Shape{2}, {1.0, -2.0}));
  Adam opt({p}, oc);
  ag::backward(ag::mean_all(ag::mul(p, p)));  // grad = p
  CHECK(opt.step() == doctest::Approx(std::sqrt(5.0)));
  // First Adam step moves each weight by lr * sign(g) up to eps.
  CHECK(p.value()[0] == doctest::Approx(0.9).epsilon(1e-7));
  CHECK(p.value()[1] == doctest::Approx(-1.9).epsilon(1e-7));

  oc.grad_clip = 1.0;
  auto q = ag::parameter(Tensor(Shape{2}, {3.0, 4.0}));
  Adam clipped({q}, oc);
  ag::backward(ag::scale(ag::mean_all(ag::mul(q, q)), 2.0));  // grad = 2q, norm 10
  CHECK(clipped.step() == doctest::Approx(10.0));
  const double m0 = clipped.first_moments()[0][0];
  CHECK(m0 == doctest::Approx((1.0 - oc.beta1) * 6.0 / 10.0));
}

TEST_CASE("seeded training is reproducible") {
  const ExperimentConfig cfg = tiny();
  const auto data = tiny_data();
  const fs::path dir = scratch_dir("determinism");
  std::string files[2];
  std::vector<double> losses[2];
  for (int run = 0; run < 2; ++run) {
    Model m(cfg);
    Adam opt(m.parameters(), cfg.optim);
    std::ostringstream log;
    TrainHooks hooks;
    hooks.log = &log;
    const auto res = train(m, opt, data, hooks);
    REQUIRE(res.history.size() == 3);
    for (const auto& r : res.history) losses[run].push_back(r.loss);
    CHECK(log.str().find("kind=train step=1 loss=") == 0);
    const fs::path f = dir / ("run" + std::to_string(run) + ".ckpt");
    save_checkpoint(f.string(), m, &opt, 3);
    files[run] = slurp(f);
  }
  CHECK(losses[0] == losses[1]);
  CHECK(files[0] == files[1]);
  CHECK(files[0].compare(0, 8, "TTRD3CKP") == 0);

  ExperimentConfig other = cfg;
  other.seed = cfg.seed + 1;
  Model m(other);
  Adam opt(m.parameters(), other.optim);
  CHECK(train(m, opt, data).history[0].loss != losses[0][0]);
}

TEST_CASE("zero pixel and perceptual weights leave the diffusion loss") {
  ExperimentConfig cfg = tiny();
  cfg.loss.lambda2 = 0.0;
  cfg.loss.lambda3 = 0.0;
  Model m(cfg);
  Adam opt(m.parameters(), cfg.optim);
  for (const auto& r : train(m, opt, tiny_data()).history) {
    CHECK(r.loss == r.parts.diffusion);
    CHECK(r.parts.pixel > 0.0);
  }
}

TEST_CASE("non-finite loss aborts with a snapshot") {
  ExperimentConfig cfg = tiny();
  const fs::path dir = scratch_dir("nonfinite");
  cfg.out_dir = dir.string();
  auto data = tiny_data(1);
  data[0].hr.data[5] = std::nan("");
  Model m(cfg);
  Adam opt(m.parameters(), cfg.optim);
  CHECK_THROWS_AS(train(m, opt, data), std::runtime_error);
  CHECK(fs::exists(dir / "diagnostic.json"));
  CHECK_THROWS_AS(train(m, opt, {}), std::invalid_argument);
}

TEST_CASE("checkpoint round trip and hash check") {
  const ExperimentConfig cfg = tiny();
  Model m(cfg);
  Adam opt(m.parameters(), cfg.optim);
  train(m, opt, tiny_data());
  const fs::path dir = scratch_dir("checkpoint");
  const std::string path = (dir / "m.ckpt").string();
  save_checkpoint(path, m, &opt, 3, json{{"note", 1}});

  const auto ck = read_checkpoint(path);
  CHECK(ck.manifest["step"] == 3);
  CHECK(ck.manifest["metrics"]["note"] == 1);
  CHECK(ck.manifest["config_hash"] == config_hash(cfg));
  CHECK(ck.array("schedule/alphas").size() == 1000);

  const auto loaded = load_model(path, &cfg);
  for (std::size_t i = 0; i < m.store.entries().size(); ++i)
    CHECK(m.store.entries()[i].second.value().vec() == loaded->store.entries()[i].second.value().vec());

  const auto [hr, ref] = toy_pair(16, 7);
  const ImagePlane lr_up = upsample_bicubic(degrade_bicubic(hr, 4), 4);
  for (double eta : {0.0, 1.0}) {
    m.cfg.eta = loaded->cfg.eta = eta;
    CHECK(infer(m, lr_up, ref, 11).data.vec() == infer(*loaded, lr_up, ref, 11).data.vec());
  }
  m.cfg.eta = 0.0;
  CHECK(infer(m, lr_up, ref, 11).data.vec() == infer(m, lr_up, ref, 11).data.vec());

  ExperimentConfig wrong = cfg;
  wrong.sttg.k_max = 4;
  CHECK_THROWS_WITH_AS(load_model(path, &wrong), doctest::Contains("hash mismatch"), std::runtime_error);
  std::ofstream(dir / "bad.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(read_checkpoint((dir / "bad.ckpt").string()), std::runtime_error);
}

TEST_CASE("oracle denoiser closes the sampling loop") {
  const CoeffSchedule sched = build_schedule(1000, 0.1);
  Rng rng(3);
  const ImagePlane hr(testing::random_tensor({3, 16, 16}, rng, 0.05, 0.95), PlaneRole::HR);
  const ImagePlane lr_up(testing::random_tensor({3, 16, 16}, rng, 0.05, 0.95), PlaneRole::LRup);
  const ImagePlane res = make_residual(lr_up, hr);
  const DenoiseFn oracle = [&](const ImagePlane& x, int t) {
    Tensor eps = (x.data - hr.data - sched.alpha_bar(t) * res.data) * (1.0 / sched.beta_bar(t));
    return std::pair{res, ImagePlane(std::move(eps), PlaneRole::Noise)};
  };
  for (double eta : {0.0, 1.0}) {
    SampleStats stats;
    Rng noise(9);
    const ImagePlane sr = run_sampler(lr_up, sched, 10, eta, noise, oracle, &stats);
    CHECK((sr.data - hr.data).abs_max() < 1e-4);
    CHECK(stats.denoiser_calls == 10);
    CHECK(stats.plan == std::vector<int>{1000, 889, 778, 667, 556, 445, 334, 223, 112, 1});
  }
}

TEST_CASE("model inference runs the configured plan") {
  ExperimentConfig cfg = tiny();
  Model m(cfg);
  const auto [hr, ref] = toy_pair(16, 8);
  const ImagePlane lr_up = upsample_bicubic(degrade_bicubic(hr, 4), 4);
  SampleStats stats;
  const ImagePlane sr = infer(m, lr_up, ref, 1, &stats);
  CHECK(stats.denoiser_calls == 10);
  CHECK(sr.role == PlaneRole::SR);
  for (double v : sr.data.data()) REQUIRE((v >= 0.0 && v <= 1.0));
  m.cfg.sample_steps = 4;
  infer(m, lr_up, ref, 1, &stats);
  CHECK(stats.denoiser_calls == 4);
  CHECK_THROWS_AS(infer(m, crop(lr_up, 0, 0, 14, 14), ref, 1), std::invalid_argument);
}

TEST_CASE("evaluation fixed points and bicubic self-comparison") {
  const auto samples = as_eval(tiny_data(3));
  const auto ext = make_extractor("convstack");
  const EvalReport same = evaluate(
      samples, 4, [&](const ImagePlane&, const ImagePlane&, std::size_t i) { return samples[i].hr; }, *ext);
  CHECK(same.psnr == kPsnrCap);
  CHECK(same.ssim == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(same.fd) < 1e-9);

  std::ostringstream log;
  const EvalReport bic = evaluate(
      samples, 4, [](const ImagePlane& lr_up, const ImagePlane&, std::size_t) { return lr_up; }, *ext, &log);
  CHECK(bic.delta_psnr() == 0.0);
  CHECK(bic.delta_ssim() == 0.0);
  CHECK(bic.delta_fd() == 0.0);
  CHECK(bic.images.size() == 3);
  CHECK(log.str().find("kind=image id=img0 ") == 0);
  CHECK(log.str().find("kind=summary") != std::string::npos);
  CHECK_THROWS_AS(evaluate({}, 4, nullptr, *ext), std::invalid_argument);

  const EvalReport one = evaluate(
      {samples[0]}, 4, [](const ImagePlane& lr_up, const ImagePlane&, std::size_t) { return lr_up; }, *ext);
  CHECK(std::isnan(one.fd));
  CHECK(one.summary()["fd"].is_null());
}

TEST_CASE("manifest-driven data assembly") {
  const fs::path dir = scratch_dir("toyset");
  const std::string manifest = write_toy_dataset(dir.string(), 2, 10, 32, 5);
  ExperimentConfig cfg = tiny();
  cfg.data.manifest = manifest;
  const auto train_split = load_split(cfg, Split::Train);
  CHECK(train_split.size() == 12);
  CHECK(load_split(cfg, Split::Validation).size() == 2);
  CHECK(load_split(cfg, Split::Validation, 16)[0].hr.height() == 16);
  for (const auto& s : train_split) {
    CHECK(s.hr.height() == 32);
    CHECK(s.ref.width() == 32);
    CHECK(s.ref.data.vec() != s.hr.data.vec());
  }
  cfg.data.pairing = "noise";
  const auto noisy = load_split(cfg, Split::Train);
  CHECK(noisy[0].ref.data.mean() == doctest::Approx(0.0).epsilon(0.2));
  cfg.data.manifest = (dir / "missing.tsv").string();
  CHECK_THROWS(load_split(cfg, Split::Train));
}

TEST_CASE("ablation axes and records") {
  const ExperimentConfig base = tiny();
  CHECK(apply_axis(base, "noise", "0.5").beta_bar_T == 0.5);
  CHECK(apply_axis(base, "variant", "1net-b").denoiser.variant == DenoiserVariant::OneNetB);
  CHECK(apply_axis(base, "steps", "20").sample_steps == 20);
  CHECK_FALSE(apply_axis(base, "topk", "off").sttg.topk_enabled);
  CHECK(apply_axis(base, "reference", "noise").data.pairing == "noise");
  CHECK_THROWS_AS(apply_axis(base, "depth", "3"), std::invalid_argument);
  CHECK_THROWS_AS(apply_axis(base, "noise", "loud"), std::invalid_argument);
  CHECK_THROWS_AS(apply_axis(base, "steps", "1"), std::invalid_argument);

  ExperimentConfig cfg = base;
  cfg.optim.iterations = 1;
  const auto data = tiny_data(2);
  int calls = 0;
  std::ostringstream log;
  const auto recs = ablate(
      cfg, "noise", {"0.1", "0.5", "1.0"},
      [&](const ExperimentConfig& c) {
        ++calls;
        CHECK(c.beta_bar_T > 0.0);
        return DataBundle{data, as_eval(data)};
      },
      &log);
  REQUIRE(recs.size() == 3);
  CHECK(calls == 3);
  const json first = recs[0].to_json();
  std::vector<std::string> keys;
  for (const auto& [k, v] : first.items()) keys.push_back(k);
  for (const auto& r : recs) {
    const json rj = r.to_json();
    std::vector<std::string> ks;
    for (const auto& [k, v] : rj.items()) ks.push_back(k);
    CHECK(ks == keys);
  }
  CHECK(recs[1].value == "0.5");
  const std::string text = log.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
}

TEST_CASE("key=value logs, tables and charts") {
  const KvRecord rec{{"kind", "train"}, {"step", "3"}, {"loss", format_number(0.25)}};
  CHECK(kv_line(rec) == "kind=train step=3 loss=0.25");
  CHECK(parse_kv_line(kv_line(rec)) == rec);
  CHECK(format_number(std::nan("")) == "nan");

  const std::string table = metric_table({{{"axis", "noise"}, {"psnr", "20.5"}}, {{"axis", "noise"}, {"ssim", "0.9"}}});
  CHECK(table == "axis   psnr  ssim\nnoise  20.5  -\nnoise  -     0.9\n");

  const Series s{"loss", {1, 2, 3, 4}, {4, 3, 2, 1}};
  const ImagePlane chart = render_line_chart({s}, 200, 100);
  CHECK(chart.channels() == 3);
  int colored = 0;
  for (int y = 0; y < 100; ++y)
    for (int x = 0; x < 200; ++x) colored += chart.at(2, y, x) > 0.6 && chart.at(0, y, x) < 0.3;
  CHECK(colored > 100);
  CHECK(summarize_series({s}) == "series=loss points=4 first=4 min=1 last=1\n");
  CHECK_THROWS_AS(render_line_chart({s}, 10, 10), std::invalid_argument);
}
