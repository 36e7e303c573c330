#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "ttrd3/config.hpp"
#include "ttrd3/data.hpp"

namespace ttrd3 {

// --- Optimizer ------------------------------------------------------------

/// Adaptive-moment optimizer with optional global-norm gradient clipping.
class Adam {
 public:
  Adam(std::vector<ag::Var> params, const OptimConfig& cfg);

  /// Clips, updates every parameter and returns the pre-clip gradient norm.
  double step();
  [[nodiscard]] int steps() const { return t_; }
  [[nodiscard]] const std::vector<Tensor>& first_moments() const { return m_; }
  [[nodiscard]] const std::vector<Tensor>& second_moments() const { return v_; }
  void restore(int steps, std::vector<Tensor> m, std::vector<Tensor> v);

 private:
  std::vector<ag::Var> params_;
  OptimConfig cfg_;
  std::vector<Tensor> m_, v_;
  int t_ = 0;
};

double global_grad_norm(const std::vector<ag::Var>& params);

// --- Model ----------------------------------------------------------------

/// MFAM, STTG and the denoiser registered in one parameter store, seeded by cfg.seed.
struct Model {
  explicit Model(const ExperimentConfig& cfg);

  ExperimentConfig cfg;
  CoeffSchedule schedule;
  ParamStore store;
  std::unique_ptr<Mfam> mfam;
  std::unique_ptr<Sttg> sttg;
  std::unique_ptr<Denoiser> denoiser;

  [[nodiscard]] std::vector<ag::Var> parameters() const;
};

/// Eval-mode guidance for an LR-up image and its reference.
TextureGuidance compute_guidance(const Model& m, const ImagePlane& lr_up, const ImagePlane& ref);

// --- Training -------------------------------------------------------------

/// One training image with its reference view, both at HR size.
struct TrainSample {
  std::string id;
  ImagePlane hr;
  ImagePlane ref;
};

struct TrainRecord {
  int step = 0;
  double loss = 0.0;
  LossParts parts;
  double grad_norm = 0.0;
  std::array<int, 3> k{};
};

struct TrainResult {
  std::vector<TrainRecord> history;  // one entry per iteration
  /// Mean loss over the first and last `window` iterations.
  [[nodiscard]] double initial_loss(int window = 50) const;
  [[nodiscard]] double final_loss(int window = 50) const;
};

struct TrainHooks {
  std::ostream* log = nullptr;  // key=value records every cfg.train.log_every steps
  std::function<void(int step, Model&)> on_validate;
  std::function<void(int step, const Model&, const Adam&)> on_checkpoint;
};

/// Training loop. Batches draw items, steps in [1, T] and noise from streams
/// derived from cfg.seed. Throws std::runtime_error on a non-finite loss after
/// writing a diagnostic snapshot to cfg.out_dir (when non-empty).
TrainResult train(Model& model, Adam& opt, const std::vector<TrainSample>& data, const TrainHooks& hooks = {});

// --- Sampling -------------------------------------------------------------

/// Returns (residual, noise) predictions for a noised image at step t.
using DenoiseFn = std::function<std::pair<ImagePlane, ImagePlane>(const ImagePlane& noised, int t)>;

struct SampleStats {
  std::vector<int> plan;
  int denoiser_calls = 0;
};

/// Reverse loop from I_T = lr_up + beta_bar_T eps along timestep_plan(T, steps);
/// the output is clamped to [0, 1]. eps and per-step noise come from `rng`.
ImagePlane run_sampler(const ImagePlane& lr_up, const CoeffSchedule& sched, int steps, double eta, Rng& rng,
                       const DenoiseFn& fn, SampleStats* stats = nullptr);

/// Full inference: guidance once, then the reverse loop with the model denoiser.
ImagePlane infer(const Model& m, const ImagePlane& lr_up, const ImagePlane& ref, std::uint64_t noise_seed,
                 SampleStats* stats = nullptr);

// --- Checkpoints ----------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'T', 'T', 'R', 'D', '3', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json manifest;
  std::vector<std::pair<std::string, Tensor>> arrays;

  [[nodiscard]] const Tensor& array(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Model& m, const Adam* opt, int step,
                     const nlohmann::json& metrics = nlohmann::json::object());
Checkpoint read_checkpoint(const std::string& path);

/// Rebuilds the model stored in `path`. When `expected` is given its config
/// hash must match the stored one.
std::unique_ptr<Model> load_model(const std::string& path, const ExperimentConfig* expected = nullptr);

// --- Evaluation -----------------------------------------------------------

struct EvalSample {
  std::string id;
  ImagePlane hr;
  ImagePlane ref;
};

struct EvalImage {
  std::string id;
  double psnr = 0.0, ssim = 0.0;
  double psnr_bicubic = 0.0, ssim_bicubic = 0.0;
};

struct EvalReport {
  std::vector<EvalImage> images;
  double psnr = 0.0, ssim = 0.0;
  double psnr_bicubic = 0.0, ssim_bicubic = 0.0;
  double fd = 0.0, fd_bicubic = 0.0;  // NaN with fewer than 2 images
  [[nodiscard]] double delta_psnr() const { return psnr - psnr_bicubic; }
  [[nodiscard]] double delta_ssim() const { return ssim - ssim_bicubic; }
  [[nodiscard]] double delta_fd() const { return fd - fd_bicubic; }
  [[nodiscard]] nlohmann::json summary() const;
};

/// Produces an SR image from (lr_up, ref) for sample i.
using SrFn = std::function<ImagePlane(const ImagePlane& lr_up, const ImagePlane& ref, std::size_t i)>;

EvalReport evaluate(const std::vector<EvalSample>& samples, int sr_factor, const SrFn& sr,
                    const PerceptualExtractor& ext, std::ostream* log = nullptr);
EvalReport evaluate_model(const Model& m, const std::vector<EvalSample>& samples, std::uint64_t noise_seed,
                          std::ostream* log = nullptr);

// --- Data assembly --------------------------------------------------------

/// Side multiple every pipeline input must satisfy for this config.
int size_multiple(const ExperimentConfig& cfg);

/// Loads one split of a manifest, pairs references per cfg.data.pairing and
/// trims each HR image to a multiple of size_multiple(cfg), then to at most
/// crop_size per side (top-left) when crop_size > 0. Relative paths
/// resolve against the manifest directory.
std::vector<EvalSample> load_split(const ExperimentConfig& cfg, Split split, int crop_size = 0);

/// Synthetic dataset: `categories` scenes, `per_category` shifted views each.
/// Writes PNGs plus manifest.tsv under `dir`; returns the manifest path.
std::string write_toy_dataset(const std::string& dir, int categories, int per_category, int size,
                              std::uint64_t seed);

std::vector<TrainSample> to_train_samples(const std::vector<EvalSample>& s);

// --- Ablation -------------------------------------------------------------

/// Axes: variant, noise (beta_bar_T), steps (T_sample), topk (on/off), reference (pairing).
ExperimentConfig apply_axis(const ExperimentConfig& base, const std::string& axis, const std::string& value);

struct AblationRecord {
  std::string axis, value;
  int iterations = 0;
  double final_loss = 0.0;  // NaN without training
  EvalReport report;
  [[nodiscard]] nlohmann::json to_json() const;
};

struct DataBundle {
  std::vector<TrainSample> train;
  std::vector<EvalSample> eval;
};

/// One record per value. `data_for` supplies data per derived config (the
/// reference axis changes pairing). The steps axis trains once.
std::vector<AblationRecord> ablate(const ExperimentConfig& base, const std::string& axis,
                                   const std::vector<std::string>& values,
                                   const std::function<DataBundle(const ExperimentConfig&)>& data_for,
                                   std::ostream* log = nullptr);

// --- Logs and plots -------------------------------------------------------

using KvRecord = std::vector<std::pair<std::string, std::string>>;

std::string format_number(double v);
std::string kv_line(const KvRecord& rec);
KvRecord parse_kv_line(const std::string& line);
std::vector<KvRecord> read_kv_log(const std::string& path);

struct Series {
  std::string name;
  std::vector<double> x, y;
};

/// Static line chart (axes plus one colored polyline per series).
ImagePlane render_line_chart(const std::vector<Series>& series, int width = 640, int height = 400,
                             bool log_y = false);

/// Text summary: per series first/min/last values.
std::string summarize_series(const std::vector<Series>& series);

/// Aligned text table of records (union of keys, first-seen order).
std::string metric_table(const std::vector<KvRecord>& records);

}  // namespace ttrd3
