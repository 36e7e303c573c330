#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "ttrd3/mfam.hpp"
#include "ttrd3/nn.hpp"
#include "ttrd3/rddm.hpp"

namespace ttrd3 {

/// Unfold geometry for patch matching. Only fully-contained (valid) patch
/// positions are used; folding averages overlapping contributions.
struct PatchGeometry {
  int patch = 3;
  int stride = 1;
};

/// Unfolded patch matrices for one scale of one image triple.
///
/// Q rows come from the LR-up features, K rows from the degraded reference
/// features, and V rows from the reference features at the same grid
/// positions scaled by `ref_ratio` (so V patches are ref_ratio times larger).
struct PatchEmbedding {
  Tensor q;  // [Nq, C*p*p]
  Tensor k;  // [Nk, C*p*p]
  Tensor v;  // [Nk, C*(p*r)^2]
  int channels = 0;
  int ref_ratio = 1;
  PatchGeometry geometry;
  int out_height = 0;  // LR-up feature dims at this scale
  int out_width = 0;
};

struct CorrelationSet {
  Tensor r_local;   // [Nq, Nk]
  Tensor r_global;  // [Nq, Nk]
  Tensor r_mix;     // [Nq, Nk]
  double alpha = 0.5;
};

/// Row-sparse selection of the K largest entries of each correlation row.
struct SparseSelection {
  int k = 1;
  int k_max = 10;
  int rows = 0;
  int cols = 0;
  std::vector<double> probs;   // selection distribution P over K = 1..k_max
  std::vector<int> indices;    // [rows, k], descending by value (ties: lower column first)
  std::vector<double> values;  // [rows, k], the kept correlation entries

  /// Dense [rows, cols] matrix with zeros outside the kept entries.
  [[nodiscard]] Tensor dense() const;
};

struct TextureGuidance {
  std::array<Tensor, 3> maps;  // [C_s, H_s, W_s]
  std::array<int, 3> k_selected{};
};

struct SttgConfig {
  PatchGeometry geometry;
  int k_max = 10;
  double temperature = 1.0;
  /// When false every column is kept (dense soft attention).
  bool topk_enabled = true;
  /// When positive, overrides the learned K with a constant.
  int fixed_k = 0;
  /// Reference-to-LR-up linear size ratio; 1 when Ref and LR-up share a grid.
  int ref_ratio = 1;
};

// --- Matrix-level operations -------------------------------------------

/// Rows are the valid patch positions of a [C, H, W] map in raster order;
/// each row is laid out channel-major then row-major within the patch.
Tensor unfold_patches(const Tensor& chw, int patch, int stride);

/// Inverse of unfold_patches with overlap averaging. Pixels outside every
/// patch are 0.
Tensor fold_patches(const Tensor& rows, int channels, int height, int width, int patch, int stride);

PatchEmbedding embed_scale(const Tensor& q_feat, const Tensor& k_feat, const Tensor& v_feat, PatchGeometry geometry,
                           int ref_ratio);

std::array<PatchEmbedding, 3> embed_qkv(const ImagePlane& lr_up, const ImagePlane& ref_downup, const ImagePlane& ref,
                                        const Mfam& mfam, PatchGeometry geometry, int ref_ratio);

/// Local: cosine similarity of raw patch vectors. Global: cosine similarity
/// of patch vectors concatenated with their image's mean patch vector.
/// Zero-norm vectors have similarity 0 with everything.
CorrelationSet correlation(const PatchEmbedding& emb, double alpha);

/// P = softmax((W_k + g) / tau) with g the injected Gumbel sample in train
/// mode (ignored in eval mode); returns the 1-based argmax (ties: lowest).
int select_k(std::span<const double> wk, double temperature, bool train_mode, std::span<const double> gumbel,
             std::vector<double>* probs_out = nullptr);

/// Straight-through surrogate gradient: d(sum_k P_k k)/dW_k.
std::vector<double> expected_k_gradient(std::span<const double> probs, double temperature);

/// Column indices of the k largest entries of `row`, descending, ties to the
/// lower column.
std::vector<int> topk_columns(std::span<const double> row, int k);

SparseSelection dynamic_topk(const Tensor& r_mix, std::span<const double> wk, int k_max, double temperature,
                             bool train_mode, std::span<const double> gumbel = {});

/// Weighted gather of V rows per query followed by fold onto the LR-up grid
/// (and average pooling by ref_ratio when V patches are larger).
Tensor transfer(const SparseSelection& sel, const Tensor& v, const PatchEmbedding& geometry_source);

// --- Differentiable module ----------------------------------------------

/// Per-scale learnable mixing coefficient (alpha = sigmoid(alpha_logit))
/// and K selection logits, plus the fused differentiable transfer.
class Sttg {
 public:
  Sttg(const SttgConfig& cfg, ParamStore& store, const std::string& prefix = "sttg");

  /// Features are [N, C_s, H_s, W_s] per scale; returns guidance per scale
  /// with the LR-up feature shape. `gumbel_rng` supplies train-mode noise;
  /// pass nullptr for eval mode.
  [[nodiscard]] std::array<ag::Var, 3> forward(const std::array<ag::Var, 3>& lr_feats,
                                               const std::array<ag::Var, 3>& refdu_feats,
                                               const std::array<ag::Var, 3>& ref_feats, Rng* gumbel_rng,
                                               std::array<int, 3>* k_out = nullptr) const;

  /// One scale with an explicit Gumbel sample (empty span: eval mode).
  [[nodiscard]] ag::Var forward_scale(int scale, const ag::Var& lr_feat, const ag::Var& refdu_feat,
                                      const ag::Var& ref_feat, std::span<const double> gumbel,
                                      int* k_out = nullptr) const;

  [[nodiscard]] double alpha(int scale) const;
  [[nodiscard]] const SttgConfig& config() const { return cfg_; }

  std::array<ag::Var, 3> alpha_logit;
  std::array<ag::Var, 3> wk;

 private:
  SttgConfig cfg_;
};

/// Straight-through K as a differentiable scalar: value argmax(P)+1,
/// gradient of sum_k P_k k with respect to W_k.
ag::Var straight_through_k(const ag::Var& wk, std::span<const double> gumbel, double temperature);

/// Eval-mode guidance for one (LR-up, Ref-down-up, Ref) triple.
TextureGuidance sttg_forward(const ImagePlane& lr_up, const ImagePlane& ref_downup, const ImagePlane& ref,
                             const Mfam& mfam, const Sttg& sttg);

}  // namespace ttrd3
