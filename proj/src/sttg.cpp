#include "ttrd3/sttg.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>

namespace ttrd3 {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMapMat = Eigen::Map<const RowMat>;
using MapMat = Eigen::Map<RowMat>;

constexpr double kTinyNorm = 1e-12;
constexpr int kRowBlock = 256;

void check_geometry(PatchGeometry g) {
  if (g.patch < 1 || g.stride < 1) throw std::invalid_argument("patch size and stride must be positive");
  if (g.stride > g.patch) throw std::invalid_argument("patch stride larger than patch leaves pixels uncovered");
}

int grid_extent(int size, int patch, int stride) {
  if (size < patch) {
    throw std::invalid_argument("feature extent " + std::to_string(size) + " smaller than patch " +
                                std::to_string(patch));
  }
  return (size - patch) / stride + 1;
}

void unfold_into(const double* chw, int c, int h, int w, int patch, int stride, double* rows) {
  const int gh = grid_extent(h, patch, stride), gw = grid_extent(w, patch, stride);
  const std::size_t d = static_cast<std::size_t>(c) * patch * patch;
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      double* row = rows + (static_cast<std::size_t>(gy) * gw + gx) * d;
      for (int ch = 0; ch < c; ++ch)
        for (int dy = 0; dy < patch; ++dy) {
          const double* src = chw + (static_cast<std::size_t>(ch) * h + gy * stride + dy) * w + gx * stride;
          std::copy(src, src + patch, row + (static_cast<std::size_t>(ch) * patch + dy) * patch);
        }
    }
}

// Adds rows into a [C,H,W] buffer (no averaging).
void fold_add(const double* rows, int c, int h, int w, int patch, int stride, double* chw) {
  const int gh = grid_extent(h, patch, stride), gw = grid_extent(w, patch, stride);
  const std::size_t d = static_cast<std::size_t>(c) * patch * patch;
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const double* row = rows + (static_cast<std::size_t>(gy) * gw + gx) * d;
      for (int ch = 0; ch < c; ++ch)
        for (int dy = 0; dy < patch; ++dy) {
          double* dst = chw + (static_cast<std::size_t>(ch) * h + gy * stride + dy) * w + gx * stride;
          const double* src = row + (static_cast<std::size_t>(ch) * patch + dy) * patch;
          for (int dx = 0; dx < patch; ++dx) dst[dx] += src[dx];
        }
    }
}

// Per-pixel reciprocal patch coverage (0 where uncovered) for an [H,W] grid.
std::vector<double> inverse_coverage(int h, int w, int patch, int stride) {
  const int gh = grid_extent(h, patch, stride), gw = grid_extent(w, patch, stride);
  std::vector<double> cnt(static_cast<std::size_t>(h) * w, 0.0);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx)
      for (int dy = 0; dy < patch; ++dy)
        for (int dx = 0; dx < patch; ++dx) cnt[(gy * stride + dy) * static_cast<std::size_t>(w) + gx * stride + dx] += 1;
  for (double& v : cnt) v = v > 0 ? 1.0 / v : 0.0;
  return cnt;
}

/// Norm bookkeeping shared by the local and global similarities.
struct SimilarityStats {
  std::vector<double> q_norm, k_norm;  // |q_i|, |k_j|
  std::vector<double> q_aug, k_aug;    // |[q_i, q_mean]|, |[k_j, k_mean]|
  Eigen::VectorXd q_mean, k_mean;
  double mean_dot = 0.0;
};

SimilarityStats similarity_stats(const ConstMapMat& q, const ConstMapMat& k) {
  SimilarityStats st;
  st.q_mean = q.colwise().mean().transpose();
  st.k_mean = k.colwise().mean().transpose();
  st.mean_dot = st.q_mean.dot(st.k_mean);
  const double qm2 = st.q_mean.squaredNorm(), km2 = st.k_mean.squaredNorm();
  st.q_norm.resize(q.rows());
  st.q_aug.resize(q.rows());
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const double n2 = q.row(i).squaredNorm();
    st.q_norm[i] = std::sqrt(n2);
    st.q_aug[i] = std::sqrt(n2 + qm2);
  }
  st.k_norm.resize(k.rows());
  st.k_aug.resize(k.rows());
  for (Eigen::Index j = 0; j < k.rows(); ++j) {
    const double n2 = k.row(j).squaredNorm();
    st.k_norm[j] = std::sqrt(n2);
    st.k_aug[j] = std::sqrt(n2 + km2);
  }
  return st;
}

inline double local_sim(const SimilarityStats& st, Eigen::Index i, Eigen::Index j, double dot) {
  const double den = st.q_norm[i] * st.k_norm[j];
  return (st.q_norm[i] > kTinyNorm && st.k_norm[j] > kTinyNorm) ? dot / den : 0.0;
}

inline double global_sim(const SimilarityStats& st, Eigen::Index i, Eigen::Index j, double dot) {
  const double den = st.q_aug[i] * st.k_aug[j];
  return (st.q_aug[i] > kTinyNorm && st.k_aug[j] > kTinyNorm) ? (dot + st.mean_dot) / den : 0.0;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<double> softmax(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - m));
  for (double& v : p) v /= s;
  return p;
}

bool ranks_before(double va, int ia, double vb, int ib) { return va > vb || (va == vb && ia < ib); }

// Column order of the `keep` best entries of a row.
void best_columns(const double* row, int n, int keep, std::vector<int>& scratch, int* out) {
  scratch.resize(static_cast<std::size_t>(n));
  std::iota(scratch.begin(), scratch.end(), 0);
  auto cmp = [row](int a, int b) { return ranks_before(row[a], a, row[b], b); };
  if (keep < n) {
    std::partial_sort(scratch.begin(), scratch.begin() + keep, scratch.end(), cmp);
  } else {
    std::sort(scratch.begin(), scratch.end(), cmp);
  }
  std::copy(scratch.begin(), scratch.begin() + keep, out);
}

}  // namespace

// --- Matrix-level operations -------------------------------------------

Tensor SparseSelection::dense() const {
  Tensor out(Shape{rows, cols});
  for (int i = 0; i < rows; ++i)
    for (int r = 0; r < k; ++r) out[static_cast<std::size_t>(i) * cols + indices[i * k + r]] = values[i * k + r];
  return out;
}

Tensor unfold_patches(const Tensor& chw, int patch, int stride) {
  if (chw.rank() != 3) throw std::invalid_argument("unfold_patches expects [C,H,W]");
  check_geometry({patch, stride});
  const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  const int rows = grid_extent(h, patch, stride) * grid_extent(w, patch, stride);
  Tensor out(Shape{rows, c * patch * patch});
  unfold_into(chw.ptr(), c, h, w, patch, stride, out.ptr());
  return out;
}

Tensor fold_patches(const Tensor& rows, int channels, int height, int width, int patch, int stride) {
  check_geometry({patch, stride});
  const int expected = grid_extent(height, patch, stride) * grid_extent(width, patch, stride);
  if (rows.rank() != 2 || rows.dim(0) != expected || rows.dim(1) != channels * patch * patch) {
    throw std::invalid_argument("fold_patches: row matrix " + shape_str(rows.shape()) + " does not match geometry");
  }
  Tensor out(Shape{channels, height, width});
  fold_add(rows.ptr(), channels, height, width, patch, stride, out.ptr());
  const auto inv = inverse_coverage(height, width, patch, stride);
  const std::size_t plane = inv.size();
  for (int c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] *= inv[i];
  return out;
}

PatchEmbedding embed_scale(const Tensor& q_feat, const Tensor& k_feat, const Tensor& v_feat, PatchGeometry geometry,
                           int ref_ratio) {
  check_geometry(geometry);
  if (ref_ratio < 1) throw std::invalid_argument("reference ratio must be >= 1");
  if (q_feat.rank() != 3 || k_feat.rank() != 3 || v_feat.rank() != 3) {
    throw std::invalid_argument("embed_scale expects [C,H,W] feature maps");
  }
  const int c = q_feat.dim(0);
  if (k_feat.dim(0) != c || v_feat.dim(0) != c) throw std::invalid_argument("embed_scale: channel mismatch");
  if (v_feat.dim(1) != ref_ratio * k_feat.dim(1) || v_feat.dim(2) != ref_ratio * k_feat.dim(2)) {
    throw std::invalid_argument("reference/degraded-reference resolution ratio is not " + std::to_string(ref_ratio) +
                                ": " + shape_str(v_feat.shape()) + " vs " + shape_str(k_feat.shape()));
  }
  PatchEmbedding emb;
  emb.channels = c;
  emb.ref_ratio = ref_ratio;
  emb.geometry = geometry;
  emb.out_height = q_feat.dim(1);
  emb.out_width = q_feat.dim(2);
  emb.q = unfold_patches(q_feat, geometry.patch, geometry.stride);
  emb.k = unfold_patches(k_feat, geometry.patch, geometry.stride);
  emb.v = unfold_patches(v_feat, geometry.patch * ref_ratio, geometry.stride * ref_ratio);
  return emb;
}

std::array<PatchEmbedding, 3> embed_qkv(const ImagePlane& lr_up, const ImagePlane& ref_downup, const ImagePlane& ref,
                                        const Mfam& mfam, PatchGeometry geometry, int ref_ratio) {
  if (ref_downup.height() != lr_up.height() && ref_ratio != 1) {
    throw std::invalid_argument("degraded reference must be at LR-up resolution when ref_ratio > 1");
  }
  if (ref.height() != ref_ratio * ref_downup.height() || ref.width() != ref_ratio * ref_downup.width()) {
    throw std::invalid_argument("reference resolution ratio does not equal the configured factor " +
                                std::to_string(ref_ratio));
  }
  const auto fq = mfam.pyramid_forward(lr_up);
  const auto fk = mfam.pyramid_forward(ref_downup);
  const auto fv = mfam.pyramid_forward(ref);
  std::array<PatchEmbedding, 3> out;
  for (int s = 0; s < 3; ++s) out[s] = embed_scale(fq.scales[s], fk.scales[s], fv.scales[s], geometry, ref_ratio);
  return out;
}

CorrelationSet correlation(const PatchEmbedding& emb, double alpha) {
  if (emb.q.rank() != 2 || emb.k.rank() != 2 || emb.q.dim(0) == 0 || emb.k.dim(0) == 0 ||
      emb.q.dim(1) != emb.k.dim(1)) {
    throw std::invalid_argument("correlation: Q and K must be nonempty with equal row length");
  }
  const int nq = emb.q.dim(0), nk = emb.k.dim(0), d = emb.q.dim(1);
  ConstMapMat q(emb.q.ptr(), nq, d), k(emb.k.ptr(), nk, d);
  const auto st = similarity_stats(q, k);
  RowMat dots = q * k.transpose();
  CorrelationSet cs;
  cs.alpha = alpha;
  cs.r_local = Tensor(Shape{nq, nk});
  cs.r_global = Tensor(Shape{nq, nk});
  cs.r_mix = Tensor(Shape{nq, nk});
  for (int i = 0; i < nq; ++i)
    for (int j = 0; j < nk; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * nk + j;
      cs.r_local[idx] = local_sim(st, i, j, dots(i, j));
      cs.r_global[idx] = global_sim(st, i, j, dots(i, j));
      cs.r_mix[idx] = alpha * cs.r_global[idx] + (1.0 - alpha) * cs.r_local[idx];
    }
  return cs;
}

int select_k(std::span<const double> wk, double temperature, bool train_mode, std::span<const double> gumbel,
             std::vector<double>* probs_out) {
  if (wk.empty()) throw std::invalid_argument("K_max must be >= 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("Gumbel-Softmax temperature must be > 0");
  if (train_mode && gumbel.size() != wk.size()) {
    throw std::invalid_argument("train-mode selection needs one Gumbel sample per logit");
  }
  std::vector<double> z(wk.size());
  for (std::size_t i = 0; i < wk.size(); ++i) z[i] = (wk[i] + (train_mode ? gumbel[i] : 0.0)) / temperature;
  auto p = softmax(z);
  const int k = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()) + 1;
  if (probs_out) *probs_out = std::move(p);
  return k;
}

std::vector<double> expected_k_gradient(std::span<const double> probs, double temperature) {
  double expected = 0.0;
  for (std::size_t m = 0; m < probs.size(); ++m) expected += probs[m] * static_cast<double>(m + 1);
  std::vector<double> g(probs.size());
  for (std::size_t m = 0; m < probs.size(); ++m) g[m] = probs[m] * (static_cast<double>(m + 1) - expected) / temperature;
  return g;
}

std::vector<int> topk_columns(std::span<const double> row, int k) {
  if (k < 1 || k > static_cast<int>(row.size())) throw std::invalid_argument("topk_columns: k out of range");
  std::vector<int> scratch, out(static_cast<std::size_t>(k));
  best_columns(row.data(), static_cast<int>(row.size()), k, scratch, out.data());
  return out;
}

SparseSelection dynamic_topk(const Tensor& r_mix, std::span<const double> wk, int k_max, double temperature,
                             bool train_mode, std::span<const double> gumbel) {
  if (k_max < 1) throw std::invalid_argument("K_max must be >= 1");
  if (static_cast<int>(wk.size()) != k_max) throw std::invalid_argument("selection logits must have K_max entries");
  if (r_mix.rank() != 2) throw std::invalid_argument("dynamic_topk expects a matrix");
  SparseSelection sel;
  sel.k_max = k_max;
  sel.rows = r_mix.dim(0);
  sel.cols = r_mix.dim(1);
  sel.k = std::min(select_k(wk, temperature, train_mode, gumbel, &sel.probs), sel.cols);
  sel.indices.resize(static_cast<std::size_t>(sel.rows) * sel.k);
  sel.values.resize(sel.indices.size());
  std::vector<int> scratch;
  for (int i = 0; i < sel.rows; ++i) {
    const double* row = r_mix.ptr() + static_cast<std::size_t>(i) * sel.cols;
    best_columns(row, sel.cols, sel.k, scratch, sel.indices.data() + static_cast<std::size_t>(i) * sel.k);
    for (int r = 0; r < sel.k; ++r) sel.values[i * sel.k + r] = row[sel.indices[i * sel.k + r]];
  }
  return sel;
}

Tensor transfer(const SparseSelection& sel, const Tensor& v, const PatchEmbedding& geo) {
  if (v.rank() != 2 || v.dim(0) != sel.cols) {
    throw std::invalid_argument("transfer: V has " + shape_str(v.shape()) + " rows but selection indexes " +
                                std::to_string(sel.cols) + " columns");
  }
  const int r = geo.ref_ratio, p = geo.geometry.patch * r, s = geo.geometry.stride * r;
  const int big_h = geo.out_height * r, big_w = geo.out_width * r;
  const int expected_rows = grid_extent(big_h, p, s) * grid_extent(big_w, p, s);
  if (sel.rows != expected_rows || v.dim(1) != geo.channels * p * p) {
    throw std::invalid_argument("transfer: selection/V geometry does not match the output grid");
  }
  const int dv = v.dim(1);
  Tensor rows(Shape{sel.rows, dv});
  for (int i = 0; i < sel.rows; ++i) {
    double* out = rows.ptr() + static_cast<std::size_t>(i) * dv;
    for (int kk = 0; kk < sel.k; ++kk) {
      const double w = sel.values[i * sel.k + kk];
      const double* src = v.ptr() + static_cast<std::size_t>(sel.indices[i * sel.k + kk]) * dv;
      for (int d = 0; d < dv; ++d) out[d] += w * src[d];
    }
  }
  Tensor big = fold_patches(rows, geo.channels, big_h, big_w, p, s);
  if (r == 1) return big;
  Tensor out(Shape{geo.channels, geo.out_height, geo.out_width});
  const double inv = 1.0 / (r * r);
  for (int c = 0; c < geo.channels; ++c)
    for (int y = 0; y < big_h; ++y)
      for (int x = 0; x < big_w; ++x)
        out[(static_cast<std::size_t>(c) * geo.out_height + y / r) * geo.out_width + x / r] +=
            inv * big[(static_cast<std::size_t>(c) * big_h + y) * big_w + x];
  return out;
}

// --- Differentiable module ----------------------------------------------

Sttg::Sttg(const SttgConfig& cfg, ParamStore& store, const std::string& prefix) : cfg_(cfg) {
  check_geometry(cfg.geometry);
  if (cfg.k_max < 1) throw std::invalid_argument("K_max must be >= 1");
  if (!(cfg.temperature > 0.0)) throw std::invalid_argument("Gumbel-Softmax temperature must be > 0");
  if (cfg.fixed_k < 0 || cfg.fixed_k > cfg.k_max) throw std::invalid_argument("fixed K must lie in [0, K_max]");
  if (cfg.ref_ratio < 1) throw std::invalid_argument("reference ratio must be >= 1");
  for (int s = 0; s < 3; ++s) {
    const std::string base = prefix + ".s" + std::to_string(s + 1);
    alpha_logit[s] = store.add(base + ".alpha_logit", Tensor(Shape{1}, 0.0));
    wk[s] = store.add(base + ".wk", Tensor(Shape{cfg.k_max}, 0.0));
  }
}

double Sttg::alpha(int scale) const { return sigmoid(alpha_logit.at(static_cast<std::size_t>(scale)).value()[0]); }

std::array<ag::Var, 3> Sttg::forward(const std::array<ag::Var, 3>& lr_feats, const std::array<ag::Var, 3>& refdu_feats,
                                     const std::array<ag::Var, 3>& ref_feats, Rng* gumbel_rng,
                                     std::array<int, 3>* k_out) const {
  std::array<ag::Var, 3> out;
  for (int s = 0; s < 3; ++s) {
    std::vector<double> g;
    if (gumbel_rng) {
      g.resize(static_cast<std::size_t>(cfg_.k_max));
      for (double& v : g) v = gumbel_rng->gumbel();
    }
    int k = 0;
    out[s] = forward_scale(s, lr_feats[s], refdu_feats[s], ref_feats[s], g, &k);
    if (k_out) (*k_out)[s] = k;
  }
  return out;
}

namespace {

/// Forward products of one batch item kept for the backward pass.
struct ItemTrace {
  RowMat q, k, v;
  SimilarityStats stats;
  int stored = 0;                // ranked entries stored per row
  std::vector<int> cols;         // [Nq, stored]
  std::vector<double> r_local;   // [Nq, stored]
  std::vector<double> r_global;  // [Nq, stored]
};

struct ScaleTrace {
  std::vector<ItemTrace> items;
  int k_used = 0;
  bool learn_k = false;
  std::vector<double> probs;
  double alpha = 0.5;
  double temperature = 1.0;
  int c = 0, h = 0, w = 0, vh = 0, vw = 0, kh = 0, kw = 0;
  int patch = 3, stride = 1, ratio = 1;
  std::vector<double> inv_cov;  // coverage on the (ratio-scaled) output grid
};

}  // namespace

ag::Var Sttg::forward_scale(int scale, const ag::Var& lr_feat, const ag::Var& refdu_feat, const ag::Var& ref_feat,
                            std::span<const double> gumbel, int* k_out) const {
  const auto& qs = lr_feat.shape();
  const auto& ks = refdu_feat.shape();
  const auto& vs = ref_feat.shape();
  if (qs.size() != 4 || ks.size() != 4 || vs.size() != 4 || qs[0] != ks[0] || qs[0] != vs[0] || qs[1] != ks[1] ||
      qs[1] != vs[1]) {
    throw std::invalid_argument("STTG features must be [N,C,H,W] with matching N and C");
  }
  const int r = cfg_.ref_ratio;
  if (vs[2] != r * ks[2] || vs[3] != r * ks[3]) {
    throw std::invalid_argument("reference feature resolution ratio is not " + std::to_string(r));
  }
  auto tr = std::make_shared<ScaleTrace>();
  tr->c = qs[1];
  tr->h = qs[2];
  tr->w = qs[3];
  tr->kh = ks[2];
  tr->kw = ks[3];
  tr->vh = vs[2];
  tr->vw = vs[3];
  tr->patch = cfg_.geometry.patch;
  tr->stride = cfg_.geometry.stride;
  tr->ratio = r;
  tr->alpha = alpha(scale);
  tr->temperature = cfg_.temperature;

  const int n = qs[0], c = qs[1];
  const int p = tr->patch, st = tr->stride;
  const int nq = grid_extent(tr->h, p, st) * grid_extent(tr->w, p, st);
  const int nk = grid_extent(tr->kh, p, st) * grid_extent(tr->kw, p, st);
  const int d = c * p * p, dv = c * p * r * p * r;
  const bool train = !gumbel.empty();

  // K is shared by every row and batch item of this scale.
  int k_sel = select_k(wk[scale].value().data(), cfg_.temperature, train, gumbel, &tr->probs);
  tr->learn_k = cfg_.topk_enabled && cfg_.fixed_k == 0;
  if (cfg_.fixed_k > 0) k_sel = cfg_.fixed_k;
  const int k_used = cfg_.topk_enabled ? std::min(k_sel, nk) : nk;
  tr->k_used = k_used;
  if (k_out) *k_out = k_used;
  const int stored = tr->learn_k ? std::min(k_used + 1, nk) : k_used;

  const int big_h = tr->h * r, big_w = tr->w * r;
  tr->inv_cov = inverse_coverage(big_h, big_w, p * r, st * r);
  const std::size_t big_plane = static_cast<std::size_t>(big_h) * big_w;

  Tensor out(Shape{n, c, tr->h, tr->w});
  tr->items.resize(static_cast<std::size_t>(n));
  std::vector<int> scratch;
  Eigen::VectorXd rowbuf(nk);
  for (int b = 0; b < n; ++b) {
    ItemTrace& it = tr->items[b];
    it.q.resize(nq, d);
    it.k.resize(nk, d);
    it.v.resize(nk, dv);
    const std::size_t qplane = static_cast<std::size_t>(c) * tr->h * tr->w;
    const std::size_t kplane = static_cast<std::size_t>(c) * tr->kh * tr->kw;
    const std::size_t vplane = static_cast<std::size_t>(c) * tr->vh * tr->vw;
    unfold_into(lr_feat.value().ptr() + b * qplane, c, tr->h, tr->w, p, st, it.q.data());
    unfold_into(refdu_feat.value().ptr() + b * kplane, c, tr->kh, tr->kw, p, st, it.k.data());
    unfold_into(ref_feat.value().ptr() + b * vplane, c, tr->vh, tr->vw, p * r, st * r, it.v.data());
    it.stats = similarity_stats(ConstMapMat(it.q.data(), nq, d), ConstMapMat(it.k.data(), nk, d));
    it.stored = stored;
    it.cols.resize(static_cast<std::size_t>(nq) * stored);
    it.r_local.resize(it.cols.size());
    it.r_global.resize(it.cols.size());

    RowMat u = RowMat::Zero(nq, dv);
    for (int i0 = 0; i0 < nq; i0 += kRowBlock) {
      const int rows = std::min(kRowBlock, nq - i0);
      RowMat dots = it.q.middleRows(i0, rows) * it.k.transpose();
      for (int ii = 0; ii < rows; ++ii) {
        const int i = i0 + ii;
        for (int j = 0; j < nk; ++j) {
          const double dot = dots(ii, j);
          rowbuf[j] = tr->alpha * global_sim(it.stats, i, j, dot) + (1.0 - tr->alpha) * local_sim(it.stats, i, j, dot);
        }
        int* cols = it.cols.data() + static_cast<std::size_t>(i) * stored;
        if (cfg_.topk_enabled) {
          best_columns(rowbuf.data(), nk, stored, scratch, cols);
        } else {
          std::iota(cols, cols + stored, 0);
        }
        for (int rr = 0; rr < stored; ++rr) {
          const double dot = dots(ii, cols[rr]);
          it.r_local[i * stored + rr] = local_sim(it.stats, i, cols[rr], dot);
          it.r_global[i * stored + rr] = global_sim(it.stats, i, cols[rr], dot);
        }
        for (int rr = 0; rr < k_used; ++rr) {
          const double wgt = rowbuf[cols[rr]];
          u.row(i).noalias() += wgt * it.v.row(cols[rr]);
        }
      }
    }
    std::vector<double> big(static_cast<std::size_t>(c) * big_plane, 0.0);
    fold_add(u.data(), c, big_h, big_w, p * r, st * r, big.data());
    double* dst = out.ptr() + b * qplane;
    const double pool = 1.0 / (r * r);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < big_h; ++y)
        for (int x = 0; x < big_w; ++x) {
          const std::size_t bi = y * static_cast<std::size_t>(big_w) + x;
          dst[(static_cast<std::size_t>(ch) * tr->h + y / r) * tr->w + x / r] +=
              pool * big[ch * big_plane + bi] * tr->inv_cov[bi];
        }
  }

  return ag::make_result(
      std::move(out), {lr_feat, refdu_feat, ref_feat, alpha_logit[scale], wk[scale]},
      [tr, nq, nk, d, dv](ag::Node& self) {
        const int n = static_cast<int>(tr->items.size());
        const int c = tr->c, r = tr->ratio, p = tr->patch, st = tr->stride;
        const int big_h = tr->h * r, big_w = tr->w * r;
        const std::size_t big_plane = static_cast<std::size_t>(big_h) * big_w;
        const double alpha = tr->alpha;
        const double pool = 1.0 / (r * r);
        double d_alpha = 0.0, d_k = 0.0;
        for (int b = 0; b < n; ++b) {
          const ItemTrace& it = tr->items[b];
          const std::size_t qplane = static_cast<std::size_t>(c) * tr->h * tr->w;
          // Adjoint of pooling and overlap-averaged fold.
          std::vector<double> gbig(static_cast<std::size_t>(c) * big_plane);
          const double* gout = self.grad.ptr() + b * qplane;
          for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < big_h; ++y)
              for (int x = 0; x < big_w; ++x) {
                const std::size_t bi = y * static_cast<std::size_t>(big_w) + x;
                gbig[ch * big_plane + bi] =
                    pool * tr->inv_cov[bi] * gout[(static_cast<std::size_t>(ch) * tr->h + y / r) * tr->w + x / r];
              }
          RowMat du(nq, dv);
          unfold_into(gbig.data(), c, big_h, big_w, p * r, st * r, du.data());

          RowMat dq = RowMat::Zero(nq, d), dkm = RowMat::Zero(nk, d), dvm = RowMat::Zero(nk, dv);
          Eigen::VectorXd dq_mean = Eigen::VectorXd::Zero(d), dk_mean = Eigen::VectorXd::Zero(d);
          const auto& stt = it.stats;
          for (int i = 0; i < nq; ++i) {
            for (int rr = 0; rr < it.stored; ++rr) {
              const int j = it.cols[i * it.stored + rr];
              const double rl = it.r_local[i * it.stored + rr];
              const double rg = it.r_global[i * it.stored + rr];
              const double rm = alpha * rg + (1.0 - alpha) * rl;
              const double du_v = du.row(i).dot(it.v.row(j));
              if (rr >= tr->k_used) {
                // Entry just past the cut: only reachable through the K mask.
                d_k += 0.5 * du_v * rm;
                continue;
              }
              if (tr->learn_k && rr == tr->k_used - 1) d_k += 0.5 * du_v * rm;
              dvm.row(j).noalias() += rm * du.row(i);
              const double d_rm = du_v;
              d_alpha += d_rm * (rg - rl);
              const double d_rl = (1.0 - alpha) * d_rm;
              const double d_rg = alpha * d_rm;
              if (d_rl != 0.0 && stt.q_norm[i] > kTinyNorm && stt.k_norm[j] > kTinyNorm) {
                const double inv = 1.0 / (stt.q_norm[i] * stt.k_norm[j]);
                dq.row(i).noalias() += d_rl * (inv * it.k.row(j) - (rl / (stt.q_norm[i] * stt.q_norm[i])) * it.q.row(i));
                dkm.row(j).noalias() +=
                    d_rl * (inv * it.q.row(i) - (rl / (stt.k_norm[j] * stt.k_norm[j])) * it.k.row(j));
              }
              if (d_rg != 0.0 && stt.q_aug[i] > kTinyNorm && stt.k_aug[j] > kTinyNorm) {
                const double inv = 1.0 / (stt.q_aug[i] * stt.k_aug[j]);
                const double qa2 = stt.q_aug[i] * stt.q_aug[i], ka2 = stt.k_aug[j] * stt.k_aug[j];
                dq.row(i).noalias() += d_rg * (inv * it.k.row(j) - (rg / qa2) * it.q.row(i));
                dkm.row(j).noalias() += d_rg * (inv * it.q.row(i) - (rg / ka2) * it.k.row(j));
                dq_mean.noalias() += d_rg * (inv * stt.k_mean - (rg / qa2) * stt.q_mean);
                dk_mean.noalias() += d_rg * (inv * stt.q_mean - (rg / ka2) * stt.k_mean);
              }
            }
          }
          dq.rowwise() += (dq_mean / static_cast<double>(nq)).transpose();
          dkm.rowwise() += (dk_mean / static_cast<double>(nk)).transpose();

          if (ag::wants_grad(self, 0))
            fold_add(dq.data(), c, tr->h, tr->w, p, st, self.inputs[0]->grad_buffer().ptr() + b * qplane);
          if (ag::wants_grad(self, 1))
            fold_add(dkm.data(), c, tr->kh, tr->kw, p, st,
                     self.inputs[1]->grad_buffer().ptr() + b * static_cast<std::size_t>(c) * tr->kh * tr->kw);
          if (ag::wants_grad(self, 2))
            fold_add(dvm.data(), c, tr->vh, tr->vw, p * r, st * r,
                     self.inputs[2]->grad_buffer().ptr() + b * static_cast<std::size_t>(c) * tr->vh * tr->vw);
        }
        if (ag::wants_grad(self, 3)) self.inputs[3]->grad_buffer()[0] += d_alpha * alpha * (1.0 - alpha);
        if (tr->learn_k && ag::wants_grad(self, 4)) {
          // Straight-through: the discrete K takes the gradient of E_P[k].
          const auto g = expected_k_gradient(tr->probs, tr->temperature);
          auto& gw = self.inputs[4]->grad_buffer();
          for (std::size_t m = 0; m < g.size(); ++m) gw[m] += d_k * g[m];
        }
      });
}

ag::Var straight_through_k(const ag::Var& wk, std::span<const double> gumbel, double temperature) {
  std::vector<double> probs;
  const int k = select_k(wk.value().data(), temperature, !gumbel.empty(), gumbel, &probs);
  return ag::make_result(Tensor::scalar(static_cast<double>(k)), {wk},
                         [probs = std::move(probs), temperature](ag::Node& self) {
                           const auto g = expected_k_gradient(probs, temperature);
                           auto& gw = self.inputs[0]->grad_buffer();
                           for (std::size_t m = 0; m < g.size(); ++m) gw[m] += self.grad[0] * g[m];
                         });
}

TextureGuidance sttg_forward(const ImagePlane& lr_up, const ImagePlane& ref_downup, const ImagePlane& ref,
                             const Mfam& mfam, const Sttg& sttg) {
  const int r = sttg.config().ref_ratio;
  if (ref.height() != r * ref_downup.height() || ref.width() != r * ref_downup.width()) {
    throw std::invalid_argument("reference resolution ratio does not equal the configured factor " +
                                std::to_string(r));
  }
  ag::NoGradGuard guard;
  const auto fq = mfam.forward(ag::constant(batch_of_one(lr_up.data)));
  const auto fk = mfam.forward(ag::constant(batch_of_one(ref_downup.data)));
  const auto fv = mfam.forward(ag::constant(batch_of_one(ref.data)));
  TextureGuidance tg;
  const auto maps = sttg.forward(fq, fk, fv, nullptr, &tg.k_selected);
  for (int s = 0; s < 3; ++s) tg.maps[s] = unstack(maps[s].value(), 0);
  return tg;
}

}  // namespace ttrd3
