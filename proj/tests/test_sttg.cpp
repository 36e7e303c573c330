#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "test_util.hpp"
#include "ttrd3/sttg.hpp"

using namespace ttrd3;
using testing::grad_check;
using testing::project;
using testing::random_tensor;

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return (na == 0 || nb == 0) ? 0.0 : d / std::sqrt(na * nb);
}

std::vector<double> row_of(const Tensor& m, int i) {
  const int d = m.dim(1);
  return {m.ptr() + i * d, m.ptr() + (i + 1) * d};
}

std::vector<double> mean_row(const Tensor& m) {
  std::vector<double> mu(static_cast<std::size_t>(m.dim(1)), 0.0);
  for (int i = 0; i < m.dim(0); ++i)
    for (int j = 0; j < m.dim(1); ++j) mu[j] += m[i * m.dim(1) + j] / m.dim(0);
  return mu;
}

std::vector<double> cat(std::vector<double> a, const std::vector<double>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Exhaustive ranking by (value desc, column asc).
std::vector<int> sort_oracle(const std::vector<double>& row, int k) {
  std::vector<int> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return row[a] > row[b]; });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

// Gather-weight-sum-fold with an explicit per-pixel contribution count.
Tensor transfer_oracle(const SparseSelection& sel, const Tensor& v, int c, int h, int w, int p, int s, int r) {
  const int bh = h * r, bw = w * r, pp = p * r, ss = s * r;
  const int gw = (bw - pp) / ss + 1;
  std::vector<double> acc(static_cast<std::size_t>(c) * bh * bw, 0.0), cnt(static_cast<std::size_t>(bh) * bw, 0.0);
  for (int i = 0; i < sel.rows; ++i) {
    const int gy = i / gw, gx = i % gw;
    for (int ch = 0; ch < c; ++ch)
      for (int dy = 0; dy < pp; ++dy)
        for (int dx = 0; dx < pp; ++dx) {
          double val = 0.0;
          for (int kk = 0; kk < sel.k; ++kk)
            val += sel.values[i * sel.k + kk] * v[sel.indices[i * sel.k + kk] * v.dim(1) + (ch * pp + dy) * pp + dx];
          acc[(ch * bh + gy * ss + dy) * bw + gx * ss + dx] += val;
          if (ch == 0) cnt[(gy * ss + dy) * bw + gx * ss + dx] += 1;
        }
  }
  Tensor out(Shape{c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < bh; ++y)
      for (int x = 0; x < bw; ++x) {
        const double n = cnt[y * bw + x];
        if (n > 0) out[(ch * h + y / r) * w + x / r] += acc[(ch * bh + y) * bw + x] / n / (r * r);
      }
  return out;
}

}  // namespace

TEST_CASE("unfold geometry and fold inverse") {
  Rng rng(20);
  const auto f = random_tensor({16, 64, 64}, rng);
  const auto rows = unfold_patches(f, 3, 1);
  CHECK(rows.shape() == Shape{62 * 62, 144});
  const auto back = fold_patches(rows, 16, 64, 64, 3, 1);
  CHECK((back - f).abs_max() < 1e-12);
  const auto f2 = random_tensor({2, 9, 9}, rng);
  CHECK((fold_patches(unfold_patches(f2, 3, 2), 2, 9, 9, 3, 2) - f2).abs_max() < 1e-12);
  CHECK_THROWS_AS(unfold_patches(random_tensor({1, 2, 2}, rng), 3, 1), std::invalid_argument);
}

TEST_CASE("embedding of identical reference images") {
  Rng rng(21);
  const auto feat = random_tensor({4, 8, 8}, rng);
  const auto emb = embed_scale(random_tensor({4, 8, 8}, rng), feat, feat, {}, 1);
  CHECK(emb.k.vec() == emb.v.vec());
  const auto big = random_tensor({4, 16, 16}, rng);
  const auto emb2 = embed_scale(feat, feat, big, {}, 2);
  CHECK(emb2.v.shape() == Shape{36, 4 * 36});
  CHECK_THROWS_AS(embed_scale(feat, feat, big, {}, 3), std::invalid_argument);
}

TEST_CASE("correlation against brute-force cosine") {
  Rng rng(22);
  PatchEmbedding emb;
  emb.q = random_tensor({5, 8}, rng);
  emb.k = random_tensor({6, 8}, rng);
  for (int j = 0; j < 8; ++j) emb.k[3 * 8 + j] = 0.0;  // a flat patch
  const double alpha = 0.3;
  const auto cs = correlation(emb, alpha);
  const auto qm = mean_row(emb.q), km = mean_row(emb.k);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 6; ++j) {
      const double rl = cosine(row_of(emb.q, i), row_of(emb.k, j));
      const double rg = cosine(cat(row_of(emb.q, i), qm), cat(row_of(emb.k, j), km));
      CHECK(cs.r_local[i * 6 + j] == doctest::Approx(rl).epsilon(1e-12));
      CHECK(cs.r_global[i * 6 + j] == doctest::Approx(rg).epsilon(1e-12));
      CHECK(cs.r_mix[i * 6 + j] == doctest::Approx(alpha * rg + (1 - alpha) * rl).epsilon(1e-12));
      CHECK(std::abs(cs.r_local[i * 6 + j]) <= 1.0 + 1e-12);
      CHECK(std::abs(cs.r_global[i * 6 + j]) <= 1.0 + 1e-12);
    }
  CHECK(cs.r_local[3] == 0.0);

  PatchEmbedding self;
  self.q = emb.q;
  self.k = emb.q;
  const auto ss = correlation(self, 0.0);
  for (int i = 0; i < 5; ++i) CHECK(ss.r_local[i * 5 + i] == doctest::Approx(1.0));
  CHECK(ss.r_mix.vec() == ss.r_local.vec());
  const auto s1 = correlation(self, 1.0);
  CHECK(s1.r_mix.vec() == s1.r_global.vec());

  // Monotone in alpha between the endpoints.
  double prev = correlation(emb, 0.0).r_mix[7];
  for (double a : {0.25, 0.5, 0.75, 1.0}) {
    const double cur = correlation(emb, a).r_mix[7];
    CHECK((cs.r_global[7] >= cs.r_local[7] ? cur >= prev - 1e-15 : cur <= prev + 1e-15));
    prev = cur;
  }
}

TEST_CASE("top-k selection") {
  const std::vector<double> row{0.9, 0.1, 0.8, 0.5};
  CHECK(topk_columns(row, 2) == std::vector<int>{0, 2});
  const std::vector<double> tied{0.5, 0.7, 0.5, 0.7};
  CHECK(topk_columns(tied, 3) == std::vector<int>{1, 3, 0});

  Tensor r(Shape{1, 4}, row);
  const std::vector<double> logits{-50, 50, -50, -50};
  const auto sel = dynamic_topk(r, logits, 4, 1.0, false);
  CHECK(sel.k == 2);
  const auto dense = sel.dense();
  CHECK(dense.vec() == std::vector<double>{0.9, 0.0, 0.8, 0.0});

  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const int rows = rng.uniform_int(1, 16), cols = rng.uniform_int(10, 16);
    Tensor m(Shape{rows, cols});
    for (double& v : m.vec()) v = std::round(rng.uniform(-1, 1) * 4) / 4;  // frequent ties
    for (int k = 1; k <= 10; ++k) {
      std::vector<double> wk(10, -100.0);
      wk[k - 1] = 100.0;
      const auto s = dynamic_topk(m, wk, 10, 1.0, false);
      REQUIRE(s.k == k);
      for (int i = 0; i < rows; ++i) {
        const std::vector<double> rv(m.ptr() + i * cols, m.ptr() + (i + 1) * cols);
        const auto oracle = sort_oracle(rv, k);
        for (int kk = 0; kk < k; ++kk) {
          REQUIRE(s.indices[i * k + kk] == oracle[kk]);
          REQUIRE(s.values[i * k + kk] == rv[oracle[kk]]);
        }
        const auto d = s.dense();
        int nz = 0;
        for (int j = 0; j < cols; ++j) {
          const bool kept = std::find(oracle.begin(), oracle.end(), j) != oracle.end();
          REQUIRE(d[i * cols + j] == (kept ? rv[j] : 0.0));
          nz += kept;
        }
        REQUIRE(nz == k);
      }
    }
  }
}

TEST_CASE("K selection bounds and modes") {
  Rng rng(24);
  std::vector<double> wk(10);
  for (double& v : wk) v = rng.normal();
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> g(10);
    for (double& v : g) v = rng.gumbel();
    const int k = select_k(wk, 1.0, true, g);
    REQUIRE(k >= 1);
    REQUIRE(k <= 10);
  }
  const std::vector<double> g(10, 0.0);
  std::vector<double> huge(10, 0.0);
  huge[4] = 1e6;
  CHECK(select_k(wk, 1.0, false, huge) == select_k(wk, 1.0, false, {}));
  const std::vector<double> even(5, 0.0);
  CHECK(select_k(even, 1.0, false, {}) == 1);
  CHECK_THROWS_AS(select_k(wk, 0.0, false, {}), std::invalid_argument);
  CHECK_THROWS_AS(select_k(std::vector<double>{}, 1.0, false, {}), std::invalid_argument);
  CHECK_THROWS_AS(dynamic_topk(Tensor(Shape{2, 3}), wk, 0, 1.0, false), std::invalid_argument);
  CHECK_THROWS_AS(select_k(wk, 1.0, true, std::vector<double>(3)), std::invalid_argument);
}

TEST_CASE("transfer against a gather-weight-sum-fold oracle") {
  Rng rng(25);
  for (int ratio : {1, 2}) {
    const int c = 2, h = 4, w = 5;
    const auto q = random_tensor({c, h, w}, rng);
    const auto k = random_tensor({c, h, w}, rng);
    const auto v = random_tensor({c, h * ratio, w * ratio}, rng);
    const auto emb = embed_scale(q, k, v, {}, ratio);
    REQUIRE(emb.q.dim(0) == 6);
    const auto cs = correlation(emb, 0.4);
    const std::vector<double> wk{-9, 9, -9};
    const auto sel = dynamic_topk(cs.r_mix, wk, 3, 1.0, false);
    REQUIRE(sel.k == 2);
    const auto got = transfer(sel, emb.v, emb);
    const auto want = transfer_oracle(sel, emb.v, c, h, w, 3, 1, ratio);
    CHECK((got - want).abs_max() < 1e-12);
  }
}

TEST_CASE("transfer pass-through and single-term cases") {
  Rng rng(26);
  const auto f = random_tensor({2, 5, 5}, rng);
  auto emb = embed_scale(f, f, f, {}, 1);
  SparseSelection sel;
  sel.k = 1;
  sel.rows = sel.cols = emb.v.dim(0);
  for (int i = 0; i < sel.rows; ++i) {
    sel.indices.push_back(i);
    sel.values.push_back(1.0);
  }
  CHECK((transfer(sel, emb.v, emb) - f).abs_max() < 1e-12);

  // One query patch on a 3x3 map: the output is w * V_j.
  const auto small = random_tensor({1, 3, 3}, rng);
  auto e1 = embed_scale(small, small, small, {}, 1);
  Tensor v2(Shape{2, 9});
  for (int d = 0; d < 9; ++d) v2[9 + d] = rng.uniform();
  SparseSelection one;
  one.k = 1;
  one.rows = 1;
  one.cols = 2;
  one.indices = {1};
  one.values = {0.7};
  const auto out = transfer(one, v2, e1);
  for (int d = 0; d < 9; ++d) CHECK(out[d] == doctest::Approx(0.7 * v2[9 + d]));
  CHECK_THROWS_AS(transfer(one, Tensor(Shape{3, 9}), e1), std::invalid_argument);
}

TEST_CASE("straight-through K gradient equals the expected-K derivative") {
  Rng rng(27);
  for (double tau : {1.0, 0.5, 2.0}) {
    auto wk = ag::parameter(random_tensor({10}, rng));
    std::vector<double> g(10);
    for (double& v : g) v = rng.gumbel();
    const double c = 1.7;
    auto k = straight_through_k(wk, g, tau);
    CHECK(k.value()[0] == select_k(wk.value().data(), tau, true, g));
    wk.zero_grad();
    ag::backward(ag::scale(k, c));
    // Central differences of c * sum_k P_k k with the same Gumbel sample.
    auto surrogate = [&](const Tensor& w) {
      std::vector<double> p;
      select_k(w.data(), tau, true, g, &p);
      double e = 0.0;
      for (int i = 0; i < 10; ++i) e += p[i] * (i + 1);
      return c * e;
    };
    double diff2 = 0.0, ref2 = 0.0;
    for (int i = 0; i < 10; ++i) {
      Tensor up = wk.value(), dn = wk.value();
      up[i] += 1e-6;
      dn[i] -= 1e-6;
      const double fd = (surrogate(up) - surrogate(dn)) / 2e-6;
      diff2 += (fd - wk.grad()[i]) * (fd - wk.grad()[i]);
      ref2 += fd * fd;
    }
    CHECK(std::sqrt(diff2 / ref2) < 1e-6);
  }
}

namespace {

struct ScaleFixture {
  ParamStore store;
  Sttg sttg;
  ag::Var q, k, v;
  ScaleFixture(SttgConfig cfg, Rng& rng, int c = 2, int h = 6, int w = 6)
      : sttg(cfg, store),
        q(ag::parameter(random_tensor({2, c, h, w}, rng))),
        k(ag::parameter(random_tensor({2, c, h, w}, rng))),
        v(ag::parameter(random_tensor({2, c, h * cfg.ref_ratio, w * cfg.ref_ratio}, rng))) {}
};

}  // namespace

TEST_CASE("fused scale forward equals the matrix pipeline") {
  Rng rng(28);
  for (int ratio : {1, 2}) {
    SttgConfig cfg;
    cfg.k_max = 4;
    cfg.ref_ratio = ratio;
    ScaleFixture fx(cfg, rng);
    fx.sttg.alpha_logit[0].mutable_value()[0] = 0.4;
    fx.sttg.wk[0].mutable_value() = Tensor(Shape{4}, {0.1, 0.3, 2.0, -1.0});
    int k_used = 0;
    const auto out = fx.sttg.forward_scale(0, fx.q, fx.k, fx.v, {}, &k_used);
    CHECK(k_used == 3);
    for (int b = 0; b < 2; ++b) {
      const auto emb = embed_scale(unstack(fx.q.value(), b), unstack(fx.k.value(), b), unstack(fx.v.value(), b),
                                   cfg.geometry, ratio);
      const auto cs = correlation(emb, fx.sttg.alpha(0));
      const auto sel = dynamic_topk(cs.r_mix, fx.sttg.wk[0].value().data(), 4, 1.0, false);
      CHECK((transfer(sel, emb.v, emb) - unstack(out.value(), b)).abs_max() < 1e-12);
    }
  }
}

TEST_CASE("fused scale gradients for features and alpha") {
  Rng rng(29);
  for (int ratio : {1, 2}) {
    for (bool topk : {true, false}) {
      SttgConfig cfg;
      cfg.k_max = 3;
      cfg.ref_ratio = ratio;
      cfg.topk_enabled = topk;
      ScaleFixture fx(cfg, rng, 2, 5, 5);
      fx.sttg.alpha_logit[1].mutable_value()[0] = -0.3;
      fx.sttg.wk[1].mutable_value() = Tensor(Shape{3}, {0.0, 1.0, 0.0});
      auto f = [&] { return project(fx.sttg.forward_scale(1, fx.q, fx.k, fx.v, {})); };
      CHECK(grad_check(f, {fx.q, fx.k, fx.v, fx.sttg.alpha_logit[1]}) < 1e-5);
    }
  }
}

TEST_CASE("K logits receive the straight-through gradient of the mask") {
  Rng rng(30);
  const std::vector<double> logits{0.2, -0.4, 0.9, 0.1, -0.2};
  const std::vector<double> gumbel{0.3, -0.1, 0.05, 0.4, 0.2};
  SttgConfig cfg;
  cfg.k_max = 5;
  ScaleFixture fx(cfg, rng, 2, 6, 6);
  fx.sttg.wk[0].mutable_value() = Tensor(Shape{5}, logits);
  std::vector<double> probs;
  const int k = select_k(logits, 1.0, true, gumbel, &probs);
  REQUIRE(k > 1);
  REQUIRE(k < 5);
  fx.sttg.wk[0].zero_grad();
  ag::backward(project(fx.sttg.forward_scale(0, fx.q, fx.k, fx.v, gumbel)));
  const Tensor analytic = fx.sttg.wk[0].grad();

  // The loss is linear in the kept entries, so dL/dK under the symmetric
  // mask subgradient is half the central difference over K.
  auto loss_at = [&](int kk) {
    SttgConfig fixed = cfg;
    fixed.fixed_k = kk;
    ParamStore st;
    Sttg other(fixed, st);
    other.alpha_logit[0].mutable_value() = fx.sttg.alpha_logit[0].value();
    ag::NoGradGuard guard;
    return project(other.forward_scale(0, fx.q, fx.k, fx.v, gumbel)).value()[0];
  };
  const double dk = 0.5 * (loss_at(k + 1) - loss_at(k - 1));
  double expected = 0.0;
  for (int m = 0; m < 5; ++m) expected += probs[m] * (m + 1);
  double diff2 = 0.0, ref2 = 0.0;
  for (int m = 0; m < 5; ++m) {
    const double want = dk * probs[m] * ((m + 1) - expected);
    diff2 += (want - analytic[m]) * (want - analytic[m]);
    ref2 += want * want;
  }
  CHECK(std::sqrt(diff2 / ref2) < 1e-9);
}

TEST_CASE("fixed K and disabled top-k") {
  Rng rng(31);
  SttgConfig cfg;
  cfg.fixed_k = 2;
  ScaleFixture fx(cfg, rng);
  int k = 0;
  (void)fx.sttg.forward_scale(0, fx.q, fx.k, fx.v, {}, &k);
  CHECK(k == 2);
  SttgConfig dense;
  dense.topk_enabled = false;
  ScaleFixture fd(dense, rng);
  (void)fd.sttg.forward_scale(0, fd.q, fd.k, fd.v, {}, &k);
  CHECK(k == 16);
  SttgConfig bad;
  bad.fixed_k = 11;
  ParamStore st;
  CHECK_THROWS_AS(Sttg(bad, st), std::invalid_argument);
}

TEST_CASE("guidance maps follow the LR-up feature grid") {
  ParamStore store;
  Rng rng(32);
  Mfam mfam(MfamConfig{3, {4, 4, 4}, {1, 0, 0}, 2, 7}, store, rng);
  SttgConfig cfg;
  cfg.ref_ratio = 4;
  cfg.geometry.stride = 2;
  Sttg sttg(cfg, store);
  const ImagePlane lr(random_tensor({3, 64, 64}, rng, 0, 1), PlaneRole::LRup);
  const ImagePlane rdu(random_tensor({3, 64, 64}, rng, 0, 1), PlaneRole::LRup);
  const ImagePlane ref(random_tensor({3, 256, 256}, rng, 0, 1), PlaneRole::HR);
  const auto tg = sttg_forward(lr, rdu, ref, mfam, sttg);
  CHECK(tg.maps[0].shape() == Shape{4, 64, 64});
  CHECK(tg.maps[1].shape() == Shape{4, 32, 32});
  CHECK(tg.maps[2].shape() == Shape{4, 16, 16});
  const auto emb = embed_qkv(lr, rdu, ref, mfam, cfg.geometry, 4);
  CHECK(emb[0].k.dim(0) == emb[0].v.dim(0));
  CHECK_THROWS_AS(embed_qkv(lr, rdu, lr, mfam, cfg.geometry, 4), std::invalid_argument);
}
