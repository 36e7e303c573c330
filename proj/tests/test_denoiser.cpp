#include "doctest.h"
#include "test_util.hpp"
#include "ttrd3/denoiser.hpp"

using namespace ttrd3;
using testing::grad_check;
using testing::project;
using testing::random_tensor;

namespace {

DenoiserConfig tiny(DenoiserVariant v) {
  DenoiserConfig cfg;
  cfg.variant = v;
  cfg.base_channels = 4;
  cfg.channel_multipliers = {1, 2};
  cfg.guidance_channels = {3, 2, 0};
  cfg.time_embedding_dim = 8;
  return cfg;
}

std::array<ag::Var, 3> guidance(Rng& rng, int n, int h, int w) {
  return {ag::constant(random_tensor({n, 3, h, w}, rng)), ag::constant(random_tensor({n, 2, h / 2, w / 2}, rng)),
          ag::Var()};
}

}  // namespace

TEST_CASE("variant parsing") {
  CHECK(parse_variant("1net-a") == DenoiserVariant::OneNetA);
  CHECK(parse_variant("1net-b") == DenoiserVariant::OneNetB);
  CHECK(parse_variant("2net") == DenoiserVariant::TwoNet);
  CHECK(to_string(DenoiserVariant::TwoNet) == "2net");
  CHECK_THROWS_AS(parse_variant("3net"), std::invalid_argument);
}

TEST_CASE("stage widths and heads") {
  DenoiserConfig paper;
  paper.base_channels = 64;
  paper.channel_multipliers = {1, 2, 4, 8};
  CHECK(paper.stage_widths() == std::vector<int>{64, 128, 256, 512});
  ParamStore store;
  Rng rng(40);
  CHECK(Denoiser(tiny(DenoiserVariant::OneNetA), store, rng, "a").head_channels() == std::vector<int>{6});
  CHECK(Denoiser(tiny(DenoiserVariant::OneNetB), store, rng, "b").head_channels() == std::vector<int>{3, 3});
  CHECK(Denoiser(tiny(DenoiserVariant::TwoNet), store, rng, "c").head_channels() == std::vector<int>{3, 3});
}

TEST_CASE("output shapes, determinism and the split head") {
  Rng rng(41);
  for (auto v : {DenoiserVariant::OneNetA, DenoiserVariant::OneNetB, DenoiserVariant::TwoNet}) {
    ParamStore store;
    Denoiser den(tiny(v), store, rng);
    const auto xt = ag::constant(random_tensor({2, 3, 8, 8}, rng));
    const auto xin = ag::constant(random_tensor({2, 3, 8, 8}, rng));
    const auto g = guidance(rng, 2, 8, 8);
    const auto a = den.forward(xt, xin, g, {3, 9});
    const auto b = den.forward(xt, xin, g, {3, 9});
    CHECK(a.eps.shape() == xt.shape());
    CHECK(a.res.shape() == xt.shape());
    CHECK(a.eps.value().vec() == b.eps.value().vec());
    CHECK(a.res.value().vec() == b.res.value().vec());
    CHECK_THROWS_AS(den.forward(xt, xin, g, {1}), std::invalid_argument);
    CHECK_THROWS_AS(den.forward(xt, ag::constant(random_tensor({2, 3, 8, 6}, rng)), g, {1, 2}),
                    std::invalid_argument);
  }
}

TEST_CASE("guidance injection is live") {
  Rng rng(42);
  ParamStore store;
  Denoiser den(tiny(DenoiserVariant::OneNetA), store, rng);
  const auto xt = ag::constant(random_tensor({1, 3, 8, 8}, rng));
  const auto xin = ag::constant(random_tensor({1, 3, 8, 8}, rng));
  const std::array<ag::Var, 3> zeros{ag::constant(Tensor(Shape{1, 3, 8, 8})), ag::constant(Tensor(Shape{1, 2, 4, 4})),
                                     ag::Var()};
  const auto a = den.forward(xt, xin, zeros, {5});
  const auto b = den.forward(xt, xin, guidance(rng, 1, 8, 8), {5});
  CHECK((a.res.value() - b.res.value()).abs_max() > 1e-6);
  CHECK((a.eps.value() - b.eps.value()).abs_max() > 1e-6);
  const std::array<ag::Var, 3> wrong{ag::constant(Tensor(Shape{1, 3, 4, 4})), ag::Var(), ag::Var()};
  CHECK_THROWS_AS(den.forward(xt, xin, wrong, {5}), std::invalid_argument);
}

TEST_CASE("denoiser gradients through both heads") {
  Rng rng(43);
  for (auto v : {DenoiserVariant::OneNetA, DenoiserVariant::OneNetB, DenoiserVariant::TwoNet}) {
    ParamStore store;
    Denoiser den(tiny(v), store, rng);
    auto xt = ag::parameter(random_tensor({1, 3, 8, 8}, rng));
    const auto xin = ag::constant(random_tensor({1, 3, 8, 8}, rng));
    auto g0 = ag::parameter(random_tensor({1, 3, 8, 8}, rng));
    const std::array<ag::Var, 3> g{g0, ag::constant(random_tensor({1, 2, 4, 4}, rng)), ag::Var()};
    auto f = [&] {
      const auto out = den.forward(xt, xin, g, {7});
      return ag::add(project(out.eps, 1), project(out.res, 2));
    };
    std::vector<ag::Var> params{xt, g0};
    for (const auto& [name, p] : store.entries()) params.push_back(p);
    CHECK(grad_check(f, params) < 1e-5);
  }
}

TEST_CASE("parameter counts") {
  Rng rng(44);
  for (int trial = 0; trial < 10; ++trial) {
    DenoiserConfig cfg;
    cfg.base_channels = rng.uniform_int(2, 8);
    cfg.channel_multipliers.clear();
    for (int l = rng.uniform_int(1, 4); l > 0; --l) cfg.channel_multipliers.push_back(rng.uniform_int(1, 3));
    cfg.guidance_channels = {rng.uniform_int(0, 4), rng.uniform_int(0, 4), rng.uniform_int(0, 4)};
    cfg.time_embedding_dim = 2 * rng.uniform_int(1, 8);
    std::size_t counts[3];
    int i = 0;
    for (auto v : {DenoiserVariant::OneNetA, DenoiserVariant::OneNetB, DenoiserVariant::TwoNet}) {
      cfg.variant = v;
      ParamStore store;
      counts[i] = param_count(build_denoiser(cfg, store, rng));
      CHECK(counts[i] == store.scalar_count());
      ++i;
    }
    CHECK(counts[2] > counts[1]);
    CHECK(counts[1] > counts[0]);
  }
  DenoiserConfig empty;
  empty.channel_multipliers.clear();
  ParamStore store;
  Denoiser none(empty, store, rng);
  CHECK(param_count(none) == 0);
  const auto out = none.forward(ag::constant(Tensor(Shape{1, 3, 4, 4}, 1.0)), ag::constant(Tensor(Shape{1, 3, 4, 4})),
                                {}, {1});
  CHECK(out.eps.value().abs_max() == 0.0);

  DenoiserConfig small = tiny(DenoiserVariant::OneNetA), wide = small;
  wide.base_channels *= 2;
  ParamStore s1, s2;
  const auto n1 = param_count(Denoiser(small, s1, rng));
  const auto n2 = param_count(Denoiser(wide, s2, rng));
  CHECK(n2 > 2 * n1);
}

TEST_CASE("single-image predict wrapper") {
  Rng rng(45);
  ParamStore store;
  DenoiserConfig cfg = tiny(DenoiserVariant::OneNetB);
  cfg.guidance_channels = {0, 0, 0};
  Denoiser den(cfg, store, rng);
  const ImagePlane xt(random_tensor({3, 8, 8}, rng), PlaneRole::Noised);
  const ImagePlane xin(random_tensor({3, 8, 8}, rng), PlaneRole::LRup);
  const auto [eps, res] = predict(den, xt, xin, TextureGuidance{}, 10, 100);
  CHECK(eps.data.shape() == xt.data.shape());
  CHECK(res.role == PlaneRole::Residual);
  CHECK_THROWS_AS(predict(den, xt, xin, TextureGuidance{}, 0, 100), std::out_of_range);
  CHECK_THROWS_AS(predict(den, xt, xin, TextureGuidance{}, 101, 100), std::out_of_range);
}

TEST_CASE("sinusoidal features") {
  const auto f = timestep_features({0, 5}, 6);
  CHECK(f.shape() == Shape{2, 6});
  CHECK(f[0] == 0.0);
  CHECK(f[3] == 1.0);
  CHECK(f[6] == doctest::Approx(std::sin(5.0)));
  CHECK_THROWS_AS(timestep_features({1}, 5), std::invalid_argument);
}
