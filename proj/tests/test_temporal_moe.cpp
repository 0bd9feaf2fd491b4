#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "shrike/temporal_moe.hpp"

using namespace shrike;
using namespace shrike::temporal_moe;

namespace {

// Greville abscissae make a KAN layer reproduce the identity on the grid
// domain: x = sum_k xi_k B_k(x).
std::vector<double> greville(const kan::SplineGrid& grid) {
  const int p = grid.degree;
  std::vector<double> xi(static_cast<std::size_t>(grid.basis_count()));
  for (int k = 0; k < grid.basis_count(); ++k) {
    double s = 0.0;
    for (int j = 1; j <= p; ++j) s += grid.knots[static_cast<std::size_t>(k + j)];
    xi[static_cast<std::size_t>(k)] = s / p;
  }
  return xi;
}

kan::KanLayerParams identity_kan(const kan::SplineGrid& grid, int dim) {
  Rng rng(0);
  auto params = kan::KanLayerParams::init(grid, dim, dim, rng);
  params.coeffs.fill(0.0);
  const auto xi = greville(grid);
  for (int i = 0; i < dim; ++i)
    for (int k = 0; k < grid.basis_count(); ++k) params.coeff(i, i, k) = xi[static_cast<std::size_t>(k)];
  return params;
}

fusion::FeatureSequence seq(Mat m) { return {std::move(m), fusion::Modality::visual, 1}; }

}  // namespace

TEST_CASE("fixed_centers matches the hand-evaluated ladder") {
  const auto e2 = fixed_centers(2);
  CHECK(e2.size() == 2);
  CHECK(e2[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(e2[1] == doctest::Approx(0.75).epsilon(1e-15));

  const auto e1 = fixed_centers(1);
  CHECK(e1 == std::vector<double>{0.5});

  const auto e3 = fixed_centers(3);
  CHECK(e3[0] == doctest::Approx(1.0 / 6).epsilon(1e-15));
  CHECK(e3[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(e3[2] == doctest::Approx(5.0 / 6).epsilon(1e-15));

  CHECK_THROWS_AS(fixed_centers(0), InvalidInputError);
}

TEST_CASE("zero generator gives fixed centers and width 0.5 exactly") {
  const int d = 6, e = 4;
  Rng rng(1);
  Mat q_s = Mat::normal(1, d, 0, 1, rng);
  auto ctx = seq(Mat::normal(5, d, 0, 1, rng));
  const auto g = generate_gaussians(q_s, ctx, GeneratorParams::zeros(d, e));
  const auto fixed = fixed_centers(e);
  for (int i = 0; i < e; ++i) {
    CHECK(g.centers[static_cast<std::size_t>(i)] == fixed[static_cast<std::size_t>(i)]);
    CHECK(g.widths[static_cast<std::size_t>(i)] == 0.5);
  }
}

TEST_CASE("huge offsets saturate at fixed center plus margin") {
  const int d = 4, e = 2;
  auto params = GeneratorParams::zeros(d, e);
  for (int i = 0; i < e; ++i) params.fc_b(0, i) = 1e6;  // mu_offset -> +inf
  Rng rng(2);
  Mat q_s = Mat::normal(1, d, 0, 1, rng);
  auto ctx = seq(Mat::normal(3, d, 0, 1, rng));
  const auto g = generate_gaussians(q_s, ctx, params);
  const auto fixed = fixed_centers(e);
  const double margin = center_margin(e);
  for (int i = 0; i < e; ++i)
    CHECK(g.centers[static_cast<std::size_t>(i)] ==
          doctest::Approx(fixed[static_cast<std::size_t>(i)] + margin).epsilon(1e-12));
}

TEST_CASE("generate_gaussians matches a step-by-step oracle") {
  const int d = 5, e = 3;
  Rng rng(3);
  const auto params = GeneratorParams::init(d, e, rng);
  Mat q_s = Mat::normal(1, d, 0, 1, rng);
  Mat ctx = Mat::normal(4, d, 0, 1, rng);

  const auto g = generate_gaussians(q_s, seq(ctx), params);

  const Mat attended =
      fusion::cross_attend({q_s, fusion::Modality::fused, 1}, seq(ctx), params.attn).data;
  Mat fc = matmul(attended, params.fc_w);
  for (int j = 0; j < fc.cols(); ++j) fc(0, j) += params.fc_b(0, j);
  const auto fixed = fixed_centers(e);
  const double margin = center_margin(e);
  for (int i = 0; i < e; ++i) {
    const double c = fixed[static_cast<std::size_t>(i)] + std::tanh(fc(0, i)) * margin;
    const double w = std::min(std::max(1.0 / (1.0 + std::exp(-fc(0, e + i))), kMinWidth), 1.0);
    CHECK(g.centers[static_cast<std::size_t>(i)] == doctest::Approx(c).epsilon(1e-12));
    CHECK(g.widths[static_cast<std::size_t>(i)] == doctest::Approx(w).epsilon(1e-12));
  }
}

TEST_CASE("centers stay within +-margin of fixed centers over random draws") {
  const int d = 6, e = 5;
  const auto fixed = fixed_centers(e);
  const double margin = center_margin(e);
  Rng rng(4);
  for (int rep = 0; rep < 1000; ++rep) {
    auto params = GeneratorParams::init(d, e, rng);
    params.fc_b = Mat::normal(1, 2 * e, 0, 3, rng);
    Mat q_s = Mat::normal(1, d, 0, 2, rng);
    auto g = generate_gaussians(q_s, seq(Mat::normal(4, d, 0, 2, rng)), params);
    for (int i = 0; i < e; ++i) {
      const double c = g.centers[static_cast<std::size_t>(i)];
      CHECK(c >= fixed[static_cast<std::size_t>(i)] - margin);
      CHECK(c <= fixed[static_cast<std::size_t>(i)] + margin);
      CHECK(c > 0.0);
      CHECK(c < 1.0);
      CHECK(g.widths[static_cast<std::size_t>(i)] >= kMinWidth);
      CHECK(g.widths[static_cast<std::size_t>(i)] <= 1.0);
    }
  }
}

TEST_CASE("gaussian weight rows peak at the frame holding the center") {
  GaussianParams g;
  g.centers = {(3 + 0.5) / 10.0};
  g.widths = {0.2};
  const Mat w = gaussian_weights(g, 10);
  CHECK(w(0, 3) == 1.0);
  for (int f = 0; f < 10; ++f) {
    CHECK(w(0, f) > 0.0);
    CHECK(w(0, f) <= 1.0);
  }
}

TEST_CASE("width 1 with center 0.5 gives a nearly flat row") {
  GaussianParams g;
  g.centers = {0.5};
  g.widths = {1.0};
  const Mat w = gaussian_weights(g, 10);
  for (int f = 0; f < 10; ++f) CHECK(w(0, f) >= 0.9);
  // Worst frame is tau = 0.05; raw value exp(-(0.45)^2/2) ~ 0.9037, then
  // normalized by the row max at tau = 0.45 or 0.55.
  const double expect = std::exp(-0.45 * 0.45 / 2) / std::exp(-0.05 * 0.05 / 2);
  CHECK(w(0, 0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("every gaussian row has max exactly 1") {
  Rng rng(5);
  for (int rep = 0; rep < 200; ++rep) {
    GaussianParams g;
    const int e = rng.uniform_int(1, 6);
    for (int i = 0; i < e; ++i) {
      g.centers.push_back(rng.uniform(0.01, 0.99));
      g.widths.push_back(rng.uniform(kMinWidth, 1.0));
    }
    const Mat w = gaussian_weights(g, 7);
    for (int i = 0; i < e; ++i) {
      double mx = 0.0;
      for (int f = 0; f < 7; ++f) {
        CHECK(w(i, f) >= 0.0);
        CHECK(w(i, f) <= 1.0);
        mx = std::max(mx, w(i, f));
      }
      CHECK(mx == 1.0);
      // Strict positivity holds away from degenerate widths; extremely narrow
      // Gaussians underflow the double exponent range on distant frames.
      if (g.widths[static_cast<std::size_t>(i)] >= 0.05)
        for (int f = 0; f < 7; ++f) CHECK(w(i, f) > 0.0);
    }
  }
}

TEST_CASE("route: zero parameters give the uniform distribution") {
  const int d = 5, e = 4;
  Rng rng(6);
  Mat ctx = Mat::normal(1, d, 0, 1, rng);
  const auto r = route(ctx, RouterParams::zeros(d, e));
  for (double v : r) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("route: a dominant logit is near one-hot; routes form a simplex") {
  const int d = 3, e = 3;
  auto params = RouterParams::zeros(d, e);
  params.b(0, 1) = 40.0;
  Rng rng(7);
  Mat ctx = Mat::normal(1, d, 0, 1, rng);
  const auto r = route(ctx, params);
  CHECK(r[1] > 0.999999);

  auto rand_params = RouterParams::init(d, e, rng);
  const auto r2 = route(ctx, rand_params);
  double sum = 0.0;
  for (double v : r2) {
    CHECK(v > 0.0);
    sum += v;
  }
  CHECK(std::abs(sum - 1.0) <= 1e-9);

  // Softmax oracle.
  Mat logits = matmul(ctx, rand_params.w);
  double mx = -1e300;
  for (int i = 0; i < e; ++i) mx = std::max(mx, logits(0, i) + rand_params.b(0, i));
  double z = 0.0;
  for (int i = 0; i < e; ++i) z += std::exp(logits(0, i) + rand_params.b(0, i) - mx);
  for (int i = 0; i < e; ++i)
    CHECK(r2[static_cast<std::size_t>(i)] ==
          doctest::Approx(std::exp(logits(0, i) + rand_params.b(0, i) - mx) / z).epsilon(1e-12));
}

TEST_CASE("degenerate aggregation: one expert, unit weights, identity KAN sums the stream") {
  const auto grid = kan::SplineGrid::make(3, 5, -1.0, 1.0);
  const int d = 4, frames = 6;
  ExpertBank bank;
  bank.experts.push_back(identity_kan(grid, d));
  Rng rng(8);
  Mat stream = Mat::uniform(frames, d, -0.9, 0.9, rng);
  Mat weights = Mat::filled(1, frames, 1.0);
  const std::vector<double> routes = {1.0};
  const auto out = aggregate_experts(seq(stream), weights, routes, bank);
  for (int j = 0; j < d; ++j) {
    double expect = 0.0;
    for (int f = 0; f < frames; ++f) expect += stream(f, j);
    CHECK(out[static_cast<std::size_t>(j)] == doctest::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("one-hot routing makes the output depend only on the routed expert") {
  const auto grid = kan::SplineGrid::make(3, 5, -1.0, 1.0);
  const int d = 3, frames = 4, e = 3;
  Rng rng(9);
  auto bank = ExpertBank::init(grid, d, e, rng);
  Mat stream = Mat::uniform(frames, d, -0.9, 0.9, rng);
  Mat weights = Mat::uniform(e, frames, 0.1, 1.0, rng);
  std::vector<double> routes = {0.0, 1.0, 0.0};

  const auto base = aggregate_experts(seq(stream), weights, routes, bank);
  auto zeroed = bank;
  zeroed.experts[0].coeffs.fill(0.0);
  zeroed.experts[2].coeffs.fill(0.0);
  const auto out = aggregate_experts(seq(stream), weights, routes, zeroed);
  for (std::size_t j = 0; j < base.size(); ++j) CHECK(out[j] == doctest::Approx(base[j]).epsilon(1e-14));
}

TEST_CASE("aggregation matches a triple-loop oracle") {
  const auto grid = kan::SplineGrid::make(3, 4, -1.0, 1.0);
  const int d = 3, frames = 5, e = 2;
  Rng rng(10);
  auto bank = ExpertBank::init(grid, d, e, rng);
  Mat stream = Mat::uniform(frames, d, -0.95, 0.95, rng);
  Mat weights = Mat::uniform(e, frames, 0.0, 1.0, rng);
  std::vector<double> routes = {0.3, 0.7};

  const auto out = aggregate_experts(seq(stream), weights, routes, bank);

  std::vector<double> expect(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < e; ++i)
    for (int f = 0; f < frames; ++f) {
      const auto y = kan::kan_forward(bank.experts[static_cast<std::size_t>(i)], stream.row(f));
      for (int j = 0; j < d; ++j)
        expect[static_cast<std::size_t>(j)] += weights(i, f) * routes[static_cast<std::size_t>(i)] * y[static_cast<std::size_t>(j)];
    }
  for (int j = 0; j < d; ++j)
    CHECK(std::abs(out[static_cast<std::size_t>(j)] - expect[static_cast<std::size_t>(j)]) <= 1e-10);
}

TEST_CASE("end-to-end MoE gradients match finite differences") {
  const auto grid = kan::SplineGrid::make(3, 4, -1.0, 1.0);
  const int d = 3, frames = 4, e = 2;
  Rng rng(11);
  auto gen = GeneratorParams::init(d, e, rng);
  auto router = RouterParams::init(d, e, rng);
  auto bank = ExpertBank::init(grid, d, e, rng);
  Mat q_s = Mat::normal(1, d, 0, 1, rng);
  Mat ctx = Mat::normal(frames, d, 0, 0.5, rng);
  Mat stream = Mat::uniform(frames, d, -0.9, 0.9, rng);
  Mat probe = Mat::normal(d, 1, 0, 1, rng);

  struct Flat {
    GeneratorParams gen;
    RouterParams router;
    ExpertBank bank;
  };

  auto forward = [&](const Flat& f) {
    ad::Tape t;
    auto gv = make_vars(t, f.gen, true);
    auto rv = make_vars(t, f.router, true);
    ad::Var attended = attend_question(t, t.leaf(q_s), t.leaf(ctx), gv);
    auto gauss = generate_gaussians_from(t, attended, gv, e);
    ad::Var w = gaussian_weights(t, gauss, frames);
    ad::Var r = route(t, attended, rv);
    std::vector<ad::Var> coeffs;
    for (const auto& ex : f.bank.experts) coeffs.push_back(t.leaf(ex.coeffs, true));
    ad::Var agg = aggregate_experts(t, t.leaf(stream), w, r, coeffs, grid, d);
    ad::Var s = ad::matmul(t, agg, t.leaf(probe));
    return std::pair<ad::Tape, ad::Var>(std::move(t), s);
  };

  Flat flat{gen, router, bank};
  ad::Tape t;
  auto gv = make_vars(t, flat.gen, true);
  auto rv = make_vars(t, flat.router, true);
  ad::Var attended = attend_question(t, t.leaf(q_s), t.leaf(ctx), gv);
  auto gauss = generate_gaussians_from(t, attended, gv, e);
  ad::Var w = gaussian_weights(t, gauss, frames);
  ad::Var r = route(t, attended, rv);
  std::vector<ad::Var> coeffs;
  for (const auto& ex : flat.bank.experts) coeffs.push_back(t.leaf(ex.coeffs, true));
  ad::Var agg = aggregate_experts(t, t.leaf(stream), w, r, coeffs, grid, d);
  ad::Var root = ad::matmul(t, agg, t.leaf(probe));
  t.backward(root);

  auto eval = [&](const Flat& f) {
    ad::Tape t2;
    auto gv2 = make_vars(t2, f.gen, false);
    auto rv2 = make_vars(t2, f.router, false);
    ad::Var att2 = attend_question(t2, t2.leaf(q_s), t2.leaf(ctx), gv2);
    auto gauss2 = generate_gaussians_from(t2, att2, gv2, e);
    ad::Var w2 = gaussian_weights(t2, gauss2, frames);
    ad::Var r2 = route(t2, att2, rv2);
    std::vector<ad::Var> c2;
    for (const auto& ex : f.bank.experts) c2.push_back(t2.leaf(ex.coeffs, false));
    ad::Var agg2 = aggregate_experts(t2, t2.leaf(stream), w2, r2, c2, grid, d);
    return t2.value(ad::matmul(t2, agg2, t2.leaf(probe)))(0, 0);
  };

  const double h = 1e-6;
  auto check_coord = [&](Mat& m, const Mat& grad, int i, int j) {
    const double saved = m(i, j);
    m(i, j) = saved + h;
    const double up = eval(flat);
    m(i, j) = saved - h;
    const double dn = eval(flat);
    m(i, j) = saved;
    const double fd = (up - dn) / (2 * h);
    const double an = grad(i, j);
    CHECK(std::abs(an - fd) <= 1e-4 * std::max(1.0, std::max(std::abs(an), std::abs(fd))));
  };

  Rng pick(12);
  // Generator attention + fc
  for (int rep = 0; rep < 5; ++rep) {
    check_coord(flat.gen.attn.w_q, t.grad(gv.attn.w_q), pick.uniform_int(0, d - 1), pick.uniform_int(0, d - 1));
    check_coord(flat.gen.fc_w, t.grad(gv.fc_w), pick.uniform_int(0, d - 1), pick.uniform_int(0, 2 * e - 1));
    check_coord(flat.router.w, t.grad(rv.w), pick.uniform_int(0, d - 1), pick.uniform_int(0, e - 1));
    for (int i = 0; i < e; ++i) {
      Mat& c = flat.bank.experts[static_cast<std::size_t>(i)].coeffs;
      check_coord(c, t.grad(coeffs[static_cast<std::size_t>(i)]), pick.uniform_int(0, c.rows() - 1),
                  pick.uniform_int(0, c.cols() - 1));
    }
  }
  (void)forward;
}
