#include "shrike/temporal_moe.hpp"

#include <cmath>

#include "shrike/error.hpp"

namespace shrike::temporal_moe {

using ad::Tape;
using ad::Var;

std::vector<double> fixed_centers(int experts) {
  if (experts < 1) throw InvalidInputError("fixed_centers: experts must be >= 1");
  if (experts == 1) return {0.5};
  const double margin = center_margin(experts);
  std::vector<double> centers(static_cast<std::size_t>(experts));
  for (int i = 0; i < experts; ++i)
    centers[static_cast<std::size_t>(i)] = margin + i * (1.0 - 2.0 * margin) / (experts - 1);
  return centers;
}

GeneratorParams GeneratorParams::init(int dim, int experts, Rng& rng) {
  GeneratorParams p;
  p.attn = fusion::AttentionParams::init(dim, rng);
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  p.fc_w = Mat::uniform(dim, 2 * experts, -s, s, rng);
  p.fc_b = Mat::zeros(1, 2 * experts);
  return p;
}

GeneratorParams GeneratorParams::zeros(int dim, int experts) {
  GeneratorParams p;
  p.attn = fusion::AttentionParams::zeros(dim);
  p.fc_w = Mat::zeros(dim, 2 * experts);
  p.fc_b = Mat::zeros(1, 2 * experts);
  return p;
}

RouterParams RouterParams::init(int dim, int experts, Rng& rng) {
  RouterParams p;
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  p.w = Mat::uniform(dim, experts, -s, s, rng);
  p.b = Mat::zeros(1, experts);
  return p;
}

RouterParams RouterParams::zeros(int dim, int experts) {
  return {Mat::zeros(dim, experts), Mat::zeros(1, experts)};
}

ExpertBank ExpertBank::init(const kan::SplineGrid& grid, int dim, int experts, Rng& rng) {
  ExpertBank b;
  b.experts.reserve(static_cast<std::size_t>(experts));
  for (int i = 0; i < experts; ++i)
    b.experts.push_back(kan::KanLayerParams::init(grid, dim, dim, rng));
  return b;
}

void ExpertBank::validate() const {
  if (experts.empty()) throw InvalidInputError("ExpertBank: no experts");
  for (const auto& e : experts) {
    e.validate();
    if (!(e.grid == experts.front().grid))
      throw InvalidInputError("ExpertBank: experts must share one grid configuration");
  }
}

GeneratorVars make_vars(Tape& t, const GeneratorParams& p, bool trainable) {
  return {fusion::make_vars(t, p.attn, trainable), t.leaf(p.fc_w, trainable),
          t.leaf(p.fc_b, trainable)};
}

RouterVars make_vars(Tape& t, const RouterParams& p, bool trainable) {
  return {t.leaf(p.w, trainable), t.leaf(p.b, trainable)};
}

Var attend_question(Tape& t, Var q_s, Var context, const GeneratorVars& p) {
  return fusion::attend(t, q_s, context, p.attn);
}

GaussianVars generate_gaussians_from(Tape& t, Var attended, const GeneratorVars& p, int experts) {
  const Mat& fcw = t.value(p.fc_w);
  if (fcw.cols() != 2 * experts)
    throw InvalidInputError("generate_gaussians: fc output width must be 2E");
  Var fc = ad::add_rowvec(t, ad::matmul(t, attended, p.fc_w), p.fc_b);  // 1 x 2E
  Var mu_offset = ad::slice_cols(t, fc, 0, experts);
  Var sigma_raw = ad::slice_cols(t, fc, experts, 2 * experts);

  Mat fixed(1, experts);
  const auto centers = fixed_centers(experts);
  for (int i = 0; i < experts; ++i) fixed(0, i) = centers[static_cast<std::size_t>(i)];
  Var fixed_v = t.leaf(std::move(fixed));

  GaussianVars g;
  g.centers = ad::add(t, fixed_v, ad::scale(t, ad::tanh_of(t, mu_offset), center_margin(experts)));
  g.widths = ad::clamp_of(t, ad::sigmoid_of(t, sigma_raw), kMinWidth, 1.0);
  return g;
}

Var route(Tape& t, Var attended, const RouterVars& p) {
  return ad::softmax_rows(t, ad::add_rowvec(t, ad::matmul(t, attended, p.w), p.b));
}

Var aggregate_experts(Tape& t, Var stream, Var weights, Var routes,
                      std::span<const ad::Var> expert_coeffs, const kan::SplineGrid& grid,
                      int dim) {
  const int e = static_cast<int>(expert_coeffs.size());
  const Mat& wv = t.value(weights);
  if (wv.rows() != e || t.value(routes).cols() != e)
    throw InvalidInputError("aggregate_experts: expert count mismatch");
  if (wv.cols() != t.value(stream).rows())
    throw InvalidInputError("aggregate_experts: weight columns must match stream frames");
  Var combined = ad::colscale(t, weights, routes);  // E x T
  Var total{-1};
  for (int i = 0; i < e; ++i) {
    Var k = ad::kan_apply(t, expert_coeffs[static_cast<std::size_t>(i)], stream, grid, dim);  // T x D
    Var row = ad::slice_rows(t, combined, i, i + 1);  // 1 x T
    Var term = ad::matmul(t, row, k);                 // 1 x D
    total = total.valid() ? ad::add(t, total, term) : term;
  }
  return total;
}

GaussianParams generate_gaussians(const Mat& q_s, const fusion::FeatureSequence& context,
                                  const GeneratorParams& p) {
  context.validate();
  Tape t;
  Var attended = attend_question(t, t.leaf(q_s), t.leaf(context.data), make_vars(t, p));
  const auto g = generate_gaussians_from(t, attended, make_vars(t, p), p.experts());
  GaussianParams out;
  const Mat& c = t.value(g.centers);
  const Mat& w = t.value(g.widths);
  for (int i = 0; i < c.cols(); ++i) {
    out.centers.push_back(c(0, i));
    out.widths.push_back(w(0, i));
  }
  return out;
}

Mat gaussian_weights(const GaussianParams& g, int frames) {
  const int e = static_cast<int>(g.centers.size());
  if (e == 0 || g.widths.size() != g.centers.size())
    throw InvalidInputError("gaussian_weights: centers and widths must match");
  Tape t;
  Mat c(1, e), w(1, e);
  for (int i = 0; i < e; ++i) {
    c(0, i) = g.centers[static_cast<std::size_t>(i)];
    w(0, i) = g.widths[static_cast<std::size_t>(i)];
  }
  return t.value(ad::gaussian_rows(t, t.leaf(std::move(c)), t.leaf(std::move(w)), frames));
}

std::vector<double> route(const Mat& context_vec, const RouterParams& p) {
  Tape t;
  Var r = route(t, t.leaf(context_vec), make_vars(t, p));
  const Mat& rv = t.value(r);
  std::vector<double> out(static_cast<std::size_t>(rv.cols()));
  for (int i = 0; i < rv.cols(); ++i) out[static_cast<std::size_t>(i)] = rv(0, i);
  return out;
}

std::vector<double> aggregate_experts(const fusion::FeatureSequence& stream, const Mat& weights,
                                      std::span<const double> routes, const ExpertBank& bank) {
  stream.validate();
  bank.validate();
  if (routes.size() != bank.experts.size() || weights.rows() != static_cast<int>(routes.size()))
    throw InvalidInputError("aggregate_experts: expert count mismatch");
  Tape t;
  Mat r(1, static_cast<int>(routes.size()));
  for (std::size_t i = 0; i < routes.size(); ++i) r(0, static_cast<int>(i)) = routes[i];
  std::vector<Var> coeffs;
  coeffs.reserve(bank.experts.size());
  for (const auto& e : bank.experts) coeffs.push_back(t.leaf(e.coeffs));
  Var out = aggregate_experts(t, t.leaf(stream.data), t.leaf(weights), t.leaf(std::move(r)), coeffs,
                              bank.experts.front().grid, bank.experts.front().d_out);
  const Mat& ov = t.value(out);
  std::vector<double> result(static_cast<std::size_t>(ov.cols()));
  for (int j = 0; j < ov.cols(); ++j) result[static_cast<std::size_t>(j)] = ov(0, j);
  return result;
}

}  // namespace shrike::temporal_moe
