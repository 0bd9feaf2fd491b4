#pragma once

#include <span>
#include <vector>

#include "shrike/ad.hpp"
#include "shrike/fusion.hpp"
#include "shrike/kan.hpp"
#include "shrike/mat.hpp"

namespace shrike::temporal_moe {

inline constexpr double kMinWidth = 1e-3;

inline double center_margin(int experts) { return 1.0 / (2.0 * experts); }

// Fixed expert centers: margin + i * (1 - 2*margin) / (E - 1), the central
// positions of E equal temporal slots; E = 1 degenerates to 0.5.
std::vector<double> fixed_centers(int experts);

// Per-expert Gaussian centers (within +-margin of the fixed centers) and
// widths (sigmoid-squashed, floored at kMinWidth).
struct GaussianParams {
  std::vector<double> centers;
  std::vector<double> widths;
};

// Question-driven attention plus the affine map producing (mu_offset, sigma_raw)
// per expert, one instance per stream family.
struct GeneratorParams {
  fusion::AttentionParams attn;
  Mat fc_w;  // D x 2E
  Mat fc_b;  // 1 x 2E

  static GeneratorParams init(int dim, int experts, Rng& rng);
  static GeneratorParams zeros(int dim, int experts);
  int experts() const { return fc_w.cols() / 2; }
};

struct RouterParams {
  Mat w;  // D x E
  Mat b;  // 1 x E

  static RouterParams init(int dim, int experts, Rng& rng);
  static RouterParams zeros(int dim, int experts);
};

// E KAN layers D -> D sharing one grid configuration.
struct ExpertBank {
  std::vector<kan::KanLayerParams> experts;

  static ExpertBank init(const kan::SplineGrid& grid, int dim, int experts, Rng& rng);
  void validate() const;
};

struct GeneratorVars {
  fusion::AttentionVars attn;
  ad::Var fc_w, fc_b;
};

struct RouterVars {
  ad::Var w, b;
};

struct GaussianVars {
  ad::Var centers, widths;  // each 1 x E
};

GeneratorVars make_vars(ad::Tape& t, const GeneratorParams& p, bool trainable = false);
RouterVars make_vars(ad::Tape& t, const RouterParams& p, bool trainable = false);

// v'_q = CA(q_s | context) with the generator's attention parameters.
ad::Var attend_question(ad::Tape& t, ad::Var q_s, ad::Var context, const GeneratorVars& p);

// centers[i] = fixed[i] + tanh(mu_offset[i]) * margin,
// widths[i] = clamp(sigmoid(sigma_raw[i]), kMinWidth, 1).
GaussianVars generate_gaussians_from(ad::Tape& t, ad::Var attended, const GeneratorVars& p,
                                     int experts);

// E x T temporal weights, each row max-normalized to exactly 1.
inline ad::Var gaussian_weights(ad::Tape& t, const GaussianVars& g, int frames) {
  return ad::gaussian_rows(t, g.centers, g.widths, frames);
}

// softmax(attended * w + b), a 1 x E routing distribution.
ad::Var route(ad::Tape& t, ad::Var attended, const RouterVars& p);

// sum_i sum_t weights[i][t] * routes[i] * kan_i(stream[t]); a 1 x D vector.
ad::Var aggregate_experts(ad::Tape& t, ad::Var stream, ad::Var weights, ad::Var routes,
                          std::span<const ad::Var> expert_coeffs, const kan::SplineGrid& grid,
                          int dim);

// ---- Plain entry points ----

GaussianParams generate_gaussians(const Mat& q_s, const fusion::FeatureSequence& context,
                                  const GeneratorParams& p);
Mat gaussian_weights(const GaussianParams& g, int frames);
std::vector<double> route(const Mat& context_vec, const RouterParams& p);
std::vector<double> aggregate_experts(const fusion::FeatureSequence& stream, const Mat& weights,
                                      std::span<const double> routes, const ExpertBank& bank);

}  // namespace shrike::temporal_moe
