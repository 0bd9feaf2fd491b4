#pragma once

#include <span>
#include <vector>

#include "shrike/mat.hpp"
#include "shrike/rng.hpp"

namespace shrike::kan {

// Clamped B-spline knot grid on [domain_lo, domain_hi]. The clamping repeats
// the boundary knots degree+1 times, so the basis forms a partition of unity
// over the whole domain and basis_count() = num_intervals + degree.
struct SplineGrid {
  int degree = 3;
  int num_intervals = 5;
  double domain_lo = -1.0;
  double domain_hi = 1.0;
  std::vector<double> knots;

  static SplineGrid make(int degree = 3, int num_intervals = 5, double domain_lo = -1.0,
                         double domain_hi = 1.0);

  int basis_count() const { return num_intervals + degree; }
  double clamp(double x) const;

  bool operator==(const SplineGrid& o) const {
    return degree == o.degree && num_intervals == o.num_intervals && domain_lo == o.domain_lo &&
           domain_hi == o.domain_hi;
  }
};

// The degree+1 basis values (or derivatives) that are nonzero at a point.
// Entry i of values corresponds to basis index first + i.
struct BasisWindow {
  int first = 0;
  std::vector<double> values;
};

// Nonzero basis values at x (x clamped into the domain first).
BasisWindow bspline_window(const SplineGrid& grid, double x);
// Nonzero basis derivatives dB_k/dx at x. At the domain endpoints this is the
// one-sided limit from inside.
BasisWindow bspline_window_grad(const SplineGrid& grid, double x);

// Full K-vector forms of the above.
std::vector<double> bspline_basis(const SplineGrid& grid, double x);
std::vector<double> bspline_basis_grad(const SplineGrid& grid, double x);

// KAN layer: output_j = sum_i sum_k coeffs[i][j][k] * B_k(x_i).
// coeffs is stored as a d_in x (d_out*K) matrix with column index j*K + k.
struct KanLayerParams {
  SplineGrid grid;
  int d_in = 0;
  int d_out = 0;
  Mat coeffs;

  static KanLayerParams init(const SplineGrid& grid, int d_in, int d_out, Rng& rng);

  double coeff(int i, int j, int k) const { return coeffs(i, j * grid.basis_count() + k); }
  double& coeff(int i, int j, int k) { return coeffs(i, j * grid.basis_count() + k); }

  void validate() const;
};

std::vector<double> kan_forward(const KanLayerParams& params, std::span<const double> x);

struct KanGradients {
  Mat grad_coeffs;              // same layout as params.coeffs
  std::vector<double> grad_x;   // length d_in
};

// grad_coeffs[i][j][k] = upstream[j] * B_k(x_i)
// grad_x[i] = sum_j upstream[j] * sum_k c_ijk * dB_k/dx(x_i), with the
// derivative zeroed where x_i lies strictly outside the clamped domain
// (the clamped composite is constant there).
KanGradients kan_backward(const KanLayerParams& params, std::span<const double> x,
                          std::span<const double> upstream);

}  // namespace shrike::kan
