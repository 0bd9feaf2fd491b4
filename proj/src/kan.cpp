#include "shrike/kan.hpp"

#include <algorithm>
#include <cmath>

#include "shrike/error.hpp"

namespace shrike::kan {

SplineGrid SplineGrid::make(int degree, int num_intervals, double domain_lo, double domain_hi) {
  if (degree < 1) throw InvalidInputError("SplineGrid: degree must be >= 1");
  if (num_intervals < 1) throw InvalidInputError("SplineGrid: num_intervals must be >= 1");
  if (!(domain_lo < domain_hi)) throw InvalidInputError("SplineGrid: domain_lo must be < domain_hi");
  SplineGrid g;
  g.degree = degree;
  g.num_intervals = num_intervals;
  g.domain_lo = domain_lo;
  g.domain_hi = domain_hi;
  g.knots.reserve(static_cast<std::size_t>(num_intervals) + 2 * degree + 1);
  for (int i = 0; i <= degree; ++i) g.knots.push_back(domain_lo);
  const double h = (domain_hi - domain_lo) / num_intervals;
  for (int i = 1; i < num_intervals; ++i) g.knots.push_back(domain_lo + i * h);
  for (int i = 0; i <= degree; ++i) g.knots.push_back(domain_hi);
  return g;
}

double SplineGrid::clamp(double x) const {
  return std::min(std::max(x, domain_lo), domain_hi);
}

namespace {

// Index s with knots[s] <= x < knots[s+1]; x == domain_hi maps to the last
// non-empty span so the rightmost basis value is 1 there.
int find_span(const SplineGrid& grid, double x) {
  const int p = grid.degree;
  const int last = p + grid.num_intervals - 1;
  if (x >= grid.domain_hi) return last;
  int s = p;
  while (s < last && x >= grid.knots[static_cast<std::size_t>(s) + 1]) ++s;
  return s;
}

// Nonzero basis values of the given degree at x in span s (Cox-de Boor
// triangle, computed in place).
void basis_values(const SplineGrid& grid, int span, double x, int degree,
                  std::vector<double>& out) {
  out.assign(static_cast<std::size_t>(degree) + 1, 0.0);
  out[0] = 1.0;
  std::vector<double> left(static_cast<std::size_t>(degree) + 1);
  std::vector<double> right(static_cast<std::size_t>(degree) + 1);
  const auto& t = grid.knots;
  for (int j = 1; j <= degree; ++j) {
    left[j] = x - t[static_cast<std::size_t>(span) + 1 - j];
    right[j] = t[static_cast<std::size_t>(span) + j] - x;
    double saved = 0.0;
    for (int r = 0; r < j; ++r) {
      const double denom = right[r + 1] + left[j - r];
      const double temp = denom != 0.0 ? out[r] / denom : 0.0;
      out[r] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    out[j] = saved;
  }
}

void check_finite(double x) {
  if (!std::isfinite(x)) throw InvalidInputError("bspline_basis: non-finite input");
}

}  // namespace

BasisWindow bspline_window(const SplineGrid& grid, double x) {
  check_finite(x);
  const double xc = grid.clamp(x);
  const int span = find_span(grid, xc);
  BasisWindow w;
  w.first = span - grid.degree;
  basis_values(grid, span, xc, grid.degree, w.values);
  return w;
}

BasisWindow bspline_window_grad(const SplineGrid& grid, double x) {
  check_finite(x);
  const double xc = grid.clamp(x);
  const int p = grid.degree;
  const int span = find_span(grid, xc);
  const auto& t = grid.knots;

  // Degree p-1 values in the same span; entry r is B_{span-p+1+r, p-1}.
  std::vector<double> lower;
  basis_values(grid, span, xc, p - 1, lower);

  BasisWindow w;
  w.first = span - p;
  w.values.assign(static_cast<std::size_t>(p) + 1, 0.0);
  for (int r = 0; r <= p; ++r) {
    const int i = span - p + r;
    double acc = 0.0;
    if (r >= 1) {  // B_{i,p-1} is nonzero only for i in span-p+1 .. span
      const double denom = t[static_cast<std::size_t>(i) + p] - t[static_cast<std::size_t>(i)];
      if (denom != 0.0) acc += lower[r - 1] / denom;
    }
    if (r <= p - 1) {  // B_{i+1,p-1}
      const double denom = t[static_cast<std::size_t>(i) + p + 1] - t[static_cast<std::size_t>(i) + 1];
      if (denom != 0.0) acc -= lower[r] / denom;
    }
    w.values[r] = p * acc;
  }
  return w;
}

namespace {

std::vector<double> scatter(const SplineGrid& grid, const BasisWindow& w) {
  std::vector<double> out(static_cast<std::size_t>(grid.basis_count()), 0.0);
  for (std::size_t r = 0; r < w.values.size(); ++r) out[static_cast<std::size_t>(w.first) + r] = w.values[r];
  return out;
}

}  // namespace

std::vector<double> bspline_basis(const SplineGrid& grid, double x) {
  return scatter(grid, bspline_window(grid, x));
}

std::vector<double> bspline_basis_grad(const SplineGrid& grid, double x) {
  return scatter(grid, bspline_window_grad(grid, x));
}

KanLayerParams KanLayerParams::init(const SplineGrid& grid, int d_in, int d_out, Rng& rng) {
  if (d_in < 1 || d_out < 1) throw InvalidInputError("KanLayerParams: dimensions must be positive");
  KanLayerParams p;
  p.grid = grid;
  p.d_in = d_in;
  p.d_out = d_out;
  const double s = 0.1 / std::sqrt(static_cast<double>(d_in));
  p.coeffs = Mat::uniform(d_in, d_out * grid.basis_count(), -s, s, rng);
  return p;
}

void KanLayerParams::validate() const {
  if (coeffs.rows() != d_in || coeffs.cols() != d_out * grid.basis_count())
    throw InvalidInputError("KanLayerParams: coeffs shape does not match (d_in, d_out, K)");
  if (!coeffs.all_finite()) throw InvalidInputError("KanLayerParams: non-finite coefficients");
}

std::vector<double> kan_forward(const KanLayerParams& params, std::span<const double> x) {
  params.validate();
  if (static_cast<int>(x.size()) != params.d_in)
    throw InvalidInputError("kan_forward: input length does not match d_in");
  const int K = params.grid.basis_count();
  std::vector<double> out(static_cast<std::size_t>(params.d_out), 0.0);
  for (int i = 0; i < params.d_in; ++i) {
    const BasisWindow w = bspline_window(params.grid, x[static_cast<std::size_t>(i)]);
    const double* ci = params.coeffs.row_ptr(i);
    for (int j = 0; j < params.d_out; ++j) {
      const double* cj = ci + static_cast<std::size_t>(j) * K + w.first;
      double s = 0.0;
      for (std::size_t r = 0; r < w.values.size(); ++r) s += cj[r] * w.values[r];
      out[static_cast<std::size_t>(j)] += s;
    }
  }
  return out;
}

KanGradients kan_backward(const KanLayerParams& params, std::span<const double> x,
                          std::span<const double> upstream) {
  params.validate();
  if (static_cast<int>(x.size()) != params.d_in)
    throw InvalidInputError("kan_backward: input length does not match d_in");
  if (static_cast<int>(upstream.size()) != params.d_out)
    throw InvalidInputError("kan_backward: upstream length does not match d_out");
  const int K = params.grid.basis_count();
  KanGradients g;
  g.grad_coeffs = Mat::zeros(params.d_in, params.d_out * K);
  g.grad_x.assign(static_cast<std::size_t>(params.d_in), 0.0);
  for (int i = 0; i < params.d_in; ++i) {
    const double xi = x[static_cast<std::size_t>(i)];
    const BasisWindow b = bspline_window(params.grid, xi);
    const BasisWindow db = bspline_window_grad(params.grid, xi);
    const bool inside = xi >= params.grid.domain_lo && xi <= params.grid.domain_hi;
    const double* ci = params.coeffs.row_ptr(i);
    double* gi = g.grad_coeffs.row_ptr(i);
    double gx = 0.0;
    for (int j = 0; j < params.d_out; ++j) {
      const double uj = upstream[static_cast<std::size_t>(j)];
      double* gj = gi + static_cast<std::size_t>(j) * K + b.first;
      for (std::size_t r = 0; r < b.values.size(); ++r) gj[r] += uj * b.values[r];
      if (inside) {
        const double* cj = ci + static_cast<std::size_t>(j) * K + db.first;
        double s = 0.0;
        for (std::size_t r = 0; r < db.values.size(); ++r) s += cj[r] * db.values[r];
        gx += uj * s;
      }
    }
    g.grad_x[static_cast<std::size_t>(i)] = gx;
  }
  return g;
}

}  // namespace shrike::kan
