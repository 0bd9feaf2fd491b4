#include "shrike/ad.hpp"

#include <algorithm>
#include <cmath>

#include "shrike/error.hpp"

namespace shrike::ad {

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

Var Tape::leaf(Mat value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return {static_cast<int>(nodes_.size()) - 1};
}

Var Tape::make(Mat value, std::span<const Var> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents) {
    n.parents.push_back(p.idx);
    if (at(p.idx).requires_grad) n.requires_grad = true;
  }
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {static_cast<int>(nodes_.size()) - 1};
}

Mat& Tape::grad(Var v) {
  Node& n = at(v.idx);
  if (!n.has_grad) {
    n.grad = Mat::zeros(n.value.rows(), n.value.cols());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(Var v, const Mat& g) {
  Node& n = at(v.idx);
  if (!n.requires_grad) return;
  grad(v) += g;
}

void Tape::backward(Var root) {
  Node& r = at(root.idx);
  if (r.value.rows() != 1 || r.value.cols() != 1)
    throw InvalidInputError("backward: root must be a 1x1 scalar");
  grad(root)(0, 0) = 1.0;
  for (int i = root.idx; i >= 0; --i) {
    Node& n = at(i);
    if (!n.requires_grad || !n.has_grad || !n.backward) continue;
    n.backward(*this, i);
  }
}

void Tape::clear() { nodes_.clear(); }

namespace {

const Mat& val(Tape& t, Var v) { return t.value(v); }

}  // namespace

Var add(Tape& t, Var a, Var b) {
  if (!val(t, a).same_shape(val(t, b))) throw InvalidInputError("add: shape mismatch");
  Mat out = val(t, a);
  out += val(t, b);
  const Var parents[] = {a, b};
  return t.make(std::move(out), parents, [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(Tape& t, Var a, Var b) {
  if (!val(t, a).same_shape(val(t, b))) throw InvalidInputError("sub: shape mismatch");
  Mat out = val(t, a);
  const Mat& bv = val(t, b);
  for (int i = 0; i < out.rows(); ++i)
    for (int j = 0; j < out.cols(); ++j) out(i, j) -= bv(i, j);
  const Var parents[] = {a, b};
  return t.make(std::move(out), parents, [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    tp.accumulate(a, g);
    Mat neg = g;
    neg *= -1.0;
    tp.accumulate(b, neg);
  });
}

Var scale(Tape& t, Var a, double s) {
  Mat out = val(t, a);
  out *= s;
  const Var parents[] = {a};
  return t.make(std::move(out), parents, [a, s](Tape& tp, int self) {
    Mat g = tp.grad(Var{self});
    g *= s;
    tp.accumulate(a, g);
  });
}

Var matmul(Tape& t, Var a, Var b) {
  Mat out = shrike::matmul(val(t, a), val(t, b));
  const Var parents[] = {a, b};
  return t.make(std::move(out), parents, [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    if (tp.requires_grad(a)) {
      Mat ga = Mat::zeros(tp.value(a).rows(), tp.value(a).cols());
      matmul_nt_acc(g, tp.value(b), ga);  // g * b^T
      tp.accumulate(a, ga);
    }
    if (tp.requires_grad(b)) {
      Mat gb = Mat::zeros(tp.value(b).rows(), tp.value(b).cols());
      matmul_tn_acc(tp.value(a), g, gb);  // a^T * g
      tp.accumulate(b, gb);
    }
  });
}

Var matmul_nt(Tape& t, Var a, Var b) {
  Mat out = shrike::matmul_nt(val(t, a), val(t, b));
  const Var parents[] = {a, b};
  return t.make(std::move(out), parents, [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    if (tp.requires_grad(a)) {
      Mat ga = Mat::zeros(tp.value(a).rows(), tp.value(a).cols());
      matmul_acc(g, tp.value(b), ga);  // g * b
      tp.accumulate(a, ga);
    }
    if (tp.requires_grad(b)) {
      Mat gb = Mat::zeros(tp.value(b).rows(), tp.value(b).cols());
      matmul_tn_acc(g, tp.value(a), gb);  // g^T * a
      tp.accumulate(b, gb);
    }
  });
}

Var add_rowvec(Tape& t, Var a, Var bias) {
  const Mat& av = val(t, a);
  const Mat& bv = val(t, bias);
  if (bv.rows() != 1 || bv.cols() != av.cols())
    throw InvalidInputError("add_rowvec: bias must be 1 x cols(a)");
  Mat out = av;
  for (int i = 0; i < out.rows(); ++i)
    for (int j = 0; j < out.cols(); ++j) out(i, j) += bv(0, j);
  const Var parents[] = {a, bias};
  return t.make(std::move(out), parents, [a, bias](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    tp.accumulate(a, g);
    if (tp.requires_grad(bias)) {
      Mat gb(1, g.cols());
      for (int i = 0; i < g.rows(); ++i)
        for (int j = 0; j < g.cols(); ++j) gb(0, j) += g(i, j);
      tp.accumulate(bias, gb);
    }
  });
}

Var softmax_rows(Tape& t, Var a) {
  const Mat& av = val(t, a);
  Mat out(av.rows(), av.cols());
  for (int i = 0; i < av.rows(); ++i) {
    double mx = av(i, 0);
    for (int j = 1; j < av.cols(); ++j) mx = std::max(mx, av(i, j));
    double sum = 0.0;
    for (int j = 0; j < av.cols(); ++j) {
      out(i, j) = std::exp(av(i, j) - mx);
      sum += out(i, j);
    }
    for (int j = 0; j < av.cols(); ++j) out(i, j) /= sum;
  }
  const Var parents[] = {a};
  return t.make(std::move(out), parents, [a](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    const Mat& s = tp.value(Var{self});
    Mat ga(g.rows(), g.cols());
    for (int i = 0; i < g.rows(); ++i) {
      double dot = 0.0;
      for (int j = 0; j < g.cols(); ++j) dot += g(i, j) * s(i, j);
      for (int j = 0; j < g.cols(); ++j) ga(i, j) = s(i, j) * (g(i, j) - dot);
    }
    tp.accumulate(a, ga);
  });
}

Var gelu(Tape& t, Var a) {
  const Mat& av = val(t, a);
  Mat out(av.rows(), av.cols());
  for (int i = 0; i < av.rows(); ++i)
    for (int j = 0; j < av.cols(); ++j) {
      const double x = av(i, j);
      out(i, j) = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
  const Var parents[] = {a};
  return t.make(std::move(out), parents, [a](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    const Mat& av2 = tp.value(a);
    Mat ga(g.rows(), g.cols());
    for (int i = 0; i < g.rows(); ++i)
      for (int j = 0; j < g.cols(); ++j) {
        const double x = av2(i, j);
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        ga(i, j) = g(i, j) * (cdf + x * pdf);
      }
    tp.accumulate(a, ga);
  });
}

Var tanh_of(Tape& t, Var a) {
  const Mat& av = val(t, a);
  Mat out(av.rows(), av.cols());
  for (int i = 0; i < av.rows(); ++i)
    for (int j = 0; j < av.cols(); ++j) out(i, j) = std::tanh(av(i, j));
  const Var parents[] = {a};
  return t.make(std::move(out), parents, [a](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    const Mat& y = tp.value(Var{self});
    Mat ga(g.rows(), g.cols());
    for (int i = 0; i < g.rows(); ++i)
      for (int j = 0; j < g.cols(); ++j) ga(i, j) = g(i, j) * (1.0 - y(i, j) * y(i, j));
    tp.accumulate(a, ga);
  });
}

Var sigmoid_of(Tape& t, Var a) {
  const Mat& av = val(t, a);
  Mat out(av.rows(), av.cols());
  for (int i = 0; i < av.rows(); ++i)
    for (int j = 0; j < av.cols(); ++j) out(i, j) = 1.0 / (1.0 + std::exp(-av(i, j)));
  const Var parents[] = {a};
  return t.make(std::move(out), parents, [a](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    const Mat& y = tp.value(Var{self});
    Mat ga(g.rows(), g.cols());
    for (int i = 0; i < g.rows(); ++i)
      for (int j = 0; j < g.cols(); ++j) ga(i, j) = g(i, j) * y(i, j) * (1.0 - y(i, j));
    tp.accumulate(a, ga);
  });
}

Var clamp_of(Tape& t, Var a, double lo, double hi) {
  const Mat& av = val(t, a);
  Mat out(av.rows(), av.cols());
  for (int i = 0; i < av.rows(); ++i)
    for (int j = 0; j < av.cols(); ++j) out(i, j) = std::min(std::max(av(i, j), lo), hi);
  const Var parents[] = {a};
  return t.make(std::move(out), parents, [a, lo, hi](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    const Mat& av2 = tp.value(a);
    Mat ga(g.rows(), g.cols());
    for (int i = 0; i < g.rows(); ++i)
      for (int j = 0; j < g.cols(); ++j)
        ga(i, j) = (av2(i, j) >= lo && av2(i, j) <= hi) ? g(i, j) : 0.0;
    tp.accumulate(a, ga);
  });
}

Var concat_cols(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw InvalidInputError("concat_cols: no parts");
  const int rows = val(t, parts[0]).rows();
  int cols = 0;
  for (const Var& p : parts) {
    if (val(t, p).rows() != rows) throw InvalidInputError("concat_cols: row mismatch");
    cols += val(t, p).cols();
  }
  Mat out(rows, cols);
  int off = 0;
  for (const Var& p : parts) {
    const Mat& pv = val(t, p);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < pv.cols(); ++j) out(i, off + j) = pv(i, j);
    off += pv.cols();
  }
  std::vector<Var> owned(parts.begin(), parts.end());
  return t.make(std::move(out), parts, [owned](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    int off2 = 0;
    for (const Var& p : owned) {
      const Mat& pv = tp.value(p);
      if (tp.requires_grad(p)) {
        Mat gp(pv.rows(), pv.cols());
        for (int i = 0; i < pv.rows(); ++i)
          for (int j = 0; j < pv.cols(); ++j) gp(i, j) = g(i, off2 + j);
        tp.accumulate(p, gp);
      }
      off2 += pv.cols();
    }
  });
}

Var concat_rows(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw InvalidInputError("concat_rows: no parts");
  const int cols = val(t, parts[0]).cols();
  int rows = 0;
  for (const Var& p : parts) {
    if (val(t, p).cols() != cols) throw InvalidInputError("concat_rows: column mismatch");
    rows += val(t, p).rows();
  }
  Mat out(rows, cols);
  int off = 0;
  for (const Var& p : parts) {
    const Mat& pv = val(t, p);
    for (int i = 0; i < pv.rows(); ++i)
      for (int j = 0; j < cols; ++j) out(off + i, j) = pv(i, j);
    off += pv.rows();
  }
  std::vector<Var> owned(parts.begin(), parts.end());
  return t.make(std::move(out), parts, [owned](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    int off2 = 0;
    for (const Var& p : owned) {
      const Mat& pv = tp.value(p);
      if (tp.requires_grad(p)) {
        Mat gp(pv.rows(), pv.cols());
        for (int i = 0; i < pv.rows(); ++i)
          for (int j = 0; j < pv.cols(); ++j) gp(i, j) = g(off2 + i, j);
        tp.accumulate(p, gp);
      }
      off2 += pv.rows();
    }
  });
}

Var slice_rows(Tape& t, Var a, int r0, int r1) {
  const Mat& av = val(t, a);
  if (r0 < 0 || r1 > av.rows() || r0 >= r1) throw InvalidInputError("slice_rows: bad range");
  Mat out(r1 - r0, av.cols());
  for (int i = r0; i < r1; ++i)
    for (int j = 0; j < av.cols(); ++j) out(i - r0, j) = av(i, j);
  const Var parents[] = {a};
  return t.make(std::move(out), parents, [a, r0](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    if (!tp.requires_grad(a)) return;
    Mat& ga = tp.grad(a);
    for (int i = 0; i < g.rows(); ++i)
      for (int j = 0; j < g.cols(); ++j) ga(r0 + i, j) += g(i, j);
  });
}

Var slice_cols(Tape& t, Var a, int c0, int c1) {
  const Mat& av = val(t, a);
  if (c0 < 0 || c1 > av.cols() || c0 >= c1) throw InvalidInputError("slice_cols: bad range");
  Mat out(av.rows(), c1 - c0);
  for (int i = 0; i < av.rows(); ++i)
    for (int j = c0; j < c1; ++j) out(i, j - c0) = av(i, j);
  const Var parents[] = {a};
  return t.make(std::move(out), parents, [a, c0](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    if (!tp.requires_grad(a)) return;
    Mat& ga = tp.grad(a);
    for (int i = 0; i < g.rows(); ++i)
      for (int j = 0; j < g.cols(); ++j) ga(i, c0 + j) += g(i, j);
  });
}

Var select_rows(Tape& t, Var a, std::vector<int> rows) {
  const Mat& av = val(t, a);
  Mat out(static_cast<int>(rows.size()), av.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= av.rows()) throw InvalidInputError("select_rows: index out of range");
    for (int j = 0; j < av.cols(); ++j) out(static_cast<int>(i), j) = av(rows[i], j);
  }
  const Var parents[] = {a};
  return t.make(std::move(out), parents, [a, rows = std::move(rows)](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    if (!tp.requires_grad(a)) return;
    Mat& ga = tp.grad(a);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (int j = 0; j < g.cols(); ++j) ga(rows[i], j) += g(static_cast<int>(i), j);
  });
}

Var mean_rows(Tape& t, Var a) {
  const Mat& av = val(t, a);
  Mat out(1, av.cols());
  for (int i = 0; i < av.rows(); ++i)
    for (int j = 0; j < av.cols(); ++j) out(0, j) += av(i, j);
  const double inv = 1.0 / av.rows();
  for (int j = 0; j < av.cols(); ++j) out(0, j) *= inv;
  const Var parents[] = {a};
  return t.make(std::move(out), parents, [a, inv](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    if (!tp.requires_grad(a)) return;
    Mat& ga = tp.grad(a);
    for (int i = 0; i < ga.rows(); ++i)
      for (int j = 0; j < ga.cols(); ++j) ga(i, j) += g(0, j) * inv;
  });
}

Var kan_apply(Tape& t, Var coeffs, Var x, const kan::SplineGrid& grid, int d_out) {
  const Mat& cv = val(t, coeffs);
  const Mat& xv = val(t, x);
  const int K = grid.basis_count();
  const int d_in = xv.cols();
  if (cv.rows() != d_in || cv.cols() != d_out * K)
    throw InvalidInputError("kan_apply: coeffs shape does not match (d_in, d_out, K)");
  const int n = xv.rows();
  Mat out(n, d_out);
  for (int r = 0; r < n; ++r) {
    for (int i = 0; i < d_in; ++i) {
      const auto w = kan::bspline_window(grid, xv(r, i));
      const double* ci = cv.row_ptr(i);
      for (int j = 0; j < d_out; ++j) {
        const double* cj = ci + static_cast<std::size_t>(j) * K + w.first;
        double s = 0.0;
        for (std::size_t q = 0; q < w.values.size(); ++q) s += cj[q] * w.values[q];
        out(r, j) += s;
      }
    }
  }
  const Var parents[] = {coeffs, x};
  return t.make(std::move(out), parents, [coeffs, x, grid, d_out, K, d_in, n](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    const Mat& cv2 = tp.value(coeffs);
    const Mat& xv2 = tp.value(x);
    const bool want_c = tp.requires_grad(coeffs);
    const bool want_x = tp.requires_grad(x);
    Mat gc = want_c ? Mat::zeros(d_in, d_out * K) : Mat();
    Mat gx = want_x ? Mat::zeros(n, d_in) : Mat();
    for (int r = 0; r < n; ++r) {
      const double* gr = g.row_ptr(r);
      for (int i = 0; i < d_in; ++i) {
        const double xi = xv2(r, i);
        const auto w = kan::bspline_window(grid, xi);
        if (want_c) {
          double* gci = gc.row_ptr(i);
          for (int j = 0; j < d_out; ++j) {
            double* gcj = gci + static_cast<std::size_t>(j) * K + w.first;
            for (std::size_t q = 0; q < w.values.size(); ++q) gcj[q] += gr[j] * w.values[q];
          }
        }
        if (want_x && xi >= grid.domain_lo && xi <= grid.domain_hi) {
          const auto dw = kan::bspline_window_grad(grid, xi);
          const double* ci = cv2.row_ptr(i);
          double acc = 0.0;
          for (int j = 0; j < d_out; ++j) {
            const double* cj = ci + static_cast<std::size_t>(j) * K + dw.first;
            double s = 0.0;
            for (std::size_t q = 0; q < dw.values.size(); ++q) s += cj[q] * dw.values[q];
            acc += gr[j] * s;
          }
          gx(r, i) = acc;
        }
      }
    }
    if (want_c) tp.accumulate(coeffs, gc);
    if (want_x) tp.accumulate(x, gx);
  });
}

Var gaussian_rows(Tape& t, Var centers, Var widths, int frames) {
  const Mat& cv = val(t, centers);
  const Mat& wv = val(t, widths);
  if (cv.rows() != 1 || wv.rows() != 1 || cv.cols() != wv.cols())
    throw InvalidInputError("gaussian_rows: centers and widths must both be 1xE");
  const int e = cv.cols();
  Mat out(e, frames);
  std::vector<int> arg(static_cast<std::size_t>(e), 0);
  for (int i = 0; i < e; ++i) {
    const double c = cv(0, i);
    const double s = wv(0, i);
    double best = -1e300;
    for (int f = 0; f < frames; ++f) {
      const double tau = (f + 0.5) / frames;
      const double beta = -(tau - c) * (tau - c) / (2.0 * s * s);
      out(i, f) = beta;
      if (beta > best) {
        best = beta;
        arg[static_cast<std::size_t>(i)] = f;
      }
    }
    for (int f = 0; f < frames; ++f) out(i, f) = std::exp(out(i, f) - best);
  }
  const Var parents[] = {centers, widths};
  return t.make(std::move(out), parents,
                [centers, widths, frames, e, arg = std::move(arg)](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    const Mat& w = tp.value(Var{self});
    const Mat& cv2 = tp.value(centers);
    const Mat& wv2 = tp.value(widths);
    Mat gc(1, e), gw(1, e);
    for (int i = 0; i < e; ++i) {
      const double c = cv2(0, i);
      const double s = wv2(0, i);
      const double tau_star = (arg[static_cast<std::size_t>(i)] + 0.5) / frames;
      const double dbs_dc = (tau_star - c) / (s * s);
      const double dbs_dw = (tau_star - c) * (tau_star - c) / (s * s * s);
      double acc_c = 0.0, acc_w = 0.0;
      for (int f = 0; f < frames; ++f) {
        const double tau = (f + 0.5) / frames;
        const double db_dc = (tau - c) / (s * s);
        const double db_dw = (tau - c) * (tau - c) / (s * s * s);
        acc_c += g(i, f) * w(i, f) * (db_dc - dbs_dc);
        acc_w += g(i, f) * w(i, f) * (db_dw - dbs_dw);
      }
      gc(0, i) = acc_c;
      gw(0, i) = acc_w;
    }
    tp.accumulate(centers, gc);
    tp.accumulate(widths, gw);
  });
}

Var colscale(Tape& t, Var w, Var r) {
  const Mat& wv = val(t, w);
  const Mat& rv = val(t, r);
  if (rv.rows() != 1 || rv.cols() != wv.rows())
    throw InvalidInputError("colscale: r must be 1 x rows(w)");
  Mat out = wv;
  for (int i = 0; i < out.rows(); ++i) {
    const double ri = rv(0, i);
    for (int j = 0; j < out.cols(); ++j) out(i, j) *= ri;
  }
  const Var parents[] = {w, r};
  return t.make(std::move(out), parents, [w, r](Tape& tp, int self) {
    const Mat& g = tp.grad(Var{self});
    const Mat& wv2 = tp.value(w);
    const Mat& rv2 = tp.value(r);
    if (tp.requires_grad(w)) {
      Mat gw(g.rows(), g.cols());
      for (int i = 0; i < g.rows(); ++i)
        for (int j = 0; j < g.cols(); ++j) gw(i, j) = g(i, j) * rv2(0, i);
      tp.accumulate(w, gw);
    }
    if (tp.requires_grad(r)) {
      Mat gr(1, g.rows());
      for (int i = 0; i < g.rows(); ++i) {
        double s = 0.0;
        for (int j = 0; j < g.cols(); ++j) s += g(i, j) * wv2(i, j);
        gr(0, i) = s;
      }
      tp.accumulate(r, gr);
    }
  });
}

Var cross_entropy_spans(Tape& t, Var logits, std::vector<CeSpan> spans) {
  const Mat& lv = val(t, logits);
  double total = 0.0;
  for (const CeSpan& s : spans) {
    if (s.row < 0 || s.row >= lv.rows() || s.col_lo < 0 || s.col_hi > lv.cols() ||
        s.col_lo >= s.col_hi || s.target < 0 || s.target >= s.col_hi - s.col_lo)
      throw InvalidInputError("cross_entropy_spans: bad span");
    double mx = lv(s.row, s.col_lo);
    for (int j = s.col_lo + 1; j < s.col_hi; ++j) mx = std::max(mx, lv(s.row, j));
    double sum = 0.0;
    for (int j = s.col_lo; j < s.col_hi; ++j) sum += std::exp(lv(s.row, j) - mx);
    const double log_z = mx + std::log(sum);
    total += s.weight * (log_z - lv(s.row, s.col_lo + s.target));
  }
  Mat out(1, 1);
  out(0, 0) = total;
  const Var parents[] = {logits};
  return t.make(std::move(out), parents, [logits, spans = std::move(spans)](Tape& tp, int self) {
    const double g = tp.grad(Var{self})(0, 0);
    if (!tp.requires_grad(logits)) return;
    const Mat& lv2 = tp.value(logits);
    Mat& gl = tp.grad(logits);
    for (const CeSpan& s : spans) {
      double mx = lv2(s.row, s.col_lo);
      for (int j = s.col_lo + 1; j < s.col_hi; ++j) mx = std::max(mx, lv2(s.row, j));
      double sum = 0.0;
      for (int j = s.col_lo; j < s.col_hi; ++j) sum += std::exp(lv2(s.row, j) - mx);
      for (int j = s.col_lo; j < s.col_hi; ++j) {
        const double p = std::exp(lv2(s.row, j) - mx) / sum;
        const double onehot = (j - s.col_lo == s.target) ? 1.0 : 0.0;
        gl(s.row, j) += g * s.weight * (p - onehot);
      }
    }
  });
}

}  // namespace shrike::ad
