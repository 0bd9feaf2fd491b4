#pragma once

#include <functional>
#include <span>
#include <vector>

#include "shrike/kan.hpp"
#include "shrike/mat.hpp"

namespace shrike::ad {

// Handle to a node on a Tape.
struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

// Reverse-mode tape over Mat values. Forward values are computed eagerly as
// ops are applied; backward() walks the recorded graph once. Gradients flow
// only into subgraphs reachable from a leaf created with requires_grad.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Var leaf(Mat value, bool requires_grad = false);
  Var make(Mat value, std::span<const Var> parents, BackwardFn backward);

  const Mat& value(Var v) const { return nodes_[static_cast<std::size_t>(v.idx)].value; }
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.idx)].requires_grad; }

  // Gradient of the last backward() root w.r.t. v; zeros if untouched.
  Mat& grad(Var v);

  // Accumulate g into v's gradient if v participates in differentiation.
  void accumulate(Var v, const Mat& g);

  void backward(Var root);
  void clear();
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<int> parents;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;

  Node& at(int i) { return nodes_[static_cast<std::size_t>(i)]; }
};

Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var matmul(Tape& t, Var a, Var b);
Var matmul_nt(Tape& t, Var a, Var b);          // a * b^T
Var add_rowvec(Tape& t, Var a, Var bias);      // bias is 1xC, broadcast over rows
Var softmax_rows(Tape& t, Var a);
Var gelu(Tape& t, Var a);
Var tanh_of(Tape& t, Var a);
Var sigmoid_of(Tape& t, Var a);
Var clamp_of(Tape& t, Var a, double lo, double hi);
Var concat_cols(Tape& t, std::span<const Var> parts);
Var concat_rows(Tape& t, std::span<const Var> parts);
Var slice_rows(Tape& t, Var a, int r0, int r1);
Var slice_cols(Tape& t, Var a, int c0, int c1);
Var select_rows(Tape& t, Var a, std::vector<int> rows);
Var mean_rows(Tape& t, Var a);                 // NxD -> 1xD

// Row-wise KAN layer: x is N x d_in, coeffs is d_in x (d_out*K); output N x d_out.
Var kan_apply(Tape& t, Var coeffs, Var x, const kan::SplineGrid& grid, int d_out);

// Temporal Gaussian weights: centers and widths are 1xE; output is ExT with
// w[i][t] = exp(-(tau_t - c_i)^2 / (2 w_i^2)) / max_t(...), tau_t = (t+0.5)/T.
// Each row's maximum is exactly 1.
Var gaussian_rows(Tape& t, Var centers, Var widths, int frames);

// Scale row i of w (ExT) by r[i] (r is 1xE).
Var colscale(Tape& t, Var w, Var r);

// Weighted multi-span cross entropy, summed into a 1x1 scalar:
// sum over spans of weight * (-log softmax(logits[row, col_lo:col_hi])[target]).
struct CeSpan {
  int row = 0;
  int col_lo = 0;
  int col_hi = 0;   // exclusive
  int target = 0;   // index within the span
  double weight = 1.0;
};
Var cross_entropy_spans(Tape& t, Var logits, std::vector<CeSpan> spans);

}  // namespace shrike::ad
