#include "shrike/sgdecoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "shrike/error.hpp"
#include "shrike/scenegraph.hpp"

namespace shrike::sgdecoder {

using ad::Tape;
using ad::Var;

Mat sinusoidal_encoding(int segments, int dim) {
  Mat pe(segments, dim);
  for (int t = 0; t < segments; ++t) {
    for (int i = 0; 2 * i < dim; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / dim);
      pe(t, 2 * i) = std::sin(t * freq);
      if (2 * i + 1 < dim) pe(t, 2 * i + 1) = std::cos(t * freq);
    }
  }
  return pe;
}

QueryBank QueryBank::init(int segments, int per_segment, int dim, std::uint64_t seed) {
  if (segments < 1 || per_segment < 1 || dim < 1)
    throw InvalidInputError("QueryBank: dimensions must be positive");
  QueryBank b;
  b.segments = segments;
  b.per_segment = per_segment;
  b.dim = dim;
  Rng rng(seed);
  b.queries = Mat::normal(segments * per_segment, dim, 0.0, 0.02, rng);
  b.positional = sinusoidal_encoding(segments, dim);
  return b;
}

Mat QueryBank::expanded_positional() const {
  Mat out(segments * per_segment, dim);
  for (int t = 0; t < segments; ++t)
    for (int l = 0; l < per_segment; ++l)
      for (int j = 0; j < dim; ++j) out(t * per_segment + l, j) = positional(t, j);
  return out;
}

DecoderLayerParams DecoderLayerParams::init(int dim, Rng& rng) {
  DecoderLayerParams p;
  p.self_attn = fusion::AttentionParams::init(dim, rng);
  p.cross_attn = fusion::AttentionParams::init(dim, rng);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(dim));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(4 * dim));
  p.ffn_w1 = Mat::uniform(dim, 4 * dim, -s1, s1, rng);
  p.ffn_b1 = Mat::zeros(1, 4 * dim);
  p.ffn_w2 = Mat::uniform(4 * dim, dim, -s2, s2, rng);
  p.ffn_b2 = Mat::zeros(1, dim);
  return p;
}

DecoderLayerParams DecoderLayerParams::zeros(int dim) {
  DecoderLayerParams p;
  p.self_attn = fusion::AttentionParams::zeros(dim);
  p.cross_attn = fusion::AttentionParams::zeros(dim);
  p.ffn_w1 = Mat::zeros(dim, 4 * dim);
  p.ffn_b1 = Mat::zeros(1, 4 * dim);
  p.ffn_w2 = Mat::zeros(4 * dim, dim);
  p.ffn_b2 = Mat::zeros(1, dim);
  return p;
}

DecoderParams DecoderParams::init(int dim, Rng& rng) {
  DecoderParams p;
  for (auto& layer : p.layers) layer = DecoderLayerParams::init(dim, rng);
  return p;
}

DecoderParams DecoderParams::zeros(int dim) {
  DecoderParams p;
  for (auto& layer : p.layers) layer = DecoderLayerParams::zeros(dim);
  return p;
}

PredictionHeadParams PredictionHeadParams::init(int dim, Rng& rng) {
  PredictionHeadParams p;
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  p.w1 = Mat::uniform(dim, dim, -s, s, rng);
  p.b1 = Mat::zeros(1, dim);
  p.w2 = Mat::uniform(dim, scenegraph::kLogitsWidth, -s, s, rng);
  p.b2 = Mat::zeros(1, scenegraph::kLogitsWidth);
  return p;
}

PredictionHeadParams PredictionHeadParams::zeros(int dim) {
  PredictionHeadParams p;
  p.w1 = Mat::zeros(dim, dim);
  p.b1 = Mat::zeros(1, dim);
  p.w2 = Mat::zeros(dim, scenegraph::kLogitsWidth);
  p.b2 = Mat::zeros(1, scenegraph::kLogitsWidth);
  return p;
}

DecoderLayerVars make_vars(Tape& t, const DecoderLayerParams& p, bool trainable) {
  return {fusion::make_vars(t, p.self_attn, trainable), fusion::make_vars(t, p.cross_attn, trainable),
          t.leaf(p.ffn_w1, trainable), t.leaf(p.ffn_b1, trainable), t.leaf(p.ffn_w2, trainable),
          t.leaf(p.ffn_b2, trainable)};
}

DecoderVars make_vars(Tape& t, const DecoderParams& p, bool trainable) {
  DecoderVars v;
  for (std::size_t i = 0; i < p.layers.size(); ++i) v.layers[i] = make_vars(t, p.layers[i], trainable);
  return v;
}

PredictionHeadVars make_vars(Tape& t, const PredictionHeadParams& p, bool trainable) {
  return {t.leaf(p.w1, trainable), t.leaf(p.b1, trainable), t.leaf(p.w2, trainable),
          t.leaf(p.b2, trainable)};
}

namespace {

Var feed_forward(Tape& t, Var x, const DecoderLayerVars& p) {
  Var h = ad::gelu(t, ad::add_rowvec(t, ad::matmul(t, x, p.ffn_w1), p.ffn_b1));
  return ad::add_rowvec(t, ad::matmul(t, h, p.ffn_w2), p.ffn_b2);
}

}  // namespace

Var decode_relations(Tape& t, Var queries_with_pe, Var f_av, const DecoderVars& params) {
  if (t.value(queries_with_pe).cols() != t.value(f_av).cols())
    throw InvalidInputError("decode_relations: query and feature widths differ");
  Var x = queries_with_pe;
  for (const DecoderLayerVars& layer : params.layers) {
    x = ad::add(t, x, fusion::attend(t, x, x, layer.self_attn));
    x = ad::add(t, x, fusion::attend(t, x, f_av, layer.cross_attn));
    x = ad::add(t, x, feed_forward(t, x, layer));
  }
  return x;
}

Var predict_triplets(Tape& t, Var f_rel, const PredictionHeadVars& head) {
  Var h = ad::gelu(t, ad::add_rowvec(t, ad::matmul(t, f_rel, head.w1), head.b1));
  return ad::add_rowvec(t, ad::matmul(t, h, head.w2), head.b2);
}

Mat decode_relations(const QueryBank& bank, const fusion::FeatureSequence& f_av,
                     const DecoderParams& params) {
  f_av.validate();
  if (f_av.data.rows() != bank.segments)
    throw InvalidInputError("decode_relations: F_av segment count differs from the query bank");
  Tape t;
  Var q = t.leaf(add(bank.queries, bank.expanded_positional()));
  Var out = decode_relations(t, q, t.leaf(f_av.data), make_vars(t, params));
  return t.value(out);
}

Mat predict_triplets(const Mat& f_rel, const PredictionHeadParams& head) {
  Tape t;
  Var out = predict_triplets(t, t.leaf(f_rel), make_vars(t, head));
  return t.value(out);
}

std::vector<int> topk_indices(const Mat& q_s, const Mat& f_rel_t, int top_k) {
  return select_topk(q_s, f_rel_t, top_k).indices;
}

TopkResult select_topk(const Mat& q_s, const Mat& f_rel_t, int top_k) {
  if (q_s.rows() != 1 || q_s.cols() != f_rel_t.cols())
    throw InvalidInputError("select_topk: q_s must be 1 x D matching the features");
  const int l = f_rel_t.rows();
  if (top_k < 1 || top_k > l) throw InvalidInputError("select_topk: top_k out of range");

  const int d = q_s.cols();
  std::vector<double> scores(static_cast<std::size_t>(l));
  double mx = -1e300;
  for (int i = 0; i < l; ++i) {
    double dot = 0.0;
    for (int j = 0; j < d; ++j) dot += q_s(0, j) * f_rel_t(i, j);
    scores[static_cast<std::size_t>(i)] = dot / std::sqrt(static_cast<double>(d));
    mx = std::max(mx, scores[static_cast<std::size_t>(i)]);
  }
  double z = 0.0;
  for (double& s : scores) {
    s = std::exp(s - mx);
    z += s;
  }
  for (double& s : scores) s /= z;

  std::vector<int> order(static_cast<std::size_t>(l));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });

  TopkResult r;
  r.weights = scores;
  r.indices.assign(order.begin(), order.begin() + top_k);
  r.features = Mat(top_k, f_rel_t.cols());
  for (int i = 0; i < top_k; ++i)
    for (int j = 0; j < f_rel_t.cols(); ++j) r.features(i, j) = f_rel_t(r.indices[static_cast<std::size_t>(i)], j);
  return r;
}

}  // namespace shrike::sgdecoder
