#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "shrike/ad.hpp"
#include "shrike/fusion.hpp"
#include "shrike/mat.hpp"

namespace shrike::sgdecoder {

// Standard alternating sin/cos frequency ladder over the segment index.
Mat sinusoidal_encoding(int segments, int dim);

// Learnable relationship queries, L per segment, with fixed positional
// encodings broadcast over the L queries of each segment.
struct QueryBank {
  int segments = 0;   // T
  int per_segment = 0;  // L
  int dim = 0;        // D
  Mat queries;        // (T*L) x D
  Mat positional;     // T x D

  static QueryBank init(int segments, int per_segment, int dim, std::uint64_t seed);

  // Positional encodings expanded to one row per query, (T*L) x D.
  Mat expanded_positional() const;
};

struct DecoderLayerParams {
  fusion::AttentionParams self_attn, cross_attn;
  Mat ffn_w1, ffn_b1, ffn_w2, ffn_b2;  // D -> 4D -> D

  static DecoderLayerParams init(int dim, Rng& rng);
  static DecoderLayerParams zeros(int dim);
};

struct DecoderParams {
  std::array<DecoderLayerParams, 3> layers;

  static DecoderParams init(int dim, Rng& rng);
  static DecoderParams zeros(int dim);
};

struct PredictionHeadParams {
  Mat w1, b1;  // D -> D
  Mat w2, b2;  // D -> 57

  static PredictionHeadParams init(int dim, Rng& rng);
  static PredictionHeadParams zeros(int dim);
};

struct DecoderLayerVars {
  fusion::AttentionVars self_attn, cross_attn;
  ad::Var ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct DecoderVars {
  std::array<DecoderLayerVars, 3> layers;
};

struct PredictionHeadVars {
  ad::Var w1, b1, w2, b2;
};

DecoderLayerVars make_vars(ad::Tape& t, const DecoderLayerParams& p, bool trainable = false);
DecoderVars make_vars(ad::Tape& t, const DecoderParams& p, bool trainable = false);
PredictionHeadVars make_vars(ad::Tape& t, const PredictionHeadParams& p, bool trainable = false);

// Queries (with positional encodings added) pass through three layers of
// [self-attention over all T*L queries, cross-attention to F_av, feed-forward],
// each sublayer wrapped in a residual connection. Output is (T*L) x D.
ad::Var decode_relations(ad::Tape& t, ad::Var queries_with_pe, ad::Var f_av,
                         const DecoderVars& params);

// Per-query logits, (T*L) x 57, split 25/7/25 by the caller.
ad::Var predict_triplets(ad::Tape& t, ad::Var f_rel, const PredictionHeadVars& head);

// Plain entry points.
Mat decode_relations(const QueryBank& bank, const fusion::FeatureSequence& f_av,
                     const DecoderParams& params);
Mat predict_triplets(const Mat& f_rel, const PredictionHeadParams& head);

// Question-guided top-k selection over one segment's L relation features.
// Weights are softmax(q_s . F_rel_t^T / sqrt(D)); rows are returned in
// descending weight order, ties broken toward the lower index.
struct TopkResult {
  Mat features;               // top_k x D
  std::vector<int> indices;   // into 0..L-1
  std::vector<double> weights;  // all L weights, in row order
};

TopkResult select_topk(const Mat& q_s, const Mat& f_rel_t, int top_k);
std::vector<int> topk_indices(const Mat& q_s, const Mat& f_rel_t, int top_k);

}  // namespace shrike::sgdecoder
