#include "shrike/fusion.hpp"

#include <cmath>
#include <vector>

#include "shrike/error.hpp"

namespace shrike::fusion {

using ad::Tape;
using ad::Var;

void FeatureSequence::validate() const {
  if (data.rows() < 1 || data.cols() < 1)
    throw InvalidInputError("FeatureSequence: empty matrix");
  if (tokens_per_segment < 1 || data.rows() % tokens_per_segment != 0)
    throw InvalidInputError("FeatureSequence: rows not a multiple of tokens_per_segment");
  if (!data.all_finite()) throw InvalidInputError("FeatureSequence: non-finite entries");
}

AttentionParams AttentionParams::init(int d, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionParams p;
  p.w_q = Mat::uniform(d, d, -s, s, rng);
  p.w_k = Mat::uniform(d, d, -s, s, rng);
  p.w_v = Mat::uniform(d, d, -s, s, rng);
  p.w_o = Mat::uniform(d, d, -s, s, rng);
  return p;
}

AttentionParams AttentionParams::zeros(int d) {
  return {Mat::zeros(d, d), Mat::zeros(d, d), Mat::zeros(d, d), Mat::zeros(d, d)};
}

AttentionParams AttentionParams::identity(int d) {
  return {Mat::identity(d), Mat::identity(d), Mat::identity(d), Mat::identity(d)};
}

void AttentionParams::validate() const {
  const int d = w_q.rows();
  for (const Mat* m : {&w_q, &w_k, &w_v, &w_o}) {
    if (m->rows() != d || m->cols() != d)
      throw InvalidInputError("AttentionParams: projections must all be DxD");
    if (!m->all_finite()) throw InvalidInputError("AttentionParams: non-finite entries");
  }
}

AttentionVars make_vars(Tape& t, const AttentionParams& p, bool trainable) {
  return {t.leaf(p.w_q, trainable), t.leaf(p.w_k, trainable), t.leaf(p.w_v, trainable),
          t.leaf(p.w_o, trainable)};
}

Var scaled_dot_attention(Tape& t, Var q, Var k, Var v) {
  const int d = t.value(q).cols();
  if (t.value(k).cols() != d || t.value(v).rows() != t.value(k).rows())
    throw InvalidInputError("scaled_dot_attention: dimension mismatch");
  Var scores = ad::scale(t, ad::matmul_nt(t, q, k), 1.0 / std::sqrt(static_cast<double>(d)));
  Var weights = ad::softmax_rows(t, scores);
  return ad::matmul(t, weights, v);
}

Var attend(Tape& t, Var q_in, Var kv_in, const AttentionVars& p) {
  Var q = ad::matmul(t, q_in, p.w_q);
  Var k = ad::matmul(t, kv_in, p.w_k);
  Var v = ad::matmul(t, kv_in, p.w_v);
  return ad::matmul(t, scaled_dot_attention(t, q, k, v), p.w_o);
}

Var self_attend_segments(Tape& t, Var packed, int tokens_per_segment, const AttentionVars& p) {
  const int rows = t.value(packed).rows();
  if (tokens_per_segment < 1 || rows % tokens_per_segment != 0)
    throw InvalidInputError("self_attend_segments: rows not a multiple of tokens_per_segment");
  const int segments = rows / tokens_per_segment;
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(segments));
  for (int s = 0; s < segments; ++s) {
    Var seg = ad::slice_rows(t, packed, s * tokens_per_segment, (s + 1) * tokens_per_segment);
    outs.push_back(attend(t, seg, seg, p));
  }
  return ad::concat_rows(t, outs);
}

Var cross_attend_segments(Tape& t, Var q, Var packed, int tokens_per_segment,
                          const AttentionVars& p) {
  const int segments = t.value(q).rows();
  if (t.value(packed).rows() != segments * tokens_per_segment)
    throw InvalidInputError("cross_attend_segments: packed rows != segments * tokens_per_segment");
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(segments));
  for (int s = 0; s < segments; ++s) {
    Var q_row = ad::slice_rows(t, q, s, s + 1);
    Var seg = ad::slice_rows(t, packed, s * tokens_per_segment, (s + 1) * tokens_per_segment);
    outs.push_back(attend(t, q_row, seg, p));
  }
  return ad::concat_rows(t, outs);
}

std::pair<Var, Var> fuse_av(Tape& t, Var f_v, Var f_a, const FuseAvVars& p) {
  Var v_enh = ad::add(t, ad::add(t, f_v, attend(t, f_v, f_v, p.sa_v)), attend(t, f_v, f_a, p.ca_va));
  Var a_enh = ad::add(t, ad::add(t, f_a, attend(t, f_a, f_a, p.sa_a)), attend(t, f_a, f_v, p.ca_av));
  return {v_enh, a_enh};
}

Var fuse_patch(Tape& t, Var f_v_enh, Var f_a_enh, Var f_p, int tokens_per_segment,
               const FusePatchVars& p) {
  const Var parts[] = {f_v_enh, f_a_enh};
  Var cat = ad::concat_cols(t, parts);             // T x 2D
  Var query = ad::matmul(t, cat, p.w_cat);         // T x D
  return cross_attend_segments(t, query, f_p, tokens_per_segment, p.attn);
}

std::pair<Var, Var> question_fusion(Tape& t, Var f_v, Var f_a, Var q_w,
                                    const QuestionFusionVars& p) {
  Var v_q = ad::add(t, ad::add(t, ad::add(t, f_v, attend(t, f_v, f_v, p.sa_v)),
                               attend(t, f_v, f_a, p.ca_va)),
                    attend(t, f_v, q_w, p.ca_vq));
  Var a_q = ad::add(t, ad::add(t, ad::add(t, f_a, attend(t, f_a, f_a, p.sa_a)),
                               attend(t, f_a, f_v, p.ca_av)),
                    attend(t, f_a, q_w, p.ca_aq));
  return {v_q, a_q};
}

std::pair<Var, Var> patch_align(Tape& t, Var v_q, Var a_q, Var f_p, int tokens_per_segment,
                                const PatchAlignVars& p) {
  Var f_p_enh = ad::add(t, f_p, self_attend_segments(t, f_p, tokens_per_segment, p.sa_p));
  Var p_v = cross_attend_segments(t, v_q, f_p_enh, tokens_per_segment, p.ca_pv);
  Var p_a = cross_attend_segments(t, a_q, f_p_enh, tokens_per_segment, p.ca_pa);
  return {p_v, p_a};
}

// ---- Plain-matrix entry points ----

Mat scaled_dot_attention(const Mat& queries, const Mat& keys, const Mat& values) {
  if (!queries.all_finite() || !keys.all_finite() || !values.all_finite())
    throw InvalidInputError("scaled_dot_attention: non-finite inputs");
  if (queries.cols() != keys.cols() || keys.rows() != values.rows())
    throw InvalidInputError("scaled_dot_attention: dimension mismatch");
  Tape t;
  Var out = scaled_dot_attention(t, t.leaf(queries), t.leaf(keys), t.leaf(values));
  return t.value(out);
}

FeatureSequence self_attend(const FeatureSequence& x, const AttentionParams& p) {
  x.validate();
  p.validate();
  Tape t;
  Var out = attend(t, t.leaf(x.data), t.leaf(x.data), make_vars(t, p));
  return {t.value(out), x.modality, x.tokens_per_segment};
}

FeatureSequence cross_attend(const FeatureSequence& q, const FeatureSequence& kv,
                             const AttentionParams& p) {
  q.validate();
  kv.validate();
  p.validate();
  Tape t;
  Var out = attend(t, t.leaf(q.data), t.leaf(kv.data), make_vars(t, p));
  return {t.value(out), q.modality, q.tokens_per_segment};
}

std::pair<FeatureSequence, FeatureSequence> fuse_av(const FeatureSequence& f_v,
                                                    const FeatureSequence& f_a,
                                                    const FuseAvParams& p) {
  f_v.validate();
  f_a.validate();
  Tape t;
  FuseAvVars vars{make_vars(t, p.sa_v), make_vars(t, p.ca_va), make_vars(t, p.sa_a),
                  make_vars(t, p.ca_av)};
  auto [v_enh, a_enh] = fuse_av(t, t.leaf(f_v.data), t.leaf(f_a.data), vars);
  return {{t.value(v_enh), Modality::visual, 1}, {t.value(a_enh), Modality::audio, 1}};
}

FeatureSequence fuse_patch(const FeatureSequence& f_v_enh, const FeatureSequence& f_a_enh,
                           const FeatureSequence& f_p, const FusePatchParams& p) {
  f_v_enh.validate();
  f_a_enh.validate();
  f_p.validate();
  Tape t;
  FusePatchVars vars{t.leaf(p.w_cat), make_vars(t, p.attn)};
  Var out = fuse_patch(t, t.leaf(f_v_enh.data), t.leaf(f_a_enh.data), t.leaf(f_p.data),
                       f_p.tokens_per_segment, vars);
  return {t.value(out), Modality::fused, 1};
}

std::pair<FeatureSequence, FeatureSequence> question_fusion(const FeatureSequence& f_v,
                                                            const FeatureSequence& f_a,
                                                            const Mat& q_w,
                                                            const QuestionFusionParams& p) {
  f_v.validate();
  f_a.validate();
  Tape t;
  QuestionFusionVars vars{make_vars(t, p.sa_v),  make_vars(t, p.ca_va), make_vars(t, p.ca_vq),
                          make_vars(t, p.sa_a),  make_vars(t, p.ca_av), make_vars(t, p.ca_aq)};
  auto [v_q, a_q] = question_fusion(t, t.leaf(f_v.data), t.leaf(f_a.data), t.leaf(q_w), vars);
  return {{t.value(v_q), Modality::visual, 1}, {t.value(a_q), Modality::audio, 1}};
}

std::pair<FeatureSequence, FeatureSequence> patch_align(const FeatureSequence& v_q,
                                                        const FeatureSequence& a_q,
                                                        const FeatureSequence& f_p,
                                                        const PatchAlignParams& p) {
  v_q.validate();
  a_q.validate();
  f_p.validate();
  Tape t;
  PatchAlignVars vars{make_vars(t, p.sa_p), make_vars(t, p.ca_pv), make_vars(t, p.ca_pa)};
  auto [p_v, p_a] = patch_align(t, t.leaf(v_q.data), t.leaf(a_q.data), t.leaf(f_p.data),
                                f_p.tokens_per_segment, vars);
  return {{t.value(p_v), Modality::visual, 1}, {t.value(p_a), Modality::audio, 1}};
}

}  // namespace shrike::fusion
