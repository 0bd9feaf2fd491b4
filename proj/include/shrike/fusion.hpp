#pragma once

#include <utility>

#include "shrike/ad.hpp"
#include "shrike/mat.hpp"
#include "shrike/rng.hpp"

namespace shrike::fusion {

enum class Modality { visual, audio, patch, fused };

// A T x D sequence of per-segment features. Patch streams pack their M
// tokens per segment into consecutive rows: data is (T*M) x D with
// tokens_per_segment = M.
struct FeatureSequence {
  Mat data;
  Modality modality = Modality::visual;
  int tokens_per_segment = 1;

  int segments() const { return data.rows() / tokens_per_segment; }
  void validate() const;
};

// Square projection matrices for one attention block, no biases.
struct AttentionParams {
  Mat w_q, w_k, w_v, w_o;

  static AttentionParams init(int d, Rng& rng);
  static AttentionParams zeros(int d);
  static AttentionParams identity(int d);
  void validate() const;
  int dim() const { return w_q.rows(); }
};

struct AttentionVars {
  ad::Var w_q, w_k, w_v, w_o;
};

AttentionVars make_vars(ad::Tape& t, const AttentionParams& p, bool trainable = false);

// ---- Tape-level building blocks ----

// softmax(q k^T / sqrt(D)) v, no projections.
ad::Var scaled_dot_attention(ad::Tape& t, ad::Var q, ad::Var k, ad::Var v);

// Full attention block: project q/k/v, attend, apply the output projection.
ad::Var attend(ad::Tape& t, ad::Var q_in, ad::Var kv_in, const AttentionVars& p);

inline ad::Var self_attend(ad::Tape& t, ad::Var x, const AttentionVars& p) {
  return attend(t, x, x, p);
}

// Per-segment self-attention over a packed (T*M) x D patch stream.
ad::Var self_attend_segments(ad::Tape& t, ad::Var packed, int tokens_per_segment,
                             const AttentionVars& p);

// Per-segment cross-attention: row i of q attends to segment i of the packed
// key/value stream. q is T x D, packed is (T*M) x D.
ad::Var cross_attend_segments(ad::Tape& t, ad::Var q, ad::Var packed, int tokens_per_segment,
                              const AttentionVars& p);

struct FuseAvVars {
  AttentionVars sa_v, ca_va, sa_a, ca_av;
};

// F'_v = F_v + SA(F_v) + CA(F_v | F_a) and symmetrically for audio.
std::pair<ad::Var, ad::Var> fuse_av(ad::Tape& t, ad::Var f_v, ad::Var f_a, const FuseAvVars& p);

struct FusePatchVars {
  ad::Var w_cat;  // 2D x D projection applied to Concat(F'_v, F'_a)
  AttentionVars attn;
};

// F_av = CA(proj(Concat(F'_v, F'_a)) | F_p), attending per segment.
ad::Var fuse_patch(ad::Tape& t, ad::Var f_v_enh, ad::Var f_a_enh, ad::Var f_p,
                   int tokens_per_segment, const FusePatchVars& p);

struct QuestionFusionVars {
  AttentionVars sa_v, ca_va, ca_vq, sa_a, ca_av, ca_aq;
};

// v_q = F_v + SA(F_v) + CA(F_v | F_a) + CA(F_v | q_w), symmetrically for audio.
std::pair<ad::Var, ad::Var> question_fusion(ad::Tape& t, ad::Var f_v, ad::Var f_a, ad::Var q_w,
                                            const QuestionFusionVars& p);

struct PatchAlignVars {
  AttentionVars sa_p, ca_pv, ca_pa;
};

// F'_p = F_p + SA(F_p) per segment; p_v = CA(v_q | F'_p), p_a = CA(a_q | F'_p).
std::pair<ad::Var, ad::Var> patch_align(ad::Tape& t, ad::Var v_q, ad::Var a_q, ad::Var f_p,
                                        int tokens_per_segment, const PatchAlignVars& p);

// ---- Plain-matrix entry points ----

Mat scaled_dot_attention(const Mat& queries, const Mat& keys, const Mat& values);
FeatureSequence self_attend(const FeatureSequence& x, const AttentionParams& p);
FeatureSequence cross_attend(const FeatureSequence& q, const FeatureSequence& kv,
                             const AttentionParams& p);

struct FuseAvParams {
  AttentionParams sa_v, ca_va, sa_a, ca_av;
};
std::pair<FeatureSequence, FeatureSequence> fuse_av(const FeatureSequence& f_v,
                                                    const FeatureSequence& f_a,
                                                    const FuseAvParams& p);

struct FusePatchParams {
  Mat w_cat;
  AttentionParams attn;
};
FeatureSequence fuse_patch(const FeatureSequence& f_v_enh, const FeatureSequence& f_a_enh,
                           const FeatureSequence& f_p, const FusePatchParams& p);

struct QuestionFusionParams {
  AttentionParams sa_v, ca_va, ca_vq, sa_a, ca_av, ca_aq;
};
std::pair<FeatureSequence, FeatureSequence> question_fusion(const FeatureSequence& f_v,
                                                            const FeatureSequence& f_a,
                                                            const Mat& q_w,
                                                            const QuestionFusionParams& p);

struct PatchAlignParams {
  AttentionParams sa_p, ca_pv, ca_pa;
};
std::pair<FeatureSequence, FeatureSequence> patch_align(const FeatureSequence& v_q,
                                                        const FeatureSequence& a_q,
                                                        const FeatureSequence& f_p,
                                                        const PatchAlignParams& p);

}  // namespace shrike::fusion
