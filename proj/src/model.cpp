#include "shrike/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>

#include <json.hpp>

#include "shrike/error.hpp"
#include "shrike/fusion.hpp"
#include "shrike/sgdecoder.hpp"
#include "shrike/temporal_moe.hpp"

namespace shrike::model {

using ad::Tape;
using ad::Var;
using nlohmann::json;

void ModelConfig::validate() const {
  if (segments < 1 || dim < 1 || patch_tokens < 1 || question_tokens < 1 ||
      queries_per_segment < 1 || experts < 1 || num_answers < 2)
    throw InvalidInputError("ModelConfig: all sizes must be positive");
  if (top_k < 1 || top_k > queries_per_segment)
    throw InvalidInputError("ModelConfig: top_k must lie in [1, L]");
  grid();  // validates the spline settings
}

std::string ModelConfig::to_json() const {
  json j;
  j["segments"] = segments;
  j["dim"] = dim;
  j["patch_tokens"] = patch_tokens;
  j["question_tokens"] = question_tokens;
  j["queries_per_segment"] = queries_per_segment;
  j["experts"] = experts;
  j["top_k"] = top_k;
  j["spline_degree"] = spline_degree;
  j["spline_intervals"] = spline_intervals;
  j["spline_lo"] = spline_lo;
  j["spline_hi"] = spline_hi;
  j["num_answers"] = num_answers;
  return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("config is not valid JSON: ") + e.what());
  }
  ModelConfig c;
  auto load = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  load("segments", c.segments);
  load("dim", c.dim);
  load("patch_tokens", c.patch_tokens);
  load("question_tokens", c.question_tokens);
  load("queries_per_segment", c.queries_per_segment);
  load("experts", c.experts);
  load("top_k", c.top_k);
  load("spline_degree", c.spline_degree);
  load("spline_intervals", c.spline_intervals);
  load("spline_lo", c.spline_lo);
  load("spline_hi", c.spline_hi);
  load("num_answers", c.num_answers);
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  if (stage1_epochs < 1 || stage2_epochs < 1 || stage1_lr_period < 1 || stage2_lr_period < 1 ||
      batch_size < 1 || base_lr <= 0.0)
    throw InvalidInputError("TrainConfig: all values must be positive");
}

std::string TrainConfig::to_json() const {
  json j;
  j["stage1_epochs"] = stage1_epochs;
  j["stage1_lr_period"] = stage1_lr_period;
  j["stage2_epochs"] = stage2_epochs;
  j["stage2_lr_period"] = stage2_lr_period;
  j["base_lr"] = base_lr;
  j["batch_size"] = batch_size;
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("train config is not valid JSON: ") + e.what());
  }
  TrainConfig c;
  auto load = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  load("stage1_epochs", c.stage1_epochs);
  load("stage1_lr_period", c.stage1_lr_period);
  load("stage2_epochs", c.stage2_epochs);
  load("stage2_lr_period", c.stage2_lr_period);
  load("base_lr", c.base_lr);
  load("batch_size", c.batch_size);
  c.validate();
  return c;
}

double lr_at(double base_lr, int epoch, int period) {
  return base_lr * std::pow(0.1, static_cast<double>(epoch / period));
}

Mat& ModelParams::at(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw StateError("unknown parameter group: " + name);
  return groups_[it->second].value;
}

const Mat& ModelParams::at(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw StateError("unknown parameter group: " + name);
  return groups_[it->second].value;
}

bool ModelParams::has(const std::string& name) const { return index_.count(name) > 0; }

void ModelParams::add(std::string name, Mat value) {
  if (index_.count(name)) throw StateError("duplicate parameter group: " + name);
  index_.emplace(name, groups_.size());
  groups_.push_back(ParamGroup{std::move(name), std::move(value), true});
}

void ModelParams::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& g : groups_)
    if (g.name.rfind(prefix, 0) == 0) g.trainable = trainable;
}

void ModelParams::adopt(const ModelParams& source, const std::string& prefix) {
  for (auto& g : groups_) {
    if (g.name.rfind(prefix, 0) != 0) continue;
    if (!source.has(g.name))
      throw StateError("missing parameter group '" + g.name + "' in source parameters");
    const Mat& src = source.at(g.name);
    if (!g.value.same_shape(src))
      throw StateError("parameter group '" + g.name + "' has mismatched shape in source");
    g.value = src;
  }
}

namespace {

void add_attention(ModelParams& p, const std::string& prefix, int dim, Rng& rng) {
  auto a = fusion::AttentionParams::init(dim, rng);
  p.add(prefix + ".wq", std::move(a.w_q));
  p.add(prefix + ".wk", std::move(a.w_k));
  p.add(prefix + ".wv", std::move(a.w_v));
  p.add(prefix + ".wo", std::move(a.w_o));
}

fusion::AttentionVars attention_vars(const Binding& b, const std::string& prefix) {
  return {b[prefix + ".wq"], b[prefix + ".wk"], b[prefix + ".wv"], b[prefix + ".wo"]};
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config = config;
  Rng rng(Rng::mix(seed, 0x53485249));  // "SHRI"
  const int d = config.dim;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));

  // Stage-1 scene-graph branch.
  for (const char* name : {"sg.fuse.sa_v", "sg.fuse.ca_va", "sg.fuse.sa_a", "sg.fuse.ca_av"})
    add_attention(p, name, d, rng);
  p.add("sg.patch.w_cat", Mat::uniform(2 * d, d, -s / 2, s / 2, rng));
  add_attention(p, "sg.patch.attn", d, rng);
  {
    Rng qrng(rng.next_u64());
    p.add("sg.queries",
          Mat::normal(config.segments * config.queries_per_segment, d, 0.0, 0.02, qrng));
  }
  for (int l = 0; l < 3; ++l) {
    const std::string lp = "sg.dec." + std::to_string(l);
    auto layer = sgdecoder::DecoderLayerParams::init(d, rng);
    p.add(lp + ".sa.wq", std::move(layer.self_attn.w_q));
    p.add(lp + ".sa.wk", std::move(layer.self_attn.w_k));
    p.add(lp + ".sa.wv", std::move(layer.self_attn.w_v));
    p.add(lp + ".sa.wo", std::move(layer.self_attn.w_o));
    p.add(lp + ".ca.wq", std::move(layer.cross_attn.w_q));
    p.add(lp + ".ca.wk", std::move(layer.cross_attn.w_k));
    p.add(lp + ".ca.wv", std::move(layer.cross_attn.w_v));
    p.add(lp + ".ca.wo", std::move(layer.cross_attn.w_o));
    p.add(lp + ".ffn.w1", std::move(layer.ffn_w1));
    p.add(lp + ".ffn.b1", std::move(layer.ffn_b1));
    p.add(lp + ".ffn.w2", std::move(layer.ffn_w2));
    p.add(lp + ".ffn.b2", std::move(layer.ffn_b2));
  }
  {
    auto head = sgdecoder::PredictionHeadParams::init(d, rng);
    p.add("sg.head.w1", std::move(head.w1));
    p.add("sg.head.b1", std::move(head.b1));
    p.add("sg.head.w2", std::move(head.w2));
    p.add("sg.head.b2", std::move(head.b2));
  }

  // Stage-2 question branch.
  for (const char* name : {"qa.fuse.sa_v", "qa.fuse.ca_va", "qa.fuse.ca_vq", "qa.fuse.sa_a",
                           "qa.fuse.ca_av", "qa.fuse.ca_aq"})
    add_attention(p, name, d, rng);
  for (const char* name : {"qa.align.sa_p", "qa.align.ca_pv", "qa.align.ca_pa"})
    add_attention(p, name, d, rng);

  const int e = config.experts;
  for (const char* fam : {"vis", "aud"}) {
    const std::string fp = std::string("qa.moe.") + fam;
    auto gen = temporal_moe::GeneratorParams::init(d, e, rng);
    add_attention(p, fp + ".gen.attn", d, rng);
    p.add(fp + ".gen.fc_w", std::move(gen.fc_w));
    p.add(fp + ".gen.fc_b", std::move(gen.fc_b));
    auto router = temporal_moe::RouterParams::init(d, e, rng);
    p.add(fp + ".router.w", std::move(router.w));
    p.add(fp + ".router.b", std::move(router.b));
  }
  const auto grid = config.grid();
  for (const char* stream : {"a", "pv", "pa"}) {
    for (int i = 0; i < e; ++i) {
      auto layer = kan::KanLayerParams::init(grid, d, d, rng);
      p.add("qa.moe.expert." + std::string(stream) + "." + std::to_string(i) + ".coeffs",
            std::move(layer.coeffs));
    }
  }
  const double sc = 1.0 / std::sqrt(static_cast<double>(4 * d));
  p.add("qa.cls.w", Mat::uniform(4 * d, config.num_answers, -sc, sc, rng));
  p.add("qa.cls.b", Mat::zeros(1, config.num_answers));
  return p;
}

Var Binding::operator[](const std::string& name) const {
  const auto it = vars.find(name);
  if (it == vars.end()) throw StateError("unbound parameter group: " + name);
  return it->second;
}

Binding bind(Tape& t, const ModelParams& params, std::optional<bool> trainable_override) {
  Binding b;
  for (const auto& g : params.groups()) {
    const bool trainable = trainable_override.value_or(g.trainable);
    b.vars.emplace(g.name, t.leaf(g.value, trainable));
  }
  return b;
}

namespace {

void check_instance_shapes(const ModelConfig& cfg, const Instance& inst) {
  if (inst.f_v.rows() != cfg.segments || inst.f_v.cols() != cfg.dim)
    throw InvalidInputError("instance F_v shape does not match the config");
  if (inst.f_a.rows() != cfg.segments || inst.f_a.cols() != cfg.dim)
    throw InvalidInputError("instance F_a shape does not match the config");
  if (inst.f_p.rows() != cfg.segments * cfg.patch_tokens || inst.f_p.cols() != cfg.dim)
    throw InvalidInputError("instance F_p shape does not match the config");
}

Var queries_with_pe(Tape& t, const Binding& b, const ModelConfig& cfg) {
  const Mat pe = sgdecoder::sinusoidal_encoding(cfg.segments, cfg.dim);
  Mat expanded(cfg.segments * cfg.queries_per_segment, cfg.dim);
  for (int s = 0; s < cfg.segments; ++s)
    for (int l = 0; l < cfg.queries_per_segment; ++l)
      for (int j = 0; j < cfg.dim; ++j) expanded(s * cfg.queries_per_segment + l, j) = pe(s, j);
  return ad::add(t, b["sg.queries"], t.leaf(std::move(expanded)));
}

sgdecoder::DecoderVars decoder_vars(const Binding& b) {
  sgdecoder::DecoderVars v;
  for (int l = 0; l < 3; ++l) {
    const std::string lp = "sg.dec." + std::to_string(l);
    v.layers[static_cast<std::size_t>(l)] = sgdecoder::DecoderLayerVars{
        attention_vars(b, lp + ".sa"), attention_vars(b, lp + ".ca"),
        b[lp + ".ffn.w1"], b[lp + ".ffn.b1"], b[lp + ".ffn.w2"], b[lp + ".ffn.b2"]};
  }
  return v;
}

// Frozen scene-graph branch up to the relation features.
Var relation_features_var(Tape& t, const Binding& b, const ModelConfig& cfg, Var f_v, Var f_a,
                          Var f_p) {
  fusion::FuseAvVars fuse{attention_vars(b, "sg.fuse.sa_v"), attention_vars(b, "sg.fuse.ca_va"),
                          attention_vars(b, "sg.fuse.sa_a"), attention_vars(b, "sg.fuse.ca_av")};
  auto [v_enh, a_enh] = fusion::fuse_av(t, f_v, f_a, fuse);
  fusion::FusePatchVars patch{b["sg.patch.w_cat"], attention_vars(b, "sg.patch.attn")};
  Var f_av = fusion::fuse_patch(t, v_enh, a_enh, f_p, cfg.patch_tokens, patch);
  return sgdecoder::decode_relations(t, queries_with_pe(t, b, cfg), f_av, decoder_vars(b));
}

Var head_logits(Tape& t, const Binding& b, Var f_rel) {
  sgdecoder::PredictionHeadVars head{b["sg.head.w1"], b["sg.head.b1"], b["sg.head.w2"],
                                     b["sg.head.b2"]};
  return sgdecoder::predict_triplets(t, f_rel, head);
}

}  // namespace

Var forward_stage1(Tape& t, const Binding& b, const ModelConfig& cfg, Var f_v, Var f_a, Var f_p) {
  return head_logits(t, b, relation_features_var(t, b, cfg, f_v, f_a, f_p));
}

Stage2Outputs forward_stage2(Tape& t, const Binding& b, const ModelConfig& cfg,
                             const Instance& inst, const Mat* cached_f_rel,
                             const AblationSpec& ablation) {
  check_instance_shapes(cfg, inst);
  Var f_v = t.leaf(inst.f_v);
  Var f_a = t.leaf(inst.f_a);
  Var f_p = t.leaf(inst.f_p);
  Var q_s = t.leaf(inst.q_s);
  Var q_w = t.leaf(inst.q_w);

  // Question-conditioned fusion and patch alignment.
  fusion::QuestionFusionVars qf{attention_vars(b, "qa.fuse.sa_v"), attention_vars(b, "qa.fuse.ca_va"),
                                attention_vars(b, "qa.fuse.ca_vq"), attention_vars(b, "qa.fuse.sa_a"),
                                attention_vars(b, "qa.fuse.ca_av"), attention_vars(b, "qa.fuse.ca_aq")};
  auto [v_q, a_q] = fusion::question_fusion(t, f_v, f_a, q_w, qf);
  fusion::PatchAlignVars align{attention_vars(b, "qa.align.sa_p"), attention_vars(b, "qa.align.ca_pv"),
                               attention_vars(b, "qa.align.ca_pa")};
  auto [p_v, p_a] = fusion::patch_align(t, v_q, a_q, f_p, cfg.patch_tokens, align);

  // Frozen scene-graph branch.
  Var f_rel = cached_f_rel ? t.leaf(*cached_f_rel)
                           : relation_features_var(t, b, cfg, f_v, f_a, f_p);

  // Question-guided top-k triplet selection and the relation summary.
  const Mat& f_rel_v = t.value(f_rel);
  const int l = cfg.queries_per_segment;
  Stage2Outputs out;
  std::vector<int> selected;
  selected.reserve(static_cast<std::size_t>(cfg.segments * cfg.top_k));
  for (int s = 0; s < cfg.segments; ++s) {
    Mat f_rel_t(l, cfg.dim);
    for (int i = 0; i < l; ++i)
      for (int j = 0; j < cfg.dim; ++j) f_rel_t(i, j) = f_rel_v(s * l + i, j);
    auto top = sgdecoder::select_topk(inst.q_s, f_rel_t, cfg.top_k);
    out.topk_indices.push_back(top.indices);
    for (int idx : top.indices) selected.push_back(s * l + idx);
  }
  Var summary = ad::mean_rows(t, ad::select_rows(t, f_rel, selected));
  if (ablation.zero_relation_summary) summary = t.leaf(Mat::zeros(1, cfg.dim));
  out.relation_summary = summary;

  // Temporal MoE over the three streams.
  const int e = cfg.experts;
  temporal_moe::GeneratorVars gen_v{attention_vars(b, "qa.moe.vis.gen.attn"),
                                    b["qa.moe.vis.gen.fc_w"], b["qa.moe.vis.gen.fc_b"]};
  temporal_moe::GeneratorVars gen_a{attention_vars(b, "qa.moe.aud.gen.attn"),
                                    b["qa.moe.aud.gen.fc_w"], b["qa.moe.aud.gen.fc_b"]};
  temporal_moe::RouterVars router_v{b["qa.moe.vis.router.w"], b["qa.moe.vis.router.b"]};
  temporal_moe::RouterVars router_a{b["qa.moe.aud.router.w"], b["qa.moe.aud.router.b"]};

  Var vq_att = temporal_moe::attend_question(t, q_s, v_q, gen_v);
  Var aq_att = temporal_moe::attend_question(t, q_s, a_q, gen_a);
  auto gauss_v = temporal_moe::generate_gaussians_from(t, vq_att, gen_v, e);
  auto gauss_a = temporal_moe::generate_gaussians_from(t, aq_att, gen_a, e);
  Var w_v = temporal_moe::gaussian_weights(t, gauss_v, cfg.segments);
  Var w_a = temporal_moe::gaussian_weights(t, gauss_a, cfg.segments);
  if (ablation.flat_gaussians) {
    w_v = t.leaf(Mat::filled(e, cfg.segments, 1.0));
    w_a = t.leaf(Mat::filled(e, cfg.segments, 1.0));
  }
  Var r_v = temporal_moe::route(t, vq_att, router_v);
  Var r_a = temporal_moe::route(t, aq_att, router_a);
  out.gaussian_visual = t.value(w_v);
  out.gaussian_audio = t.value(w_a);
  out.routes_visual = t.value(r_v);
  out.routes_audio = t.value(r_a);

  // Patch streams are residualized with v_q before the experts.
  Var p_v_res = ad::add(t, v_q, p_v);
  Var p_a_res = ad::add(t, v_q, p_a);

  const auto grid = cfg.grid();
  auto experts_of = [&](const char* stream) {
    std::vector<Var> coeffs;
    coeffs.reserve(static_cast<std::size_t>(e));
    for (int i = 0; i < e; ++i)
      coeffs.push_back(b["qa.moe.expert." + std::string(stream) + "." + std::to_string(i) +
                         ".coeffs"]);
    return coeffs;
  };
  const auto experts_a = experts_of("a");
  const auto experts_pv = experts_of("pv");
  const auto experts_pa = experts_of("pa");
  Var agg_a = temporal_moe::aggregate_experts(t, a_q, w_a, r_a, experts_a, grid, cfg.dim);
  Var agg_pv = temporal_moe::aggregate_experts(t, p_v_res, w_v, r_v, experts_pv, grid, cfg.dim);
  Var agg_pa = temporal_moe::aggregate_experts(t, p_a_res, w_v, r_v, experts_pa, grid, cfg.dim);

  const Var parts[] = {agg_a, agg_pa, agg_pv, summary};
  Var cls_in = ad::concat_cols(t, parts);
  out.logits = ad::add_rowvec(t, ad::matmul(t, cls_in, b["qa.cls.w"]), b["qa.cls.b"]);
  return out;
}

Mat stage1_logits(const ModelParams& params, const Instance& inst) {
  check_instance_shapes(params.config, inst);
  Tape t;
  Binding b = bind(t, params, false);
  Var logits = forward_stage1(t, b, params.config, t.leaf(inst.f_v), t.leaf(inst.f_a),
                              t.leaf(inst.f_p));
  return t.value(logits);
}

Mat stage2_logits(const ModelParams& params, const Instance& inst, const Mat* cached_f_rel,
                  const AblationSpec& ablation) {
  Tape t;
  Binding b = bind(t, params, false);
  return t.value(forward_stage2(t, b, params.config, inst, cached_f_rel, ablation).logits);
}

Mat relation_features(const ModelParams& params, const Instance& inst) {
  check_instance_shapes(params.config, inst);
  Tape t;
  Binding b = bind(t, params, false);
  Var f_rel = relation_features_var(t, b, params.config, t.leaf(inst.f_v), t.leaf(inst.f_a),
                                    t.leaf(inst.f_p));
  return t.value(f_rel);
}

std::vector<Mat> relation_cache(const Dataset& dataset, const ModelParams& params) {
  std::vector<Mat> cache;
  cache.reserve(dataset.size());
  for (const Instance& inst : dataset) cache.push_back(relation_features(params, inst));
  return cache;
}

double task_loss(const Mat& logits, int answer_index) {
  if (logits.rows() != 1) throw InvalidInputError("task_loss: logits must be a single row");
  if (answer_index < 0 || answer_index >= logits.cols())
    throw InvalidInputError("task_loss: answer index out of range");
  Tape t;
  return t.value(task_loss_var(t, t.leaf(logits), answer_index))(0, 0);
}

Var task_loss_var(Tape& t, Var logits, int answer_index) {
  const Mat& lv = t.value(logits);
  return ad::cross_entropy_spans(t, logits, {{0, 0, lv.cols(), answer_index, 1.0}});
}

Var rel_loss_var(Tape& t, Var logits, const ModelConfig& cfg,
                 const std::vector<scenegraph::SegmentGraph>& gt) {
  const Mat& lv = t.value(logits);
  const int l = cfg.queries_per_segment;
  if (static_cast<int>(gt.size()) != cfg.segments)
    throw InvalidInputError("rel_loss: segment count mismatch");
  if (lv.rows() != cfg.segments * l || lv.cols() != scenegraph::kLogitsWidth)
    throw InvalidInputError("rel_loss: logits shape mismatch");

  std::vector<ad::CeSpan> spans;
  spans.reserve(static_cast<std::size_t>(cfg.segments * l * 3));
  const double inv_t = 1.0 / cfg.segments;
  for (int s = 0; s < cfg.segments; ++s) {
    const auto& triplets = gt[static_cast<std::size_t>(s)].triplets;
    if (static_cast<int>(triplets.size()) != l)
      throw InvalidInputError("rel_loss: ground truth must hold L triplets per segment");
    Mat cost(l, l);
    std::vector<scenegraph::TripletPrediction> preds;
    preds.reserve(static_cast<std::size_t>(l));
    for (int i = 0; i < l; ++i)
      preds.push_back(scenegraph::TripletPrediction::from_logits_row(lv.row_ptr(s * l + i)));
    for (int i = 0; i < l; ++i)
      for (int j = 0; j < l; ++j)
        cost(i, j) = scenegraph::match_cost(preds[static_cast<std::size_t>(i)],
                                            triplets[static_cast<std::size_t>(j)]);
    const auto sigma = scenegraph::hungarian_assign(cost);
    for (int i = 0; i < l; ++i) {
      const auto& target = triplets[static_cast<std::size_t>(sigma[static_cast<std::size_t>(i)])];
      const double w = (target.is_none() ? scenegraph::kNoneTripletWeight : 1.0) * inv_t;
      const int row = s * l + i;
      spans.push_back({row, 0, scenegraph::kObjectClasses, target.subject.category, w});
      spans.push_back({row, scenegraph::kObjectClasses,
                       scenegraph::kObjectClasses + scenegraph::kPredicateClasses, target.predicate,
                       w});
      spans.push_back({row, scenegraph::kObjectClasses + scenegraph::kPredicateClasses,
                       scenegraph::kLogitsWidth, target.object.category, w});
    }
  }
  return ad::cross_entropy_spans(t, logits, std::move(spans));
}

std::vector<std::vector<scenegraph::TripletPrediction>> split_predictions(const Mat& logits,
                                                                          const ModelConfig& cfg) {
  const int l = cfg.queries_per_segment;
  if (logits.rows() != cfg.segments * l || logits.cols() != scenegraph::kLogitsWidth)
    throw InvalidInputError("split_predictions: logits shape mismatch");
  std::vector<std::vector<scenegraph::TripletPrediction>> out;
  out.reserve(static_cast<std::size_t>(cfg.segments));
  for (int s = 0; s < cfg.segments; ++s) {
    std::vector<scenegraph::TripletPrediction> seg;
    seg.reserve(static_cast<std::size_t>(l));
    for (int i = 0; i < l; ++i)
      seg.push_back(scenegraph::TripletPrediction::from_logits_row(logits.row_ptr(s * l + i)));
    out.push_back(std::move(seg));
  }
  return out;
}

void Adam::step(ModelParams& params, const std::map<std::string, Mat>& grads, double lr) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (auto& g : params.groups()) {
    if (!g.trainable) continue;
    const auto it = grads.find(g.name);
    if (it == grads.end()) continue;
    const Mat& grad = it->second;
    auto [state_it, inserted] = state_.try_emplace(
        g.name, std::make_pair(Mat::zeros(grad.rows(), grad.cols()),
                               Mat::zeros(grad.rows(), grad.cols())));
    Mat& m = state_it->second.first;
    Mat& v = state_it->second.second;
    for (int i = 0; i < grad.rows(); ++i) {
      for (int j = 0; j < grad.cols(); ++j) {
        m(i, j) = beta1_ * m(i, j) + (1.0 - beta1_) * grad(i, j);
        v(i, j) = beta2_ * v(i, j) + (1.0 - beta2_) * grad(i, j) * grad(i, j);
        const double mhat = m(i, j) / bc1;
        const double vhat = v(i, j) / bc2;
        g.value(i, j) -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }
}

namespace {

std::vector<scenegraph::SegmentGraph> padded_graphs(const Instance& inst, int per_segment) {
  std::vector<scenegraph::SegmentGraph> graphs = inst.annotation.graphs;
  for (auto& g : graphs) {
    if (static_cast<int>(g.triplets.size()) > per_segment)
      throw InvalidInputError("instance annotation holds more triplets than queries per segment");
    g.triplets.resize(static_cast<std::size_t>(per_segment));
  }
  return graphs;
}

// Deterministic in-place shuffle from the shared training stream.
void shuffle_order(std::vector<int>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
}

struct GradAccumulator {
  std::map<std::string, Mat> grads;

  void add(const ModelParams& params, Tape& t, const Binding& b) {
    for (const auto& g : params.groups()) {
      if (!g.trainable) continue;
      const Mat& grad = t.grad(b[g.name]);
      auto it = grads.find(g.name);
      if (it == grads.end())
        grads.emplace(g.name, grad);
      else
        it->second += grad;
    }
  }

  void scale_all(double s) {
    for (auto& [name, g] : grads) g *= s;
  }
};

}  // namespace

TrainResult train_stage1(const Dataset& dataset, const ModelConfig& cfg, const TrainConfig& tc,
                         std::uint64_t seed, const TrainOptions& opts) {
  if (dataset.empty()) throw InvalidInputError("train_stage1: empty dataset");
  cfg.validate();
  tc.validate();
  ModelParams params = ModelParams::init(cfg, seed);
  params.set_trainable("qa.", false);

  Adam adam;
  Rng order_rng(Rng::mix(seed, 0x5731));
  std::vector<int> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  const int epochs = opts.max_epochs >= 0 ? std::min(opts.max_epochs, tc.stage1_epochs)
                                          : tc.stage1_epochs;
  TrainResult result{std::move(params), {}};
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double lr = lr_at(tc.base_lr, epoch, tc.stage1_lr_period);
    shuffle_order(order, order_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size));
      GradAccumulator acc;
      for (std::size_t k = start; k < end; ++k) {
        const Instance& inst = dataset[static_cast<std::size_t>(order[k])];
        Tape t;
        Binding b = bind(t, result.params);
        Var logits = forward_stage1(t, b, cfg, t.leaf(inst.f_v), t.leaf(inst.f_a), t.leaf(inst.f_p));
        Var loss = rel_loss_var(t, logits, cfg, padded_graphs(inst, cfg.queries_per_segment));
        epoch_loss += t.value(loss)(0, 0);
        t.backward(loss);
        acc.add(result.params, t, b);
      }
      acc.scale_all(1.0 / static_cast<double>(end - start));
      adam.step(result.params, acc.grads, lr);
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(dataset.size()));
    if (opts.verbose)
      std::cerr << "stage1 epoch " << epoch << " lr " << lr << " loss "
                << result.epoch_losses.back() << "\n";
    if (opts.after_epoch && opts.after_epoch(epoch, result.params)) break;
  }
  return result;
}

TrainResult train_stage2(const Dataset& dataset, const ModelParams& stage1, const ModelConfig& cfg,
                         const TrainConfig& tc, std::uint64_t seed, const TrainOptions& opts) {
  if (dataset.empty()) throw InvalidInputError("train_stage2: empty dataset");
  cfg.validate();
  tc.validate();
  ModelParams params = ModelParams::init(cfg, Rng::mix(seed, 0x5732));
  params.adopt(stage1, kStagePrefix);
  params.set_trainable(kStagePrefix, false);

  // The frozen branch is a constant function of each instance; cache it.
  std::vector<Mat> f_rel_cache = relation_cache(dataset, params);

  Adam adam;
  Rng order_rng(Rng::mix(seed, 0x5733));
  std::vector<int> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  const int epochs = opts.max_epochs >= 0 ? std::min(opts.max_epochs, tc.stage2_epochs)
                                          : tc.stage2_epochs;
  TrainResult result{std::move(params), {}};
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double lr = lr_at(tc.base_lr, epoch, tc.stage2_lr_period);
    shuffle_order(order, order_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size));
      GradAccumulator acc;
      for (std::size_t k = start; k < end; ++k) {
        const Instance& inst = dataset[static_cast<std::size_t>(order[k])];
        Tape t;
        Binding b = bind(t, result.params);
        auto out = forward_stage2(t, b, cfg, inst, &f_rel_cache[static_cast<std::size_t>(order[k])]);
        Var loss = task_loss_var(t, out.logits, inst.answer_index);
        epoch_loss += t.value(loss)(0, 0);
        t.backward(loss);
        acc.add(result.params, t, b);
      }
      acc.scale_all(1.0 / static_cast<double>(end - start));
      adam.step(result.params, acc.grads, lr);
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(dataset.size()));
    if (opts.verbose)
      std::cerr << "stage2 epoch " << epoch << " lr " << lr << " loss "
                << result.epoch_losses.back() << "\n";
    if (opts.after_epoch && opts.after_epoch(epoch, result.params)) break;
  }
  return result;
}

std::string EvalReport::to_json() const {
  json j;
  j["overall"] = overall;
  j["total"] = total;
  j["correct"] = correct;
  json by;
  for (const auto& [tag, counts] : by_template) {
    by[tag] = {{"correct", counts.first},
               {"total", counts.second},
               {"accuracy", counts.second ? static_cast<double>(counts.first) / counts.second : 0.0}};
  }
  j["by_template"] = by;
  return j.dump(2);
}

EvalReport evaluate(const Dataset& dataset, const ModelParams& params, const AblationSpec& ablation,
                    const std::vector<Mat>* f_rel_cache) {
  if (dataset.empty()) throw InvalidInputError("evaluate: empty dataset");
  if (f_rel_cache && f_rel_cache->size() != dataset.size())
    throw InvalidInputError("evaluate: cache size mismatch");
  EvalReport report;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Instance& inst = dataset[i];
    const Mat logits =
        stage2_logits(params, inst, f_rel_cache ? &(*f_rel_cache)[i] : nullptr, ablation);
    int best = 0;
    for (int j = 1; j < logits.cols(); ++j)
      if (logits(0, j) > logits(0, best)) best = j;
    const bool hit = best == inst.answer_index;
    ++report.total;
    if (hit) ++report.correct;
    auto& [c, n] = report.by_template[inst.template_tag];
    ++n;
    if (hit) ++c;
  }
  report.overall = static_cast<double>(report.correct) / static_cast<double>(report.total);
  return report;
}

scenegraph::MatchStats evaluate_stage1(const Dataset& dataset, const ModelParams& params) {
  scenegraph::MatchStats stats;
  for (const Instance& inst : dataset) {
    const Mat logits = stage1_logits(params, inst);
    const auto preds = split_predictions(logits, params.config);
    stats += scenegraph::match_stats(preds, padded_graphs(inst, params.config.queries_per_segment));
  }
  return stats;
}

// ---- Checkpoint I/O ----

namespace {

constexpr char kMagic[4] = {'S', 'H', 'R', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

void put_f64(std::ostream& os, double d) { put_u64(os, std::bit_cast<std::uint64_t>(d)); }

std::uint32_t get_u32(std::istream& is) {
  char b[4];
  if (!is.read(b, 4)) throw CheckpointError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  char b[8];
  if (!is.read(b, 8)) throw CheckpointError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
  return v;
}

double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  const std::string cfg = params.config.to_json();
  put_u64(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put_u64(os, params.groups().size());
  for (const auto& g : params.groups()) {
    put_u64(os, g.name.size());
    os.write(g.name.data(), static_cast<std::streamsize>(g.name.size()));
    put_u64(os, static_cast<std::uint64_t>(g.value.rows()));
    put_u64(os, static_cast<std::uint64_t>(g.value.cols()));
    for (int i = 0; i < g.value.rows(); ++i)
      for (int j = 0; j < g.value.cols(); ++j) put_f64(os, g.value(i, j));
  }
  if (!os) throw CheckpointError("checkpoint write failed: " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw CheckpointError("bad checkpoint magic");
  const std::uint32_t version = get_u32(is);
  if (version != kVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t cfg_len = get_u64(is);
  std::string cfg_text(cfg_len, '\0');
  if (!is.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len)))
    throw CheckpointError("checkpoint truncated");
  ModelConfig cfg = ModelConfig::from_json(cfg_text);

  // Rebuild the registry with the canonical group order, then overwrite values.
  ModelParams params = ModelParams::init(cfg, 0);
  const std::uint64_t count = get_u64(is);
  std::size_t seen = 0;
  for (std::uint64_t g = 0; g < count; ++g) {
    const std::uint64_t name_len = get_u64(is);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name_len)))
      throw CheckpointError("checkpoint truncated");
    const int rows = static_cast<int>(get_u64(is));
    const int cols = static_cast<int>(get_u64(is));
    if (!params.has(name)) throw CheckpointError("unknown parameter group in checkpoint: " + name);
    Mat& dst = params.at(name);
    if (dst.rows() != rows || dst.cols() != cols)
      throw CheckpointError("parameter group '" + name + "' has unexpected shape");
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) dst(i, j) = get_f64(is);
    ++seen;
  }
  if (seen != params.groups().size())
    throw CheckpointError("checkpoint is missing parameter groups");
  return params;
}

void require_same_config(const ModelConfig& expected, const ModelConfig& actual) {
  auto fail = [](const std::string& field, auto a, auto b) {
    throw CheckpointError("checkpoint config mismatch: " + field + " (file " + std::to_string(b) +
                          ", expected " + std::to_string(a) + ")");
  };
  if (expected.segments != actual.segments) fail("segments", expected.segments, actual.segments);
  if (expected.dim != actual.dim) fail("dim", expected.dim, actual.dim);
  if (expected.patch_tokens != actual.patch_tokens)
    fail("patch_tokens", expected.patch_tokens, actual.patch_tokens);
  if (expected.question_tokens != actual.question_tokens)
    fail("question_tokens", expected.question_tokens, actual.question_tokens);
  if (expected.queries_per_segment != actual.queries_per_segment)
    fail("queries_per_segment", expected.queries_per_segment, actual.queries_per_segment);
  if (expected.experts != actual.experts) fail("experts", expected.experts, actual.experts);
  if (expected.top_k != actual.top_k) fail("top_k", expected.top_k, actual.top_k);
  if (expected.spline_degree != actual.spline_degree)
    fail("spline_degree", expected.spline_degree, actual.spline_degree);
  if (expected.spline_intervals != actual.spline_intervals)
    fail("spline_intervals", expected.spline_intervals, actual.spline_intervals);
  if (expected.spline_lo != actual.spline_lo) fail("spline_lo", expected.spline_lo, actual.spline_lo);
  if (expected.spline_hi != actual.spline_hi) fail("spline_hi", expected.spline_hi, actual.spline_hi);
  if (expected.num_answers != actual.num_answers)
    fail("num_answers", expected.num_answers, actual.num_answers);
}

}  // namespace shrike::model
