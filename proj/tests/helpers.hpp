#pragma once

#include <string>
#include <vector>

#include "shrike/instance.hpp"
#include "shrike/model.hpp"
#include "shrike/rng.hpp"

namespace shrike::testing {

inline model::ModelConfig tiny_config() {
  model::ModelConfig cfg;
  cfg.segments = 3;
  cfg.dim = 8;
  cfg.patch_tokens = 2;
  cfg.question_tokens = 3;
  cfg.queries_per_segment = 4;
  cfg.experts = 2;
  cfg.top_k = 2;
  cfg.spline_intervals = 4;
  cfg.num_answers = 5;
  return cfg;
}

// Random instance with a hand-built annotation holding L triplets per segment.
inline Instance random_instance(const model::ModelConfig& cfg, Rng& rng) {
  Instance inst;
  inst.f_v = Mat::normal(cfg.segments, cfg.dim, 0, 0.5, rng);
  inst.f_a = Mat::normal(cfg.segments, cfg.dim, 0, 0.5, rng);
  inst.f_p = Mat::normal(cfg.segments * cfg.patch_tokens, cfg.dim, 0, 0.5, rng);
  inst.q_s = Mat::normal(1, cfg.dim, 0, 0.5, rng);
  inst.q_w = Mat::normal(cfg.question_tokens, cfg.dim, 0, 0.5, rng);
  inst.answer_index = rng.uniform_int(0, cfg.num_answers - 1);
  inst.template_tag = "synthetic";
  for (int t = 0; t < cfg.segments; ++t) {
    scenegraph::SegmentGraph g;
    g.segment_index = t;
    const int valid = rng.uniform_int(0, std::min(3, cfg.queries_per_segment));
    for (int i = 0; i < valid; ++i) {
      scenegraph::Triplet trip;
      trip.subject.category = rng.uniform_int(0, scenegraph::kObjectVocabSize - 1);
      trip.predicate = rng.uniform_int(0, scenegraph::kPredicateVocabSize - 1);
      trip.object.category = rng.uniform_int(0, scenegraph::kObjectVocabSize - 1);
      bool dup = false;
      for (const auto& prev : g.triplets) dup |= prev == trip;
      if (!dup) g.triplets.push_back(trip);
    }
    g.triplets.resize(static_cast<std::size_t>(cfg.queries_per_segment));
    inst.annotation.graphs.push_back(std::move(g));
  }
  return inst;
}

struct GroupCheck {
  std::string name;
  double max_rel_err = 0.0;
};

// Analytic gradient of task_loss(forward_stage2) for every parameter group
// against central finite differences, sampling coords_per_group coordinates.
inline std::vector<GroupCheck> whole_model_gradient_check(const model::ModelConfig& cfg,
                                                          const Instance& inst,
                                                          std::uint64_t param_seed,
                                                          int coords_per_group, double h) {
  model::ModelParams params = model::ModelParams::init(cfg, param_seed);

  ad::Tape t;
  model::Binding b = model::bind(t, params, true);
  auto out = model::forward_stage2(t, b, cfg, inst);
  ad::Var loss = model::task_loss_var(t, out.logits, inst.answer_index);
  t.backward(loss);

  auto loss_value = [&](const model::ModelParams& p) {
    return model::task_loss(model::stage2_logits(p, inst), inst.answer_index);
  };

  Rng pick(Rng::mix(param_seed, 0xC0DE));
  std::vector<GroupCheck> checks;
  for (auto& g : params.groups()) {
    const Mat& grad = t.grad(b[g.name]);
    GroupCheck check{g.name, 0.0};
    for (int rep = 0; rep < coords_per_group; ++rep) {
      const int i = pick.uniform_int(0, g.value.rows() - 1);
      const int j = pick.uniform_int(0, g.value.cols() - 1);
      const double saved = g.value(i, j);
      g.value(i, j) = saved + h;
      const double up = loss_value(params);
      g.value(i, j) = saved - h;
      const double dn = loss_value(params);
      g.value(i, j) = saved;
      const double fd = (up - dn) / (2 * h);
      const double an = grad(i, j);
      const double err = std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
      check.max_rel_err = std::max(check.max_rel_err, err);
    }
    checks.push_back(check);
  }
  return checks;
}

}  // namespace shrike::testing
