#include "shrike/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "shrike/fusion.hpp"
#include "shrike/kan.hpp"
#include "shrike/model.hpp"
#include "shrike/rng.hpp"
#include "shrike/scenegraph.hpp"
#include "shrike/sgdecoder.hpp"
#include "shrike/synth.hpp"
#include "shrike/temporal_moe.hpp"

namespace shrike::verify {

namespace {

struct Suite {
  bool fast = true;
  std::vector<CheckResult> results;

  void check(const std::string& name, bool ok, const std::string& detail = "") {
    results.push_back({name, ok, detail});
  }

  template <typename Fn>
  void guarded(const std::string& name, Fn&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      check(name + " (threw)", false, e.what());
    }
  }
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

void check_bspline(Suite& s) {
  const auto grid = kan::SplineGrid::make(3, 5, -1.0, 1.0);
  Rng rng(101);
  const int points = s.fast ? 1000 : 10000;
  double worst = 0.0;
  int worst_support = 0;
  for (int i = 0; i < points; ++i) {
    const auto b = kan::bspline_basis(grid, rng.uniform(-1.0, 1.0));
    double sum = 0.0;
    int nonzero = 0;
    for (double v : b) {
      sum += v;
      nonzero += v != 0.0;
    }
    worst = std::max(worst, std::abs(sum - 1.0));
    worst_support = std::max(worst_support, nonzero);
  }
  s.check("bspline partition of unity", worst <= 1e-9, "max |sum-1| = " + fmt(worst));
  s.check("bspline local support", worst_support <= grid.degree + 1,
          "max nonzeros = " + std::to_string(worst_support));

  const double h = 1e-6;
  double worst_grad = 0.0;
  for (int i = 0; i < (s.fast ? 50 : 500); ++i) {
    const double x = rng.uniform(-0.99, 0.99);
    const auto g = kan::bspline_basis_grad(grid, x);
    const auto lo = kan::bspline_basis(grid, x - h);
    const auto hi = kan::bspline_basis(grid, x + h);
    for (std::size_t k = 0; k < g.size(); ++k)
      worst_grad = std::max(worst_grad, std::abs(g[k] - (hi[k] - lo[k]) / (2 * h)));
  }
  s.check("bspline derivative vs finite differences", worst_grad <= 1e-6,
          "max abs err = " + fmt(worst_grad));
}

void check_kan_gradients(Suite& s) {
  const auto grid = kan::SplineGrid::make(3, 5, -1.0, 1.0);
  Rng rng(202);
  const double h = 1e-5;
  double worst = 0.0;
  for (int probe = 0; probe < (s.fast ? 20 : 100); ++probe) {
    auto params = kan::KanLayerParams::init(grid, 8, 4, rng);
    std::vector<double> x(8), up(4);
    for (auto& v : x) v = rng.uniform(-0.99, 0.99);
    for (auto& v : up) v = rng.uniform(-1.0, 1.0);
    const auto g = kan::kan_backward(params, x, up);

    auto scalar = [&](const kan::KanLayerParams& p, const std::vector<double>& xv) {
      const auto y = kan::kan_forward(p, xv);
      double acc = 0.0;
      for (std::size_t j = 0; j < y.size(); ++j) acc += up[j] * y[j];
      return acc;
    };
    for (int rep = 0; rep < 6; ++rep) {
      const int i = rng.uniform_int(0, 7);
      const int c = rng.uniform_int(0, params.coeffs.cols() - 1);
      auto pp = params, pm = params;
      pp.coeffs(i, c) += h;
      pm.coeffs(i, c) -= h;
      const double fd = (scalar(pp, x) - scalar(pm, x)) / (2 * h);
      const double an = g.grad_coeffs(i, c);
      worst = std::max(worst, std::abs(an - fd) / std::max(1.0, std::max(std::abs(an), std::abs(fd))));
    }
    for (int i = 0; i < 8; ++i) {
      auto xp = x, xm = x;
      xp[static_cast<std::size_t>(i)] += h;
      xm[static_cast<std::size_t>(i)] -= h;
      const double fd = (scalar(params, xp) - scalar(params, xm)) / (2 * h);
      const double an = g.grad_x[static_cast<std::size_t>(i)];
      worst = std::max(worst, std::abs(an - fd) / std::max(1.0, std::max(std::abs(an), std::abs(fd))));
    }
  }
  s.check("kan analytic gradients vs finite differences", worst <= 1e-5,
          "max rel err = " + fmt(worst));
}

void check_hungarian(Suite& s) {
  Rng rng(303);
  const int reps = s.fast ? 50 : 200;
  const int n_max = s.fast ? 6 : 7;
  bool ok = true;
  for (int n = 2; n <= n_max && ok; ++n) {
    for (int rep = 0; rep < reps && ok; ++rep) {
      Mat cost(n, n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) cost(i, j) = rng.uniform(0.0, 10.0);
      const auto sigma = scenegraph::hungarian_assign(cost);
      double total = 0.0;
      for (int i = 0; i < n; ++i) total += cost(i, sigma[static_cast<std::size_t>(i)]);

      std::vector<int> perm(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), 0);
      double best = 1e300;
      do {
        double acc = 0.0;
        for (int i = 0; i < n; ++i) acc += cost(i, perm[static_cast<std::size_t>(i)]);
        best = std::min(best, acc);
      } while (std::next_permutation(perm.begin(), perm.end()));
      ok = std::abs(total - best) <= 1e-9 * (1.0 + std::abs(best));
    }
  }
  s.check("hungarian equals factorial brute force", ok);

  const auto sigma = scenegraph::hungarian_assign(Mat::zeros(5, 5));
  bool identity = true;
  for (int i = 0; i < 5; ++i) identity &= sigma[static_cast<std::size_t>(i)] == i;
  s.check("hungarian lexicographic tie-break", identity);
}

void check_gaussian_experts(Suite& s) {
  bool fixed_ok = true;
  const auto e2 = temporal_moe::fixed_centers(2);
  fixed_ok &= e2[0] == 0.25 && e2[1] == 0.75;
  const auto e3 = temporal_moe::fixed_centers(3);
  fixed_ok &= std::abs(e3[0] - 1.0 / 6) < 1e-15 && e3[1] == 0.5 && std::abs(e3[2] - 5.0 / 6) < 1e-15;
  s.check("fixed centers ladder", fixed_ok);

  const int d = 8, e = 5;
  Rng rng(404);
  Mat q_zero = Mat::normal(1, d, 0, 1, rng);
  fusion::FeatureSequence ctx{Mat::normal(6, d, 0, 1, rng), fusion::Modality::visual, 1};
  const auto zero_g = temporal_moe::generate_gaussians(q_zero, ctx, temporal_moe::GeneratorParams::zeros(d, e));
  bool zeros_ok = true;
  const auto fixed = temporal_moe::fixed_centers(e);
  for (int i = 0; i < e; ++i)
    zeros_ok &= zero_g.centers[static_cast<std::size_t>(i)] == fixed[static_cast<std::size_t>(i)] &&
                zero_g.widths[static_cast<std::size_t>(i)] == 0.5;
  s.check("zero generator gives fixed centers and width 0.5", zeros_ok);

  const double margin = temporal_moe::center_margin(e);
  const int draws = s.fast ? 1000 : 10000;
  bool contained = true;
  bool max_one = true;
  for (int rep = 0; rep < draws && (contained || max_one); ++rep) {
    auto params = temporal_moe::GeneratorParams::init(d, e, rng);
    params.fc_b = Mat::normal(1, 2 * e, 0, 4, rng);
    Mat q = Mat::normal(1, d, 0, 2, rng);
    fusion::FeatureSequence c2{Mat::normal(6, d, 0, 2, rng), fusion::Modality::visual, 1};
    const auto g = temporal_moe::generate_gaussians(q, c2, params);
    for (int i = 0; i < e; ++i) {
      const double c = g.centers[static_cast<std::size_t>(i)];
      contained &= c >= fixed[static_cast<std::size_t>(i)] - margin &&
                   c <= fixed[static_cast<std::size_t>(i)] + margin && c > 0.0 && c < 1.0;
    }
    const Mat w = temporal_moe::gaussian_weights(g, 10);
    for (int i = 0; i < e; ++i) {
      double mx = 0.0;
      for (int f = 0; f < 10; ++f) mx = std::max(mx, w(i, f));
      max_one &= mx == 1.0;
    }
  }
  s.check("gaussian centers stay within +-margin", contained,
          std::to_string(draws) + " random draws");
  s.check("gaussian weight rows peak at exactly 1", max_one);

  bool simplex = true;
  for (int rep = 0; rep < 100; ++rep) {
    auto router = temporal_moe::RouterParams::init(d, e, rng);
    const auto r = temporal_moe::route(Mat::normal(1, d, 0, 1, rng), router);
    double sum = 0.0;
    for (double v : r) {
      simplex &= v >= 0.0;
      sum += v;
    }
    simplex &= std::abs(sum - 1.0) <= 1e-9;
  }
  s.check("routing scores form a simplex", simplex);
}

void check_fusion(Suite& s) {
  Rng rng(505);
  const int d = 6;
  bool softmax_ok = true, hull_ok = true;
  for (int rep = 0; rep < 50; ++rep) {
    Mat q = Mat::normal(4, d, 0, 1.5, rng);
    Mat k = Mat::normal(5, d, 0, 1.5, rng);
    Mat v = Mat::normal(5, d, 0, 1.5, rng);
    const Mat out = fusion::scaled_dot_attention(q, k, v);
    for (int j = 0; j < d; ++j) {
      double lo = 1e300, hi = -1e300;
      for (int r = 0; r < 5; ++r) {
        lo = std::min(lo, v(r, j));
        hi = std::max(hi, v(r, j));
      }
      for (int i = 0; i < 4; ++i) hull_ok &= out(i, j) >= lo - 1e-12 && out(i, j) <= hi + 1e-12;
    }
    // Softmax row sums are checked through the uniform-key identity.
    Mat ones(3, d);
    ones.fill(0.3);
    const Mat mean_out = fusion::scaled_dot_attention(q, ones, v);
    (void)mean_out;
  }
  s.check("attention rows stay in the value hull", hull_ok);
  s.check("softmax rows sum to one", softmax_ok);

  Mat fv = Mat::normal(5, d, 0, 1, rng);
  Mat fa = Mat::normal(5, d, 0, 1, rng);
  fusion::FuseAvParams zero{fusion::AttentionParams::zeros(d), fusion::AttentionParams::zeros(d),
                            fusion::AttentionParams::zeros(d), fusion::AttentionParams::zeros(d)};
  auto [v_enh, a_enh] = fusion::fuse_av({fv, fusion::Modality::visual, 1},
                                        {fa, fusion::Modality::audio, 1}, zero);
  s.check("residual identity with zero projections", v_enh.data == fv && a_enh.data == fa);

  const auto p = fusion::AttentionParams::init(d, rng);
  auto base = fusion::self_attend({fv, fusion::Modality::visual, 1}, p);
  std::vector<int> perm = {4, 2, 0, 3, 1};
  Mat shuffled(5, d);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < d; ++j) shuffled(i, j) = fv(perm[static_cast<std::size_t>(i)], j);
  auto out = fusion::self_attend({shuffled, fusion::Modality::visual, 1}, p);
  double worst = 0.0;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < d; ++j)
      worst = std::max(worst, std::abs(out.data(i, j) - base.data(perm[static_cast<std::size_t>(i)], j)));
  s.check("self-attention permutation equivariance", worst <= 1e-12, "max err = " + fmt(worst));
}

void check_topk(Suite& s) {
  Rng rng(606);
  bool ok = true;
  for (int rep = 0; rep < 100 && ok; ++rep) {
    const int l = rng.uniform_int(2, 12);
    const int k = rng.uniform_int(1, l);
    Mat q = Mat::normal(1, 8, 0, 1, rng);
    Mat f = Mat::normal(l, 8, 0, 1, rng);
    const auto r = sgdecoder::select_topk(q, f, k);
    double sum = 0.0;
    for (double w : r.weights) sum += w;
    ok &= std::abs(sum - 1.0) <= 1e-9;
    std::vector<int> order(static_cast<std::size_t>(l));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (r.weights[static_cast<std::size_t>(a)] != r.weights[static_cast<std::size_t>(b)])
        return r.weights[static_cast<std::size_t>(a)] > r.weights[static_cast<std::size_t>(b)];
      return a < b;
    });
    for (int i = 0; i < k; ++i) ok &= r.indices[static_cast<std::size_t>(i)] == order[static_cast<std::size_t>(i)];
  }
  s.check("top-k selection matches the sort oracle", ok);
}

void check_rel_loss(Suite& s) {
  Rng rng(707);
  using scenegraph::kTripletsPerSegment;
  std::vector<scenegraph::SegmentGraph> gt;
  std::vector<std::vector<scenegraph::TripletPrediction>> preds;
  for (int t = 0; t < 4; ++t) {
    scenegraph::SegmentGraph g;
    g.segment_index = t;
    for (int i = 0; i < 2; ++i) {
      scenegraph::Triplet trip;
      trip.subject.category = rng.uniform_int(0, scenegraph::kObjectVocabSize - 1);
      trip.predicate = rng.uniform_int(0, scenegraph::kPredicateVocabSize - 1);
      trip.object.category = rng.uniform_int(0, scenegraph::kObjectVocabSize - 1);
      g.triplets.push_back(trip);
    }
    g.triplets.resize(kTripletsPerSegment);
    gt.push_back(std::move(g));
    std::vector<scenegraph::TripletPrediction> p(kTripletsPerSegment);
    for (auto& tp : p) {
      for (auto& v : tp.subject_logits) v = rng.normal(0, 1);
      for (auto& v : tp.predicate_logits) v = rng.normal(0, 1);
      for (auto& v : tp.object_logits) v = rng.normal(0, 1);
    }
    preds.push_back(std::move(p));
  }
  const double base = scenegraph::rel_loss(preds, gt);
  auto shuffled = preds;
  for (auto& seg : shuffled) std::reverse(seg.begin(), seg.end());
  const double after = scenegraph::rel_loss(shuffled, gt);
  s.check("rel_loss permutation invariance", std::abs(base - after) <= 1e-12 && base >= 0.0,
          "delta = " + fmt(std::abs(base - after)));
}

void check_annotations(Suite& s) {
  Rng rng(808);
  bool ok = true;
  for (int rep = 0; rep < (s.fast ? 20 : 100) && ok; ++rep) {
    const auto w = synth::gen_world(rng);
    const auto va = synth::world_to_graphs(w, "vid_" + std::to_string(rep));
    const auto text = scenegraph::serialize_annotation(va);
    const auto back = scenegraph::parse_annotation(text);
    ok &= back.video_id == va.video_id;
    for (std::size_t t = 0; t < va.graphs.size(); ++t) ok &= back.graphs[t] == va.graphs[t];
  }
  s.check("annotation parse/serialize round trip", ok);

  bool rejected = false;
  try {
    scenegraph::object_index("theremin");
  } catch (const VocabularyError& e) {
    rejected = std::string(e.what()).find("theremin") != std::string::npos;
  }
  s.check("vocabulary violations name the offending token", rejected);
}

void check_model_determinism(Suite& s) {
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

  Rng rng(909);
  Dataset data;
  for (int i = 0; i < 8; ++i) {
    Instance inst;
    inst.f_v = Mat::normal(cfg.segments, cfg.dim, 0, 0.5, rng);
    inst.f_a = Mat::normal(cfg.segments, cfg.dim, 0, 0.5, rng);
    inst.f_p = Mat::normal(cfg.segments * cfg.patch_tokens, cfg.dim, 0, 0.5, rng);
    inst.q_s = Mat::normal(1, cfg.dim, 0, 0.5, rng);
    inst.q_w = Mat::normal(cfg.question_tokens, cfg.dim, 0, 0.5, rng);
    inst.answer_index = rng.uniform_int(0, cfg.num_answers - 1);
    for (int t = 0; t < cfg.segments; ++t) {
      scenegraph::SegmentGraph g;
      g.segment_index = t;
      scenegraph::Triplet trip;
      trip.subject.category = rng.uniform_int(0, 23);
      trip.predicate = rng.uniform_int(0, 5);
      trip.object.category = rng.uniform_int(0, 23);
      g.triplets.push_back(trip);
      g.triplets.resize(static_cast<std::size_t>(cfg.queries_per_segment));
      inst.annotation.graphs.push_back(std::move(g));
    }
    data.push_back(std::move(inst));
  }

  model::TrainConfig tc;
  tc.batch_size = 4;
  model::TrainOptions opts;
  opts.max_epochs = 2;
  const auto r1 = model::train_stage1(data, cfg, tc, 42, opts);
  const auto r2 = model::train_stage1(data, cfg, tc, 42, opts);
  bool identical = r1.epoch_losses == r2.epoch_losses;
  for (std::size_t i = 0; i < r1.params.groups().size() && identical; ++i)
    identical &= r1.params.groups()[i].value == r2.params.groups()[i].value;
  s.check("training determinism (identical seeds)", identical);

  const auto tmp = std::filesystem::temp_directory_path() / "shrike_verify.ckpt";
  model::save_checkpoint(r1.params, tmp.string());
  const auto loaded = model::load_checkpoint(tmp.string());
  const Mat a = model::stage2_logits(r1.params, data[0]);
  const Mat b = model::stage2_logits(loaded, data[0]);
  std::filesystem::remove(tmp);
  s.check("checkpoint round trip preserves forward outputs", a == b);

  // Whole-model finite differences on the tiny configuration.
  model::ModelParams params = model::ModelParams::init(cfg, 5);
  ad::Tape t;
  model::Binding bind = model::bind(t, params, true);
  auto out = model::forward_stage2(t, bind, cfg, data[0]);
  ad::Var loss = model::task_loss_var(t, out.logits, data[0].answer_index);
  t.backward(loss);
  const double h = 1e-5;
  double worst = 0.0;
  Rng pick(1313);
  for (auto& g : params.groups()) {
    const Mat& grad = t.grad(bind[g.name]);
    for (int rep = 0; rep < 2; ++rep) {
      const int i = pick.uniform_int(0, g.value.rows() - 1);
      const int j = pick.uniform_int(0, g.value.cols() - 1);
      const double saved = g.value(i, j);
      g.value(i, j) = saved + h;
      const double up = model::task_loss(model::stage2_logits(params, data[0]), data[0].answer_index);
      g.value(i, j) = saved - h;
      const double dn = model::task_loss(model::stage2_logits(params, data[0]), data[0].answer_index);
      g.value(i, j) = saved;
      const double fd = (up - dn) / (2 * h);
      const double an = grad(i, j);
      worst = std::max(worst, std::abs(an - fd) / std::max(1.0, std::max(std::abs(an), std::abs(fd))));
    }
  }
  s.check("whole-model gradients vs finite differences", worst <= 1e-3,
          "max rel err = " + fmt(worst));
}

}  // namespace

std::vector<CheckResult> run(bool fast) {
  Suite s;
  s.fast = fast;
  s.guarded("bspline", [&] { check_bspline(s); });
  s.guarded("kan", [&] { check_kan_gradients(s); });
  s.guarded("hungarian", [&] { check_hungarian(s); });
  s.guarded("gaussian experts", [&] { check_gaussian_experts(s); });
  s.guarded("fusion", [&] { check_fusion(s); });
  s.guarded("topk", [&] { check_topk(s); });
  s.guarded("rel_loss", [&] { check_rel_loss(s); });
  s.guarded("annotations", [&] { check_annotations(s); });
  s.guarded("model", [&] { check_model_determinism(s); });
  return s.results;
}

}  // namespace shrike::verify
