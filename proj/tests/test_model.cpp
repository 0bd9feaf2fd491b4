#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "shrike/model.hpp"

using namespace shrike;
using namespace shrike::model;
using shrike::testing::random_instance;
using shrike::testing::tiny_config;

namespace {

Dataset tiny_dataset(const ModelConfig& cfg, int n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  for (int i = 0; i < n; ++i) d.push_back(random_instance(cfg, rng));
  return d;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("shrike_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

}  // namespace

TEST_CASE("lr schedule: base * 0.1^(epoch/period)") {
  CHECK(lr_at(1e-4, 0, 5) == doctest::Approx(1e-4));
  CHECK(lr_at(1e-4, 4, 5) == doctest::Approx(1e-4));
  CHECK(lr_at(1e-4, 6, 5) == doctest::Approx(1e-5));   // stage-1 schedule at epoch 6
  CHECK(lr_at(1e-4, 10, 9) == doctest::Approx(1e-5));  // stage-2 schedule at epoch 10
  CHECK(lr_at(1e-4, 9, 9) == doctest::Approx(1e-5));
  CHECK(lr_at(1e-4, 18, 9) == doctest::Approx(1e-6));
}

TEST_CASE("stage-1 logits have the contracted shape; zero parameters give uniform logits") {
  const auto cfg = tiny_config();
  Rng rng(1);
  const auto inst = random_instance(cfg, rng);

  auto params = ModelParams::init(cfg, 7);
  const Mat logits = stage1_logits(params, inst);
  CHECK(logits.rows() == cfg.segments * cfg.queries_per_segment);
  CHECK(logits.cols() == scenegraph::kLogitsWidth);

  for (auto& g : params.groups()) g.value.fill(0.0);
  const Mat zero_logits = stage1_logits(params, inst);
  for (int i = 0; i < zero_logits.rows(); ++i)
    for (int j = 0; j < zero_logits.cols(); ++j) CHECK(zero_logits(i, j) == 0.0);
}

TEST_CASE("one SGD step on a single instance strictly decreases rel_loss (10 seeds)") {
  const auto cfg = tiny_config();
  const double lr = 1e-3;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    const auto inst = random_instance(cfg, rng);
    ModelParams params = ModelParams::init(cfg, seed * 31);

    auto graphs = inst.annotation.graphs;
    auto loss_of = [&](const ModelParams& p) {
      ad::Tape t;
      Binding b = bind(t, p, false);
      ad::Var logits = forward_stage1(t, b, cfg, t.leaf(inst.f_v), t.leaf(inst.f_a), t.leaf(inst.f_p));
      return t.value(rel_loss_var(t, logits, cfg, graphs))(0, 0);
    };

    const double before = loss_of(params);
    {
      ad::Tape t;
      Binding b = bind(t, params);
      ad::Var logits = forward_stage1(t, b, cfg, t.leaf(inst.f_v), t.leaf(inst.f_a), t.leaf(inst.f_p));
      ad::Var loss = rel_loss_var(t, logits, cfg, graphs);
      t.backward(loss);
      for (auto& g : params.groups()) {
        if (g.name.rfind("sg.", 0) != 0) continue;
        const Mat& grad = t.grad(b[g.name]);
        for (int i = 0; i < g.value.rows(); ++i)
          for (int j = 0; j < g.value.cols(); ++j) g.value(i, j) -= lr * grad(i, j);
      }
    }
    const double after = loss_of(params);
    CHECK(after < before);
  }
}

TEST_CASE("tape rel_loss equals the plain scenegraph rel_loss") {
  const auto cfg = tiny_config();
  Rng rng(3);
  const auto inst = random_instance(cfg, rng);
  const auto params = ModelParams::init(cfg, 5);
  const Mat logits = stage1_logits(params, inst);

  ad::Tape t;
  Binding b = bind(t, params, false);
  ad::Var lv = forward_stage1(t, b, cfg, t.leaf(inst.f_v), t.leaf(inst.f_a), t.leaf(inst.f_p));
  const double tape_loss = t.value(rel_loss_var(t, lv, cfg, inst.annotation.graphs))(0, 0);

  const auto preds = split_predictions(logits, cfg);
  const double plain = scenegraph::rel_loss(preds, inst.annotation.graphs);
  CHECK(tape_loss == doctest::Approx(plain).epsilon(1e-12));
}

TEST_CASE("stage-2 logits: width |C|; zero classifier gives uniform logits") {
  const auto cfg = tiny_config();
  Rng rng(4);
  const auto inst = random_instance(cfg, rng);
  auto params = ModelParams::init(cfg, 11);
  const Mat logits = stage2_logits(params, inst);
  CHECK(logits.rows() == 1);
  CHECK(logits.cols() == cfg.num_answers);

  params.at("qa.cls.w").fill(0.0);
  params.at("qa.cls.b").fill(0.0);
  const Mat zeroed = stage2_logits(params, inst);
  for (int j = 0; j < zeroed.cols(); ++j) CHECK(zeroed(0, j) == 0.0);
}

TEST_CASE("cached relation features give bit-identical stage-2 logits") {
  const auto cfg = tiny_config();
  Rng rng(5);
  const auto inst = random_instance(cfg, rng);
  const auto params = ModelParams::init(cfg, 13);
  const Mat f_rel = relation_features(params, inst);
  const Mat a = stage2_logits(params, inst);
  const Mat b = stage2_logits(params, inst, &f_rel);
  CHECK(a == b);
}

TEST_CASE("task_loss: uniform logits give log |C|, saturated-correct tends to zero") {
  Mat logits = Mat::zeros(1, 31);
  CHECK(task_loss(logits, 4) == doctest::Approx(std::log(31.0)).epsilon(1e-12));

  logits.fill(-50.0);
  logits(0, 7) = 50.0;
  CHECK(task_loss(logits, 7) <= 1e-12);

  Rng rng(6);
  Mat random = Mat::normal(1, 9, 0, 2, rng);
  double mx = random(0, 0);
  for (int j = 1; j < 9; ++j) mx = std::max(mx, random(0, j));
  double z = 0.0;
  for (int j = 0; j < 9; ++j) z += std::exp(random(0, j) - mx);
  const double expect = mx + std::log(z) - random(0, 3);
  CHECK(task_loss(random, 3) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(task_loss(random, 3) >= 0.0);
}

TEST_CASE("whole-model gradients match finite differences on the tiny config") {
  const auto cfg = tiny_config();
  Rng rng(7);
  const auto inst = random_instance(cfg, rng);
  const auto checks = shrike::testing::whole_model_gradient_check(cfg, inst, 99, 3, 1e-5);
  for (const auto& c : checks) {
    INFO("group ", c.name);
    CHECK(c.max_rel_err <= 1e-3);
  }
}

TEST_CASE("train_stage1: deterministic loss trace, rejects empty datasets") {
  const auto cfg = tiny_config();
  const auto data = tiny_dataset(cfg, 12, 21);
  TrainConfig tc;
  tc.batch_size = 4;
  TrainOptions opts;
  opts.max_epochs = 2;
  const auto r1 = train_stage1(data, cfg, tc, 77, opts);
  const auto r2 = train_stage1(data, cfg, tc, 77, opts);
  REQUIRE(r1.epoch_losses.size() == 2);
  CHECK(r1.epoch_losses == r2.epoch_losses);
  for (std::size_t i = 0; i < r1.params.groups().size(); ++i)
    CHECK(r1.params.groups()[i].value == r2.params.groups()[i].value);

  const auto r3 = train_stage1(data, cfg, tc, 78, opts);
  CHECK_FALSE(r1.epoch_losses == r3.epoch_losses);

  CHECK_THROWS_AS(train_stage1({}, cfg, tc, 1), InvalidInputError);
}

TEST_CASE("stage-1 mean epoch loss is non-increasing over the first 3 epochs (5 seeds)") {
  const auto cfg = tiny_config();
  TrainConfig tc;
  tc.batch_size = 8;
  TrainOptions opts;
  opts.max_epochs = 3;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto data = tiny_dataset(cfg, 48, seed * 101);
    const auto r = train_stage1(data, cfg, tc, seed, opts);
    REQUIRE(r.epoch_losses.size() == 3);
    CHECK(r.epoch_losses[1] <= r.epoch_losses[0]);
    CHECK(r.epoch_losses[2] <= r.epoch_losses[1]);
  }
}

TEST_CASE("train_stage2 freezes every stage-1 group bit-identically") {
  const auto cfg = tiny_config();
  const auto data = tiny_dataset(cfg, 10, 31);
  TrainConfig tc;
  tc.batch_size = 5;
  TrainOptions opts;
  opts.max_epochs = 2;
  const auto stage1 = train_stage1(data, cfg, tc, 7, opts);
  const auto stage2 = train_stage2(data, stage1.params, cfg, tc, 8, opts);
  bool qa_changed = false;
  for (const auto& g : stage2.params.groups()) {
    if (g.name.rfind("sg.", 0) == 0) {
      CHECK(g.value == stage1.params.at(g.name));
      CHECK_FALSE(g.trainable);
    } else if (!(g.value == ModelParams::init(cfg, Rng::mix(8, 0x5732)).at(g.name))) {
      qa_changed = true;
    }
  }
  CHECK(qa_changed);

  // Missing stage-1 groups are a state error.
  ModelParams empty;
  empty.config = cfg;
  CHECK_THROWS_AS(train_stage2(data, empty, cfg, tc, 3, opts), StateError);
}

TEST_CASE("evaluate: constant predictor on a single-answer set scores 1.0; groups partition") {
  auto cfg = tiny_config();
  Rng rng(8);
  Dataset data;
  for (int i = 0; i < 6; ++i) {
    auto inst = random_instance(cfg, rng);
    inst.answer_index = 0;
    inst.template_tag = i % 2 ? "even" : "odd";
    data.push_back(std::move(inst));
  }
  auto params = ModelParams::init(cfg, 3);
  params.at("qa.cls.w").fill(0.0);
  params.at("qa.cls.b").fill(0.0);
  // All logits zero: argmax is index 0 everywhere.
  const auto report = evaluate(data, params);
  CHECK(report.overall == 1.0);
  long total = 0;
  for (const auto& [tag, counts] : report.by_template) total += counts.second;
  CHECK(total == report.total);
}

TEST_CASE("evaluate: random predictor on a balanced binary set is near 0.5") {
  auto cfg = tiny_config();
  cfg.num_answers = 2;
  Rng rng(9);
  Dataset data;
  for (int i = 0; i < 1000; ++i) {
    auto inst = random_instance(cfg, rng);
    inst.answer_index = i % 2;
    data.push_back(std::move(inst));
  }
  const auto params = ModelParams::init(cfg, 17);
  const auto report = evaluate(data, params);
  CHECK(report.overall >= 0.45);
  CHECK(report.overall <= 0.55);
}

TEST_CASE("checkpoint round-trip preserves forward outputs bit-exactly") {
  const auto cfg = tiny_config();
  Rng rng(10);
  const auto inst = random_instance(cfg, rng);
  const auto params = ModelParams::init(cfg, 23);
  TempDir dir;
  const auto path = (dir.path / "model.ckpt").string();
  save_checkpoint(params, path);
  const auto loaded = load_checkpoint(path);
  require_same_config(params.config, loaded.config);
  CHECK(stage1_logits(params, inst) == stage1_logits(loaded, inst));
  CHECK(stage2_logits(params, inst) == stage2_logits(loaded, inst));
}

TEST_CASE("corrupted magic bytes and truncation raise checkpoint errors") {
  const auto cfg = tiny_config();
  const auto params = ModelParams::init(cfg, 29);
  TempDir dir;
  const auto path = (dir.path / "model.ckpt").string();
  save_checkpoint(params, path);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("JUNK", 4);
  }
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);

  save_checkpoint(params, path);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
}

TEST_CASE("cross-config load is rejected naming the mismatched field") {
  auto cfg = tiny_config();
  auto other = cfg;
  other.dim = 16;
  try {
    require_same_config(cfg, other);
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("dim") != std::string::npos);
  }
}

TEST_CASE("config json round trip") {
  auto cfg = tiny_config();
  const auto back = ModelConfig::from_json(cfg.to_json());
  CHECK(back == cfg);
  TrainConfig tc;
  tc.base_lr = 3e-4;
  const auto tback = TrainConfig::from_json(tc.to_json());
  CHECK(tback.base_lr == tc.base_lr);
  CHECK(tback.stage2_epochs == tc.stage2_epochs);
}

TEST_CASE("ablation hooks change the forward pass") {
  const auto cfg = tiny_config();
  Rng rng(11);
  const auto inst = random_instance(cfg, rng);
  const auto params = ModelParams::init(cfg, 41);
  const Mat base = stage2_logits(params, inst);
  AblationSpec flat;
  flat.flat_gaussians = true;
  AblationSpec zero_rel;
  zero_rel.zero_relation_summary = true;
  CHECK_FALSE(base == stage2_logits(params, inst, nullptr, flat));
  CHECK_FALSE(base == stage2_logits(params, inst, nullptr, zero_rel));
}
