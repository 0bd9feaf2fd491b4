#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "shrike/synth.hpp"

using namespace shrike;
using namespace shrike::synth;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("shrike_synth_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

// Solves (X^T X + lambda I) W = X^T Y by Gaussian elimination.
Mat ridge_fit(const Mat& x, const Mat& y, double lambda) {
  Mat a = matmul_tn(x, x);
  for (int i = 0; i < a.rows(); ++i) a(i, i) += lambda;
  Mat b = matmul_tn(x, y);
  const int n = a.rows(), m = b.cols();
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
    for (int c = 0; c < n; ++c) std::swap(a(col, c), a(pivot, c));
    for (int c = 0; c < m; ++c) std::swap(b(col, c), b(pivot, c));
    const double d = a(col, col);
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a(r, col) / d;
      for (int c = 0; c < n; ++c) a(r, c) -= f * a(col, c);
      for (int c = 0; c < m; ++c) b(r, c) -= f * b(col, c);
    }
  }
  Mat w(n, m);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < m; ++c) w(r, c) = b(r, c) / a(r, r);
  return w;
}

}  // namespace

TEST_CASE("answer vocabulary holds 31 classes in the documented order") {
  const auto& vocab = answer_vocab();
  REQUIRE(vocab.size() == kAnswerClasses);
  CHECK(vocab[0] == "cello");
  CHECK(vocab[21] == "suona");
  CHECK(vocab[22] == "yes");
  CHECK(vocab[30] == "right");
  CHECK(answer_index("no") == 23);
  CHECK_THROWS_AS(answer_index("maybe"), VocabularyError);
}

TEST_CASE("gen_world is deterministic per stream and respects the invariants") {
  Rng a(42), b(42);
  for (int rep = 0; rep < 50; ++rep) {
    const auto wa = gen_world(a);
    const auto wb = gen_world(b);
    REQUIRE(wa.entities.size() == wb.entities.size());
    for (std::size_t i = 0; i < wa.entities.size(); ++i) {
      CHECK(wa.entities[i].instrument == wb.entities[i].instrument);
      CHECK(wa.entities[i].t_on == wb.entities[i].t_on);
    }
    for (const auto& e : wa.entities) {
      CHECK(e.t_on >= 0);
      CHECK(e.t_off <= wa.segments);
      CHECK(e.t_on < e.t_off);
    }
  }
}

TEST_CASE("over 1000 worlds every instrument appears") {
  Rng rng(7);
  std::set<int> seen;
  for (int rep = 0; rep < 1000; ++rep) {
    const auto w = gen_world(rng);
    for (const auto& e : w.entities) seen.insert(e.instrument);
  }
  CHECK(seen.size() == kInstrumentCount);
}

TEST_CASE("world_to_graphs: silent segments carry only hold and side triplets") {
  WorldState w;
  w.entities.push_back({0, 0, 2, 3, 6});
  w.entities.push_back({5, 1, 4, 4, 8});
  const auto va = world_to_graphs(w, "vid");
  const auto& g0 = va.graphs[0];  // nothing playing at t=0
  const int play = scenegraph::predicate_index("play");
  const int louder = scenegraph::predicate_index("louder");
  for (const auto& t : g0.triplets) {
    if (t.is_none()) continue;
    CHECK(t.predicate != play);
    CHECK(t.predicate != louder);
  }
  CHECK(g0.valid_count() == 4);  // 2 hold + 2 side
}

TEST_CASE("world_to_graphs: exactly one correctly oriented louder triplet") {
  WorldState w;
  w.entities.push_back({3, 0, 5, 2, 7});   // loud 5
  w.entities.push_back({10, 2, 2, 4, 9});  // loud 2
  const auto va = world_to_graphs(w, "vid");
  const int louder = scenegraph::predicate_index("louder");
  const auto& g5 = va.graphs[5];  // both playing at t=5
  int count = 0;
  for (const auto& t : g5.triplets) {
    if (t.is_none() || t.predicate != louder) continue;
    ++count;
    CHECK(t.subject.category == 3);
    CHECK(t.object.category == 10);
  }
  CHECK(count == 1);
}

TEST_CASE("world_to_graphs matches a rule-by-rule oracle on 100 random worlds") {
  Rng rng(11);
  for (int rep = 0; rep < 100; ++rep) {
    const auto w = gen_world(rng);
    const auto va = world_to_graphs(w, "vid");
    va.validate();
    for (int t = 0; t < w.segments; ++t) {
      std::set<std::array<int, 5>> expect;
      const int person = scenegraph::object_index("person");
      const int scene = scenegraph::object_index("scene");
      for (const auto& e : w.entities) {
        expect.insert({person,
                       scenegraph::predicate_index(e.playing_at(t) ? "play" : "hold"),
                       e.instrument, 0, 0});
        const char* side = e.side == 0 ? "left" : e.side == 1 ? "middle" : "right";
        expect.insert({e.instrument, scenegraph::predicate_index(side), scene, 0, 0});
      }
      for (const auto& a : w.entities)
        for (const auto& b : w.entities)
          if (&a != &b && a.playing_at(t) && b.playing_at(t) && a.loudness > b.loudness)
            expect.insert({a.instrument, scenegraph::predicate_index("louder"), b.instrument, 0, 0});

      std::set<std::array<int, 5>> got;
      for (const auto& trip : va.graphs[static_cast<std::size_t>(t)].triplets) {
        if (trip.is_none()) continue;
        got.insert({trip.subject.category, trip.predicate, trip.object.category, 0, 0});
      }
      CHECK(got == expect);
    }
  }
}

TEST_CASE("world_to_graphs output parses through parse_annotation") {
  Rng rng(13);
  for (int rep = 0; rep < 25; ++rep) {
    const auto w = gen_world(rng);
    const auto va = world_to_graphs(w, "vid_" + std::to_string(rep));
    const auto text = scenegraph::serialize_annotation(va);
    const auto back = scenegraph::parse_annotation(text);
    for (int t = 0; t < w.segments; ++t)
      CHECK(back.graphs[static_cast<std::size_t>(t)].triplets ==
            va.graphs[static_cast<std::size_t>(t)].triplets);
  }
}

TEST_CASE("features are deterministic and silent audio segments are noise only") {
  Rng rng(17);
  const auto w = gen_world(rng);
  const auto emb = DatasetEmbedding::init(16, w.segments, 99);
  Rng n1(5), n2(5);
  const auto f1 = world_to_features(w, emb, 4, n1, 0.05);
  const auto f2 = world_to_features(w, emb, 4, n2, 0.05);
  CHECK(f1.f_v == f2.f_v);
  CHECK(f1.f_a == f2.f_a);
  CHECK(f1.f_p == f2.f_p);

  // Zero noise: a segment where nothing plays has an all-zero audio row.
  WorldState quiet;
  quiet.entities.push_back({0, 0, 2, 5, 9});
  quiet.entities.push_back({1, 1, 3, 6, 9});
  Rng n3(1);
  const auto f = world_to_features(quiet, emb, 4, n3, 0.0);
  for (int j = 0; j < 16; ++j) CHECK(f.f_a(0, j) == 0.0);
  double row5 = 0.0;
  for (int j = 0; j < 16; ++j) row5 += std::abs(f.f_a(5, j));
  CHECK(row5 > 0.0);
}

TEST_CASE("ridge regression recovers the playing indicator from F_a at eta = 0.05") {
  const int dim = 32;
  const auto emb = DatasetEmbedding::init(dim, 10, 123);
  Rng rng(31);
  std::vector<Mat> xs, ys;
  for (int rep = 0; rep < 200; ++rep) {
    const auto w = gen_world(rng);
    Rng noise(rng.next_u64());
    const auto f = world_to_features(w, emb, 4, noise, 0.05);
    for (int t = 0; t < w.segments; ++t) {
      Mat x(1, dim), y(1, kInstrumentCount);
      for (int j = 0; j < dim; ++j) x(0, j) = f.f_a(t, j);
      for (const auto& e : w.entities) y(0, e.instrument) = e.playing_at(t) ? 1.0 : 0.0;
      xs.push_back(std::move(x));
      ys.push_back(std::move(y));
    }
  }
  const int n = static_cast<int>(xs.size());
  Mat x(n, dim), y(n, kInstrumentCount);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dim; ++j) x(i, j) = xs[static_cast<std::size_t>(i)](0, j);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < kInstrumentCount; ++j) y(i, j) = ys[static_cast<std::size_t>(i)](0, j);

  const Mat w_fit = ridge_fit(x, y, 1e-3);
  const Mat pred = matmul(x, w_fit);
  long hits = 0, total = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < kInstrumentCount; ++j) {
      const bool guess = pred(i, j) > 0.5;
      const bool truth = y(i, j) > 0.5;
      hits += guess == truth;
      ++total;
    }
  CHECK(static_cast<double>(hits) / static_cast<double>(total) >= 0.99);
}

TEST_CASE("1000 generated answers match the oracle re-derivation") {
  GenOptions opts;
  opts.n = 1000;
  opts.seed = 2024;
  opts.dim = 16;
  const auto emb = DatasetEmbedding::init(opts.dim, opts.segments, opts.seed);
  for (int id = 0; id < opts.n; ++id) {
    const auto inst = gen_instance(opts, emb, id);
    Rng world_rng(inst.world_seed);
    const auto world = gen_world(world_rng, opts.segments);
    const auto t = template_from_name(inst.template_tag);
    CHECK(inst.answer_index == derive_answer(world, t, inst.question));
  }
}

TEST_CASE("counting questions at silent segments answer zero") {
  WorldState w;
  w.entities.push_back({0, 0, 2, 5, 9});
  w.entities.push_back({1, 1, 3, 6, 9});
  CHECK(derive_answer(w, Template::counting, "how many instruments are playing at segment 0") ==
        answer_index("zero"));
  CHECK(derive_answer(w, Template::counting, "how many instruments are playing at segment 6") ==
        answer_index("two"));
}

TEST_CASE("temporal questions name the strictly earliest instrument") {
  WorldState w;
  w.entities.push_back({4, 0, 2, 3, 9});
  w.entities.push_back({9, 1, 3, 1, 5});
  CHECK(derive_answer(w, Template::temporal, "which instrument sounds first") == 9);

  const auto emb = DatasetEmbedding::init(8, 10, 5);
  Rng rng(1);
  auto qa = gen_qa(w, Template::temporal, emb, 4, rng);
  REQUIRE(qa.has_value());
  CHECK(qa->answer_index == 9);

  // Tied onsets cannot be asked.
  WorldState tied = w;
  tied.entities[0].t_on = 1;
  Rng rng2(2);
  CHECK_FALSE(gen_qa(tied, Template::temporal, emb, 4, rng2).has_value());
}

TEST_CASE("answer-class balance per template is within 10 points of uniform over 2000 instances") {
  GenOptions opts;
  opts.n = 2000;
  opts.seed = 77;
  opts.dim = 8;  // feature width is irrelevant to the audit
  const auto emb = DatasetEmbedding::init(opts.dim, opts.segments, opts.seed);
  std::map<std::string, std::map<int, int>> freq;
  std::map<std::string, int> totals;
  for (int id = 0; id < opts.n; ++id) {
    const auto inst = gen_instance(opts, emb, id);
    ++freq[inst.template_tag][inst.answer_index];
    ++totals[inst.template_tag];
  }
  const std::map<std::string, int> classes = {{"existential", 2}, {"counting", 4},
                                              {"localization", 3}, {"comparative", 2},
                                              {"temporal", kInstrumentCount}};
  for (const auto& [tag, k] : classes) {
    const double uniform = 1.0 / k;
    for (const auto& [answer, count] : freq[tag]) {
      const double p = static_cast<double>(count) / totals[tag];
      INFO("template ", tag, " answer ", answer, " p ", p);
      CHECK(std::abs(p - uniform) <= 0.10);
    }
  }
}

TEST_CASE("gen_dataset is byte-identical per seed and splits match the ratios") {
  GenOptions opts;
  opts.n = 30;
  opts.seed = 7;
  opts.dim = 8;
  TempDir d1, d2;
  gen_dataset(opts, d1.path.string());
  opts.threads = 3;
  gen_dataset(opts, d2.path.string());

  for (const char* name : {"manifest.json", "instances.jsonl"}) {
    std::ifstream a(d1.path / name), b(d2.path / name);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    CHECK(sa.str() == sb.str());
  }

  const auto manifest = load_manifest(d1.path.string());
  CHECK(manifest.train_ids.size() == 24);
  CHECK(manifest.val_ids.size() == 3);
  CHECK(manifest.test_ids.size() == 3);

  const auto train = load_dataset(d1.path.string(), "train");
  CHECK(train.size() == 24);
  const auto all = load_dataset(d1.path.string(), "all");
  CHECK(all.size() == 30);
  CHECK_THROWS_AS(load_dataset(d1.path.string(), "dev"), InvalidInputError);

  // Loaded features are bit-identical to regeneration.
  const auto emb = DatasetEmbedding::init(opts.dim, opts.segments, opts.seed);
  const auto regen = gen_instance(opts, emb, all[5].id);
  CHECK(all[5].f_v == regen.f_v);
  CHECK(all[5].f_p == regen.f_p);
  CHECK(all[5].q_s == regen.q_s);
  CHECK(all[5].answer_index == regen.answer_index);
  CHECK(all[5].annotation.graphs == regen.annotation.graphs);
}

TEST_CASE("base64 float packing round trips") {
  Rng rng(3);
  const Mat m = Mat::normal(4, 5, 0, 2, rng);
  const auto text = encode_floats(m);
  const Mat back = decode_floats(text, 4, 5);
  CHECK(m == back);
  CHECK_THROWS_AS(decode_floats(text, 5, 5), SchemaError);
}
