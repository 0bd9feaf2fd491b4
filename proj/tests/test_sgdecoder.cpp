#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "shrike/sgdecoder.hpp"

using namespace shrike;
using namespace shrike::sgdecoder;

TEST_CASE("encoding at segment 0 is [0, 1, 0, 1, ...]") {
  const Mat pe = sinusoidal_encoding(4, 6);
  for (int j = 0; j < 6; j += 2) {
    CHECK(pe(0, j) == 0.0);
    CHECK(pe(0, j + 1) == 1.0);
  }
}

TEST_CASE("encoding at segment 3, D=8 matches the closed form") {
  const Mat pe = sinusoidal_encoding(5, 8);
  for (int i = 0; i < 4; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / 8.0);
    CHECK(pe(3, 2 * i) == doctest::Approx(std::sin(3 * freq)).epsilon(1e-15));
    CHECK(pe(3, 2 * i + 1) == doctest::Approx(std::cos(3 * freq)).epsilon(1e-15));
  }
}

TEST_CASE("same seed gives an identical query bank") {
  const auto a = QueryBank::init(3, 4, 8, 1234);
  const auto b = QueryBank::init(3, 4, 8, 1234);
  CHECK(a.queries == b.queries);
  CHECK(a.positional == b.positional);
  const auto c = QueryBank::init(3, 4, 8, 1235);
  CHECK_FALSE(a.queries == c.queries);
}

TEST_CASE("zero-weight layers return queries plus positional encodings") {
  const auto bank = QueryBank::init(3, 2, 6, 7);
  Rng rng(1);
  fusion::FeatureSequence f_av{Mat::normal(3, 6, 0, 1, rng), fusion::Modality::fused, 1};
  const Mat out = decode_relations(bank, f_av, DecoderParams::zeros(6));
  const Mat expect = add(bank.queries, bank.expanded_positional());
  CHECK(max_abs_diff(out, expect) == 0.0);
}

TEST_CASE("output shape is (T*L) x D and matches a composed one-token oracle") {
  Rng rng(2);
  const auto bank = QueryBank::init(1, 1, 4, 11);
  fusion::FeatureSequence f_av{Mat::normal(1, 4, 0, 1, rng), fusion::Modality::fused, 1};
  const auto params = DecoderParams::init(4, rng);
  const Mat out = decode_relations(bank, f_av, params);
  REQUIRE(out.rows() == 1);
  REQUIRE(out.cols() == 4);

  // With a single token, each attention reduces to projected values.
  Mat x = add(bank.queries, bank.expanded_positional());
  for (const auto& layer : params.layers) {
    x = add(x, matmul(matmul(x, layer.self_attn.w_v), layer.self_attn.w_o));
    x = add(x, matmul(matmul(f_av.data, layer.cross_attn.w_v), layer.cross_attn.w_o));
    Mat h = add(matmul(x, layer.ffn_w1), layer.ffn_b1);
    for (int j = 0; j < h.cols(); ++j) {
      const double v = h(0, j);
      h(0, j) = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    }
    x = add(x, add(matmul(h, layer.ffn_w2), layer.ffn_b2));
  }
  CHECK(max_abs_diff(out, x) <= 1e-12);
}

TEST_CASE("decode_relations is invariant to permuting cross-attention key/value rows") {
  Rng rng(3);
  const auto bank = QueryBank::init(4, 3, 6, 21);
  Mat f_av = Mat::normal(4, 6, 0, 1, rng);
  const auto params = DecoderParams::init(6, rng);
  const Mat base = decode_relations(bank, {f_av, fusion::Modality::fused, 1}, params);

  const std::vector<int> perm = {2, 0, 3, 1};
  Mat shuffled(4, 6);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j) shuffled(i, j) = f_av(perm[static_cast<std::size_t>(i)], j);
  const Mat out = decode_relations(bank, {shuffled, fusion::Modality::fused, 1}, params);
  CHECK(max_abs_diff(base, out) <= 1e-12);
}

TEST_CASE("zero prediction head yields uniform (all-zero) logits; head is affine in w2") {
  Rng rng(4);
  Mat f_rel = Mat::normal(5, 6, 0, 1, rng);
  const Mat logits = predict_triplets(f_rel, PredictionHeadParams::zeros(6));
  for (int i = 0; i < logits.rows(); ++i)
    for (int j = 0; j < logits.cols(); ++j) CHECK(logits(i, j) == 0.0);

  auto head = PredictionHeadParams::init(6, rng);
  const Mat base = predict_triplets(f_rel, head);
  auto doubled = head;
  doubled.w2 *= 2.0;
  doubled.b2 *= 2.0;
  const Mat twice = predict_triplets(f_rel, doubled);
  CHECK(max_abs_diff(twice, scale(base, 2.0)) <= 1e-12);
}

TEST_CASE("predict_triplets matches a two-affine-map oracle") {
  Rng rng(5);
  Mat f_rel = Mat::normal(3, 4, 0, 1, rng);
  const auto head = PredictionHeadParams::init(4, rng);
  const Mat out = predict_triplets(f_rel, head);

  Mat h = matmul(f_rel, head.w1);
  for (int i = 0; i < h.rows(); ++i)
    for (int j = 0; j < h.cols(); ++j) {
      const double v = h(i, j) + head.b1(0, j);
      h(i, j) = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    }
  Mat expect = matmul(h, head.w2);
  for (int i = 0; i < expect.rows(); ++i)
    for (int j = 0; j < expect.cols(); ++j) expect(i, j) += head.b2(0, j);
  CHECK(max_abs_diff(out, expect) <= 1e-12);
}

TEST_CASE("select_topk with top_k = L returns all rows sorted by weight") {
  Rng rng(6);
  Mat q = Mat::normal(1, 4, 0, 1, rng);
  Mat f = Mat::normal(6, 4, 0, 1, rng);
  const auto r = select_topk(q, f, 6);
  REQUIRE(r.indices.size() == 6);
  for (std::size_t i = 1; i < r.indices.size(); ++i) {
    const double a = r.weights[static_cast<std::size_t>(r.indices[i - 1])];
    const double b = r.weights[static_cast<std::size_t>(r.indices[i])];
    CHECK(a >= b);
  }
  double sum = 0.0;
  for (double w : r.weights) sum += w;
  CHECK(std::abs(sum - 1.0) <= 1e-9);
}

TEST_CASE("a dominant aligned row is selected first") {
  Mat q(1, 4);
  q(0, 0) = 1.0;
  Mat f = Mat::zeros(5, 4);
  f(3, 0) = 50.0;   // large multiple of q
  f(0, 1) = 1.0;    // orthogonal rows
  f(1, 2) = 1.0;
  f(2, 3) = 1.0;
  f(4, 1) = -1.0;
  const auto r = select_topk(q, f, 2);
  CHECK(r.indices[0] == 3);
  for (int j = 0; j < 4; ++j) CHECK(r.features(0, j) == f(3, j));
}

TEST_CASE("select_topk indices match a full-sort oracle with index tie-break") {
  Rng rng(7);
  for (int rep = 0; rep < 50; ++rep) {
    const int l = rng.uniform_int(2, 9);
    const int k = rng.uniform_int(1, l);
    Mat q = Mat::normal(1, 5, 0, 1, rng);
    Mat f = Mat::normal(l, 5, 0, 1, rng);
    const auto r = select_topk(q, f, k);

    std::vector<int> order(static_cast<std::size_t>(l));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      const double wa = r.weights[static_cast<std::size_t>(a)];
      const double wb = r.weights[static_cast<std::size_t>(b)];
      if (wa != wb) return wa > wb;
      return a < b;
    });
    for (int i = 0; i < k; ++i) CHECK(r.indices[static_cast<std::size_t>(i)] == order[static_cast<std::size_t>(i)]);
  }
}

TEST_CASE("ties break toward the lower index") {
  Mat q = Mat::zeros(1, 3);  // all scores equal -> uniform weights
  Mat f(4, 3);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) f(i, j) = i + j;
  const auto r = select_topk(q, f, 3);
  CHECK(r.indices == std::vector<int>{0, 1, 2});
}

TEST_CASE("select_topk rejects out-of-range top_k") {
  Mat q = Mat::zeros(1, 3);
  Mat f = Mat::zeros(4, 3);
  CHECK_THROWS_AS(select_topk(q, f, 0), InvalidInputError);
  CHECK_THROWS_AS(select_topk(q, f, 5), InvalidInputError);
}

TEST_CASE("decoder gradients w.r.t. queries match finite differences") {
  Rng rng(8);
  const int t_len = 2, l_len = 2, d = 4;
  const auto bank = QueryBank::init(t_len, l_len, d, 31);
  Mat f_av = Mat::normal(t_len, d, 0, 1, rng);
  const auto params = DecoderParams::init(d, rng);
  Mat pe = bank.expanded_positional();

  auto loss_of = [&](const Mat& queries) {
    ad::Tape t;
    ad::Var q = ad::add(t, t.leaf(queries), t.leaf(pe));
    ad::Var out = decode_relations(t, q, t.leaf(f_av), make_vars(t, params));
    ad::Var m = ad::mean_rows(t, out);
    Mat ones(d, 1);
    ones.fill(1.0);
    ad::Var s = ad::matmul(t, ad::gelu(t, m), t.leaf(ones));
    return t.value(s)(0, 0);
  };

  ad::Tape t;
  ad::Var qv = t.leaf(bank.queries, true);
  ad::Var q = ad::add(t, qv, t.leaf(pe));
  ad::Var out = decode_relations(t, q, t.leaf(f_av), make_vars(t, params));
  ad::Var m = ad::mean_rows(t, out);
  Mat ones(d, 1);
  ones.fill(1.0);
  ad::Var s = ad::matmul(t, ad::gelu(t, m), t.leaf(ones));
  t.backward(s);
  const Mat& grad = t.grad(qv);

  const double h = 1e-6;
  for (int i = 0; i < bank.queries.rows(); ++i) {
    for (int j = 0; j < d; ++j) {
      Mat qp = bank.queries, qm = bank.queries;
      qp(i, j) += h;
      qm(i, j) -= h;
      const double fd = (loss_of(qp) - loss_of(qm)) / (2 * h);
      const double an = grad(i, j);
      CHECK(std::abs(an - fd) <= 1e-4 * std::max(1.0, std::max(std::abs(an), std::abs(fd))));
    }
  }
}
