#include "shrike/scenegraph.hpp"

#include <algorithm>
#include <cmath>
#include <charconv>
#include <limits>
#include <set>

#include <json.hpp>

#include "shrike/error.hpp"

namespace shrike::scenegraph {

using nlohmann::json;

const std::array<std::string_view, kObjectVocabSize>& object_names() {
  static const std::array<std::string_view, kObjectVocabSize> names = {
      "cello",    "congas",          "pipa",  "ukulele",       "piano",  "accordion",
      "clarinet", "guzheng",         "saxophone", "drum",      "violin", "bagpipe",
      "bassoon",  "acoustic_guitar", "banjo", "electric_bass", "flute",  "trumpet",
      "erhu",     "xylophone",       "tuba",  "suona",         "person", "scene"};
  return names;
}

const std::array<std::string_view, kPredicateVocabSize>& predicate_names() {
  static const std::array<std::string_view, kPredicateVocabSize> names = {
      "left", "right", "middle", "play", "hold", "louder"};
  return names;
}

int object_index(std::string_view name) {
  const auto& names = object_names();
  for (int i = 0; i < kObjectVocabSize; ++i)
    if (names[static_cast<std::size_t>(i)] == name) return i;
  throw VocabularyError("unknown object name: '" + std::string(name) + "'");
}

int predicate_index(std::string_view name) {
  const auto& names = predicate_names();
  for (int i = 0; i < kPredicateVocabSize; ++i)
    if (names[static_cast<std::size_t>(i)] == name) return i;
  throw VocabularyError("unknown predicate name: '" + std::string(name) + "'");
}

ObjectLabel ObjectLabel::of(std::string_view name, int instance) {
  ObjectLabel l;
  l.category = object_index(name);
  l.instance = instance;
  return l;
}

std::string ObjectLabel::to_string() const {
  if (is_none()) throw InvalidInputError("ObjectLabel: None has no textual form");
  std::string s(object_names()[static_cast<std::size_t>(category)]);
  if (instance >= 1) s += "#" + std::to_string(instance);
  return s;
}

ObjectLabel ObjectLabel::parse(std::string_view token) {
  ObjectLabel l;
  const auto hash = token.find('#');
  if (hash == std::string_view::npos) {
    l.category = object_index(token);
    return l;
  }
  l.category = object_index(token.substr(0, hash));
  const std::string_view idx = token.substr(hash + 1);
  int value = 0;
  const auto [ptr, ec] = std::from_chars(idx.data(), idx.data() + idx.size(), value);
  if (ec != std::errc() || ptr != idx.data() + idx.size() || value < 1)
    throw SchemaError("bad instance index in object token: '" + std::string(token) + "'");
  l.instance = value;
  return l;
}

void Triplet::validate() const {
  const bool any_none = subject.is_none() || predicate == kPredicateNone || object.is_none();
  if (any_none && !is_none())
    throw SchemaError("triplet mixes None and non-None components");
  if (subject.category < 0 || subject.category > kObjectNone || object.category < 0 ||
      object.category > kObjectNone || predicate < 0 || predicate > kPredicateNone)
    throw InvalidInputError("triplet label index out of range");
}

int SegmentGraph::valid_count() const {
  int n = 0;
  for (const Triplet& t : triplets)
    if (!t.is_none()) ++n;
  return n;
}

void SegmentGraph::validate() const {
  if (static_cast<int>(triplets.size()) != kTripletsPerSegment)
    throw SchemaError("segment must hold exactly " + std::to_string(kTripletsPerSegment) +
                      " triplets");
  bool seen_none = false;
  for (const Triplet& t : triplets) {
    t.validate();
    if (t.is_none()) {
      seen_none = true;
    } else if (seen_none) {
      throw SchemaError("valid triplet after None padding");
    }
  }
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    if (triplets[i].is_none()) continue;
    for (std::size_t j = i + 1; j < triplets.size(); ++j)
      if (triplets[i] == triplets[j]) throw SchemaError("duplicate triplet in segment");
  }
}

void VideoAnnotation::validate() const {
  if (static_cast<int>(graphs.size()) != kSegmentsPerVideo)
    throw SchemaError("annotation must hold exactly " + std::to_string(kSegmentsPerVideo) +
                      " segments");
  for (int i = 0; i < kSegmentsPerVideo; ++i) {
    if (graphs[static_cast<std::size_t>(i)].segment_index != i)
      throw SchemaError("segment indices must be 0..T-1 in order");
    graphs[static_cast<std::size_t>(i)].validate();
  }
}

TripletPrediction TripletPrediction::from_logits_row(const double* row) {
  TripletPrediction p;
  for (int i = 0; i < kObjectClasses; ++i) p.subject_logits[static_cast<std::size_t>(i)] = row[i];
  for (int i = 0; i < kPredicateClasses; ++i)
    p.predicate_logits[static_cast<std::size_t>(i)] = row[kObjectClasses + i];
  for (int i = 0; i < kObjectClasses; ++i)
    p.object_logits[static_cast<std::size_t>(i)] = row[kObjectClasses + kPredicateClasses + i];
  return p;
}

namespace {

template <std::size_t N>
int argmax(const std::array<double, N>& a) {
  int best = 0;
  for (std::size_t i = 1; i < N; ++i)
    if (a[i] > a[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

template <std::size_t N>
double neg_log_softmax_at(const std::array<double, N>& logits, int target) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  return mx + std::log(sum) - logits[static_cast<std::size_t>(target)];
}

}  // namespace

Triplet TripletPrediction::argmax() const {
  Triplet t;
  t.subject.category = ::shrike::scenegraph::argmax(subject_logits);
  t.predicate = ::shrike::scenegraph::argmax(predicate_logits);
  t.object.category = ::shrike::scenegraph::argmax(object_logits);
  return t;
}

VideoAnnotation parse_annotation(const std::string& text, std::vector<std::string>* warnings) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("annotation is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("video_id") || !doc["video_id"].is_string() ||
      !doc.contains("segments") || !doc["segments"].is_array())
    throw SchemaError("annotation must be {video_id: str, segments: [...]}");

  VideoAnnotation va;
  va.video_id = doc["video_id"].get<std::string>();
  const auto& segments = doc["segments"];
  if (static_cast<int>(segments.size()) != kSegmentsPerVideo)
    throw SchemaError("annotation must have exactly " + std::to_string(kSegmentsPerVideo) +
                      " segments, got " + std::to_string(segments.size()));

  va.graphs.assign(kSegmentsPerVideo, SegmentGraph{});
  std::set<int> seen;
  for (const auto& seg : segments) {
    if (!seg.is_object() || !seg.contains("t") || !seg["t"].is_number_integer() ||
        !seg.contains("triplets") || !seg["triplets"].is_array())
      throw SchemaError("segment must be {t: int, triplets: [...]}");
    const int t = seg["t"].get<int>();
    if (t < 0 || t >= kSegmentsPerVideo) throw SchemaError("segment index out of range");
    if (!seen.insert(t).second) throw SchemaError("duplicate segment index");

    SegmentGraph g;
    g.segment_index = t;
    int kept = 0;
    for (const auto& tr : seg["triplets"]) {
      if (!tr.is_object() || !tr.contains("s") || !tr.contains("p") || !tr.contains("o") ||
          !tr["s"].is_string() || !tr["p"].is_string() || !tr["o"].is_string())
        throw SchemaError("triplet must be {s: str, p: str, o: str}");
      if (kept == kTripletsPerSegment) {
        if (warnings)
          warnings->push_back(va.video_id + ": segment " + std::to_string(t) + " has more than " +
                              std::to_string(kTripletsPerSegment) + " triplets; extras dropped");
        break;
      }
      Triplet trip;
      trip.subject = ObjectLabel::parse(tr["s"].get<std::string>());
      trip.predicate = predicate_index(tr["p"].get<std::string>());
      trip.object = ObjectLabel::parse(tr["o"].get<std::string>());
      g.triplets.push_back(trip);
      ++kept;
    }
    g.triplets.resize(kTripletsPerSegment);  // pad with None-triplets
    g.validate();
    va.graphs[static_cast<std::size_t>(t)] = std::move(g);
  }
  va.validate();
  return va;
}

std::string serialize_annotation(const VideoAnnotation& annotation) {
  annotation.validate();
  json doc;
  doc["video_id"] = annotation.video_id;
  doc["segments"] = json::array();
  for (const SegmentGraph& g : annotation.graphs) {
    json seg;
    seg["t"] = g.segment_index;
    seg["triplets"] = json::array();
    for (const Triplet& t : g.triplets) {
      if (t.is_none()) continue;
      seg["triplets"].push_back({{"s", t.subject.to_string()},
                                 {"p", std::string(predicate_names()[static_cast<std::size_t>(t.predicate)])},
                                 {"o", t.object.to_string()}});
    }
    doc["segments"].push_back(std::move(seg));
  }
  return doc.dump(2);
}

double match_cost(const TripletPrediction& pred, const Triplet& gt) {
  return neg_log_softmax_at(pred.subject_logits, gt.subject.category) +
         neg_log_softmax_at(pred.predicate_logits, gt.predicate) +
         neg_log_softmax_at(pred.object_logits, gt.object.category);
}

namespace {

// O(n^3) assignment via potentials and shortest augmenting paths.
std::vector<int> solve_assignment(const Mat& a) {
  const int n = a.rows();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(n) + 1, 0);
  std::vector<int> way(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = a(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> result(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j)
    if (p[static_cast<std::size_t>(j)] > 0) result[static_cast<std::size_t>(p[static_cast<std::size_t>(j)]) - 1] = j - 1;
  return result;
}

double assignment_total(const Mat& a, const std::vector<int>& sigma) {
  double s = 0.0;
  for (int i = 0; i < a.rows(); ++i) s += a(i, sigma[static_cast<std::size_t>(i)]);
  return s;
}

double min_assignment_cost(const Mat& a) {
  if (a.rows() == 0) return 0.0;
  return assignment_total(a, solve_assignment(a));
}

}  // namespace

std::vector<int> hungarian_assign(const Mat& cost) {
  const int n = cost.rows();
  if (n == 0 || cost.cols() != n) throw InvalidInputError("hungarian_assign: matrix must be square");
  if (!cost.all_finite()) throw InvalidInputError("hungarian_assign: non-finite costs");

  const double best = min_assignment_cost(cost);
  const double tol = 1e-9 * (1.0 + std::abs(best));

  // Fix rows in order to the smallest feasible column: lexicographically
  // smallest among all optimal assignments.
  std::vector<int> sigma(static_cast<std::size_t>(n), -1);
  std::vector<int> free_cols(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) free_cols[static_cast<std::size_t>(j)] = j;
  double fixed_cost = 0.0;
  for (int i = 0; i < n; ++i) {
    const int rem = n - i - 1;
    for (std::size_t cand = 0; cand < free_cols.size(); ++cand) {
      const int j = free_cols[cand];
      double completion = 0.0;
      if (rem > 0) {
        Mat sub(rem, rem);
        int rr = 0;
        for (int r = i + 1; r < n; ++r, ++rr) {
          int cc = 0;
          for (std::size_t k = 0; k < free_cols.size(); ++k) {
            if (k == cand) continue;
            sub(rr, cc++) = cost(r, free_cols[k]);
          }
        }
        completion = min_assignment_cost(sub);
      }
      if (fixed_cost + cost(i, j) + completion <= best + tol) {
        sigma[static_cast<std::size_t>(i)] = j;
        fixed_cost += cost(i, j);
        free_cols.erase(free_cols.begin() + static_cast<std::ptrdiff_t>(cand));
        break;
      }
    }
    if (sigma[static_cast<std::size_t>(i)] < 0)
      throw StateError("hungarian_assign: failed to extend optimal assignment");
  }
  return sigma;
}

double rel_loss(const std::vector<std::vector<TripletPrediction>>& preds,
                const std::vector<SegmentGraph>& gt) {
  if (preds.size() != gt.size() || preds.empty())
    throw InvalidInputError("rel_loss: segment count mismatch");
  double total = 0.0;
  for (std::size_t t = 0; t < preds.size(); ++t) {
    const auto& p = preds[t];
    const auto& g = gt[t].triplets;
    if (p.size() != g.size())
      throw InvalidInputError("rel_loss: prediction count differs from padded ground truth");
    const int n = static_cast<int>(p.size());
    Mat cost(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        cost(i, j) = match_cost(p[static_cast<std::size_t>(i)], g[static_cast<std::size_t>(j)]);
    const auto sigma = hungarian_assign(cost);
    double seg = 0.0;
    for (int i = 0; i < n; ++i) {
      const Triplet& target = g[static_cast<std::size_t>(sigma[static_cast<std::size_t>(i)])];
      const double w = target.is_none() ? kNoneTripletWeight : 1.0;
      seg += w * cost(i, sigma[static_cast<std::size_t>(i)]);
    }
    total += seg;
  }
  return total / static_cast<double>(preds.size());
}

double rel_loss(const std::vector<std::vector<TripletPrediction>>& preds,
                const VideoAnnotation& gt) {
  gt.validate();
  return rel_loss(preds, gt.graphs);
}

MatchStats match_stats(const std::vector<std::vector<TripletPrediction>>& preds,
                       const std::vector<SegmentGraph>& gt) {
  if (preds.size() != gt.size()) throw InvalidInputError("match_stats: segment count mismatch");
  MatchStats stats;
  for (std::size_t t = 0; t < preds.size(); ++t) {
    const auto& p = preds[t];
    const auto& g = gt[t].triplets;
    const int n = static_cast<int>(p.size());
    Mat cost(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        cost(i, j) = match_cost(p[static_cast<std::size_t>(i)], g[static_cast<std::size_t>(j)]);
    const auto sigma = hungarian_assign(cost);
    for (int i = 0; i < n; ++i) {
      const Triplet& target = g[static_cast<std::size_t>(sigma[static_cast<std::size_t>(i)])];
      const Triplet guess = p[static_cast<std::size_t>(i)].argmax();
      if (!target.is_none()) {
        Triplet category_target = target;
        category_target.subject.instance = 0;
        category_target.object.instance = 0;
        if (guess == category_target) {
          ++stats.tp;
        } else {
          ++stats.fn;
          if (!guess.is_none()) ++stats.fp;
        }
      } else if (!guess.is_none()) {
        ++stats.fp;
      }
    }
  }
  return stats;
}

}  // namespace shrike::scenegraph
