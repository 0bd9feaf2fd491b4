#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "shrike/mat.hpp"

namespace shrike::scenegraph {

inline constexpr int kObjectVocabSize = 24;      // named objects
inline constexpr int kObjectClasses = 25;        // + None
inline constexpr int kPredicateVocabSize = 6;
inline constexpr int kPredicateClasses = 7;      // + None
inline constexpr int kTripletsPerSegment = 12;
inline constexpr int kSegmentsPerVideo = 10;
inline constexpr int kLogitsWidth = kObjectClasses + kPredicateClasses + kObjectClasses;  // 57

inline constexpr int kObjectNone = kObjectVocabSize;
inline constexpr int kPredicateNone = kPredicateVocabSize;

// Category index -> canonical name. Instruments first, then person and scene.
const std::array<std::string_view, kObjectVocabSize>& object_names();
const std::array<std::string_view, kPredicateVocabSize>& predicate_names();

// Category name lookup; throws VocabularyError naming the offending token.
int object_index(std::string_view name);
int predicate_index(std::string_view name);

// An object reference: category plus an optional instance index (>= 1) used
// to distinguish multiple objects of the same category. None carries neither.
struct ObjectLabel {
  int category = kObjectNone;  // 0..23 or kObjectNone
  int instance = 0;            // 0 = unindexed

  bool is_none() const { return category == kObjectNone; }
  static ObjectLabel none() { return {}; }
  static ObjectLabel of(std::string_view name, int instance = 0);

  // "violin", "violin#2"; None has no textual form in annotation files.
  std::string to_string() const;
  static ObjectLabel parse(std::string_view token);

  bool operator==(const ObjectLabel&) const = default;
};

struct Triplet {
  ObjectLabel subject;
  int predicate = kPredicateNone;
  ObjectLabel object;

  bool is_none() const {
    return subject.is_none() && predicate == kPredicateNone && object.is_none();
  }
  static Triplet none() { return {}; }
  void validate() const;  // all-None or no-None; mixed is invalid

  bool operator==(const Triplet&) const = default;
};

struct SegmentGraph {
  int segment_index = 0;
  std::vector<Triplet> triplets;  // exactly kTripletsPerSegment; valid first, None tail

  int valid_count() const;
  void validate() const;

  bool operator==(const SegmentGraph&) const = default;
};

struct VideoAnnotation {
  std::string video_id;
  std::vector<SegmentGraph> graphs;

  void validate() const;  // exactly kSegmentsPerVideo graphs with indices 0..T-1
};

// Factored classification logits for one predicted triplet.
struct TripletPrediction {
  std::array<double, kObjectClasses> subject_logits{};
  std::array<double, kPredicateClasses> predicate_logits{};
  std::array<double, kObjectClasses> object_logits{};

  static TripletPrediction from_logits_row(const double* row);  // 57 values

  // argmax labels, category-level
  Triplet argmax() const;
};

// Annotation file schema:
//   {"video_id": str, "segments": [{"t": int, "triplets": [{"s","p","o"}]}]}
// Exactly 10 segments; at most 12 triplets each; padding None-triplets are
// implicit and never written.
VideoAnnotation parse_annotation(const std::string& text,
                                 std::vector<std::string>* warnings = nullptr);
std::string serialize_annotation(const VideoAnnotation& annotation);

// Summed negative log-softmax of the ground-truth labels under the three
// prediction heads; always >= 0.
double match_cost(const TripletPrediction& pred, const Triplet& gt);

// Exact minimum-cost assignment; result[i] is the column matched to row i.
// Ties are broken toward the lexicographically smallest permutation.
std::vector<int> hungarian_assign(const Mat& cost);

// Hungarian-matched relationship loss for one video: per segment, the sum of
// matched triplet cross-entropies weighted 1.0 (valid ground truth) or 0.3
// (None padding), averaged over segments.
inline constexpr double kNoneTripletWeight = 0.3;

double rel_loss(const std::vector<std::vector<TripletPrediction>>& preds,
                const std::vector<SegmentGraph>& gt);
double rel_loss(const std::vector<std::vector<TripletPrediction>>& preds,
                const VideoAnnotation& gt);

// Counting stats for micro-F1 over valid triplets: predictions are matched to
// the padded ground truth per segment; a matched prediction whose argmax
// labels equal a valid ground-truth triplet is a true positive; a non-None
// argmax matched to None padding (or mismatched) is a false positive; valid
// ground truth without an exact match is a false negative.
struct MatchStats {
  long tp = 0;
  long fp = 0;
  long fn = 0;

  MatchStats& operator+=(const MatchStats& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  double micro_f1() const {
    const double denom = 2.0 * tp + fp + fn;
    return denom == 0.0 ? 1.0 : 2.0 * tp / denom;
  }
};

MatchStats match_stats(const std::vector<std::vector<TripletPrediction>>& preds,
                       const std::vector<SegmentGraph>& gt);

}  // namespace shrike::scenegraph
