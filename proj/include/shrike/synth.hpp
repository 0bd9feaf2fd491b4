#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "shrike/instance.hpp"
#include "shrike/mat.hpp"
#include "shrike/rng.hpp"
#include "shrike/scenegraph.hpp"

namespace shrike::synth {

inline constexpr int kInstrumentCount = 22;  // leading entries of the object vocabulary
inline constexpr int kAnswerClasses = 31;
inline constexpr double kDefaultNoise = 0.05;

// 22 instrument names followed by yes, no, zero, one, two, three, left,
// middle, right.
const std::vector<std::string>& answer_vocab();
int answer_index(std::string_view word);

enum class Template { existential, counting, localization, comparative, temporal };
inline constexpr int kTemplateCount = 5;
std::string_view template_name(Template t);
Template template_from_name(std::string_view name);

// Sides are slot positions: 0 = left, 1 = middle, 2 = right.
struct Entity {
  int instrument = 0;  // 0..21
  int side = 0;        // distinct per world
  int loudness = 1;    // 1..5, distinct per world
  int t_on = 0;        // playing over [t_on, t_off)
  int t_off = 1;

  bool playing_at(int t) const { return t >= t_on && t < t_off; }
};

struct WorldState {
  int segments = scenegraph::kSegmentsPerVideo;
  std::vector<Entity> entities;  // 2..3 instruments; a person is always present

  int playing_count(int t) const;
  void validate() const;
};

WorldState gen_world(Rng& rng, int segments = scenegraph::kSegmentsPerVideo);

// Ground-truth triplets per segment: play/hold per instrument, one side
// triplet per instrument, and a louder triplet for each concurrently playing
// ordered pair, padded to 12 with None.
scenegraph::VideoAnnotation world_to_graphs(const WorldState& world, const std::string& video_id);

// Fixed per-dataset random code tables mapping indicator vectors to features.
struct DatasetEmbedding {
  int dim = 0;
  Mat visual;       // (2*22 + 1) x D: presence, playing, person
  Mat audio;        // (2*22) x D: playing flags plus loudness-scaled channels
  Mat patch;        // 26 x D: instrument one-hot, playing, loudness, person, scene
  Mat templates;    // 5 x D question template codes
  Mat instruments;  // 22 x D question argument codes
  Mat segment_arg;  // T x D question argument codes for segment indices

  static DatasetEmbedding init(int dim, int segments, std::uint64_t dataset_seed);
};

struct Features {
  Mat f_v;  // T x D
  Mat f_a;  // T x D
  Mat f_p;  // (T*M) x D
};

// Patch slots are ordered left, middle, right, person/scene; slots beyond the
// fourth carry noise only.
Features world_to_features(const WorldState& world, const DatasetEmbedding& embedding,
                           int patch_tokens, Rng& noise_rng, double eta = kDefaultNoise);

struct QaPart {
  Template template_tag = Template::existential;
  std::string question;
  int answer_index = -1;
  Mat q_s;  // 1 x D
  Mat q_w;  // M' x D
};

// Instantiates one question for the world. Returns nullopt when the world
// cannot realize the target (no overlapping pair, unreachable count, tied
// onsets); the caller resamples the world. counting_target pins the counting
// answer so the dataset generator can stratify answer classes.
std::optional<QaPart> gen_qa(const WorldState& world, Template t, const DatasetEmbedding& embedding,
                             int question_tokens, Rng& rng,
                             std::optional<int> counting_target = std::nullopt);

// Oracle re-derivation of the answer from the world, for audits.
int derive_answer(const WorldState& world, Template t, const std::string& question);

struct GenOptions {
  int n = 1000;
  std::uint64_t seed = 0;
  int segments = scenegraph::kSegmentsPerVideo;
  int dim = 32;
  int patch_tokens = 4;
  int question_tokens = 4;
  double eta = kDefaultNoise;
  double train_ratio = 0.8;
  double val_ratio = 0.1;  // remainder is the test split
  int threads = 1;         // worker cap for instance generation
};

// Writes manifest.json, instances.jsonl and annotations/<video_id>.json.
void gen_dataset(const GenOptions& opts, const std::string& out_dir);

// split: "train", "val", "test" or "all".
Dataset load_dataset(const std::string& dir, const std::string& split);

struct ManifestInfo {
  std::uint64_t seed = 0;
  int n = 0;
  int segments = 0, dim = 0, patch_tokens = 0, question_tokens = 0;
  double eta = 0.0;
  std::vector<int> train_ids, val_ids, test_ids;
};
ManifestInfo load_manifest(const std::string& dir);

// Base64 packing of double arrays (little-endian 64-bit floats).
std::string encode_floats(const Mat& m);
Mat decode_floats(const std::string& b64, int rows, int cols);

// In-memory generation of one instance (id selects the per-instance stream).
Instance gen_instance(const GenOptions& opts, const DatasetEmbedding& embedding, int id);

}  // namespace shrike::synth
