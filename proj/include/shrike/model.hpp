#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "shrike/ad.hpp"
#include "shrike/instance.hpp"
#include "shrike/kan.hpp"
#include "shrike/mat.hpp"
#include "shrike/scenegraph.hpp"

namespace shrike::model {

struct ModelConfig {
  int segments = 10;            // T
  int dim = 32;                 // D
  int patch_tokens = 4;         // M
  int question_tokens = 4;      // M'
  int queries_per_segment = 12; // L
  int experts = 7;              // E
  int top_k = 10;
  int spline_degree = 3;
  int spline_intervals = 8;
  double spline_lo = -3.0;
  double spline_hi = 3.0;
  int num_answers = 31;         // |C|

  kan::SplineGrid grid() const {
    return kan::SplineGrid::make(spline_degree, spline_intervals, spline_lo, spline_hi);
  }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

struct TrainConfig {
  int stage1_epochs = 10;
  int stage1_lr_period = 5;
  int stage2_epochs = 15;
  int stage2_lr_period = 9;
  double base_lr = 1e-4;
  int batch_size = 32;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

// lr(epoch) = base * 0.1^floor(epoch / period)
double lr_at(double base_lr, int epoch, int period);

struct ParamGroup {
  std::string name;
  Mat value;
  bool trainable = true;
};

// Named, ordered parameter registry. Group order is the creation order and is
// part of the determinism contract (initialization draws and Adam updates walk
// it in order).
class ModelParams {
 public:
  ModelConfig config;

  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  Mat& at(const std::string& name);
  const Mat& at(const std::string& name) const;
  bool has(const std::string& name) const;

  std::vector<ParamGroup>& groups() { return groups_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }

  void add(std::string name, Mat value);
  // Mark every group whose name starts with prefix (non-)trainable.
  void set_trainable(const std::string& prefix, bool trainable);

  // Copy all groups with the given prefix from another parameter set.
  // Throws StateError if any expected group is missing there.
  void adopt(const ModelParams& source, const std::string& prefix);

 private:
  std::vector<ParamGroup> groups_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Stage-1 parameter groups (the scene-graph branch) share this prefix; they
// are frozen during stage-2 training.
inline constexpr const char* kStagePrefix = "sg.";

// Tape bindings of every parameter group, in registry order.
struct Binding {
  std::unordered_map<std::string, ad::Var> vars;

  ad::Var operator[](const std::string& name) const;
};

// trainable_override: when set, every group binds with that trainable flag
// regardless of its frozen state (used by whole-model gradient checks).
Binding bind(ad::Tape& t, const ModelParams& params,
             std::optional<bool> trainable_override = std::nullopt);

// Scene-graph branch: fuse_av + fuse_patch + decoder + head. Logits are
// (T*L) x 57. Question inputs are deliberately absent.
ad::Var forward_stage1(ad::Tape& t, const Binding& b, const ModelConfig& cfg, ad::Var f_v,
                       ad::Var f_a, ad::Var f_p);

// Test-time ablations used by the mechanism checks.
struct AblationSpec {
  bool flat_gaussians = false;        // replace Gaussian weights with all-ones
  bool zero_relation_summary = false; // zero the classifier's relation input
};

struct Stage2Outputs {
  ad::Var logits;                 // 1 x |C|
  ad::Var relation_summary;       // 1 x D
  Mat gaussian_visual;            // E x T (values)
  Mat gaussian_audio;             // E x T
  Mat routes_visual;              // 1 x E
  Mat routes_audio;               // 1 x E
  std::vector<std::vector<int>> topk_indices;  // per segment
};

// Full stage-2 pass. When cached_f_rel is provided the frozen scene-graph
// branch is skipped and the cached features enter as constants (identical
// values; used by the stage-2 training loop).
Stage2Outputs forward_stage2(ad::Tape& t, const Binding& b, const ModelConfig& cfg,
                             const Instance& inst, const Mat* cached_f_rel = nullptr,
                             const AblationSpec& ablation = {});

// Convenience value-level forwards.
Mat stage1_logits(const ModelParams& params, const Instance& inst);
Mat stage2_logits(const ModelParams& params, const Instance& inst,
                  const Mat* cached_f_rel = nullptr, const AblationSpec& ablation = {});
// Relation features of the frozen branch, (T*L) x D.
Mat relation_features(const ModelParams& params, const Instance& inst);
// Cached relation features for a whole dataset, one entry per instance.
std::vector<Mat> relation_cache(const Dataset& dataset, const ModelParams& params);

// Cross entropy of the answer logits; >= 0.
double task_loss(const Mat& logits, int answer_index);
ad::Var task_loss_var(ad::Tape& t, ad::Var logits, int answer_index);

// Hungarian-matched relationship loss on tape; ground truth must hold exactly
// L triplets per segment (padded with None).
ad::Var rel_loss_var(ad::Tape& t, ad::Var logits, const ModelConfig& cfg,
                     const std::vector<scenegraph::SegmentGraph>& gt);

// Triplet predictions grouped per segment from a (T*L) x 57 logits matrix.
std::vector<std::vector<scenegraph::TripletPrediction>> split_predictions(const Mat& logits,
                                                                          const ModelConfig& cfg);

struct TrainResult {
  ModelParams params;
  std::vector<double> epoch_losses;
};

struct TrainOptions {
  int max_epochs = -1;  // < 0: full schedule
  // Called after each epoch; return true to stop early.
  std::function<bool(int epoch, const ModelParams& params)> after_epoch;
  bool verbose = false;
};

TrainResult train_stage1(const Dataset& dataset, const ModelConfig& cfg, const TrainConfig& tc,
                         std::uint64_t seed, const TrainOptions& opts = {});

TrainResult train_stage2(const Dataset& dataset, const ModelParams& stage1, const ModelConfig& cfg,
                         const TrainConfig& tc, std::uint64_t seed, const TrainOptions& opts = {});

// Adam over the registry, applied to trainable groups in registry order.
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ModelParams& params, const std::map<std::string, Mat>& grads, double lr);

 private:
  double beta1_, beta2_, eps_;
  long steps_ = 0;
  std::map<std::string, std::pair<Mat, Mat>> state_;
};

struct EvalReport {
  double overall = 0.0;
  long total = 0;
  long correct = 0;
  std::map<std::string, std::pair<long, long>> by_template;  // tag -> (correct, total)

  std::string to_json() const;
};

// Top-1 answer accuracy, overall and per question template.
EvalReport evaluate(const Dataset& dataset, const ModelParams& params,
                    const AblationSpec& ablation = {},
                    const std::vector<Mat>* f_rel_cache = nullptr);

// Micro-F1 of the stage-1 decoder over valid triplets under Hungarian matching.
scenegraph::MatchStats evaluate_stage1(const Dataset& dataset, const ModelParams& params);

// Versioned binary checkpoint: magic "SHRK", format version, config JSON,
// then named length-prefixed little-endian float64 arrays.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);
// Raises CheckpointError naming the first mismatched field.
void require_same_config(const ModelConfig& expected, const ModelConfig& actual);

}  // namespace shrike::model
