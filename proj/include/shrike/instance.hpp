#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "shrike/mat.hpp"
#include "shrike/scenegraph.hpp"

namespace shrike {

// One QA example: per-segment features, question embeddings, the answer, and
// the ground-truth scene graph used by stage-1 training.
struct Instance {
  int id = 0;
  std::string video_id;
  std::uint64_t world_seed = 0;
  std::string template_tag;
  int answer_index = -1;
  std::string question;

  Mat f_v;  // T x D
  Mat f_a;  // T x D
  Mat f_p;  // (T*M) x D, M patch tokens per segment
  Mat q_s;  // 1 x D
  Mat q_w;  // M' x D

  scenegraph::VideoAnnotation annotation;
};

using Dataset = std::vector<Instance>;

}  // namespace shrike
