#pragma once

#include "cmdm/nn/types.hpp"

#include <vector>

namespace cmdm {

/// T x D frames. Channel layout for the toy data is (x, y, vx, vy).
struct MotionSequence {
  nn::Mat frames;
  double fps = 20.0;

  int length() const { return static_cast<int>(frames.rows()); }
  int dim() const { return static_cast<int>(frames.cols()); }
};

/// Caption as token ids; embeddings are looked up by the denoiser.
struct TextCondition {
  std::vector<int> tokens;
  bool null_flag = false;

  bool operator==(const TextCondition&) const = default;
};

}  // namespace cmdm
