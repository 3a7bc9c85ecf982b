#pragma once

// Forward bodies are written once as templates over a parameter source. With
// EvalParams they run on plain matrices; with TapeParams they record onto a tape.

#include "cmdm/nn/tape.hpp"

#include <string>

namespace cmdm::nn {

struct EvalParams {
  using Value = Mat;
  const ParamTree& tree;

  const Mat& operator()(const std::string& path) const { return tree.at(path); }
  Mat lift(Mat m) const { return m; }
};

struct TapeParams {
  using Value = Var;
  Tape& tape;
  const ParamTree& tree;

  Var operator()(const std::string& path) const { return tape.param(tree, path); }
  Var lift(Mat m) const { return tape.constant(std::move(m)); }
};

inline const Mat& value_of(const Mat& m) { return m; }
inline const Mat& value_of(const Var& v) { return v.value(); }

}  // namespace cmdm::nn
