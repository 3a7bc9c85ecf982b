#pragma once

#include "cmdm/nn/types.hpp"
#include "cmdm/rng.hpp"

#include <string>

namespace cmdm::nn {

/// Gaussian init keyed by path, so adding a parameter never reshuffles the others.
inline Mat init_normal(const RngKey& key, const std::string& path, Eigen::Index rows, Eigen::Index cols,
                       Real stddev) {
  return key.derive(hash_string(path)).normal(DrawKind::weights, 0, 0, rows, cols) * stddev;
}

}  // namespace cmdm::nn
