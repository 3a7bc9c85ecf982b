#include "cmdm/nn/types.hpp"

#include "cmdm/errors.hpp"

namespace cmdm::nn {

void ParamTree::add(const std::string& path, Mat value) {
  if (!entries_.emplace(path, std::move(value)).second) {
    throw ConfigError("duplicate parameter path '" + path + "'");
  }
}

const Mat& ParamTree::at(const std::string& path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw ConfigError("missing parameter '" + path + "'");
  return it->second;
}

Mat& ParamTree::at(const std::string& path) {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw ConfigError("missing parameter '" + path + "'");
  return it->second;
}

std::size_t ParamTree::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, m] : entries_) n += static_cast<std::size_t>(m.size());
  return n;
}

ParamTree ParamTree::zeros_like() const {
  ParamTree out;
  for (const auto& [path, m] : entries_) out.entries_.emplace(path, Mat::Zero(m.rows(), m.cols()));
  return out;
}

void ParamTree::axpy(Real s, const ParamTree& other) {
  for (const auto& [path, m] : other.entries_) {
    Mat& dst = at(path);
    if (dst.rows() != m.rows() || dst.cols() != m.cols()) {
      throw ShapeError("axpy shape mismatch at '" + path + "'");
    }
    dst.noalias() += s * m;
  }
}

void ParamTree::scale(Real s) {
  for (auto& [_, m] : entries_) m *= s;
}

Real ParamTree::squared_norm() const {
  Real acc = 0;
  for (const auto& [_, m] : entries_) acc += m.squaredNorm();
  return acc;
}

void ParamTree::check_finite(const std::string& context) const {
  for (const auto& [path, m] : entries_) {
    if (!m.allFinite()) throw NumericalError(context + ": non-finite value in '" + path + "'");
  }
}

ParamTree ParamTree::subtree(const std::string& prefix) const {
  ParamTree out;
  for (auto it = entries_.lower_bound(prefix); it != entries_.end(); ++it) {
    if (it->first.compare(0, prefix.size(), prefix) != 0) break;
    out.entries_.emplace(it->first, it->second);
  }
  return out;
}

void ParamTree::merge(const ParamTree& other) {
  for (const auto& [path, m] : other.entries_) add(path, m);
}

}  // namespace cmdm::nn
