#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace cmdm::nn {

using Real = double;
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<Real, 1, Eigen::Dynamic>;
using ColVec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

// Rows are time steps, columns are features.
using SeqTensor = Mat;

/// Named parameter arrays addressed by dotted paths ("dit.l0.sa.wq").
class ParamTree {
 public:
  using Map = std::map<std::string, Mat>;

  void add(const std::string& path, Mat value);
  void set(const std::string& path, Mat value) { entries_[path] = std::move(value); }
  bool contains(const std::string& path) const { return entries_.count(path) != 0; }
  const Mat& at(const std::string& path) const;
  Mat& at(const std::string& path);
  void erase(const std::string& path) { entries_.erase(path); }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t num_scalars() const;

  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }
  Map::iterator begin() { return entries_.begin(); }
  Map::iterator end() { return entries_.end(); }

  /// Zero-valued tree with the same paths and shapes.
  ParamTree zeros_like() const;
  /// this += scale * other, over paths present in other (paths must exist here).
  void axpy(Real scale, const ParamTree& other);
  void scale(Real s);
  Real squared_norm() const;
  /// Throws NumericalError naming the first path holding a non-finite entry.
  void check_finite(const std::string& context) const;
  /// Subset of paths starting with prefix.
  ParamTree subtree(const std::string& prefix) const;
  void merge(const ParamTree& other);

 private:
  Map entries_;
};

}  // namespace cmdm::nn
