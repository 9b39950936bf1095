#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "acme/errors.hpp"

namespace acme {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline std::int64_t numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Row-major dense buffer. grad stays size 0 until a backward pass touches it.
struct TensorBuf {
  std::vector<int> shape;
  Eigen::VectorXd values;
  Eigen::VectorXd grad;

  TensorBuf() = default;
  TensorBuf(std::vector<int> s, Eigen::VectorXd v) : shape(std::move(s)), values(std::move(v)) {
    if (values.size() != numel(shape))
      throw ShapeError("TensorBuf: " + std::to_string(values.size()) + " values for shape " +
                       shape_str(shape));
  }

  static TensorBuf zeros(std::vector<int> s) {
    TensorBuf t;
    t.values = Eigen::VectorXd::Zero(numel(s));
    t.shape = std::move(s);
    return t;
  }

  std::int64_t size() const { return values.size(); }

  // 2-D view: all leading dims collapse into rows, last dim is columns.
  std::int64_t view_rows() const { return shape.empty() ? 1 : size() / shape.back(); }
  std::int64_t view_cols() const { return shape.empty() ? size() : shape.back(); }

  MatMap as2d() { return MatMap(values.data(), view_rows(), view_cols()); }
  ConstMatMap as2d() const { return ConstMatMap(values.data(), view_rows(), view_cols()); }
};

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

inline bool same_shape(const std::vector<int>& a, const std::vector<int>& b) { return a == b; }

}  // namespace acme
