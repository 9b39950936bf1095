#pragma once

#include "acme/tensor.hpp"

namespace acme {

// A small sample of extracted feature vectors standing in for a device's data
// distribution. Rows are samples. All sketches compared against each other
// must come from the same extractor.
struct DataSketch {
  RowMat features;

  int size() const { return (int)features.rows(); }
  int dim() const { return (int)features.cols(); }
};

// Exact transport cost between the uniform measure on rows and the uniform
// measure on columns of `cost`. Solved as an integer-mass min-cost flow, so
// the result is the true optimum of the transportation linear program, not an
// entropic or greedy approximation. Entries must be finite and >= 0.
double transport_cost(const Eigen::MatrixXd& cost);

// p-Wasserstein distance between the empirical distributions of two sketches
// under L1 ground cost: ( min_plan sum flow * d(x,y)^p )^(1/p). Equal-size
// sketches reduce to an assignment problem; unequal sizes still solve the
// exact LP through the common integer mass grid.
double wasserstein_distance(const DataSketch& a, const DataSketch& b, int p_order = 1);

}  // namespace acme
