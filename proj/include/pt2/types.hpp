#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace pt2 {

// All solver math runs in double; f32/f16 inputs are widened on load.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Dense weights W (rows = output features, cols = input features).
using DenseTensor = Matrix;
// Calibration activations, one sample per row (batch and sequence flattened).
using CalibBatch = Matrix;

// Trit plane T with entries in {-1, 0, +1}.
using TernaryMatrix = Eigen::Matrix<int8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ScaleDtype : uint8_t { kF32 = 0, kF16 = 1 };

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pt2
