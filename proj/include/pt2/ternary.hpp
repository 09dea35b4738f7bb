#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pt2/types.hpp"

namespace pt2 {

inline constexpr int kTritsPerByte = 5;
inline constexpr uint8_t kMaxTritByte = 242;  // 3^5 - 1

/// Per-(row, group) grid {mu - alpha, mu, mu + alpha}. Both matrices are
/// rows x groups.
struct GridParams {
  Matrix alpha;
  Matrix mu;

  GridParams() = default;
  GridParams(Eigen::Index rows, Eigen::Index groups)
      : alpha(Matrix::Zero(rows, groups)), mu(Matrix::Zero(rows, groups)) {}

  Eigen::Index rows() const { return alpha.rows(); }
  Eigen::Index groups() const { return alpha.cols(); }

  bool operator==(const GridParams& o) const {
    return alpha.rows() == o.alpha.rows() && alpha.cols() == o.alpha.cols() &&
           alpha == o.alpha && mu == o.mu;
  }
};

/// Quantized layer as stored on disk. Trits are kept packed and in quantized
/// column order; permutation[j] is the original column of quantized column j.
struct PackedTernaryTensor {
  uint32_t rows = 0;
  uint32_t cols = 0;
  uint32_t group_size = 0;
  ScaleDtype scale_dtype = ScaleDtype::kF32;
  std::vector<uint32_t> permutation;
  GridParams grid;
  std::vector<uint8_t> payload;

  uint32_t num_groups() const { return (cols + group_size - 1) / group_size; }
  bool operator==(const PackedTernaryTensor&) const = default;
};

inline std::size_t packed_size(std::size_t num_trits) {
  return (num_trits + kTritsPerByte - 1) / kTritsPerByte;
}

/// Base-3 packing, five trits per byte, first trit in the least significant
/// digit. Digit is trit + 1. The last byte is padded with digit 0.
std::vector<uint8_t> pack_trits(const TernaryMatrix& trits);

TernaryMatrix unpack_trits(std::span<const uint8_t> payload, Eigen::Index rows,
                           Eigen::Index cols);

/// Throws if the tensor violates any structural invariant (permutation is a
/// bijection, payload size and byte range, grid shape, finite grid values).
void validate(const PackedTernaryTensor& t);

/// Rounds grid values to what the given storage dtype can hold, so that the
/// in-memory grid and the serialized grid agree bit-for-bit.
void round_to_storage(GridParams& grid, ScaleDtype dtype);

/// Assembles a packed tensor. `trits` and `grid` are in quantized column order.
PackedTernaryTensor make_packed(const TernaryMatrix& trits, GridParams grid,
                                std::vector<uint32_t> permutation, uint32_t group_size,
                                ScaleDtype dtype);

/// W_hat[i, perm[j]] = alpha[i, j / k] * T[i, j] + mu[i, j / k].
DenseTensor dequantize(const PackedTernaryTensor& packed);

/// Same as dequantize but leaves columns in quantized order.
DenseTensor dequantize_quantized_order(const PackedTernaryTensor& packed);

/// Squared Frobenius norm of w - w_hat.
double weight_error(const DenseTensor& w, const DenseTensor& w_hat);

/// Sum over rows of r C r^T with r = w - w_hat; equals ||(W - W_hat) X^T||_F^2
/// when C = X^T X.
double output_error_gram(const DenseTensor& w, const DenseTensor& w_hat, const Matrix& gram);

/// Bits per weight of the trit payload alone.
double payload_bits_per_weight(const PackedTernaryTensor& t);

}  // namespace pt2
