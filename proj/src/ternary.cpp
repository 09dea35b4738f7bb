#include "pt2/ternary.hpp"

#include <cmath>
#include <string>

#include <Eigen/Core>

namespace pt2 {

std::vector<uint8_t> pack_trits(const TernaryMatrix& trits) {
  const std::size_t count = static_cast<std::size_t>(trits.size());
  std::vector<uint8_t> out(packed_size(count), 0);
  const int8_t* data = trits.data();
  for (std::size_t byte = 0; byte < out.size(); ++byte) {
    unsigned value = 0;
    unsigned place = 1;
    for (int d = 0; d < kTritsPerByte; ++d) {
      const std::size_t idx = byte * kTritsPerByte + d;
      if (idx < count) value += static_cast<unsigned>(data[idx] + 1) * place;
      place *= 3;
    }
    out[byte] = static_cast<uint8_t>(value);
  }
  return out;
}

TernaryMatrix unpack_trits(std::span<const uint8_t> payload, Eigen::Index rows,
                           Eigen::Index cols) {
  const std::size_t count = static_cast<std::size_t>(rows * cols);
  if (payload.size() != packed_size(count)) {
    throw Error("payload holds " + std::to_string(payload.size()) + " bytes, expected " +
                std::to_string(packed_size(count)));
  }
  TernaryMatrix out(rows, cols);
  int8_t* data = out.data();
  for (std::size_t byte = 0; byte < payload.size(); ++byte) {
    unsigned value = payload[byte];
    if (value > kMaxTritByte) {
      throw Error("invalid trit byte at offset " + std::to_string(byte));
    }
    for (int d = 0; d < kTritsPerByte; ++d) {
      const std::size_t idx = byte * kTritsPerByte + d;
      if (idx < count) data[idx] = static_cast<int8_t>(value % 3) - 1;
      value /= 3;
    }
  }
  return out;
}

void validate(const PackedTernaryTensor& t) {
  if (t.group_size == 0) throw Error("group size must be positive");
  if (t.permutation.size() != t.cols) throw Error("permutation length does not match cols");
  std::vector<bool> seen(t.cols, false);
  for (uint32_t p : t.permutation) {
    if (p >= t.cols || seen[p]) throw Error("permutation is not a bijection");
    seen[p] = true;
  }
  const std::size_t trits = static_cast<std::size_t>(t.rows) * t.cols;
  if (t.payload.size() != packed_size(trits)) throw Error("payload size mismatch");
  for (std::size_t i = 0; i < t.payload.size(); ++i) {
    if (t.payload[i] > kMaxTritByte) {
      throw Error("invalid trit byte at offset " + std::to_string(i));
    }
  }
  if (t.grid.rows() != t.rows || t.grid.groups() != t.num_groups() ||
      t.grid.mu.rows() != t.rows || t.grid.mu.cols() != t.num_groups()) {
    throw Error("grid shape mismatch");
  }
  if (!t.grid.alpha.allFinite() || !t.grid.mu.allFinite()) throw Error("non-finite grid value");
  if ((t.grid.alpha.array() < 0.0).any()) throw Error("negative alpha");
}

void round_to_storage(GridParams& grid, ScaleDtype dtype) {
  auto round = [dtype](double v) {
    if (dtype == ScaleDtype::kF16) {
      return static_cast<double>(static_cast<float>(Eigen::half(static_cast<float>(v))));
    }
    return static_cast<double>(static_cast<float>(v));
  };
  grid.alpha = grid.alpha.unaryExpr(round);
  grid.mu = grid.mu.unaryExpr(round);
}

PackedTernaryTensor make_packed(const TernaryMatrix& trits, GridParams grid,
                                std::vector<uint32_t> permutation, uint32_t group_size,
                                ScaleDtype dtype) {
  PackedTernaryTensor t;
  t.rows = static_cast<uint32_t>(trits.rows());
  t.cols = static_cast<uint32_t>(trits.cols());
  t.group_size = group_size;
  t.scale_dtype = dtype;
  t.permutation = std::move(permutation);
  round_to_storage(grid, dtype);
  t.grid = std::move(grid);
  t.payload = pack_trits(trits);
  validate(t);
  return t;
}

DenseTensor dequantize_quantized_order(const PackedTernaryTensor& packed) {
  const TernaryMatrix trits = unpack_trits(packed.payload, packed.rows, packed.cols);
  DenseTensor out(packed.rows, packed.cols);
  const uint32_t k = packed.group_size;
  for (uint32_t i = 0; i < packed.rows; ++i) {
    for (uint32_t j = 0; j < packed.cols; ++j) {
      const uint32_t g = j / k;
      out(i, j) = packed.grid.alpha(i, g) * trits(i, j) + packed.grid.mu(i, g);
    }
  }
  return out;
}

DenseTensor dequantize(const PackedTernaryTensor& packed) {
  const DenseTensor q = dequantize_quantized_order(packed);
  DenseTensor out(packed.rows, packed.cols);
  for (uint32_t j = 0; j < packed.cols; ++j) out.col(packed.permutation[j]) = q.col(j);
  return out;
}

double weight_error(const DenseTensor& w, const DenseTensor& w_hat) {
  if (w.rows() != w_hat.rows() || w.cols() != w_hat.cols()) {
    throw Error("weight_error: shape mismatch");
  }
  return (w - w_hat).squaredNorm();
}

double output_error_gram(const DenseTensor& w, const DenseTensor& w_hat, const Matrix& gram) {
  if (w.rows() != w_hat.rows() || w.cols() != w_hat.cols()) {
    throw Error("output_error_gram: shape mismatch");
  }
  if (gram.rows() != w.cols() || gram.cols() != w.cols()) {
    throw Error("output_error_gram: gram dimension mismatch");
  }
  const Matrix r = w - w_hat;
  return ((r * gram).array() * r.array()).sum();
}

double payload_bits_per_weight(const PackedTernaryTensor& t) {
  return 8.0 * static_cast<double>(t.payload.size()) /
         (static_cast<double>(t.rows) * static_cast<double>(t.cols));
}

}  // namespace pt2
