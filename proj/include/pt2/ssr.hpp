#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "pt2/types.hpp"

namespace pt2::ssr {

/// Quantization order built block by block. order[j] is the original column
/// placed at quantized position j.
class PermutationTrace {
 public:
  explicit PermutationTrace(uint32_t num_cols);

  void append(std::span<const uint32_t> block);
  bool complete() const { return order_.size() == taken_.size(); }
  bool contains(uint32_t col) const { return taken_.at(col); }

  const std::vector<uint32_t>& order() const { return order_; }
  /// original column -> quantized position. Requires complete().
  std::vector<uint32_t> inverse() const;

 private:
  std::vector<uint32_t> order_;
  std::vector<bool> taken_;
};

/// Pairwise column cosine similarity; columns with zero norm get 0 against
/// everything, including themselves.
Matrix cosine_similarity_matrix(const Matrix& w);

/// Picks the min(k, remaining.size()) columns of `residual` (restricted to
/// `remaining`) with the highest cosine similarity to the mean of the
/// remaining columns. Ties go to the lower column index. If the mean is the
/// zero vector, the lowest-indexed columns are taken. The result is sorted by
/// column index.
std::vector<uint32_t> select_next_block(const Matrix& residual,
                                        std::span<const uint32_t> remaining, std::size_t k);

/// Population variance of all entries in each block of k columns, with the
/// columns visited in `order`.
std::vector<double> block_variance_profile(const Matrix& w, std::span<const uint32_t> order,
                                           std::size_t k);

void write_block_variance_csv(std::ostream& os, std::span<const double> variances);

}  // namespace pt2::ssr
