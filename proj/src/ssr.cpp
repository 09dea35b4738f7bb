#include "pt2/ssr.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>

namespace pt2::ssr {

PermutationTrace::PermutationTrace(uint32_t num_cols) : taken_(num_cols, false) {
  order_.reserve(num_cols);
}

void PermutationTrace::append(std::span<const uint32_t> block) {
  for (uint32_t c : block) {
    if (c >= taken_.size()) throw Error("column index out of range");
    if (taken_[c]) throw Error("column " + std::to_string(c) + " selected twice");
    taken_[c] = true;
    order_.push_back(c);
  }
}

std::vector<uint32_t> PermutationTrace::inverse() const {
  if (!complete()) throw Error("permutation trace is incomplete");
  std::vector<uint32_t> inv(order_.size());
  for (uint32_t pos = 0; pos < order_.size(); ++pos) inv[order_[pos]] = pos;
  return inv;
}

Matrix cosine_similarity_matrix(const Matrix& w) {
  const Vector norms = w.colwise().norm().transpose();
  Matrix s = w.transpose() * w;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double den = norms(i) * norms(j);
      const double v = den > 0.0 ? s(j, i) / den : 0.0;
      s(i, j) = v;
      s(j, i) = v;
    }
  }
  return s;
}

std::vector<uint32_t> select_next_block(const Matrix& residual,
                                        std::span<const uint32_t> remaining, std::size_t k) {
  if (remaining.empty()) throw Error("select_next_block: no columns remain");
  std::vector<uint32_t> cols(remaining.begin(), remaining.end());
  std::sort(cols.begin(), cols.end());
  const std::size_t take = std::min(k, cols.size());
  if (take == cols.size()) return cols;

  Vector mean = Vector::Zero(residual.rows());
  for (uint32_t c : cols) mean += residual.col(c);
  mean /= static_cast<double>(cols.size());
  const double mean_norm = mean.norm();
  if (mean_norm == 0.0) {
    cols.resize(take);
    return cols;
  }

  std::vector<double> sim(cols.size());
  for (std::size_t i = 0; i < cols.size(); ++i) {
    const auto col = residual.col(cols[i]);
    const double norm = col.norm();
    sim[i] = norm > 0.0 ? col.dot(mean) / (norm * mean_norm) : 0.0;
  }
  std::vector<std::size_t> idx(cols.size());
  std::iota(idx.begin(), idx.end(), 0);
  // cols is sorted, so a stable sort keeps lower column indices first on ties.
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  std::vector<uint32_t> block(take);
  for (std::size_t i = 0; i < take; ++i) block[i] = cols[idx[i]];
  std::sort(block.begin(), block.end());
  return block;
}

std::vector<double> block_variance_profile(const Matrix& w, std::span<const uint32_t> order,
                                           std::size_t k) {
  if (k == 0) throw Error("block size must be positive");
  std::vector<double> out;
  for (std::size_t start = 0; start < order.size(); start += k) {
    const std::size_t end = std::min(order.size(), start + k);
    double sum = 0.0;
    for (std::size_t j = start; j < end; ++j) sum += w.col(order[j]).sum();
    const double count = static_cast<double>(w.rows() * (end - start));
    const double mean = sum / count;
    double ss = 0.0;
    for (std::size_t j = start; j < end; ++j) {
      ss += (w.col(order[j]).array() - mean).square().sum();
    }
    out.push_back(ss / count);
  }
  return out;
}

void write_block_variance_csv(std::ostream& os, std::span<const double> variances) {
  const auto old_precision = os.precision(17);
  os << "block_index,variance\n";
  for (std::size_t i = 0; i < variances.size(); ++i) os << i << ',' << variances[i] << '\n';
  os.precision(old_precision);
}

}  // namespace pt2::ssr
