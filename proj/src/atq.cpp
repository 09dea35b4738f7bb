#include "pt2/atq.hpp"

#include <cmath>
#include <string>

namespace pt2::atq {

namespace {

Matrix trits_as_real(const TernaryMatrix& t) { return t.cast<double>(); }

void check_shapes(const TileRef& w, const TernaryMatrix& trits) {
  if (w.rows() != trits.rows() || w.cols() != trits.cols()) {
    throw Error("tile and trit shapes differ");
  }
}

}  // namespace

InitResult ternary_init(const TileRef& w) {
  if (w.cols() == 0) throw Error("ternary_init: tile has no columns");
  const Eigen::Index rows = w.rows();
  const Eigen::Index cols = w.cols();
  InitResult out{{Vector::Zero(rows), Vector::Zero(rows)}, TernaryMatrix::Zero(rows, cols)};
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double mu = w.row(i).mean();
    const auto centered = (w.row(i).array() - mu).eval();
    const double delta = 0.75 * centered.abs().mean();
    double dot = 0.0;
    double nnz = 0.0;
    for (Eigen::Index j = 0; j < cols; ++j) {
      int8_t t = 0;
      if (centered(j) > delta) {
        t = 1;
      } else if (centered(j) < -delta) {
        t = -1;
      }
      out.trits(i, j) = t;
      dot += t * centered(j);
      nnz += t != 0;
    }
    out.grid.mu(i) = mu;
    out.grid.alpha(i) = nnz > 0 ? dot / nnz : 0.0;
  }
  return out;
}

TileGrid optimal_grid(const TileRef& w, const TernaryMatrix& trits, const TileGrid* prior) {
  check_shapes(w, trits);
  const Eigen::Index rows = w.rows();
  const double g = static_cast<double>(w.cols());
  const Matrix t = trits_as_real(trits);

  // Normal equations per row:
  //   [ t.t   1.t ] [alpha]   [ w.t ]
  //   [ 1.t   g   ] [ mu  ] = [ w.1 ]
  const Vector st = t.rowwise().sum();
  const Vector stt = t.array().square().rowwise().sum();
  const Vector sw = w.rowwise().sum();
  const Vector swt = (w.array() * t.array()).rowwise().sum();

  TileGrid out{Vector(rows), Vector(rows)};
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double den = g * stt(i) - st(i) * st(i);
    if (den <= kSingularTol * (g * stt(i) + st(i) * st(i))) {
      // All trits in the row are equal.
      out.mu(i) = sw(i) / g;
      out.alpha(i) = (stt(i) == 0.0 && prior != nullptr) ? prior->alpha(i) : 0.0;
      continue;
    }
    out.alpha(i) = (g * swt(i) - st(i) * sw(i)) / den;
    out.mu(i) = (stt(i) * sw(i) - st(i) * swt(i)) / den;
  }
  return out;
}

TernaryMatrix flexible_round(const TileRef& w, const TileGrid& grid) {
  TernaryMatrix out = TernaryMatrix::Zero(w.rows(), w.cols());
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    const double alpha = grid.alpha(i);
    if (alpha == 0.0) continue;
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      const double z = (w(i, j) - grid.mu(i)) / alpha;
      if (std::isfinite(z)) out(i, j) = round_to_trit(z);
    }
  }
  return out;
}

AtqState itf(const TileRef& w, InitResult init, int max_iters) {
  AtqState s;
  s.grid = std::move(init.grid);
  s.trits = std::move(init.trits);
  s.e_w_trace.push_back(tile_weight_error(w, s.grid, s.trits));
  for (int it = 1; it <= max_iters; ++it) {
    s.grid = optimal_grid(w, s.trits, &s.grid);
    s.e_w_trace.push_back(tile_weight_error(w, s.grid, s.trits));
    TernaryMatrix next = flexible_round(w, s.grid);
    s.e_w_trace.push_back(tile_weight_error(w, s.grid, next));
    s.iterations = it;
    if (next == s.trits) {
      s.converged = true;
      break;
    }
    s.trits = std::move(next);
  }
  s.e_w = s.e_w_trace.back();
  return s;
}

TileGrid aga_align(const TileRef& w, const TernaryMatrix& trits, const TileRef& gram,
                   const TileGrid& prior) {
  check_shapes(w, trits);
  const Eigen::Index g = w.cols();
  if (gram.rows() != g || gram.cols() != g) {
    throw Error("aga_align: gram is " + std::to_string(gram.rows()) + "x" +
                std::to_string(gram.cols()) + ", tile has " + std::to_string(g) + " columns");
  }
  const double scale = gram.cwiseAbs().maxCoeff();
  if ((gram - gram.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale) {
    throw Error("aga_align: gram is not symmetric");
  }

  // Weighted normal equations per row, weight C:
  //   [ t C t^T   1^T C t^T ] [alpha]   [ w C t^T ]
  //   [ t C 1     1^T C 1   ] [ mu  ] = [ w C 1   ]
  const Matrix t = trits_as_real(trits);
  const Vector c1 = gram.rowwise().sum();
  const double d = c1.sum();
  const Matrix tc = t * gram;
  const Vector tct = (t.array() * tc.array()).rowwise().sum();
  const Vector wct = (w.array() * tc.array()).rowwise().sum();
  const Vector v = t * c1;
  const Vector wc1 = w * c1;

  TileGrid out = prior;
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    const double den = d * tct(i) - v(i) * v(i);
    if (!(den > kSingularTol * (std::abs(d * tct(i)) + v(i) * v(i)))) continue;
    out.alpha(i) = (d * wct(i) - v(i) * wc1(i)) / den;
    out.mu(i) = (tct(i) * wc1(i) - v(i) * wct(i)) / den;
  }
  return out;
}

Matrix reconstruct(const TileGrid& grid, const TernaryMatrix& trits) {
  Matrix out = trits_as_real(trits);
  out.array().colwise() *= grid.alpha.array();
  out.array().colwise() += grid.mu.array();
  return out;
}

double tile_weight_error(const TileRef& w, const TileGrid& grid, const TernaryMatrix& trits) {
  check_shapes(w, trits);
  return (w - reconstruct(grid, trits)).squaredNorm();
}

double tile_output_error(const TileRef& w, const TileGrid& grid, const TernaryMatrix& trits,
                         const TileRef& gram) {
  check_shapes(w, trits);
  const Matrix r = w - reconstruct(grid, trits);
  return ((r * gram).array() * r.array()).sum();
}

void canonicalize(TileGrid& grid, TernaryMatrix& trits) {
  for (Eigen::Index i = 0; i < trits.rows(); ++i) {
    if (grid.alpha(i) < 0.0) {
      grid.alpha(i) = -grid.alpha(i);
      trits.row(i) = -trits.row(i);
    }
    if (grid.alpha(i) == 0.0 || (trits.row(i).array() == 0).all()) {
      grid.alpha(i) = 0.0;
      trits.row(i).setZero();
    }
  }
}

}  // namespace pt2::atq
