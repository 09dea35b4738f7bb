#pragma once

// Asymmetric ternary quantizer for a single tile (rows x group columns).
// Every row owns its own (alpha, mu); rows never interact.

#include <vector>

#include "pt2/types.hpp"

namespace pt2::atq {

using TileRef = Eigen::Ref<const Matrix>;

inline constexpr int kDefaultMaxIters = 50;
inline constexpr double kSingularTol = 1e-12;

struct TileGrid {
  Vector alpha;
  Vector mu;
};

struct InitResult {
  TileGrid grid;
  TernaryMatrix trits;
};

struct AtqState {
  TileGrid grid;
  TernaryMatrix trits;
  double e_w = 0.0;
  int iterations = 0;
  bool converged = false;
  // E_w after init, then after every grid solve and every rounding pass.
  std::vector<double> e_w_trace;
};

/// Row mean offset, threshold 0.75 * mean|w - mu|, threshold rounding of the
/// centered row, and alpha as the mean magnitude of the selected entries.
InitResult ternary_init(const TileRef& w);

/// Per-row least-squares (alpha, mu) for fixed trits. A row whose trits are
/// all equal has a singular system; it gets mu = row mean and alpha = 0
/// (or the prior alpha when given and every trit in the row is zero).
TileGrid optimal_grid(const TileRef& w, const TernaryMatrix& trits,
                      const TileGrid* prior = nullptr);

/// Nearest trit to z; |z| == 0.5 rounds to 0.
inline int8_t round_to_trit(double z) {
  if (z > 0.5) return 1;
  if (z < -0.5) return -1;
  return 0;
}

/// Elementwise argmin over {-1, 0, 1} of |(w - mu) / alpha - t|. Rows with
/// alpha == 0 (or non-finite z) get all-zero trits.
TernaryMatrix flexible_round(const TileRef& w, const TileGrid& grid);

/// Alternates optimal_grid and flexible_round until the trits stop changing
/// or `max_iters` iterations ran.
AtqState itf(const TileRef& w, InitResult init, int max_iters = kDefaultMaxIters);

/// One-shot weighted least-squares (alpha, mu) under the tile's Gram block,
/// with trits frozen. Rows whose weighted system is singular keep `prior`.
/// Throws if `gram` is not square, mismatched, or not symmetric.
TileGrid aga_align(const TileRef& w, const TernaryMatrix& trits, const TileRef& gram,
                   const TileGrid& prior);

/// alpha * T + mu for the tile.
Matrix reconstruct(const TileGrid& grid, const TernaryMatrix& trits);

double tile_weight_error(const TileRef& w, const TileGrid& grid, const TernaryMatrix& trits);
double tile_output_error(const TileRef& w, const TileGrid& grid, const TernaryMatrix& trits,
                         const TileRef& gram);

/// alpha < 0 -> negate alpha and the row's trits; rows with all-zero trits
/// get alpha = 0. The reconstruction is unchanged.
void canonicalize(TileGrid& grid, TernaryMatrix& trits);

}  // namespace pt2::atq
