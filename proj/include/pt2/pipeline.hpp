#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pt2/atq.hpp"
#include "pt2/tensorio.hpp"
#include "pt2/ternary.hpp"
#include "pt2/types.hpp"

namespace pt2 {

struct CalibGram {
  Matrix gram;  // sum of x^T x over samples
  uint64_t count = 0;

  CalibGram() = default;
  explicit CalibGram(Eigen::Index dim) : gram(Matrix::Zero(dim, dim)) {}

  static CalibGram identity(Eigen::Index dim);
};

/// gram += X^T X. The result is exactly symmetric.
void accumulate_gram(CalibGram& state, const CalibBatch& batch);

struct HessianFactor {
  Matrix upper;  // U with H^{-1} = U^T U
  double lambda = 0.0;
  std::vector<bool> dead;
};

/// Damped Hessian H = gram + lambda I with lambda = lambda_frac * mean(diag).
Matrix damped_hessian(const Matrix& gram, double lambda_frac, double* lambda_out = nullptr,
                      std::vector<bool>* dead_out = nullptr);

/// Upper Cholesky factor of the inverse of an SPD matrix. Throws on failure.
Matrix inverse_upper_factor(const Matrix& h);

HessianFactor hessian_prepare(const CalibGram& gram, double lambda_frac);

struct QuantConfig {
  uint32_t group_size = 128;
  double lambda_frac = 0.01;
  int max_iters = atq::kDefaultMaxIters;
  ScaleDtype scale_dtype = ScaleDtype::kF32;
  bool ssr = true;
  bool aga = true;
  bool itf = true;
  bool compensation = true;
  // Permits Gram = I when a layer has no calibration data.
  bool allow_identity_gram = false;
  // Column order used when ssr is off; empty means identity.
  std::vector<uint32_t> static_order;

  void validate(uint32_t cols) const;
};

struct LayerReport {
  std::string layer;
  uint32_t n = 0;
  uint32_t m = 0;
  uint32_t k = 0;
  double e_w = 0.0;
  double e_x_gram = 0.0;
  // Sums over blocks of the tile-local Gram-form error, before and after AGA.
  double e_x_tile_pre_aga = 0.0;
  double e_x_tile_post_aga = 0.0;
  double bits_per_weight = 0.0;
  double total_bits_per_weight = 0.0;
  uint64_t packed_bytes = 0;
  double itf_iters_mean = 0.0;
  double itf_converged_fraction = 0.0;
  uint32_t blocks = 0;
  bool ssr = false;
  bool aga = false;
  bool itf = false;
  bool compensation = false;
  bool identity_gram = false;
  std::vector<double> block_variance;
};

struct LayerResult {
  PackedTernaryTensor packed;
  LayerReport report;
};

/// Blockwise ternarization of one layer: column selection (SSR or static
/// order), ATQ per block, and inverse-Hessian compensation of the columns
/// not yet quantized. `gram` may be null only with allow_identity_gram.
LayerResult quantize_layer(const DenseTensor& w, const CalibGram* gram, const QuantConfig& cfg,
                           const std::string& name = "layer");

struct LayerFailure {
  std::string layer;
  std::string error;
};

struct ModelReport {
  std::vector<LayerReport> layers;
  std::vector<LayerFailure> failures;
  uint64_t original_bytes_f32 = 0;
  uint64_t original_bytes_f16 = 0;
  uint64_t packed_bytes = 0;

  double size_reduction_vs_f32() const;
  double size_reduction_vs_f16() const;
};

/// Quantizes every manifest entry, writing <out_dir>/<name>.pt2t per layer
/// and <out_dir>/report.json. Failing layers are recorded, not thrown.
/// `calib_override`, when set, supplies calibration data by entry name.
ModelReport quantize_model(const LayerManifest& manifest, const QuantConfig& cfg,
                           const std::filesystem::path& out_dir, int jobs = 1,
                           const LayerManifest* calib_override = nullptr);

/// Gram for an entry from its calibration file, or nullopt if it has none.
std::optional<CalibGram> gram_for_entry(const ManifestEntry& entry);

std::string packed_file_name(const std::string& layer);

nlohmann::json to_json(const LayerReport& r);
LayerReport layer_report_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelReport& r, const QuantConfig& cfg);

}  // namespace pt2
