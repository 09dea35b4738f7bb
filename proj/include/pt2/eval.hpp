#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pt2/pipeline.hpp"
#include "pt2/tensorio.hpp"

namespace pt2 {

inline constexpr double kEvalRelTol = 1e-6;

struct LayerEval {
  std::string layer;
  double e_w = 0.0;
  double e_x_gram = 0.0;
  bool identity_gram = false;
  std::optional<double> reported_e_w;
  std::optional<double> reported_e_x_gram;
  bool mismatch = false;
};

struct EvalReport {
  std::vector<LayerEval> layers;
  std::vector<LayerFailure> failures;
};

/// Recomputes E_w and Gram-form E_x for every manifest entry from the PT2T
/// files in packed_dir. Quantize-time numbers are read from
/// packed_dir/report.json when present and compared at kEvalRelTol.
EvalReport evaluate_artifacts(const std::filesystem::path& packed_dir,
                              const LayerManifest& manifest,
                              const LayerManifest* calib_override = nullptr);

nlohmann::json to_json(const EvalReport& r);

}  // namespace pt2
