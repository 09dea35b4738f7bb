#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "pt2/tensorio.hpp"
#include "pt2/types.hpp"

namespace pt2::synth {

/// Synthetic layer generator. Weights are W[i, j] = offset_i + noise, with
/// offset_i ~ U(-offset_range, offset_range) and unit Gaussian noise; a
/// fraction of columns ("outliers") has its noise scaled by outlier_scale.
/// Activations are Student-t (3 dof) with log-normal per-channel scales.
struct SynthSpec {
  uint32_t layers = 2;
  uint32_t rows = 64;
  uint32_t cols = 256;
  uint32_t samples = 512;
  double outlier_frac = 0.02;
  double outlier_scale = 10.0;
  double offset_range = 0.5;
  double channel_log_sigma = 1.0;
  uint64_t seed = 0;
};

struct SynthLayer {
  Matrix weights;
  Matrix activations;
  std::vector<uint32_t> outlier_cols;
};

SynthLayer make_layer(const SynthSpec& spec, std::mt19937_64& rng);

/// Single layer from (seed, spec), independent of spec.seed and spec.layers.
SynthLayer make_layer(const SynthSpec& spec, uint64_t seed);

/// Writes layer_<i>.weight.bin / layer_<i>.calib.bin (f32) and manifest.json
/// into out_dir. Output bytes depend only on the spec.
LayerManifest write_model(const SynthSpec& spec, const std::filesystem::path& out_dir);

}  // namespace pt2::synth
