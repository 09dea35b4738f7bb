#include "pt2/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pt2::synth {

namespace fs = std::filesystem;

SynthLayer make_layer(const SynthSpec& spec, std::mt19937_64& rng) {
  SynthLayer layer;
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> offset(-spec.offset_range, spec.offset_range);

  const auto outliers = static_cast<uint32_t>(std::lround(spec.outlier_frac * spec.cols));
  std::vector<uint32_t> cols(spec.cols);
  std::iota(cols.begin(), cols.end(), 0u);
  std::shuffle(cols.begin(), cols.end(), rng);
  layer.outlier_cols.assign(cols.begin(), cols.begin() + outliers);
  std::sort(layer.outlier_cols.begin(), layer.outlier_cols.end());

  std::vector<double> noise_scale(spec.cols, 1.0);
  for (uint32_t c : layer.outlier_cols) noise_scale[c] = spec.outlier_scale;

  layer.weights.resize(spec.rows, spec.cols);
  for (uint32_t i = 0; i < spec.rows; ++i) {
    const double row_offset = spec.offset_range > 0.0 ? offset(rng) : 0.0;
    for (uint32_t j = 0; j < spec.cols; ++j) {
      layer.weights(i, j) = row_offset + noise_scale[j] * gauss(rng);
    }
  }

  std::student_t_distribution<double> heavy(3.0);
  std::vector<double> channel(spec.cols);
  for (auto& s : channel) s = std::exp(spec.channel_log_sigma * gauss(rng));
  layer.activations.resize(spec.samples, spec.cols);
  for (uint32_t s = 0; s < spec.samples; ++s) {
    for (uint32_t j = 0; j < spec.cols; ++j) layer.activations(s, j) = channel[j] * heavy(rng);
  }
  return layer;
}

SynthLayer make_layer(const SynthSpec& spec, uint64_t seed) {
  std::mt19937_64 rng(seed);
  return make_layer(spec, rng);
}

LayerManifest write_model(const SynthSpec& spec, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::mt19937_64 rng(spec.seed);
  LayerManifest manifest;
  manifest.base_dir = out_dir;
  for (uint32_t l = 0; l < spec.layers; ++l) {
    const SynthLayer layer = make_layer(spec, rng);
    const std::string name = "layer_" + std::to_string(l);
    ManifestEntry e;
    e.name = name;
    e.rows = spec.rows;
    e.cols = spec.cols;
    e.dtype = Dtype::kF32;
    e.path = out_dir / (name + ".weight.bin");
    e.calib_path = out_dir / (name + ".calib.bin");
    e.calib_dtype = Dtype::kF32;
    write_raw(e.path, layer.weights, Dtype::kF32);
    write_raw(*e.calib_path, layer.activations, Dtype::kF32);
    manifest.entries.push_back(std::move(e));
  }
  write_manifest(manifest, out_dir / "manifest.json");
  return manifest;
}

}  // namespace pt2::synth
