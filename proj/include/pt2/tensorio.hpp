#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pt2/ternary.hpp"
#include "pt2/types.hpp"

namespace pt2 {

enum class Dtype { kF32, kF16 };

std::size_t dtype_size(Dtype d);
Dtype parse_dtype(const std::string& s);
std::string dtype_name(Dtype d);

struct ManifestEntry {
  std::string name;
  uint32_t rows = 0;
  uint32_t cols = 0;
  Dtype dtype = Dtype::kF32;
  std::filesystem::path path;  // resolved against the manifest directory
  std::optional<std::filesystem::path> calib_path;
  Dtype calib_dtype = Dtype::kF32;
};

struct LayerManifest {
  std::filesystem::path base_dir;
  std::vector<ManifestEntry> entries;

  const ManifestEntry& find(const std::string& name) const;
};

/// Parses and validates a manifest:
///
///   {"entries": [{"name": "...", "shape": [n, m], "dtype": "f32" | "f16",
///                 "path": "w.bin", "calib_path": "x.bin",
///                 "calib_dtype": "f32" | "f16"}]}
///
/// `calib_path` and `calib_dtype` are optional. Relative paths resolve
/// against the manifest's directory. Every referenced file is checked for
/// existence and size; a calibration file must hold a whole number of rows.
LayerManifest load_manifest(const std::filesystem::path& path);

void write_manifest(const LayerManifest& manifest, const std::filesystem::path& path);

DenseTensor load_tensor(const LayerManifest& manifest, const std::string& name);

/// Calibration activations for an entry, shape [samples, cols]. Returns
/// nullopt when the entry has no calibration file.
std::optional<CalibBatch> load_calib(const ManifestEntry& entry);

/// Raw little-endian row-major reads/writes.
Matrix read_raw(const std::filesystem::path& path, Eigen::Index rows, Eigen::Index cols,
                Dtype dtype);
void write_raw(const std::filesystem::path& path, const Matrix& m, Dtype dtype);

float half_to_float(uint16_t bits);
uint16_t float_to_half(float value);

// PT2T container.
inline constexpr char kPackedMagic[4] = {'P', 'T', '2', 'T'};
inline constexpr uint16_t kPackedVersion = 1;
inline constexpr std::size_t kPackedHeaderSize = 4 + 2 + 4 + 4 + 4 + 1;

std::vector<uint8_t> serialize_packed(const PackedTernaryTensor& t);
PackedTernaryTensor deserialize_packed(std::span<const uint8_t> bytes);

void write_packed(const PackedTernaryTensor& t, const std::filesystem::path& path);
PackedTernaryTensor read_packed(const std::filesystem::path& path);

std::vector<uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes);

}  // namespace pt2
