#include "pt2/tensorio.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <zlib.h>
#include <nlohmann/json.hpp>

namespace pt2 {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "raw tensor and PT2T I/O assume a little-endian host");

std::size_t dtype_size(Dtype d) { return d == Dtype::kF16 ? 2 : 4; }

Dtype parse_dtype(const std::string& s) {
  if (s == "f32") return Dtype::kF32;
  if (s == "f16") return Dtype::kF16;
  throw Error("unknown dtype '" + s + "'");
}

std::string dtype_name(Dtype d) { return d == Dtype::kF16 ? "f16" : "f32"; }

float half_to_float(uint16_t bits) {
  return static_cast<float>(std::bit_cast<Eigen::half>(bits));
}

uint16_t float_to_half(float value) { return std::bit_cast<uint16_t>(Eigen::half(value)); }

std::vector<uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& path, std::span<const uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Manifest

const ManifestEntry& LayerManifest::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw Error("no tensor named '" + name + "' in manifest");
}

namespace {

void check_size(const ManifestEntry& e, const fs::path& p, uintmax_t expected,
                const char* what) {
  if (!fs::is_regular_file(p)) {
    throw Error("entry '" + e.name + "': missing " + what + " file " + p.string());
  }
  const uintmax_t actual = fs::file_size(p);
  if (actual != expected) {
    throw Error("entry '" + e.name + "': " + what + " size mismatch (" + std::to_string(actual) +
                " bytes, expected " + std::to_string(expected) + ")");
  }
}

}  // namespace

LayerManifest load_manifest(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw Error("manifest not found: " + path.string());
  json doc;
  try {
    std::ifstream in(path);
    doc = json::parse(in);
  } catch (const json::exception& ex) {
    throw Error("manifest parse error: " + std::string(ex.what()));
  }

  LayerManifest manifest;
  manifest.base_dir = path.parent_path();
  std::set<std::string> names;
  try {
    for (const auto& item : doc.at("entries")) {
      ManifestEntry e;
      e.name = item.at("name").get<std::string>();
      const auto& shape = item.at("shape");
      if (!shape.is_array() || shape.size() != 2) {
        throw Error("entry '" + e.name + "': shape must be [rows, cols]");
      }
      const auto rows = shape[0].get<int64_t>();
      const auto cols = shape[1].get<int64_t>();
      if (rows <= 0 || cols <= 0 || rows > UINT32_MAX || cols > UINT32_MAX) {
        throw Error("entry '" + e.name + "': shape entries must be positive");
      }
      e.rows = static_cast<uint32_t>(rows);
      e.cols = static_cast<uint32_t>(cols);
      e.dtype = parse_dtype(item.value("dtype", "f32"));
      e.path = manifest.base_dir / item.at("path").get<std::string>();
      if (item.contains("calib_path") && !item["calib_path"].is_null()) {
        e.calib_path = manifest.base_dir / item["calib_path"].get<std::string>();
        e.calib_dtype = parse_dtype(item.value("calib_dtype", "f32"));
      }
      if (!names.insert(e.name).second) throw Error("duplicate tensor name '" + e.name + "'");
      manifest.entries.push_back(std::move(e));
    }
  } catch (const json::exception& ex) {
    throw Error("manifest parse error: " + std::string(ex.what()));
  }

  for (const auto& e : manifest.entries) {
    check_size(e, e.path, uintmax_t{e.rows} * e.cols * dtype_size(e.dtype), "tensor");
    if (e.calib_path) {
      if (!fs::is_regular_file(*e.calib_path)) {
        throw Error("entry '" + e.name + "': missing calibration file " +
                    e.calib_path->string());
      }
      const uintmax_t row_bytes = uintmax_t{e.cols} * dtype_size(e.calib_dtype);
      const uintmax_t size = fs::file_size(*e.calib_path);
      if (size == 0 || size % row_bytes != 0) {
        throw Error("entry '" + e.name + "': calibration file size " + std::to_string(size) +
                    " is not a positive multiple of " + std::to_string(row_bytes));
      }
    }
  }
  return manifest;
}

void write_manifest(const LayerManifest& manifest, const fs::path& path) {
  json entries = json::array();
  for (const auto& e : manifest.entries) {
    json item = {{"name", e.name},
                 {"shape", {e.rows, e.cols}},
                 {"dtype", dtype_name(e.dtype)},
                 {"path", e.path.lexically_relative(manifest.base_dir).generic_string()}};
    if (e.calib_path) {
      item["calib_path"] = e.calib_path->lexically_relative(manifest.base_dir).generic_string();
      item["calib_dtype"] = dtype_name(e.calib_dtype);
    }
    entries.push_back(std::move(item));
  }
  const std::string text = json{{"entries", entries}}.dump(2) + "\n";
  write_file(path, std::span(reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------
// Raw tensors

Matrix read_raw(const fs::path& path, Eigen::Index rows, Eigen::Index cols, Dtype dtype) {
  const std::vector<uint8_t> bytes = read_file(path);
  const std::size_t count = static_cast<std::size_t>(rows * cols);
  if (bytes.size() != count * dtype_size(dtype)) {
    throw Error(path.string() + ": expected " + std::to_string(count * dtype_size(dtype)) +
                " bytes, found " + std::to_string(bytes.size()));
  }
  Matrix out(rows, cols);
  double* dst = out.data();
  for (std::size_t i = 0; i < count; ++i) {
    float v;
    if (dtype == Dtype::kF16) {
      uint16_t h;
      std::memcpy(&h, bytes.data() + 2 * i, 2);
      v = half_to_float(h);
    } else {
      std::memcpy(&v, bytes.data() + 4 * i, 4);
    }
    if (!std::isfinite(v)) {
      throw Error(path.string() + ": non-finite value at flat index " + std::to_string(i));
    }
    dst[i] = v;
  }
  return out;
}

void write_raw(const fs::path& path, const Matrix& m, Dtype dtype) {
  std::vector<uint8_t> bytes(static_cast<std::size_t>(m.size()) * dtype_size(dtype));
  const double* src = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const float v = static_cast<float>(src[i]);
    if (dtype == Dtype::kF16) {
      const uint16_t h = float_to_half(v);
      std::memcpy(bytes.data() + 2 * i, &h, 2);
    } else {
      std::memcpy(bytes.data() + 4 * i, &v, 4);
    }
  }
  write_file(path, bytes);
}

DenseTensor load_tensor(const LayerManifest& manifest, const std::string& name) {
  const ManifestEntry& e = manifest.find(name);
  return read_raw(e.path, e.rows, e.cols, e.dtype);
}

std::optional<CalibBatch> load_calib(const ManifestEntry& entry) {
  if (!entry.calib_path) return std::nullopt;
  const uintmax_t row_bytes = uintmax_t{entry.cols} * dtype_size(entry.calib_dtype);
  const auto samples = static_cast<Eigen::Index>(fs::file_size(*entry.calib_path) / row_bytes);
  return read_raw(*entry.calib_path, samples, entry.cols, entry.calib_dtype);
}

// ---------------------------------------------------------------------------
// PT2T container
//
//   "PT2T" | u16 version | u32 rows | u32 cols | u32 group_size | u8 scale dtype
//   permutation: cols x u32
//   grid: rows x groups x (alpha, mu), each f32 or f16
//   trits: ceil(rows * cols / 5) bytes
//   u32 CRC32 over permutation, grid and trits
//
// All multi-byte fields little-endian.

namespace {

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void put_bytes(std::span<const uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void put_scale(double v, ScaleDtype d) {
    if (d == ScaleDtype::kF16) {
      put(float_to_half(static_cast<float>(v)));
    } else {
      put(static_cast<float>(v));
    }
  }
  std::vector<uint8_t>& bytes() { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const uint8_t> b) : buf_(b) {}
  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)).data(), sizeof(T));
    return v;
  }
  std::span<const uint8_t> take(std::size_t n) {
    if (pos_ + n > buf_.size()) throw Error("truncated payload");
    auto s = buf_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  double get_scale(ScaleDtype d) {
    if (d == ScaleDtype::kF16) return half_to_float(get<uint16_t>());
    return get<float>();
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  std::span<const uint8_t> buf_;
  std::size_t pos_ = 0;
};

uint32_t crc32_of(std::span<const uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<uint32_t>(crc);
}

}  // namespace

std::vector<uint8_t> serialize_packed(const PackedTernaryTensor& t) {
  validate(t);
  Writer w;
  w.put_bytes(std::span(reinterpret_cast<const uint8_t*>(kPackedMagic), 4));
  w.put(kPackedVersion);
  w.put(t.rows);
  w.put(t.cols);
  w.put(t.group_size);
  w.put(static_cast<uint8_t>(t.scale_dtype));
  for (uint32_t p : t.permutation) w.put(p);
  for (uint32_t i = 0; i < t.rows; ++i) {
    for (uint32_t g = 0; g < t.num_groups(); ++g) {
      w.put_scale(t.grid.alpha(i, g), t.scale_dtype);
      w.put_scale(t.grid.mu(i, g), t.scale_dtype);
    }
  }
  w.put_bytes(t.payload);
  auto& bytes = w.bytes();
  const uint32_t crc =
      crc32_of(std::span(bytes).subspan(kPackedHeaderSize, bytes.size() - kPackedHeaderSize));
  w.put(crc);
  return std::move(bytes);
}

PackedTernaryTensor deserialize_packed(std::span<const uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kPackedMagic, 4) != 0) {
    throw Error("bad magic");
  }
  Reader r(bytes);
  r.take(4);
  const auto version = r.get<uint16_t>();
  if (version != kPackedVersion) throw Error("unsupported version " + std::to_string(version));

  PackedTernaryTensor t;
  t.rows = r.get<uint32_t>();
  t.cols = r.get<uint32_t>();
  t.group_size = r.get<uint32_t>();
  const auto dtype = r.get<uint8_t>();
  if (dtype > 1) throw Error("unknown scale dtype " + std::to_string(dtype));
  t.scale_dtype = static_cast<ScaleDtype>(dtype);
  if (t.group_size == 0) throw Error("group size must be positive");

  const uint64_t scale_bytes = t.scale_dtype == ScaleDtype::kF16 ? 2 : 4;
  const uint64_t body = uint64_t{t.cols} * 4 +
                        uint64_t{t.rows} * t.num_groups() * 2 * scale_bytes +
                        packed_size(uint64_t{t.rows} * t.cols);
  if (r.remaining() < body + 4) throw Error("truncated payload");
  if (r.remaining() > body + 4) throw Error("trailing bytes after checksum");

  const auto payload_span = bytes.subspan(kPackedHeaderSize, body);
  const uint32_t expected = crc32_of(payload_span);

  t.permutation.resize(t.cols);
  for (auto& p : t.permutation) p = r.get<uint32_t>();
  t.grid = GridParams(t.rows, t.num_groups());
  for (uint32_t i = 0; i < t.rows; ++i) {
    for (uint32_t g = 0; g < t.num_groups(); ++g) {
      t.grid.alpha(i, g) = r.get_scale(t.scale_dtype);
      t.grid.mu(i, g) = r.get_scale(t.scale_dtype);
    }
  }
  const auto trits = r.take(packed_size(uint64_t{t.rows} * t.cols));
  t.payload.assign(trits.begin(), trits.end());
  if (r.get<uint32_t>() != expected) throw Error("checksum mismatch");
  validate(t);
  return t;
}

void write_packed(const PackedTernaryTensor& t, const fs::path& path) {
  write_file(path, serialize_packed(t));
}

PackedTernaryTensor read_packed(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return deserialize_packed(bytes);
  } catch (const Error& ex) {
    throw Error(path.string() + ": " + ex.what());
  }
}

}  // namespace pt2
