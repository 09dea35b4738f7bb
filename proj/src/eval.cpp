#include "pt2/eval.hpp"

#include <cmath>
#include <fstream>
#include <map>

namespace pt2 {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool differs(double a, double b) {
  return std::abs(a - b) > kEvalRelTol * std::max({std::abs(a), std::abs(b), 1e-300});
}

std::map<std::string, LayerReport> load_reported(const fs::path& packed_dir) {
  std::map<std::string, LayerReport> out;
  const fs::path path = packed_dir / "report.json";
  if (!fs::is_regular_file(path)) return out;
  std::ifstream in(path);
  const json doc = json::parse(in);
  for (const auto& l : doc.at("layers")) {
    LayerReport r = layer_report_from_json(l);
    out.emplace(r.layer, std::move(r));
  }
  return out;
}

}  // namespace

EvalReport evaluate_artifacts(const fs::path& packed_dir, const LayerManifest& manifest,
                              const LayerManifest* calib_override) {
  EvalReport report;
  const auto reported = load_reported(packed_dir);
  for (const auto& entry : manifest.entries) {
    try {
      const PackedTernaryTensor packed = read_packed(packed_dir / packed_file_name(entry.name));
      if (packed.rows != entry.rows || packed.cols != entry.cols) {
        throw Error("shape mismatch: artifact is " + std::to_string(packed.rows) + "x" +
                    std::to_string(packed.cols) + ", manifest says " +
                    std::to_string(entry.rows) + "x" + std::to_string(entry.cols));
      }
      const DenseTensor w = load_tensor(manifest, entry.name);
      const DenseTensor w_hat = dequantize(packed);
      const ManifestEntry& calib_entry =
          calib_override != nullptr ? calib_override->find(entry.name) : entry;
      if (calib_entry.cols != entry.cols) throw Error("calibration width mismatch");
      const auto gram = gram_for_entry(calib_entry);

      LayerEval e;
      e.layer = entry.name;
      e.identity_gram = !gram;
      e.e_w = weight_error(w, w_hat);
      e.e_x_gram = output_error_gram(
          w, w_hat, gram ? gram->gram : Matrix::Identity(entry.cols, entry.cols));
      if (auto it = reported.find(entry.name); it != reported.end()) {
        e.reported_e_w = it->second.e_w;
        e.reported_e_x_gram = it->second.e_x_gram;
        e.mismatch = differs(e.e_w, it->second.e_w) || differs(e.e_x_gram, it->second.e_x_gram);
      }
      report.layers.push_back(std::move(e));
    } catch (const std::exception& ex) {
      report.failures.push_back({entry.name, ex.what()});
    }
  }
  return report;
}

json to_json(const EvalReport& r) {
  json layers = json::array();
  for (const auto& l : r.layers) {
    json j = {{"layer", l.layer},
              {"e_w", l.e_w},
              {"e_x_gram", l.e_x_gram},
              {"identity_gram", l.identity_gram},
              {"mismatch", l.mismatch}};
    j["reported_e_w"] = l.reported_e_w ? json(*l.reported_e_w) : json(nullptr);
    j["reported_e_x_gram"] = l.reported_e_x_gram ? json(*l.reported_e_x_gram) : json(nullptr);
    layers.push_back(std::move(j));
  }
  json failures = json::array();
  for (const auto& f : r.failures) failures.push_back({{"layer", f.layer}, {"error", f.error}});
  return json{{"layers", layers}, {"failures", failures}};
}

}  // namespace pt2
