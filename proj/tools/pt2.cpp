// pt2: ternary weight quantization front end.
//
//   pt2 synth      --out DIR [--seed S] [--layers L] [--rows N] [--cols M] ...
//   pt2 quantize   --manifest FILE --out DIR [--group-size K] [--no-ssr] ...
//   pt2 dequantize --packed FILE --out FILE [--dtype f32|f16]
//   pt2 eval       --packed-dir DIR --manifest FILE [--calib FILE]
//   pt2 inspect    FILE
//
// Exit codes: 0 success, 1 layer failure, 2 invalid invocation.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "pt2/eval.hpp"
#include "pt2/pipeline.hpp"
#include "pt2/ssr.hpp"
#include "pt2/synth.hpp"
#include "pt2/tensorio.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitLayerFailure = 1;
constexpr int kExitUsage = 2;

void configure_logging() {
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("PT2_LOG")) {
    const std::string level = env;
    if (level == "error") spdlog::set_level(spdlog::level::err);
    else if (level == "info") spdlog::set_level(spdlog::level::info);
    else if (level == "debug") spdlog::set_level(spdlog::level::debug);
  }
}

struct QuantizeArgs {
  std::string manifest;
  std::string calib;
  std::string out;
  uint32_t group_size = 128;
  double lambda_frac = 0.01;
  int max_iters = pt2::atq::kDefaultMaxIters;
  bool no_ssr = false;
  bool no_aga = false;
  bool no_itf = false;
  bool no_compensation = false;
  bool allow_no_calib = false;
  std::string scale_dtype = "f32";
  std::string report = "json";
  int jobs = 1;
};

pt2::QuantConfig to_config(const QuantizeArgs& a) {
  pt2::QuantConfig cfg;
  cfg.group_size = a.group_size;
  cfg.lambda_frac = a.lambda_frac;
  cfg.max_iters = a.max_iters;
  cfg.ssr = !a.no_ssr;
  cfg.aga = !a.no_aga;
  cfg.itf = !a.no_itf;
  cfg.compensation = !a.no_compensation;
  cfg.allow_identity_gram = a.allow_no_calib;
  cfg.scale_dtype = a.scale_dtype == "f16" ? pt2::ScaleDtype::kF16 : pt2::ScaleDtype::kF32;
  return cfg;
}

int cmd_quantize(const QuantizeArgs& a) {
  pt2::LayerManifest manifest;
  std::optional<pt2::LayerManifest> calib;
  pt2::QuantConfig cfg = to_config(a);
  try {
    manifest = pt2::load_manifest(a.manifest);
    if (!a.calib.empty()) calib = pt2::load_manifest(a.calib);
    cfg.validate(1);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitUsage;
  }

  const fs::path out_dir = a.out;
  const pt2::ModelReport report =
      pt2::quantize_model(manifest, cfg, out_dir, a.jobs, calib ? &*calib : nullptr);

  for (const auto& l : report.layers) {
    std::printf("%-24s %5ux%-5u E_w=%.6e E_x=%.6e bits/w=%.4f itf=%.1f%s\n", l.layer.c_str(),
                l.n, l.m, l.e_w, l.e_x_gram, l.total_bits_per_weight, l.itf_iters_mean,
                l.identity_gram ? " (identity gram)" : "");
    if (a.report == "csv") {
      std::ofstream csv(out_dir / (l.layer + ".blocks.csv"));
      pt2::ssr::write_block_variance_csv(csv, l.block_variance);
    }
  }
  for (const auto& f : report.failures) {
    std::printf("%-24s FAILED: %s\n", f.layer.c_str(), f.error.c_str());
  }
  std::printf("size reduction: %.2fx vs f32, %.2fx vs f16 (%llu packed bytes)\n",
              report.size_reduction_vs_f32(), report.size_reduction_vs_f16(),
              static_cast<unsigned long long>(report.packed_bytes));
  return report.failures.empty() ? kExitOk : kExitLayerFailure;
}

int cmd_dequantize(const std::string& packed_path, const std::string& out,
                   const std::string& dtype) {
  try {
    const auto packed = pt2::read_packed(packed_path);
    pt2::write_raw(out, pt2::dequantize(packed), pt2::parse_dtype(dtype));
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitLayerFailure;
  }
  return kExitOk;
}

int cmd_eval(const std::string& packed_dir, const std::string& manifest_path,
             const std::string& calib_path, const std::string& out) {
  pt2::LayerManifest manifest;
  std::optional<pt2::LayerManifest> calib;
  try {
    manifest = pt2::load_manifest(manifest_path);
    if (!calib_path.empty()) calib = pt2::load_manifest(calib_path);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitUsage;
  }
  const auto report = pt2::evaluate_artifacts(packed_dir, manifest, calib ? &*calib : nullptr);
  for (const auto& l : report.layers) {
    std::printf("%-24s E_w=%.6e E_x=%.6e%s\n", l.layer.c_str(), l.e_w, l.e_x_gram,
                l.mismatch ? "  MISMATCH vs quantize-time report" : "");
  }
  for (const auto& f : report.failures) {
    std::printf("%-24s FAILED: %s\n", f.layer.c_str(), f.error.c_str());
  }
  const fs::path out_path = out.empty() ? fs::path(packed_dir) / "eval_report.json" : fs::path(out);
  std::ofstream(out_path) << pt2::to_json(report).dump(2) << "\n";
  return report.failures.empty() ? kExitOk : kExitLayerFailure;
}

int cmd_inspect(const std::string& path) {
  try {
    const auto t = pt2::read_packed(path);
    const auto trits = pt2::unpack_trits(t.payload, t.rows, t.cols);
    const auto file_bytes = fs::file_size(path);
    long counts[3] = {0, 0, 0};
    for (Eigen::Index i = 0; i < trits.size(); ++i) ++counts[trits.data()[i] + 1];
    std::printf("shape        %u x %u\n", t.rows, t.cols);
    std::printf("group size   %u (%u groups)\n", t.group_size, t.num_groups());
    std::printf("scale dtype  %s\n", t.scale_dtype == pt2::ScaleDtype::kF16 ? "f16" : "f32");
    std::printf("trits        -1: %ld  0: %ld  +1: %ld\n", counts[0], counts[1], counts[2]);
    std::printf("payload      %.4f bits/weight\n", pt2::payload_bits_per_weight(t));
    std::printf("file         %ju bytes, %.4f bits/weight\n", static_cast<uintmax_t>(file_bytes),
                8.0 * static_cast<double>(file_bytes) / (double(t.rows) * t.cols));
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitLayerFailure;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Ternary post-training weight quantization"};
  app.require_subcommand(1);

  QuantizeArgs q;
  auto* quantize = app.add_subcommand("quantize", "Quantize every tensor in a manifest");
  quantize->add_option("--manifest", q.manifest, "Layer manifest (JSON)")->required();
  quantize->add_option("--calib", q.calib, "Manifest supplying calibration data by name");
  quantize->add_option("--out", q.out, "Output directory")->required();
  quantize->add_option("-k,--group-size", q.group_size, "Columns per group")
      ->check(CLI::PositiveNumber);
  quantize->add_option("--damp", q.lambda_frac, "Hessian damping fraction")
      ->check(CLI::Range(0.0, 1.0));
  quantize->add_option("--max-iters", q.max_iters, "ITF iteration cap")
      ->check(CLI::PositiveNumber);
  quantize->add_flag("--no-ssr", q.no_ssr, "Quantize columns in original order");
  quantize->add_flag("--no-aga", q.no_aga, "Skip activation-aware grid alignment");
  quantize->add_flag("--no-itf", q.no_itf, "Skip iterative ternary fitting");
  quantize->add_flag("--no-compensation", q.no_compensation, "Skip inverse-Hessian updates");
  quantize->add_flag("--allow-no-calib", q.allow_no_calib,
                     "Use an identity Gram for layers without calibration data");
  quantize->add_option("--scale-dtype", q.scale_dtype, "Grid storage dtype")
      ->check(CLI::IsMember({"f32", "f16"}));
  quantize->add_option("--report", q.report, "Also write per-block CSV when 'csv'")
      ->check(CLI::IsMember({"json", "csv"}));
  quantize->add_option("-j,--jobs", q.jobs, "Layers quantized in parallel")
      ->check(CLI::PositiveNumber);

  std::string packed_path, raw_out, raw_dtype = "f32";
  auto* dequantize = app.add_subcommand("dequantize", "Expand a PT2T file to a raw tensor");
  dequantize->add_option("--packed", packed_path, "PT2T file")->required();
  dequantize->add_option("--out", raw_out, "Raw output file")->required();
  dequantize->add_option("--dtype", raw_dtype, "Output dtype")
      ->check(CLI::IsMember({"f32", "f16"}));

  std::string packed_dir, eval_manifest, eval_calib, eval_out;
  auto* eval = app.add_subcommand("eval", "Recompute error metrics from artifacts");
  eval->add_option("--packed-dir", packed_dir, "Directory written by quantize")->required();
  eval->add_option("--manifest", eval_manifest, "Layer manifest")->required();
  eval->add_option("--calib", eval_calib, "Manifest supplying calibration data by name");
  eval->add_option("--out", eval_out, "Report path (default <packed-dir>/eval_report.json)");

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "Print a PT2T file summary");
  inspect->add_option("file", inspect_path, "PT2T file")->required();

  pt2::synth::SynthSpec spec;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic model and manifest");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", spec.seed, "Generator seed");
  synth->add_option("--layers", spec.layers, "Number of layers")->check(CLI::PositiveNumber);
  synth->add_option("--rows", spec.rows, "Rows per layer")->check(CLI::PositiveNumber);
  synth->add_option("--cols", spec.cols, "Columns per layer")->check(CLI::PositiveNumber);
  synth->add_option("--samples", spec.samples, "Calibration samples")
      ->check(CLI::PositiveNumber);
  synth->add_option("--outlier-frac", spec.outlier_frac, "Fraction of outlier columns")
      ->check(CLI::Range(0.0, 1.0));
  synth->add_option("--outlier-scale", spec.outlier_scale, "Noise scale of outlier columns");
  synth->add_option("--offset", spec.offset_range, "Row offsets drawn from U(-r, r)")
      ->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  if (*quantize) return cmd_quantize(q);
  if (*dequantize) return cmd_dequantize(packed_path, raw_out, raw_dtype);
  if (*eval) return cmd_eval(packed_dir, eval_manifest, eval_calib, eval_out);
  if (*inspect) return cmd_inspect(inspect_path);
  if (*synth) {
    try {
      const auto manifest = pt2::synth::write_model(spec, synth_out);
      std::printf("wrote %zu layers to %s\n", manifest.entries.size(), synth_out.c_str());
    } catch (const std::exception& ex) {
      std::cerr << "error: " << ex.what() << "\n";
      return kExitLayerFailure;
    }
    return kExitOk;
  }
  return kExitUsage;
}
