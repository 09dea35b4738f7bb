#include "pt2/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <numeric>
#include <thread>

#include <Eigen/Cholesky>
#include <spdlog/spdlog.h>

#include "pt2/ssr.hpp"

namespace pt2 {

namespace fs = std::filesystem;
using nlohmann::json;

CalibGram CalibGram::identity(Eigen::Index dim) {
  CalibGram g;
  g.gram = Matrix::Identity(dim, dim);
  return g;
}

void accumulate_gram(CalibGram& state, const CalibBatch& batch) {
  if (batch.cols() != state.gram.rows()) {
    throw Error("calibration batch has " + std::to_string(batch.cols()) +
                " features, gram dimension is " + std::to_string(state.gram.rows()));
  }
  // Build the batch product on its own so that adding the same batch twice
  // gives exactly twice the single-batch gram.
  Matrix product = Matrix::Zero(batch.cols(), batch.cols());
  product.selfadjointView<Eigen::Lower>().rankUpdate(batch.transpose());
  product.triangularView<Eigen::StrictlyUpper>() = product.transpose();
  state.gram += product;
  state.count += static_cast<uint64_t>(batch.rows());
}

Matrix damped_hessian(const Matrix& gram, double lambda_frac, double* lambda_out,
                      std::vector<bool>* dead_out) {
  const Eigen::Index m = gram.rows();
  const double mean_diag = m > 0 ? gram.diagonal().mean() : 0.0;
  const double lambda = mean_diag > 0.0 ? lambda_frac * mean_diag : lambda_frac;
  Matrix h = gram;
  if (dead_out != nullptr) {
    dead_out->assign(static_cast<std::size_t>(m), false);
    for (Eigen::Index j = 0; j < m; ++j) (*dead_out)[j] = gram(j, j) == 0.0;
  }
  h.diagonal().array() += lambda;
  if (lambda_out != nullptr) *lambda_out = lambda;
  return h;
}

Matrix inverse_upper_factor(const Matrix& h) {
  const Eigen::Index m = h.rows();
  Eigen::LLT<Matrix> chol(h);
  if (chol.info() != Eigen::Success) {
    throw Error("Hessian factorization failed; increase the damping fraction");
  }
  Matrix inv = chol.solve(Matrix::Identity(m, m));
  inv = (0.5 * (inv + inv.transpose())).eval();
  Eigen::LLT<Matrix> chol_inv(inv);
  if (chol_inv.info() != Eigen::Success) {
    throw Error("inverse Hessian factorization failed; increase the damping fraction");
  }
  return chol_inv.matrixU();
}

HessianFactor hessian_prepare(const CalibGram& gram, double lambda_frac) {
  HessianFactor f;
  const Matrix h = damped_hessian(gram.gram, lambda_frac, &f.lambda, &f.dead);
  f.upper = inverse_upper_factor(h);
  return f;
}

void QuantConfig::validate(uint32_t cols) const {
  if (group_size < 1) throw Error("group size must be at least 1");
  if (!(lambda_frac > 0.0 && lambda_frac < 1.0)) {
    throw Error("damping fraction must lie in (0, 1)");
  }
  if (max_iters < 1) throw Error("max iterations must be at least 1");
  if (!static_order.empty()) {
    if (static_order.size() != cols) throw Error("static order length does not match cols");
    std::vector<bool> seen(cols, false);
    for (uint32_t c : static_order) {
      if (c >= cols || seen[c]) throw Error("static order is not a permutation");
      seen[c] = true;
    }
  }
}

namespace {

Vector row_output_error(const Matrix& w, const atq::TileGrid& grid, const TernaryMatrix& trits,
                        const Matrix& gram) {
  const Matrix r = w - atq::reconstruct(grid, trits);
  return ((r * gram).array() * r.array()).rowwise().sum();
}

Matrix gather_cols(const Matrix& w, std::span<const uint32_t> cols) {
  Matrix out(w.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(j) = w.col(cols[j]);
  return out;
}

Matrix gather_square(const Matrix& a, std::span<const uint32_t> idx) {
  const auto n = static_cast<Eigen::Index>(idx.size());
  Matrix out(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) out(i, j) = a(idx[i], idx[j]);
  }
  return out;
}

}  // namespace

LayerResult quantize_layer(const DenseTensor& w, const CalibGram* gram, const QuantConfig& cfg,
                           const std::string& name) {
  const auto n = static_cast<uint32_t>(w.rows());
  const auto m = static_cast<uint32_t>(w.cols());
  if (n == 0 || m == 0) throw Error("empty weight matrix");
  cfg.validate(m);
  if (gram == nullptr && !cfg.allow_identity_gram) {
    throw Error("no calibration data and identity-Gram fallback is disabled");
  }
  if (gram != nullptr && (gram->gram.rows() != m || gram->gram.cols() != m)) {
    throw Error("gram dimension does not match weight columns");
  }
  const Matrix c = gram != nullptr ? gram->gram : Matrix::Identity(m, m);
  const uint32_t k = cfg.group_size;
  const uint32_t groups = (m + k - 1) / k;

  double lambda = 0.0;
  std::vector<bool> dead;
  const Matrix h = damped_hessian(c, cfg.lambda_frac, &lambda, &dead);
  const auto dead_count = std::count(dead.begin(), dead.end(), true);
  if (dead_count > 0) spdlog::debug("{}: {} dead columns", name, dead_count);

  std::vector<uint32_t> remaining(m);
  if (!cfg.ssr && !cfg.static_order.empty()) {
    remaining = cfg.static_order;
  } else {
    std::iota(remaining.begin(), remaining.end(), 0u);
  }
  // With a fixed order the trailing blocks of one factor serve every step.
  Matrix static_factor;
  if (!cfg.ssr && cfg.compensation) static_factor = inverse_upper_factor(gather_square(h, remaining));

  Matrix residual = w;
  ssr::PermutationTrace trace(m);
  TernaryMatrix trits(n, m);
  GridParams grid(n, groups);

  LayerReport report;
  report.layer = name;
  report.n = n;
  report.m = m;
  report.k = k;
  report.ssr = cfg.ssr;
  report.aga = cfg.aga;
  report.itf = cfg.itf;
  report.compensation = cfg.compensation;
  report.identity_gram = gram == nullptr;
  report.blocks = groups;

  double iter_sum = 0.0;
  uint32_t converged = 0;
  uint32_t pos = 0;
  for (uint32_t b = 0; b < groups; ++b) {
    const uint32_t kb = std::min(k, m - pos);
    std::vector<uint32_t> block;
    std::vector<uint32_t> rest;
    if (cfg.ssr) {
      block = ssr::select_next_block(residual, remaining, k);
      std::set_difference(remaining.begin(), remaining.end(), block.begin(), block.end(),
                          std::back_inserter(rest));
    } else {
      block.assign(remaining.begin(), remaining.begin() + kb);
      rest.assign(remaining.begin() + kb, remaining.end());
    }

    const Matrix wb = gather_cols(residual, block);
    const Matrix cb = gather_square(c, block);

    atq::InitResult init = atq::ternary_init(wb);
    atq::AtqState state;
    if (cfg.itf) {
      state = atq::itf(wb, std::move(init), cfg.max_iters);
      if (!state.converged) {
        spdlog::info("{}: block {} did not converge in {} iterations", name, b, cfg.max_iters);
      }
    } else {
      state.grid = std::move(init.grid);
      state.trits = std::move(init.trits);
      state.converged = true;
    }
    iter_sum += state.iterations;
    converged += state.converged ? 1 : 0;

    atq::TileGrid tile_grid = state.grid;
    const Vector pre = row_output_error(wb, tile_grid, state.trits, cb);
    Vector post = pre;
    if (cfg.aga) {
      // Rows are independent; keep a row's aligned grid only on strict improvement,
      // so rows that are already exact keep their grid bit-for-bit.
      const atq::TileGrid aligned = atq::aga_align(wb, state.trits, cb, tile_grid);
      const Vector e = row_output_error(wb, aligned, state.trits, cb);
      for (Eigen::Index i = 0; i < e.size(); ++i) {
        if (e(i) < pre(i)) {
          tile_grid.alpha(i) = aligned.alpha(i);
          tile_grid.mu(i) = aligned.mu(i);
          post(i) = e(i);
        }
      }
    }
    report.e_x_tile_pre_aga += pre.sum();
    report.e_x_tile_post_aga += post.sum();

    TernaryMatrix tile_trits = std::move(state.trits);
    atq::canonicalize(tile_grid, tile_trits);
    {
      // Compensation must see exactly the values that get stored.
      GridParams stored(n, 1);
      stored.alpha.col(0) = tile_grid.alpha;
      stored.mu.col(0) = tile_grid.mu;
      round_to_storage(stored, cfg.scale_dtype);
      tile_grid.alpha = stored.alpha.col(0);
      tile_grid.mu = stored.mu.col(0);
    }

    if (cfg.compensation && !rest.empty()) {
      const Matrix err = wb - atq::reconstruct(tile_grid, tile_trits);
      Matrix u_bb;
      Matrix u_br;
      if (cfg.ssr) {
        std::vector<uint32_t> sub = block;
        sub.insert(sub.end(), rest.begin(), rest.end());
        const Matrix u = inverse_upper_factor(gather_square(h, sub));
        u_bb = u.topLeftCorner(kb, kb);
        u_br = u.topRightCorner(kb, static_cast<Eigen::Index>(rest.size()));
      } else {
        u_bb = static_factor.block(pos, pos, kb, kb);
        u_br = static_factor.block(pos, pos + kb, kb, static_cast<Eigen::Index>(rest.size()));
      }
      // delta = err * U_bb^{-1} * U_br
      const Matrix scaled =
          u_bb.triangularView<Eigen::Upper>().solve<Eigen::OnTheRight>(err);
      const Matrix delta = scaled * u_br;
      for (std::size_t j = 0; j < rest.size(); ++j) residual.col(rest[j]) -= delta.col(j);
    }

    trits.middleCols(pos, kb) = tile_trits;
    grid.alpha.col(b) = tile_grid.alpha;
    grid.mu.col(b) = tile_grid.mu;
    trace.append(block);
    remaining = std::move(rest);
    pos += kb;
  }

  LayerResult result;
  result.packed = make_packed(trits, std::move(grid), trace.order(), k, cfg.scale_dtype);

  const DenseTensor w_hat = dequantize(result.packed);
  report.e_w = weight_error(w, w_hat);
  report.e_x_gram = output_error_gram(w, w_hat, c);
  report.bits_per_weight = payload_bits_per_weight(result.packed);
  report.packed_bytes = serialize_packed(result.packed).size();
  report.total_bits_per_weight =
      8.0 * static_cast<double>(report.packed_bytes) / (static_cast<double>(n) * m);
  report.itf_iters_mean = iter_sum / groups;
  report.itf_converged_fraction = static_cast<double>(converged) / groups;
  report.block_variance = ssr::block_variance_profile(w, trace.order(), k);
  result.report = std::move(report);
  return result;
}

// ---------------------------------------------------------------------------

double ModelReport::size_reduction_vs_f32() const {
  return packed_bytes > 0 ? static_cast<double>(original_bytes_f32) / packed_bytes : 0.0;
}

double ModelReport::size_reduction_vs_f16() const {
  return packed_bytes > 0 ? static_cast<double>(original_bytes_f16) / packed_bytes : 0.0;
}

std::optional<CalibGram> gram_for_entry(const ManifestEntry& entry) {
  auto batch = load_calib(entry);
  if (!batch) return std::nullopt;
  CalibGram g(entry.cols);
  accumulate_gram(g, *batch);
  return g;
}

std::string packed_file_name(const std::string& layer) {
  std::string out = layer;
  std::replace(out.begin(), out.end(), '/', '_');
  return out + ".pt2t";
}

ModelReport quantize_model(const LayerManifest& manifest, const QuantConfig& cfg,
                           const fs::path& out_dir, int jobs,
                           const LayerManifest* calib_override) {
  fs::create_directories(out_dir);
  const std::size_t count = manifest.entries.size();
  std::vector<std::optional<LayerReport>> reports(count);
  std::vector<std::string> errors(count);

  auto run = [&](std::size_t i) {
    const ManifestEntry& entry = manifest.entries[i];
    try {
      const DenseTensor w = load_tensor(manifest, entry.name);
      std::optional<CalibGram> gram;
      if (calib_override != nullptr) {
        const ManifestEntry& alt = calib_override->find(entry.name);
        if (alt.cols != entry.cols) throw Error("calibration override has wrong width");
        gram = gram_for_entry(alt);
      } else {
        gram = gram_for_entry(entry);
      }
      LayerResult r = quantize_layer(w, gram ? &*gram : nullptr, cfg, entry.name);
      write_packed(r.packed, out_dir / packed_file_name(entry.name));
      reports[i] = std::move(r.report);
    } catch (const std::exception& ex) {
      errors[i] = ex.what();
      spdlog::error("{}: {}", entry.name, ex.what());
    }
  };

  const std::size_t workers = std::clamp<std::size_t>(jobs < 1 ? 1 : jobs, 1, std::max<std::size_t>(count, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < workers; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) run(i);
      });
    }
  }

  ModelReport model;
  for (std::size_t i = 0; i < count; ++i) {
    if (reports[i]) {
      const auto& r = *reports[i];
      model.original_bytes_f32 += uint64_t{r.n} * r.m * 4;
      model.original_bytes_f16 += uint64_t{r.n} * r.m * 2;
      model.packed_bytes += r.packed_bytes;
      model.layers.push_back(r);
    } else {
      model.failures.push_back({manifest.entries[i].name, errors[i]});
    }
  }

  const std::string text = to_json(model, cfg).dump(2) + "\n";
  write_file(out_dir / "report.json",
             std::span(reinterpret_cast<const uint8_t*>(text.data()), text.size()));
  return model;
}

// ---------------------------------------------------------------------------
// Reports

json to_json(const LayerReport& r) {
  return json{{"layer", r.layer},
              {"n", r.n},
              {"m", r.m},
              {"k", r.k},
              {"e_w", r.e_w},
              {"e_x_gram", r.e_x_gram},
              {"e_x_tile_pre_aga", r.e_x_tile_pre_aga},
              {"e_x_tile_post_aga", r.e_x_tile_post_aga},
              {"bits_per_weight", r.bits_per_weight},
              {"total_bits_per_weight", r.total_bits_per_weight},
              {"packed_bytes", r.packed_bytes},
              {"itf_iters_mean", r.itf_iters_mean},
              {"itf_converged_fraction", r.itf_converged_fraction},
              {"blocks", r.blocks},
              {"ssr", r.ssr},
              {"aga", r.aga},
              {"itf", r.itf},
              {"compensation", r.compensation},
              {"identity_gram", r.identity_gram},
              {"block_variance", r.block_variance}};
}

LayerReport layer_report_from_json(const json& j) {
  LayerReport r;
  r.layer = j.at("layer").get<std::string>();
  r.n = j.at("n").get<uint32_t>();
  r.m = j.at("m").get<uint32_t>();
  r.k = j.at("k").get<uint32_t>();
  r.e_w = j.at("e_w").get<double>();
  r.e_x_gram = j.at("e_x_gram").get<double>();
  r.e_x_tile_pre_aga = j.value("e_x_tile_pre_aga", 0.0);
  r.e_x_tile_post_aga = j.value("e_x_tile_post_aga", 0.0);
  r.bits_per_weight = j.at("bits_per_weight").get<double>();
  r.total_bits_per_weight = j.value("total_bits_per_weight", 0.0);
  r.packed_bytes = j.value("packed_bytes", uint64_t{0});
  r.itf_iters_mean = j.at("itf_iters_mean").get<double>();
  r.itf_converged_fraction = j.value("itf_converged_fraction", 0.0);
  r.blocks = j.at("blocks").get<uint32_t>();
  r.ssr = j.at("ssr").get<bool>();
  r.aga = j.at("aga").get<bool>();
  r.itf = j.value("itf", true);
  r.compensation = j.value("compensation", true);
  r.identity_gram = j.value("identity_gram", false);
  r.block_variance = j.value("block_variance", std::vector<double>{});
  return r;
}

json to_json(const ModelReport& r, const QuantConfig& cfg) {
  json layers = json::array();
  for (const auto& l : r.layers) layers.push_back(to_json(l));
  json failures = json::array();
  for (const auto& f : r.failures) failures.push_back({{"layer", f.layer}, {"error", f.error}});
  return json{{"config",
               {{"group_size", cfg.group_size},
                {"lambda_frac", cfg.lambda_frac},
                {"max_iters", cfg.max_iters},
                {"scale_dtype", cfg.scale_dtype == ScaleDtype::kF16 ? "f16" : "f32"},
                {"ssr", cfg.ssr},
                {"aga", cfg.aga},
                {"itf", cfg.itf},
                {"compensation", cfg.compensation},
                {"allow_identity_gram", cfg.allow_identity_gram}}},
              {"layers", layers},
              {"failures", failures},
              {"original_bytes_f32", r.original_bytes_f32},
              {"original_bytes_f16", r.original_bytes_f16},
              {"packed_bytes", r.packed_bytes},
              {"size_reduction_vs_f32", r.size_reduction_vs_f32()},
              {"size_reduction_vs_f16", r.size_reduction_vs_f16()}};
}

}  // namespace pt2
