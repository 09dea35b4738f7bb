#include <algorithm>
#include <numeric>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "reference_pipeline.hpp"
#include "pt2/eval.hpp"
#include "pt2/pipeline.hpp"
#include "pt2/ssr.hpp"
#include "pt2/synth.hpp"

namespace fs = std::filesystem;

namespace pt2 {
namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

CalibGram gram_of(const Matrix& x) {
  CalibGram g(x.cols());
  accumulate_gram(g, x);
  return g;
}

TEST(AccumulateGram, SingleSampleOuterProduct) {
  CalibGram g(2);
  Matrix x(1, 2);
  x << 1, 0;
  accumulate_gram(g, x);
  Matrix expected(2, 2);
  expected << 1, 0, 0, 0;
  EXPECT_EQ(g.gram, expected);
  EXPECT_EQ(g.count, 1u);
}

TEST(AccumulateGram, RepeatedBatchDoublesExactly) {
  std::mt19937_64 rng(1);
  const Matrix x = oracle::random_matrix(300, 17, rng);
  CalibGram once(17), twice(17);
  accumulate_gram(once, x);
  accumulate_gram(twice, x);
  accumulate_gram(twice, x);
  EXPECT_EQ(twice.gram, 2.0 * once.gram);
  EXPECT_EQ(twice.count, 600u);
  EXPECT_EQ(once.gram, once.gram.transpose());
}

TEST(AccumulateGram, MatchesPerSampleOracle) {
  std::mt19937_64 rng(2);
  CalibGram g(9);
  Matrix all(0, 9);
  for (int b = 0; b < 4; ++b) {
    const Matrix x = oracle::random_matrix(25, 9, rng);
    accumulate_gram(g, x);
    Matrix grown(all.rows() + x.rows(), 9);
    grown << all, x;
    all = grown;
  }
  const auto naive = oracle::naive_gram(all);
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 9; ++j) EXPECT_LE(oracle::rel_diff(g.gram(i, j), naive[i][j]), 1e-10);
  EXPECT_THROW(accumulate_gram(g, Matrix::Zero(2, 8)), Error);
}

TEST(HessianPrepare, IdentityGram) {
  const auto f = hessian_prepare(CalibGram::identity(5), 0.01);
  EXPECT_DOUBLE_EQ(f.lambda, 0.01);
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(f.upper(i, i), 1.0 / std::sqrt(1.01), 1e-15);
  EXPECT_NEAR((f.upper - Matrix(f.upper.diagonal().asDiagonal())).norm(), 0.0, 1e-15);
}

TEST(HessianPrepare, FlagsDeadColumns) {
  std::mt19937_64 rng(3);
  Matrix x = oracle::random_matrix(20, 4, rng);
  x.col(2).setZero();
  const auto g = gram_of(x);
  double lambda = 0.0;
  std::vector<bool> dead;
  const Matrix h = damped_hessian(g.gram, 0.01, &lambda, &dead);
  EXPECT_EQ(dead, (std::vector<bool>{false, false, true, false}));
  EXPECT_EQ(h(2, 2), lambda);
  EXPECT_DOUBLE_EQ(lambda, 0.01 * g.gram.diagonal().mean());
  EXPECT_NO_THROW(hessian_prepare(g, 0.01));
}

TEST(HessianPrepare, FactorReconstructsInverse) {
  std::mt19937_64 rng(4);
  const auto g = gram_of(oracle::random_matrix(60, 12, rng));
  const auto f = hessian_prepare(g, 0.01);
  Matrix h = g.gram;
  h.diagonal().array() += f.lambda;
  const auto inv = oracle::inverse(oracle::to_dense(h));
  const Matrix rec = f.upper.transpose() * f.upper;
  EXPECT_TRUE(f.upper.isUpperTriangular());
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 12; ++j) EXPECT_LE(oracle::rel_diff(rec(i, j), inv[i][j]), 1e-8);
}

TEST(HessianPrepare, IndefiniteMatrixFails) {
  Matrix h = Matrix::Identity(3, 3);
  h(1, 1) = -5.0;
  EXPECT_THROW(inverse_upper_factor(h), Error);
}

// Rows hold two levels {mu, mu + alpha} or {mu - alpha, mu + alpha} with
// integer parameters, so any column subset is exactly representable.
Matrix two_level_weights(int rows, int cols, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> param(1, 4), pick(0, 1), pattern(0, 2);
  Matrix w(rows, cols);
  for (int i = 0; i < rows; ++i) {
    const int alpha = param(rng), mu = param(rng) - 2, p = pattern(rng);
    const int lo = p == 0 ? 0 : -1, hi = p == 1 ? 0 : 1;
    for (int j = 0; j < cols; ++j) w(i, j) = mu + alpha * (pick(rng) ? hi : lo);
  }
  return w;
}

TEST(QuantizeLayer, ExactlyRepresentableIsFixedPoint) {
  std::mt19937_64 rng(5);
  const Matrix w = two_level_weights(12, 40, rng);
  const auto g = gram_of(oracle::random_matrix(80, 40, rng));
  for (bool ssr : {false, true}) {
    QuantConfig cfg;
    cfg.group_size = 8;
    cfg.ssr = ssr;
    const auto r = quantize_layer(w, &g, cfg);
    EXPECT_EQ(r.report.e_w, 0.0) << "ssr=" << ssr;
    EXPECT_EQ(r.report.e_x_gram, 0.0);
    EXPECT_EQ(dequantize(r.packed), w);
  }
}

TEST(QuantizeLayer, SingleBlockEqualsStandaloneAtq) {
  std::mt19937_64 rng(6);
  const Matrix w = oracle::random_matrix(10, 24, rng);
  QuantConfig cfg;
  cfg.group_size = 24;
  cfg.ssr = false;
  cfg.allow_identity_gram = true;
  const auto r = quantize_layer(w, nullptr, cfg);

  auto s = atq::itf(w, atq::ternary_init(w));
  auto grid = atq::aga_align(w, s.trits, Matrix::Identity(24, 24), s.grid);
  atq::canonicalize(grid, s.trits);
  GridParams expected(10, 1);
  expected.alpha.col(0) = grid.alpha;
  expected.mu.col(0) = grid.mu;
  round_to_storage(expected, ScaleDtype::kF32);
  EXPECT_EQ(r.packed.grid, expected);
  EXPECT_EQ(unpack_trits(r.packed.payload, 10, 24), s.trits);
  EXPECT_TRUE(r.report.identity_gram);
}

void expect_matches_reference(bool ssr, uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Matrix w = oracle::random_matrix(8, 16, rng) + Matrix::Constant(8, 16, 0.2);
  const auto g = gram_of(oracle::random_matrix(48, 16, rng));
  QuantConfig cfg;
  cfg.group_size = 4;
  cfg.ssr = ssr;
  const auto r = quantize_layer(w, &g, cfg);
  oracle::RefConfig rc;
  rc.k = 4;
  rc.ssr = ssr;
  const auto ref = oracle::reference_quantize(oracle::to_dense(w), oracle::to_dense(g.gram), rc);

  EXPECT_EQ(r.packed.permutation, ref.order);
  const auto trits = unpack_trits(r.packed.payload, 8, 16);
  for (int i = 0; i < 8; ++i) {
    for (int j = 0; j < 16; ++j) ASSERT_EQ(trits(i, j), ref.trits[i][j]) << i << "," << j;
    for (int b = 0; b < 4; ++b) {
      EXPECT_EQ(r.packed.grid.alpha(i, b), ref.alpha[i][b]);
      EXPECT_EQ(r.packed.grid.mu(i, b), ref.mu[i][b]);
    }
  }
}

TEST(QuantizeLayer, MatchesStraightLineReferenceWithSsr) {
  for (uint64_t seed = 10; seed < 15; ++seed) expect_matches_reference(true, seed);
}

TEST(QuantizeLayer, MatchesStraightLineReferenceWithoutSsr) {
  for (uint64_t seed = 20; seed < 25; ++seed) expect_matches_reference(false, seed);
}

TEST(QuantizeLayer, MissingCalibrationWithoutFallbackFails) {
  QuantConfig cfg;
  EXPECT_THROW(quantize_layer(Matrix::Ones(2, 4), nullptr, cfg), Error);
  cfg.group_size = 0;
  cfg.allow_identity_gram = true;
  EXPECT_THROW(quantize_layer(Matrix::Ones(2, 4), nullptr, cfg), Error);
}

TEST(QuantizeLayer, ReportIsSelfConsistent) {
  synth::SynthSpec spec;
  spec.rows = 32;
  spec.cols = 100;
  const auto layer = synth::make_layer(spec, uint64_t{3});
  const auto g = gram_of(layer.activations);
  QuantConfig cfg;
  cfg.group_size = 32;
  const auto r = quantize_layer(layer.weights, &g, cfg);
  EXPECT_EQ(r.report.blocks, 4u);
  EXPECT_DOUBLE_EQ(r.report.bits_per_weight, 8.0 * r.packed.payload.size() / (32.0 * 100.0));
  EXPECT_EQ(r.report.packed_bytes, serialize_packed(r.packed).size());
  EXPECT_EQ(r.report.block_variance.size(), 4u);
  EXPECT_LE(r.report.e_x_tile_post_aga, r.report.e_x_tile_pre_aga * (1 + 1e-9));
  EXPECT_DOUBLE_EQ(r.report.e_w, weight_error(layer.weights, dequantize(r.packed)));
  EXPECT_TRUE((r.packed.grid.alpha.array() >= 0).all());
}

TEST(QuantizeLayer, F16ScalesAreStoredExactly) {
  synth::SynthSpec spec;
  spec.rows = 16;
  spec.cols = 64;
  const auto layer = synth::make_layer(spec, uint64_t{4});
  const auto g = gram_of(layer.activations);
  QuantConfig cfg;
  cfg.group_size = 16;
  cfg.scale_dtype = ScaleDtype::kF16;
  const auto r = quantize_layer(layer.weights, &g, cfg);
  EXPECT_EQ(deserialize_packed(serialize_packed(r.packed)), r.packed);
}

TEST(QuantizeLayer, CompensationLowersMedianOutputError) {
  synth::SynthSpec spec;
  spec.rows = 64;
  spec.cols = 256;
  spec.samples = 1024;
  spec.offset_range = 0.0;
  spec.outlier_frac = 0.0;
  std::vector<double> on, off;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const auto layer = synth::make_layer(spec, seed);
    const auto g = gram_of(layer.activations);
    QuantConfig cfg;
    cfg.ssr = false;
    cfg.group_size = 64;
    on.push_back(quantize_layer(layer.weights, &g, cfg).report.e_x_gram);
    cfg.compensation = false;
    off.push_back(quantize_layer(layer.weights, &g, cfg).report.e_x_gram);
  }
  EXPECT_LT(median(on), median(off));
}

TEST(QuantizeLayer, SsrLowersMedianWeightErrorWithOutlierColumns) {
  synth::SynthSpec spec;
  spec.rows = 64;
  spec.cols = 256;
  spec.samples = 512;
  spec.outlier_frac = 0.03;
  std::vector<double> with, without;
  for (uint64_t seed = 100; seed < 120; ++seed) {
    const auto layer = synth::make_layer(spec, seed);
    const auto g = gram_of(layer.activations);
    QuantConfig cfg;
    cfg.group_size = 64;
    with.push_back(quantize_layer(layer.weights, &g, cfg).report.e_w);
    cfg.ssr = false;
    without.push_back(quantize_layer(layer.weights, &g, cfg).report.e_w);
  }
  EXPECT_LT(median(with), median(without));
}

// ---------------------------------------------------------------------------

class ModelDir : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("pt2_model_" + std::string(
                                ::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    spec_.layers = 2;
    spec_.rows = 16;
    spec_.cols = 48;
    spec_.samples = 96;
    spec_.seed = 42;
    manifest_ = synth::write_model(spec_, root_ / "model");
  }
  void TearDown() override { fs::remove_all(root_); }

  fs::path root_;
  synth::SynthSpec spec_;
  LayerManifest manifest_;
};

TEST_F(ModelDir, QuantizesEveryLayer) {
  QuantConfig cfg;
  cfg.group_size = 16;
  const auto report = quantize_model(load_manifest(root_ / "model/manifest.json"), cfg, root_ / "q");
  ASSERT_EQ(report.layers.size(), 2u);
  EXPECT_TRUE(report.failures.empty());
  EXPECT_TRUE(fs::exists(root_ / "q/layer_0.pt2t"));
  EXPECT_TRUE(fs::exists(root_ / "q/layer_1.pt2t"));
  EXPECT_EQ(report.packed_bytes,
            fs::file_size(root_ / "q/layer_0.pt2t") + fs::file_size(root_ / "q/layer_1.pt2t"));
  EXPECT_DOUBLE_EQ(report.size_reduction_vs_f32(), 2.0 * 16 * 48 * 4 / report.packed_bytes);
  EXPECT_TRUE(fs::exists(root_ / "q/report.json"));
}

TEST_F(ModelDir, ParallelJobsGiveIdenticalOutput) {
  QuantConfig cfg;
  cfg.group_size = 16;
  quantize_model(manifest_, cfg, root_ / "a", 1);
  quantize_model(manifest_, cfg, root_ / "b", 2);
  for (const char* f : {"layer_0.pt2t", "layer_1.pt2t", "report.json"}) {
    EXPECT_EQ(read_file(root_ / "a" / f), read_file(root_ / "b" / f)) << f;
  }
}

TEST_F(ModelDir, MissingCalibrationIsRecordedPerLayer) {
  LayerManifest m = manifest_;
  m.entries[1].calib_path.reset();
  QuantConfig cfg;
  cfg.group_size = 16;
  auto report = quantize_model(m, cfg, root_ / "q");
  ASSERT_EQ(report.layers.size(), 1u);
  ASSERT_EQ(report.failures.size(), 1u);
  EXPECT_EQ(report.failures[0].layer, "layer_1");

  cfg.allow_identity_gram = true;
  report = quantize_model(m, cfg, root_ / "q2");
  ASSERT_EQ(report.layers.size(), 2u);
  EXPECT_TRUE(report.layers[1].identity_gram);
}

TEST_F(ModelDir, EvalRecomputesReportedMetrics) {
  QuantConfig cfg;
  cfg.group_size = 16;
  const auto q = quantize_model(manifest_, cfg, root_ / "q");
  const auto e = evaluate_artifacts(root_ / "q", manifest_);
  ASSERT_EQ(e.layers.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_FALSE(e.layers[i].mismatch);
    EXPECT_LE(oracle::rel_diff(e.layers[i].e_w, q.layers[i].e_w), 1e-6);
    EXPECT_LE(oracle::rel_diff(e.layers[i].e_x_gram, q.layers[i].e_x_gram), 1e-6);
  }

  // A different calibration set changes E_x but not E_w.
  synth::SynthSpec other = spec_;
  other.seed = 7;
  const auto alt = synth::write_model(other, root_ / "alt");
  const auto e2 = evaluate_artifacts(root_ / "q", manifest_, &alt);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(e2.layers[i].e_w, e.layers[i].e_w);
    EXPECT_NE(e2.layers[i].e_x_gram, e.layers[i].e_x_gram);
    EXPECT_TRUE(e2.layers[i].mismatch);
  }

  auto bytes = read_file(root_ / "q/layer_0.pt2t");
  bytes[bytes.size() - 6] ^= 0x01;
  write_file(root_ / "q/layer_0.pt2t", bytes);
  const auto e3 = evaluate_artifacts(root_ / "q", manifest_);
  ASSERT_EQ(e3.failures.size(), 1u);
  EXPECT_NE(e3.failures[0].error.find("checksum"), std::string::npos);
}

TEST(SizeAccounting, LargeLayerReductionMatchesArithmetic) {
  // 4096 x 4096, k = 128, f32 scales: 32 / (1.6 + 2 * 32 / 128) ~ 15.2x
  const uint32_t n = 4096, m = 4096, k = 128;
  std::vector<uint32_t> perm(m);
  std::iota(perm.begin(), perm.end(), 0u);
  GridParams grid(n, m / k);
  const auto packed =
      make_packed(TernaryMatrix::Zero(n, m), grid, perm, k, ScaleDtype::kF32);
  const auto bytes = serialize_packed(packed).size();
  const std::size_t expected = kPackedHeaderSize + 4 * m + std::size_t{n} * (m / k) * 8 +
                               packed_size(std::size_t{n} * m) + 4;
  EXPECT_EQ(bytes, expected);
  const double reduction = 4.0 * n * m / bytes;
  EXPECT_NEAR(reduction, 32.0 / (1.6 + 2.0 * 32 / 128), 0.1);
}

}  // namespace
}  // namespace pt2
