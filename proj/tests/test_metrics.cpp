#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "opsup/report.hpp"
#include "support/finite_diff.hpp"

using namespace opsup;
using namespace opsup::testing;

namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("opsup_metrics_" + name);
  fs::remove_all(p);
  return p;
}

RunRecord record_with(const std::string& hash, const std::string& model, std::vector<PredictionPoint> pts) {
  RunRecord r;
  r.config_hash = hash;
  r.model = model;
  r.wall_clock_s = 12.5;
  r.eval = summarize(std::move(pts));
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(PearsonCorr, Examples) {
  const std::vector<double> x{0.3, -1.2, 4.0, 2.2};
  EXPECT_NEAR(pearson_corr(x, x), 1.0, 1e-15);
  EXPECT_NEAR(pearson_corr({1, 2, 3}, {6, 4, 2}), -1.0, 1e-15);
  EXPECT_NEAR(pearson_corr({1, 2, 3}, {1, 2, 4}), 0.982, 1e-3);
  EXPECT_NEAR(pearson_corr({1, 2, 3}, {1, 2, 4}), 3.0 / std::sqrt(2.0 * (14.0 / 3.0)), 1e-15);
}

TEST(PearsonCorr, Errors) {
  EXPECT_THROW(pearson_corr({1, 1, 1}, {1, 2, 3}), NumericError);
  EXPECT_THROW(pearson_corr({1, 2, 3}, {5, 5, 5}), NumericError);
  EXPECT_THROW(pearson_corr({1}, {1}), ContractError);
  EXPECT_THROW(pearson_corr({1, 2}, {1, 2, 3}), DimensionError);
}

TEST(PearsonCorr, AffineInvariance) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> scale(0.1, 10.0), shift(-50.0, 50.0);
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_vector(rng, 20, -3.0, 3.0);
    auto b = random_vector(rng, 20, -3.0, 3.0);
    const double base = pearson_corr(a, b);
    const double s = scale(rng), c = shift(rng);
    for (auto& v : a) v = s * v + c;
    EXPECT_NEAR(pearson_corr(a, b), base, 1e-12);
    EXPECT_GE(base, -1.0);
    EXPECT_LE(base, 1.0);
  }
}

TEST(Rmse, Examples) {
  EXPECT_EQ(rmse({1, 2, 3}, {1, 2, 3}), 0.0);
  EXPECT_NEAR(rmse({0, 0}, {3, 4}), std::sqrt(12.5), 1e-15);
  EXPECT_NEAR(rmse({0, 0}, {3, 4}), 3.536, 1e-3);
  EXPECT_THROW(rmse({}, {}), ContractError);
}

TEST(Rmse, SymmetryAndPermutation) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = random_vector(rng, 15, -10.0, 10.0);
    auto b = random_vector(rng, 15, -10.0, 10.0);
    EXPECT_EQ(rmse(a, b), rmse(b, a));
    std::vector<std::size_t> idx(a.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<double> pa, pb;
    for (auto i : idx) {
      pa.push_back(a[i]);
      pb.push_back(b[i]);
    }
    EXPECT_NEAR(rmse(pa, pb), rmse(a, b), 1e-12);
  }
}

TEST(BlandAltman, Examples) {
  const auto same = bland_altman({1, 2, 3}, {1, 2, 3});
  EXPECT_EQ(same.mean_diff, 0.0);
  EXPECT_EQ(same.sd_diff, 0.0);
  EXPECT_EQ(same.loa_low, 0.0);
  EXPECT_EQ(same.loa_high, 0.0);

  const auto ba = bland_altman({9, 10, 11}, {10, 10, 10});
  EXPECT_NEAR(ba.mean_diff, 0.0, 1e-15);
  EXPECT_NEAR(ba.sd_diff, 1.0, 1e-15);
  EXPECT_NEAR(ba.loa_low, -1.96, 1e-15);
  EXPECT_NEAR(ba.loa_high, 1.96, 1e-15);

  EXPECT_THROW(bland_altman({1}, {1}), ContractError);
}

TEST(BlandAltman, TranslationShiftsMeanOnly) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = random_vector(rng, 12, 60.0, 120.0);
    auto t = random_vector(rng, 12, 60.0, 120.0);
    const auto base = bland_altman(p, t);
    EXPECT_EQ(base.loa_low, base.mean_diff - 1.96 * base.sd_diff);
    EXPECT_EQ(base.loa_high, base.mean_diff + 1.96 * base.sd_diff);
    const double c = 7.25;
    for (auto& v : p) v += c;
    const auto moved = bland_altman(p, t);
    EXPECT_NEAR(moved.mean_diff, base.mean_diff + c, 1e-9);
    EXPECT_NEAR(moved.sd_diff, base.sd_diff, 1e-9);
  }
}

TEST(Summarize, PooledAndPerSubject) {
  std::vector<PredictionPoint> pts{{"S01", 1, 1}, {"S01", 2, 2.5}, {"S01", 3, 2.9},
                                   {"S02", 7, 8},  {"S02", 9, 9.5}, {"S03", 4, 4}};
  const auto ev = summarize(pts);
  EXPECT_EQ(ev.pooled.n, 6u);
  EXPECT_EQ(ev.per_subject.size(), 2u);  // S03 has a single point
  EXPECT_EQ(ev.per_subject.at("S02").corr, 1.0);
  EXPECT_EQ(ev.points.size(), 6u);
}

// ---- report ------------------------------------------------------------------------

TEST(Report, EmptyRecordListIsAnError) {
  EXPECT_THROW(build_report({}), ContractError);
  EXPECT_THROW(emit_report({}, scratch_dir("empty")), ContractError);
}

TEST(Report, RowsOrderedByConfigHash) {
  auto b = record_with("bbbb", "pitn-base", {{"S01", 1, 1.5}, {"S01", 2, 2.2}, {"S01", 3, 3.9}});
  auto a = record_with("aaaa", "deeponet", {{"S02", 5, 4}, {"S02", 6, 6.5}});
  const fs::path dir = scratch_dir("order");
  const Report rep = emit_report({b, a}, dir);
  ASSERT_EQ(rep.runs.size(), 2u);
  EXPECT_EQ(rep.runs[0].config_hash, "aaaa");
  EXPECT_EQ(rep.runs[1].config_hash, "bbbb");

  const auto pts = read_points_csv(dir / "points.csv");
  ASSERT_EQ(pts.size(), 5u);
  EXPECT_EQ(pts[0].subject_id, "S02");
  EXPECT_EQ(pts[4].truth_mmhg, 3.9);
  fs::remove_all(dir);
}

TEST(Report, JsonRoundTrip) {
  auto a = record_with("h1", "pitn-base", {{"S01", 1.1, 1}, {"S01", 2.3, 2}, {"S01", 2.9, 3}});
  auto b = record_with("h2", "aug-pitn-b", {{"S01", 0.7, 1}, {"S01", 2.1, 2}, {"S01", 3.3, 3}});
  b.beta = 0.1;
  RunRecord c;
  c.config_hash = "h0";
  c.model = "deeponet";
  for (bool timing : {false, true}) {
    const fs::path dir = scratch_dir("roundtrip");
    const Report rep = emit_report({a, b, c}, dir, timing);
    const Report back = report_from_json(Json::parse(slurp(dir / "report.json")));
    EXPECT_EQ(back, rep);
    EXPECT_FALSE(back.runs[0].metrics.has_value());
    EXPECT_EQ(back.runs[2].beta, 0.1);
    EXPECT_EQ(back.runs[1].wall_clock_s.has_value(), timing);
    fs::remove_all(dir);
  }
}

TEST(Report, Idempotent) {
  auto a = record_with("h1", "pitn-base", {{"S01", 1.1, 1}, {"S01", 2.3, 2}, {"S01", 2.9, 3}});
  const fs::path dir = scratch_dir("idem");
  emit_report({a}, dir);
  const std::string first = slurp(dir / "report.json") + slurp(dir / "points.csv");
  emit_report({a}, dir);
  EXPECT_EQ(slurp(dir / "report.json") + slurp(dir / "points.csv"), first);
  fs::remove_all(dir);
}

TEST(Report, UnwritablePathIsAnIoError) {
  auto a = record_with("h1", "pitn-base", {{"S01", 1.1, 1}, {"S01", 2.3, 2}, {"S01", 2.9, 3}});
  const fs::path file = scratch_dir("blocker");
  std::ofstream(file) << "x";
  EXPECT_THROW(emit_report({a}, file / "sub"), IoError);
  fs::remove_all(file);
}
