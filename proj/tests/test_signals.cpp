#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include "opsup/dataset.hpp"
#include "support/finite_diff.hpp"

using namespace opsup;

namespace {

WaveformRecord make_record(std::vector<double> u) {
  WaveformRecord r;
  r.subject_id = "S01";
  r.sample_rate_hz = 100.0;
  r.p.assign(u.size(), 90.0);
  r.valid.assign(u.size(), true);
  r.u = std::move(u);
  return r;
}

std::vector<double> tone(std::size_t T, double k, double amp = 1.0) {
  std::vector<double> x(T);
  for (std::size_t t = 0; t < T; ++t) x[t] = amp * std::sin(2.0 * std::numbers::pi * k * t / T);
  return x;
}

Sample sample_with(double target, std::string id = "S01") {
  Sample s;
  s.target = target;
  s.subject_id = std::move(id);
  return s;
}

}  // namespace

TEST(Normalize, ConstantSignalIsRejected) {
  EXPECT_THROW(normalize(make_record({1, 1, 1})), PreprocessingError);
}

TEST(Normalize, TwoPointExample) {
  auto out = normalize(make_record({0, 2}));
  EXPECT_DOUBLE_EQ(out.u[0], -1.0);
  EXPECT_DOUBLE_EQ(out.u[1], 1.0);
  EXPECT_DOUBLE_EQ(out.u_mean, 1.0);
  EXPECT_DOUBLE_EQ(out.u_std, 1.0);
}

TEST(Normalize, IsIdempotentAndInvertible) {
  std::mt19937_64 rng(2);
  auto u = opsup::testing::random_vector(rng, 500, -3.0, 8.0);
  auto once = normalize(make_record(u));
  auto twice = normalize(once);
  for (std::size_t i = 0; i < u.size(); ++i) {
    EXPECT_NEAR(once.u[i], twice.u[i], 1e-12);
    EXPECT_NEAR(twice.raw_u()[i], u[i], 1e-12);
  }
  EXPECT_EQ(once.p, twice.p);
}

TEST(Normalize, EmptyRecordIsRejected) {
  EXPECT_THROW(normalize(make_record({})), PreprocessingError);
}

TEST(DropDiscontinuous, AllValidGivesOneUnchangedRun) {
  auto r = make_record(tone(50, 2));
  auto runs = drop_discontinuous(r, 10);
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_EQ(runs[0].u, r.u);
}

TEST(DropDiscontinuous, OneInvalidSampleSplitsInTwo) {
  auto r = make_record(tone(50, 2));
  r.valid[20] = false;
  auto runs = drop_discontinuous(r, 1);
  ASSERT_EQ(runs.size(), 2u);
  EXPECT_EQ(runs[0].size() + runs[1].size(), 49u);
  EXPECT_DOUBLE_EQ(runs[1].t0_s, 21.0 / 100.0);
}

TEST(DropDiscontinuous, RunShorterThanWindowIsDropped) {
  const std::size_t T = 16;
  auto r = make_record(tone(T - 1, 1));
  EXPECT_TRUE(drop_discontinuous(r, T).empty());
}

TEST(DominantFrequency, FiveCycles) {
  EXPECT_EQ(dominant_frequency(Tensor::vector(tone(100, 5))), 5u);
}

TEST(DominantFrequency, DcOnlyIsOne) {
  EXPECT_EQ(dominant_frequency(Tensor::vector(std::vector<double>(64, 3.0))), 1u);
  EXPECT_EQ(dominant_frequency(Tensor::vector(std::vector<double>(64, 0.0))), 1u);
}

TEST(DominantFrequency, TieGoesToLowerBin) {
  auto a = tone(128, 4), b = tone(128, 9);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  EXPECT_EQ(dominant_frequency(Tensor::vector(a)), 4u);
}

TEST(DominantFrequency, RecoversEveryIntegerTone) {
  const std::size_t T = 256;
  for (std::size_t k = 1; k <= T / 4; ++k) EXPECT_EQ(dominant_frequency(Tensor::vector(tone(T, double(k)))), k);
}

TEST(Fold, ShapesAndPadding) {
  EXPECT_EQ(fold_to_2d(Tensor::vector(tone(100, 5)), 5).shape(), (Shape{1, 20, 5}));
  auto folded = fold_to_2d(Tensor::vector(std::vector<double>(102, 1.0)), 5);
  EXPECT_EQ(folded.shape(), (Shape{1, 21, 5}));
  double total = 0.0;
  for (double v : folded.data()) total += v;
  EXPECT_EQ(total, 102.0);  // three padded zeros
}

TEST(Fold, ColumnsArePeriods) {
  std::vector<double> x(12);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = double(i);
  auto folded = fold_to_2d(Tensor::vector(x), 3);  // p = 4
  // row r, column c holds x[c*4 + r]
  EXPECT_EQ(folded.to_vector(), (std::vector<double>{0, 4, 8, 1, 5, 9, 2, 6, 10, 3, 7, 11}));
}

TEST(Fold, FrequencyAboveLengthIsConfigError) {
  EXPECT_THROW(fold_to_2d(Tensor::vector({1, 2, 3, 4}), 5), ConfigError);
}

TEST(Fold, RoundTripIsExact) {
  std::mt19937_64 rng(4);
  for (std::size_t T : {64u, 100u, 101u, 257u}) {
    for (std::size_t f : {1u, 2u, 3u, 7u, 13u}) {
      auto x = opsup::testing::random_vector(rng, T);
      auto back = unfold_from_2d(fold_to_2d(Tensor::vector(x), f), T);
      EXPECT_EQ(back.to_vector(), x) << T << " " << f;
    }
  }
}

TEST(BinSplit, SingleSampleGoesToTrain) {
  auto [train, test] = bin_split(std::vector<Sample>{sample_with(90)}, SplitSpec{});
  EXPECT_EQ(train.size(), 1u);
  EXPECT_EQ(test.size(), 0u);
}

TEST(BinSplit, OneBinOnePoint) {
  std::vector<Sample> s;
  for (int i = 0; i < 10; ++i) s.push_back(sample_with(90.1 + 0.05 * i));
  auto [train, test] = bin_split(s, SplitSpec{});
  EXPECT_EQ(train.size(), 1u);
  EXPECT_EQ(test.size(), 9u);
}

TEST(BinSplit, EmptyInputIsContractError) {
  EXPECT_THROW(bin_split(std::vector<Sample>{}, SplitSpec{}), ContractError);
}

TEST(BinSplit, PartitionsAndIsSeedDeterministic) {
  std::mt19937_64 rng(8);
  std::vector<Sample> s;
  std::uniform_real_distribution<double> dist(70.0, 110.0);
  for (int i = 0; i < 300; ++i) {
    s.push_back(sample_with(dist(rng), i % 2 ? "S01" : "S02"));
    s.back().seq = i;
  }
  auto seqs = [](const std::vector<Sample>& v) {
    std::vector<std::size_t> out;
    for (const auto& x : v) out.push_back(x.seq);
    return out;
  };
  SplitSpec spec;
  spec.seed = 42;
  auto a = bin_split(s, spec);
  auto b = bin_split(s, spec);
  EXPECT_EQ(seqs(a.first), seqs(b.first));

  std::set<std::size_t> all;
  for (auto q : seqs(a.first)) all.insert(q);
  for (auto q : seqs(a.second)) EXPECT_TRUE(all.insert(q).second) << "sample in both halves";
  EXPECT_EQ(all.size(), s.size());

  int differing = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    spec.seed = 1000 + seed;
    if (seqs(bin_split(s, spec).first) != seqs(a.first)) ++differing;
  }
  EXPECT_EQ(differing, 20);
}

TEST(BinSplit, EveryNonEmptyBinContributesPerSubject) {
  std::vector<Sample> s{sample_with(80.2), sample_with(80.7), sample_with(81.5), sample_with(80.4, "S02")};
  auto [train, test] = bin_split(s, SplitSpec{});
  EXPECT_EQ(train.size(), 3u);  // S01 bins 80 and 81, S02 bin 80
}

TEST(Windows, OneSamplePerBeatEndingAtBoundary) {
  // square-ish pressure with clear minima every 100 samples
  WaveformRecord r;
  r.subject_id = "S01";
  r.sample_rate_hz = 100.0;
  const std::size_t n = 1000;
  for (std::size_t i = 0; i < n; ++i) {
    const double phase = double(i % 100) / 100.0;
    r.p.push_back(80.0 + 40.0 * std::sin(std::numbers::pi * phase) + double(i / 100));
    r.u.push_back(std::sin(0.1 * double(i)));
  }
  r.valid.assign(n, true);
  WindowSpec spec;
  spec.length = 256;
  auto w = make_windows(r, {1.0, 0.0}, spec);
  ASSERT_FALSE(w.empty());
  for (std::size_t k = 0; k < w.size(); ++k) {
    EXPECT_EQ(w[k].u_window.size(), 256u);
    EXPECT_GE(w[k].y_query, 0.0);
    EXPECT_LE(w[k].y_query, 1.0);
    EXPECT_EQ(w[k].seq, k);
    if (k) {
      EXPECT_GT(w[k].x_aux, w[k - 1].x_aux);
    }
  }
  // the first full window ends at the boundary at sample 300 and covers beat [200,300)
  EXPECT_DOUBLE_EQ(w[0].x_aux, (300.0 - 256.0) / 100.0);
  double expect = 0.0;
  for (std::size_t i = 200; i < 300; ++i) expect += r.p[i];
  EXPECT_NEAR(w[0].target, expect / 100.0, 1e-12);
}

TEST(Csv, RoundTripPreservesRecords) {
  auto r = normalize(make_record(tone(40, 3, 2.5)));
  r.t0_s = 1.5;
  auto path = std::filesystem::temp_directory_path() / "opsup_csv_roundtrip.csv";
  write_cohort_csv(path, {r});
  auto back = read_cohort_csv(path);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].subject_id, "S01");
  EXPECT_NEAR(back[0].sample_rate_hz, 100.0, 1e-9);
  EXPECT_EQ(back[0].p, r.p);
  auto raw = r.raw_u();
  for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_EQ(back[0].u[i], raw[i]);
  std::filesystem::remove(path);
}

TEST(Csv, NonMonotoneTimeIsRejected) {
  auto path = std::filesystem::temp_directory_path() / "opsup_csv_bad.csv";
  {
    std::ofstream out(path);
    out << "subject_id,t_s,u,p,valid\nS01,0,1,80,1\nS01,0.01,2,81,1\nS01,0.005,3,82,1\n";
  }
  EXPECT_THROW(read_cohort_csv(path), LoadError);
  std::filesystem::remove(path);
}

TEST(Csv, TimeGapMarksDiscontinuity) {
  auto path = std::filesystem::temp_directory_path() / "opsup_csv_gap.csv";
  {
    std::ofstream out(path);
    out << "subject_id,t_s,u,p,valid\nS01,0,1,80,1\nS01,0.01,2,81,1\nS01,0.02,3,82,1\nS01,0.10,3,82,1\n";
  }
  auto recs = read_cohort_csv(path);
  EXPECT_EQ(recs[0].valid, (std::vector<bool>{true, true, true, false}));
  std::filesystem::remove(path);
}

TEST(Csv, MissingFileIsIoError) {
  EXPECT_THROW(read_cohort_csv("/nonexistent/dir/cohort.csv"), IoError);
}
