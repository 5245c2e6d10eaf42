#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "support/fixtures.hpp"

using namespace opsup;
using namespace opsup::testing;

namespace {

Sample window_sample(std::vector<double> u, double y = 0.5, double target = 0.0) {
  Sample s;
  s.subject_id = "S01";
  s.u_window = std::move(u);
  s.subject_vec = {1.0, 0.0};
  s.y_query = y;
  s.target = target;
  return s;
}

ModelHandle tiny_handle(ModelKind kind, std::uint64_t seed, std::size_t adapter_out = 0) {
  if (kind == ModelKind::pitn) {
    auto c = tiny_pitn();
    c.adapter_out = adapter_out;
    return init_params(kind, seed, to_json(c));
  }
  return init_params(kind, seed, to_json(tiny_deeponet()));
}

}  // namespace

// ---- mse ---------------------------------------------------------------------------

TEST(Mse, Examples) {
  EXPECT_EQ(mse(Tensor::vector({1, 2}), Tensor::vector({1, 2})).item(), 0.0);
  EXPECT_EQ(mse(Tensor::vector({0, 0}), Tensor::vector({1, 3})).item(), 5.0);
  EXPECT_THROW(mse(Tensor::vector({}), Tensor::vector({})), ContractError);
  EXPECT_THROW(mse(Tensor::vector({1}), Tensor::vector({1, 2})), DimensionError);
}

TEST(Mse, GradientIsTwiceResidualOverCount) {
  std::mt19937_64 rng(1);
  auto p = random_vector(rng, 7), t = random_vector(rng, 7);
  Tensor pt = Tensor::vector(p, true);
  auto g = grad(mse(pt, Tensor::vector(t)), {pt})[0];
  auto fd = central_gradient([&](const auto& v) { return mse(Tensor::vector(v), Tensor::vector(t)).item(); }, p);
  EXPECT_LT(relative_error(g.data(), fd), 1e-8);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(g.at(i), 2.0 * (p[i] - t[i]) / 7.0, 1e-15);
}

// ---- Taylor consistency -----------------------------------------------------------------

TEST(TaylorPhysics, AffineModelIsExact) {
  std::mt19937_64 rng(2);
  Tensor a = Tensor::vector(random_vector(rng, 12));
  auto f = [&](const Tensor& u, const Sample&) { return add_scalar(dot(a, u), 0.7); };
  std::vector<Sample> s{window_sample(random_vector(rng, 12)), window_sample(random_vector(rng, 12)),
                        window_sample(random_vector(rng, 12))};
  auto loss = taylor_physics_loss(f, chain_pairs(s));
  EXPECT_FALSE(loss.empty);
  EXPECT_LT(loss.value.item(), 1e-20);
}

TEST(TaylorPhysics, SquareHandExample) {
  auto f = [](const Tensor& u, const Sample&) { return sum(square(u)); };
  std::vector<Sample> s{window_sample({1.0}), window_sample({2.0})};
  EXPECT_NEAR(taylor_physics_loss(f, chain_pairs(s)).value.item(), 1.0, 1e-12);
  EXPECT_NEAR(taylor_physics_loss(f, chain_pairs(s), {JvpMode::finite_difference, 1e-5}).value.item(), 1.0, 1e-6);
}

TEST(TaylorPhysics, EmptyPairsGiveZeroAndFlag) {
  auto loss = taylor_physics_loss([](const Tensor& u, const Sample&) { return sum(u); }, {});
  EXPECT_TRUE(loss.empty);
  EXPECT_EQ(loss.value.item(), 0.0);
}

TEST(TaylorPhysics, PairsAcrossSubjectsAreRejected) {
  std::vector<Sample> s{window_sample({1.0}), window_sample({2.0})};
  s[1].subject_id = "S02";
  EXPECT_THROW(taylor_physics_loss([](const Tensor& u, const Sample&) { return sum(u); }, chain_pairs(s)),
               ContractError);
}

TEST(TaylorPhysics, ExactAndFiniteDifferencePathsAgree) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    auto m = tiny_handle(ModelKind::deeponet, seed);
    scramble(m.params(), rng);
    auto s = random_samples(rng, 4, 16);
    const double exact = taylor_physics_loss(m, chain_pairs(s)).value.item();
    const double fd = taylor_physics_loss(m, chain_pairs(s), {JvpMode::finite_difference, 1e-5}).value.item();
    EXPECT_LT(relative_error(exact, fd), 1e-3) << seed;
    EXPECT_GE(exact, 0.0);
  }
}

TEST(TaylorPhysics, ParameterGradientMatchesFiniteDifferences) {
  for (auto kind : {ModelKind::pitn, ModelKind::deeponet}) {
    std::mt19937_64 rng(3);
    auto m = tiny_handle(kind, 3);
    scramble(m.params(), rng);
    auto s = random_samples(rng, 3, 16);
    auto pairs = chain_pairs(s);
    EXPECT_LT(full_gradient_error(m.params(), [&] { return taylor_physics_loss(m, pairs).value; }), 1e-4)
        << to_string(kind);
  }
}

// ---- PGD -----------------------------------------------------------------------------

TEST(Pgd, ZeroStepIsIdentity) {
  std::mt19937_64 rng(4);
  auto x = random_vector(rng, 10);
  LossWeights w;
  w.eta = 0.0;
  auto out = pgd_perturb([](const Tensor& v) { return sum(square(v)); }, Tensor::vector(x), w, 3);
  EXPECT_EQ(out.to_vector(), x);
}

TEST(Pgd, SumShiftsEveryCoordinateByEta) {
  std::mt19937_64 rng(5);
  auto x = random_vector(rng, 10);
  auto out = pgd_perturb([](const Tensor& v) { return sum(v); }, Tensor::vector(x), LossWeights{}, 1);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(out.at(i) - x[i], 0.2, 1e-15);
  EXPECT_FALSE(out.requires_grad());
}

TEST(Pgd, StaysInBallAndSignalRange) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 8;
    Tensor w1 = Tensor::from_data({5, n}, random_vector(rng, 5 * n));
    Tensor w2 = Tensor::vector(random_vector(rng, 5));
    auto f = [&](const Tensor& v) { return dot(w2, tanh(reshape(matmul(w1, reshape(v, {n, 1})), {5}))); };
    auto x = random_vector(rng, n, -4.3, 4.3);
    LossWeights w;
    w.eta = 0.5 * unit(rng);
    auto out = pgd_perturb(f, Tensor::vector(x), w, 1 + trial % 4);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_LE(std::abs(out.at(i) - x[i]), 0.2 + 1e-12);
      if (std::abs(x[i]) <= 4.0 + 0.2) {
        EXPECT_LE(std::abs(out.at(i)), 4.0 + 1e-12);
      }
    }
  }
}

// ---- contrastive -----------------------------------------------------------------------

TEST(Contrastive, IdenticalFeaturesClosedForm) {
  std::vector<double> row{0.6, 0.8};
  std::vector<double> f;
  for (int i = 0; i < 5; ++i) f.insert(f.end(), row.begin(), row.end());
  auto loss = contrastive_loss(Tensor::from_data({5, 2}, f), {90, 90.5, 91, 90.2, 89.9}, LossWeights{});
  EXPECT_NEAR(loss.item(), 5.0 * std::log(4.0), 1e-9);
}

TEST(Contrastive, LiteralSelfInclusion) {
  std::vector<double> f(10, 0.0);
  for (int i = 0; i < 5; ++i) f[2 * i] = 1.0;
  LossWeights w;
  w.include_self = true;
  auto loss = contrastive_loss(Tensor::from_data({5, 2}, f), {90, 90, 90, 90, 90}, w);
  EXPECT_NEAR(loss.item(), 5.0 * std::log(5.0), 1e-9);
}

TEST(Contrastive, NoPositivesIsZero) {
  std::mt19937_64 rng(7);
  std::vector<double> f;
  for (int i = 0; i < 4; ++i) {
    auto r = random_vector(rng, 3);
    double n = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
    for (double& v : r) v /= n;
    f.insert(f.end(), r.begin(), r.end());
  }
  EXPECT_EQ(contrastive_loss(Tensor::from_data({4, 3}, f), {80, 85, 90, 95}, LossWeights{}).item(), 0.0);
}

TEST(Contrastive, UnnormalizedRowsAreRejected) {
  EXPECT_THROW(contrastive_loss(Tensor::from_data({2, 2}, {1, 0, 0.5, 0.5}), {1, 1}, LossWeights{}), ContractError);
}

TEST(Contrastive, CloserPositivePairLowersLoss) {
  // rows 0 and 1 are positives; rotating row 1 toward row 0 must lower the loss
  auto loss_at = [](double angle) {
    std::vector<double> f{1, 0, std::cos(angle), std::sin(angle), 0, 1, -1, 0};
    return contrastive_loss(Tensor::from_data({4, 2}, f), {90, 91, 100, 110}, LossWeights{}).item();
  };
  EXPECT_LT(loss_at(0.3), loss_at(0.6));
  EXPECT_LT(loss_at(0.1), loss_at(0.3));
}

TEST(Contrastive, PermutationInvariantAndDifferentiable) {
  std::mt19937_64 rng(8);
  const std::size_t S = 6, d = 4;
  auto raw = random_vector(rng, S * d);
  std::vector<double> y{90, 91, 90.5, 95, 96, 80};
  auto normalized = [&](const std::vector<double>& v) {
    std::vector<Tensor> rows;
    Tensor t = Tensor::from_data({S, d}, v);
    for (std::size_t i = 0; i < S; ++i) {
      std::vector<std::int64_t> idx;
      for (std::size_t k = 0; k < d; ++k) idx.push_back(std::int64_t(i * d + k));
      rows.push_back(reshape(l2_normalize(gather(t, make_index_map(idx), {d})), {1, d}));
    }
    return concat(rows);
  };
  const double base = contrastive_loss(normalized(raw), y, LossWeights{}).item();
  std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  std::vector<double> raw_p, y_p;
  for (auto i : perm) {
    raw_p.insert(raw_p.end(), raw.begin() + i * d, raw.begin() + (i + 1) * d);
    y_p.push_back(y[i]);
  }
  EXPECT_NEAR(contrastive_loss(normalized(raw_p), y_p, LossWeights{}).item(), base, 1e-12);

  auto fd = central_gradient([&](const auto& v) { return contrastive_loss(normalized(v), y, LossWeights{}).item(); }, raw);
  // reverse route through the same normalization
  Tensor xs = Tensor::from_data({S, d}, raw, true);
  std::vector<Tensor> nrows;
  for (std::size_t i = 0; i < S; ++i) {
    std::vector<std::int64_t> idx;
    for (std::size_t k = 0; k < d; ++k) idx.push_back(std::int64_t(i * d + k));
    nrows.push_back(reshape(l2_normalize(gather(xs, make_index_map(idx), {d})), {1, d}));
  }
  auto ga = grad(contrastive_loss(concat(nrows), y, LossWeights{}), {xs})[0];
  EXPECT_LT(relative_error(ga.data(), fd), 1e-6);
}

// ---- composite losses -------------------------------------------------------------------

TEST(PitnBase, ComposesMseAndPhysics) {
  std::mt19937_64 rng(9);
  auto m = tiny_handle(ModelKind::pitn, 9);
  scramble(m.params(), rng);
  auto s = random_samples(rng, 4, 16);
  LossWeights w;
  w.gamma = 0.0;
  auto no_phys = loss_pitn_base(m, pointers(s), chain_pairs(s), w);
  EXPECT_EQ(no_phys.total.item(), no_phys.mse);
  w.gamma = 2.5;
  auto with = loss_pitn_base(m, pointers(s), chain_pairs(s), w);
  EXPECT_DOUBLE_EQ(with.total.item(), with.mse + 2.5 * with.physics);
  EXPECT_EQ(with.mse, no_phys.mse);
  EXPECT_GT(with.physics, 0.0);
}

TEST(PiDeepOnet, AffineOperatorEqualsMse) {
  // no hidden branch layer and a shared query point make the operator affine in u
  DeepOnetConfig c = tiny_deeponet();
  c.branch_hidden = {};
  auto m = init_params(ModelKind::deeponet, 4, to_json(c));
  std::mt19937_64 rng(10);
  auto s = random_samples(rng, 4, 16);
  for (auto& x : s) x.y_query = 0.3;
  auto parts = loss_pi_deeponet(m, pointers(s), chain_pairs(s), LossWeights{});
  EXPECT_LT(parts.physics, 1e-20);
  EXPECT_NEAR(parts.total.item(), parts.mse, 1e-18 * std::max(1.0, parts.mse) + 1e-20);
  LossWeights w;
  w.lambda_physics = 0.0;
  EXPECT_EQ(loss_pi_deeponet(m, pointers(s), chain_pairs(s), w).total.item(), parts.mse);
}

TEST(PitnFull, DegenerateSwitchesReduceToBasePlusCleanMse) {
  std::mt19937_64 rng(11);
  auto m = tiny_handle(ModelKind::pitn, 11);
  auto s = random_samples(rng, 4, 16);
  for (std::size_t i = 0; i < s.size(); ++i) s[i].target = 70.0 + 10.0 * double(i);
  LossWeights w;
  w.eta = 0.0;
  w.tau = 1e12;
  auto full = loss_pitn_full(m, pointers(s), chain_pairs(s), w);
  auto base = loss_pitn_base(m, pointers(s), chain_pairs(s), w);
  EXPECT_EQ(full.con, 0.0);
  EXPECT_EQ(full.adv, full.mse);
  EXPECT_DOUBLE_EQ(full.total.item(), base.total.item() + base.mse);
}

TEST(PitnFull, ComponentsNonNegativeAndAdditive) {
  std::mt19937_64 rng(12);
  auto m = tiny_handle(ModelKind::pitn, 12);
  scramble(m.params(), rng);
  auto s = random_samples(rng, 5, 16);
  for (std::size_t i = 0; i < s.size(); ++i) s[i].target = 90.0 + 0.5 * double(i);
  LossWeights w;
  auto full = loss_pitn_full(m, pointers(s), chain_pairs(s), w);
  for (double c : {full.mse, full.adv, full.con, full.physics}) {
    EXPECT_GE(c, 0.0);
    EXPECT_GE(full.total.item(), c);
  }
  EXPECT_GT(full.con, 0.0);
  w.y_shift = 0.0;  // no positives, no contrastive term
  auto without = loss_pitn_full(m, pointers(s), chain_pairs(s), w);
  EXPECT_EQ(without.con, 0.0);
  EXPECT_NEAR(full.total.item() - without.total.item(), full.con, 1e-9 * full.total.item());
}

TEST(AugPitn, ZeroBetaEqualsBase) {
  std::mt19937_64 rng(13);
  auto base = tiny_handle(ModelKind::pitn, 13, 18);
  auto osm = tiny_handle(ModelKind::deeponet, 14);
  osm.freeze();
  auto s = random_samples(rng, 4, 16);
  LossWeights w;
  w.beta = 0.0;
  auto ref = loss_pitn_base(base, pointers(s), chain_pairs(s), w);
  for (auto v : {SupVariant::A, SupVariant::B}) {
    auto aug = loss_aug_pitn(base, osm, pointers(s), chain_pairs(s), w, v);
    EXPECT_EQ(aug.total.item(), ref.total.item());
    EXPECT_GT(aug.sup, 0.0);
    auto ga = grad(aug.total, base.params().tensors());
    auto gr = grad(ref.total, base.params().tensors());
    for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_EQ(ga[i].to_vector(), gr[i].to_vector());
  }
}

TEST(AugPitn, SelfDistillationHasZeroSupervision) {
  std::mt19937_64 rng(15);
  auto base = tiny_handle(ModelKind::pitn, 15);
  auto osm = base.clone();
  osm.freeze();
  auto s = random_samples(rng, 3, 16);
  auto parts = loss_aug_pitn(base, osm, pointers(s), chain_pairs(s), LossWeights{}, SupVariant::B);
  EXPECT_EQ(parts.sup, 0.0);
}

TEST(AugPitn, OperatorMustBeFrozenAndReceivesNoGradient) {
  std::mt19937_64 rng(16);
  auto base = tiny_handle(ModelKind::pitn, 16, 18);
  auto osm = tiny_handle(ModelKind::deeponet, 17);
  auto s = random_samples(rng, 3, 16);
  EXPECT_THROW(loss_aug_pitn(base, osm, pointers(s), chain_pairs(s), LossWeights{}, SupVariant::B), ContractError);
  osm.freeze();
  for (auto v : {SupVariant::A, SupVariant::B}) {
    auto parts = loss_aug_pitn(base, osm, pointers(s), chain_pairs(s), LossWeights{}, v);
    backward(parts.total);
    for (const auto& t : osm.params().tensors()) EXPECT_FALSE(t.grad().has_value());
  }
}

TEST(AugPitn, VariantAGradientReachesBaseThroughAdapter) {
  std::mt19937_64 rng(18);
  auto base = tiny_handle(ModelKind::pitn, 18, 18);
  auto osm = tiny_handle(ModelKind::deeponet, 19);
  osm.freeze();
  auto s = random_samples(rng, 3, 16);
  LossWeights w;
  auto g_with = grad(loss_aug_pitn(base, osm, pointers(s), chain_pairs(s), w, SupVariant::A).total,
                     {base.params()["adapter.w"], base.params()["head0.w"]});
  w.beta = 0.0;
  auto g_without = grad(loss_aug_pitn(base, osm, pointers(s), chain_pairs(s), w, SupVariant::A).total,
                        {base.params()["adapter.w"], base.params()["head0.w"]});
  EXPECT_GT(relative_error(g_with[0].data(), g_without[0].data()), 1e-6);
  EXPECT_GT(relative_error(g_with[1].data(), g_without[1].data()), 1e-6);

  // the literal reading adds a constant: identical gradients, shifted value
  w.beta = 1.0;
  auto lit = loss_aug_pitn(base, osm, pointers(s), chain_pairs(s), w, SupVariant::A, true);
  auto ref = loss_pitn_base(base, pointers(s), chain_pairs(s), w);
  EXPECT_NEAR(lit.total.item(), ref.total.item() + lit.sup, 1e-9 * lit.total.item());
  auto gl = grad(lit.total, {base.params()["head0.w"]});
  auto gr = grad(ref.total, {base.params()["head0.w"]});
  EXPECT_EQ(gl[0].to_vector(), gr[0].to_vector());
}

TEST(AugPitn, VariantAChecksAdapterWidth) {
  std::mt19937_64 rng(20);
  auto base = tiny_handle(ModelKind::pitn, 20, 5);
  auto osm = tiny_handle(ModelKind::deeponet, 21);
  osm.freeze();
  auto s = random_samples(rng, 2, 16);
  EXPECT_THROW(loss_aug_pitn(base, osm, pointers(s), chain_pairs(s), LossWeights{}, SupVariant::A), ConfigError);
}

// Every composite objective against central differences over all parameters.
class CompositeGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(CompositeGradient, MatchesFiniteDifferences) {
  const std::string which = GetParam();
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    std::mt19937_64 rng(100 + trial);
    const bool op = which == "deeponet" || which == "pi_deeponet";
    auto m = tiny_handle(op ? ModelKind::deeponet : ModelKind::pitn, trial, which == "aug_a" ? 18 : 0);
    scramble(m.params(), rng);
    auto osm = tiny_handle(ModelKind::deeponet, 50 + trial);
    scramble(osm.params(), rng);
    osm.freeze();
    auto s = random_samples(rng, 3, 16);
    s[1].target = s[0].target + 0.5;
    auto batch = pointers(s);
    auto pairs = chain_pairs(s);
    LossWeights w;
    w.lambda_physics = which == "deeponet" ? 0.0 : 1.0;
    auto loss = [&]() -> Tensor {
      if (which == "pitn_base") return loss_pitn_base(m, batch, pairs, w).total;
      if (which == "pitn_full") return loss_pitn_full(m, batch, pairs, w).total;
      if (which == "aug_a") return loss_aug_pitn(m, osm, batch, pairs, w, SupVariant::A).total;
      if (which == "aug_b") return loss_aug_pitn(m, osm, batch, pairs, w, SupVariant::B).total;
      return loss_pi_deeponet(m, batch, pairs, w).total;
    };
    EXPECT_LT(full_gradient_error(m.params(), loss), 1e-4) << which << " trial " << trial;
  }
}

INSTANTIATE_TEST_SUITE_P(Losses, CompositeGradient,
                         ::testing::Values("pitn_base", "pitn_full", "deeponet", "pi_deeponet", "aug_a", "aug_b"));
