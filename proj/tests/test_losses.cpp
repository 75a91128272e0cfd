#include <random>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "semisr/losses.hpp"
#include "test_util.hpp"

using namespace semisr;
namespace st = semisr::testing;

namespace {

double scalar(const torch::Tensor& t) { return t.item<double>(); }

FeatureExtractor tiny_phi64() {
  FeatureExtractor phi(FeatureExtractorSpec::tiny());
  phi->to(torch::kFloat64);
  return phi;
}

}  // namespace

TEST(L1Pixel, IdentityConstantsAndSymmetry) {
  auto a = torch::rand({2, 3, 5, 5}, torch::kFloat64);
  EXPECT_EQ(scalar(l1_pixel(a, a)), 0.0);
  auto c1 = torch::full({2, 3, 4, 4}, 0.2, torch::kFloat64), c2 = torch::full({2, 3, 4, 4}, 0.7, torch::kFloat64);
  EXPECT_NEAR(scalar(l1_pixel(c1, c2)), 0.5, 1e-15);
  auto b = torch::rand({2, 3, 5, 5}, torch::kFloat64);
  EXPECT_EQ(scalar(l1_pixel(a, b)), scalar(l1_pixel(b, a)));
  EXPECT_GT(scalar(l1_pixel(a, b)), 0.0);
  EXPECT_THROW(l1_pixel(a, c1), ShapeError);
}

TEST(Perceptual, IdentityAndSymmetry) {
  auto phi = tiny_phi64();
  auto a = torch::rand({2, 3, 16, 16}, torch::kFloat64), b = torch::rand({2, 3, 16, 16}, torch::kFloat64);
  EXPECT_EQ(scalar(perceptual(a, a, phi)), 0.0);
  EXPECT_EQ(scalar(perceptual(a, b, phi)), scalar(perceptual(b, a, phi)));
  EXPECT_THROW(perceptual(a, torch::rand({2, 3, 8, 8}, torch::kFloat64), phi), ShapeError);
}

TEST(Perceptual, MatchesHandRolledFeatureLoop) {
  torch::manual_seed(21);
  FeatureExtractor phi(FeatureExtractorSpec{});  // VGG19, tap (5, 4)
  auto a = torch::rand({2, 3, 64, 64}), b = torch::rand({2, 3, 64, 64});
  torch::NoGradGuard ng;
  const double value = scalar(perceptual(a, b, phi));

  auto fa = phi->forward(a).to(torch::kFloat64).contiguous(), fb = phi->forward(b).to(torch::kFloat64).contiguous();
  ASSERT_EQ(fa.sizes(), (std::vector<int64_t>{2, 512, 4, 4}));
  auto pa = fa.accessor<double, 4>(), pb = fb.accessor<double, 4>();
  // Per image: (1 / (W H)) sum_{x,y} sum_c |.| / C, then averaged over the batch.
  double acc = 0.0;
  for (int64_t n = 0; n < fa.size(0); ++n) {
    double per_image = 0.0;
    for (int64_t y = 0; y < fa.size(2); ++y)
      for (int64_t x = 0; x < fa.size(3); ++x) {
        double pixel = 0.0;
        for (int64_t c = 0; c < fa.size(1); ++c) pixel += std::abs(pa[n][c][y][x] - pb[n][c][y][x]);
        per_image += pixel / static_cast<double>(fa.size(1));
      }
    acc += per_image / static_cast<double>(fa.size(2) * fa.size(3));
  }
  const double oracle = acc / static_cast<double>(fa.size(0));
  EXPECT_NEAR(value, oracle, 1e-5 * std::max(1.0, std::abs(oracle)));
}

TEST(AdvGenerator, KnownValues) {
  EXPECT_NEAR(scalar(adv_generator(torch::full({4}, 0.5, torch::kFloat64))), std::log(2.0), 1e-12);
  EXPECT_EQ(scalar(adv_generator(torch::ones({3}, torch::kFloat64))), 0.0);
  EXPECT_NEAR(scalar(adv_generator(torch::tensor({0.5, 1.0}, torch::kFloat64))), 0.34657359027997264, 1e-12);
}

TEST(AdvGenerator, ClampsZeroAndRejectsOutOfDomain) {
  const double at_zero = scalar(adv_generator(torch::zeros({1}, torch::kFloat64)));
  EXPECT_NEAR(at_zero, -std::log(kProbabilityFloor), 1e-9);
  EXPECT_THROW(adv_generator(torch::tensor({1.5})), DomainError);
  EXPECT_THROW(adv_generator(torch::tensor({-0.1})), DomainError);
  EXPECT_THROW(adv_generator(torch::tensor({std::nan("")})), DomainError);
}

TEST(AdvDiscriminator, KnownValues) {
  EXPECT_EQ(scalar(adv_discriminator(torch::ones({2}, torch::kFloat64), torch::zeros({2}, torch::kFloat64))), 0.0);
  const double saddle = scalar(adv_discriminator(torch::full({3}, 0.5, torch::kFloat64), torch::full({5}, 0.5, torch::kFloat64)));
  EXPECT_NEAR(saddle, 1.3862943611198906, 1e-6);
  EXPECT_THROW(adv_discriminator(torch::tensor({2.0}), torch::tensor({0.5})), DomainError);
}

TEST(AdvLogits, AgreeWithProbabilityForms) {
  torch::manual_seed(1);
  auto zr = torch::randn({16}, torch::kFloat64) * 3, zf = torch::randn({24}, torch::kFloat64) * 3;
  EXPECT_NEAR(scalar(adv_generator_logits(zf)), scalar(adv_generator(torch::sigmoid(zf))), 1e-12);
  EXPECT_NEAR(scalar(adv_discriminator_logits(zr, zf)),
              scalar(adv_discriminator(torch::sigmoid(zr), torch::sigmoid(zf))), 1e-12);
  // Saturated logits keep a finite, useful value in logit form.
  EXPECT_NEAR(scalar(adv_generator_logits(torch::full({1}, -60.0, torch::kFloat64))), 60.0, 1e-9);
}

TEST(AdvRelativistic, SymmetricAtEqualLogits) {
  auto z = torch::zeros({4}, torch::kFloat64);
  EXPECT_NEAR(scalar(adv_discriminator_relativistic(z, z)), 2 * std::log(2.0), 1e-12);
  EXPECT_NEAR(scalar(adv_generator_relativistic(z, z)), std::log(2.0), 1e-12);
}

TEST(Consistency, ZeroOnNaiveUpsampleWithAveragePool) {
  auto phi = tiny_phi64();
  auto lr = torch::rand({3, 3, 8, 8}, torch::kFloat64);
  auto [l1, percep] = consistency(lr, upsample_naive(lr, 4), DegradationSpec{4, Kernel::average_pool, false}, phi);
  EXPECT_LE(scalar(l1), 1e-15);
  EXPECT_LE(scalar(percep), 1e-12);
}

TEST(Consistency, ConstantImagesGiveDifferenceForEveryKernel) {
  auto phi = tiny_phi64();
  auto lr = torch::full({1, 3, 8, 8}, 0.2, torch::kFloat64), sr = torch::full({1, 3, 32, 32}, 0.7, torch::kFloat64);
  for (auto k : {Kernel::bicubic, Kernel::average_pool, Kernel::nearest}) {
    auto terms = consistency(lr, sr, DegradationSpec{4, k, true}, phi);
    EXPECT_NEAR(scalar(terms.l1), 0.5, 1e-12) << to_string(k);
  }
}

TEST(Consistency, GrayscaleIsReplicatedForFeatures) {
  auto phi = tiny_phi64();
  auto lr = torch::rand({2, 1, 8, 8}, torch::kFloat64);
  auto terms = consistency(lr, torch::rand({2, 1, 32, 32}, torch::kFloat64), DegradationSpec{4}, phi);
  EXPECT_GE(scalar(terms.percep), 0.0);
}

TEST(Consistency, ScaleMismatchIsShapeError) {
  auto phi = tiny_phi64();
  EXPECT_THROW(consistency(torch::rand({1, 3, 8, 8}), torch::rand({1, 3, 16, 16}), DegradationSpec{4}, phi), ShapeError);
}

TEST(Consistency, L1GradientMatchesFiniteDifferences) {
  torch::manual_seed(13);
  auto phi = tiny_phi64();
  auto lr = torch::rand({1, 3, 2, 2}, torch::kFloat64) * 0.5 + 0.25;
  auto sr = torch::rand({1, 3, 8, 8}, torch::kFloat64) * 0.5 + 0.25;
  const DegradationSpec spec{4};
  auto ad = st::autograd_grad([&](const torch::Tensor& v) { return consistency(lr, v, spec, phi).l1; }, sr);
  auto fd = st::finite_difference_grad([&](const torch::Tensor& v) { return scalar(consistency(lr, v, spec, phi).l1); }, sr);
  EXPECT_LT(st::relative_error(ad, fd), 1e-4);
}

TEST(TotalGenerator, StandardWeightsOnUnitComponents) {
  LossReport r{1.0, 1.0, 1.0, 1.0, 1.0, 1.0, std::nullopt, std::nullopt};
  EXPECT_NEAR(total_generator(r, LossWeights::standard()), 1.12, 1e-12);
  const auto w = LossWeights::standard();
  EXPECT_DOUBLE_EQ(w.lambda_sup_adv, 2.5e-3);
  EXPECT_DOUBLE_EQ(w.eta_sup_l1, 1e-2);
  EXPECT_DOUBLE_EQ(w.alpha_cons_percep, 1e-1);
  EXPECT_DOUBLE_EQ(w.gamma_unsup_adv, 2.5e-3);
  EXPECT_DOUBLE_EQ(w.beta_cons_l1, 5e-3);
}

TEST(TotalGenerator, ReducesToSupervisedObjective) {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int i = 0; i < 200; ++i) {
    LossReport r{u(gen), u(gen), u(gen), u(gen), u(gen), u(gen), std::nullopt, std::nullopt};
    LossWeights w{u(gen), u(gen), 0.0, 0.0, 0.0};
    const double supervised = *r.percep_sup + w.lambda_sup_adv * *r.adv_g_sup + w.eta_sup_l1 * *r.l1_sup;
    EXPECT_EQ(total_generator(r, w), supervised);
    LossReport absent = r;
    absent.adv_g_unsup = absent.cons_l1 = absent.cons_percep = std::nullopt;
    EXPECT_EQ(total_generator(absent, LossWeights::standard()),
              *r.percep_sup + 2.5e-3 * *r.adv_g_sup + 1e-2 * *r.l1_sup);
  }
}

TEST(TotalGenerator, AblationOneIgnoresConsistencyValues) {
  LossReport r{0.3, 0.4, 0.5, 0.6, 0.7, 0.8, std::nullopt, std::nullopt};
  const double base = total_generator(r, LossWeights::ablation1());
  r.cons_l1 = 123.0;
  r.cons_percep = 9.5;
  EXPECT_EQ(total_generator(r, LossWeights::ablation1()), base);
}

TEST(TotalGenerator, MonotoneInEachWeight) {
  std::mt19937_64 gen(8);
  std::uniform_real_distribution<double> u(0.01, 2.0);
  for (int i = 0; i < 100; ++i) {
    LossReport r{u(gen), u(gen), u(gen), u(gen), u(gen), u(gen), std::nullopt, std::nullopt};
    LossWeights w{u(gen), u(gen), u(gen), u(gen), u(gen)};
    const double base = total_generator(r, w);
    for (double LossWeights::*field : {&LossWeights::lambda_sup_adv, &LossWeights::eta_sup_l1,
                                       &LossWeights::alpha_cons_percep, &LossWeights::gamma_unsup_adv,
                                       &LossWeights::beta_cons_l1}) {
      LossWeights bumped = w;
      bumped.*field += u(gen);
      EXPECT_GE(total_generator(r, bumped), base);
    }
  }
}

TEST(TotalGenerator, NegativeWeightIsConfigError) {
  LossWeights w;
  w.beta_cons_l1 = -1e-3;
  EXPECT_THROW(total_generator(LossReport{}, w), ConfigError);
}

TEST(TotalGenerator, TensorAndScalarFormsAgree) {
  auto t = [](double v) { return torch::tensor(v, torch::kFloat64); };
  GeneratorLossTerms terms{t(0.9), t(0.7), t(0.05), t(0.3), t(0.69), t(0.02)};
  LossReport r{0.05, 0.9, 0.7, 0.69, 0.02, 0.3, std::nullopt, std::nullopt};
  EXPECT_EQ(scalar(total_generator(terms, LossWeights::standard())), total_generator(r, LossWeights::standard()));
}

TEST(LossReportJson, NullForAbsentTerms) {
  LossReport r;
  r.l1_sup = 0.25;
  auto j = to_json(r);
  EXPECT_TRUE(j.at("percep_sup").is_null());
  EXPECT_EQ(loss_report_from_json(j).l1_sup, 0.25);
  EXPECT_FALSE(loss_report_from_json(j).d_loss.has_value());
}
