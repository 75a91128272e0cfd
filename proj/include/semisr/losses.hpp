#ifndef SEMISR_LOSSES_HPP
#define SEMISR_LOSSES_HPP

// Objective terms of semi-supervised SR training.
//
//   L_G = L_percep_s + lambda * L_adv_Gs + eta * L_1s
//       + alpha * L_percep_u + gamma * L_adv_Gu + beta * L_1u
//
// The supervised terms compare G(LR) with HR; the unsupervised consistency
// terms compare an unpaired LR input with F(G(LR_u)), F being the degradation
// operator. The same l1/perceptual kernels serve both resolutions.

#include <cmath>
#include <optional>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "semisr/errors.hpp"
#include "semisr/imaging.hpp"
#include "semisr/models.hpp"

namespace semisr {

inline constexpr double kProbabilityFloor = 1e-12;

struct LossWeights {
  double lambda_sup_adv = 2.5e-3;
  double eta_sup_l1 = 1e-2;
  double alpha_cons_percep = 1e-1;
  double gamma_unsup_adv = 2.5e-3;
  double beta_cons_l1 = 5e-3;

  bool operator==(const LossWeights&) const = default;

  void validate() const {
    for (double w : {lambda_sup_adv, eta_sup_l1, alpha_cons_percep, gamma_unsup_adv, beta_cons_l1})
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and non-negative");
  }

  static LossWeights standard() { return {}; }

  /// No consistency loss at all.
  static LossWeights ablation1() {
    LossWeights w;
    w.alpha_cons_percep = 0.0;
    w.beta_cons_l1 = 0.0;
    return w;
  }

  /// Consistency loss without its perceptual part.
  static LossWeights ablation2() {
    LossWeights w;
    w.alpha_cons_percep = 0.0;
    return w;
  }

  /// Supervised objective only (unsupervised weights zeroed).
  static LossWeights supervised() {
    LossWeights w = ablation1();
    w.gamma_unsup_adv = 0.0;
    return w;
  }

  bool uses_unpaired() const { return alpha_cons_percep > 0.0 || gamma_unsup_adv > 0.0 || beta_cons_l1 > 0.0; }
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda", w.lambda_sup_adv},
       {"eta", w.eta_sup_l1},
       {"alpha", w.alpha_cons_percep},
       {"gamma", w.gamma_unsup_adv},
       {"beta", w.beta_cons_l1}};
}

/// Scalar values of every objective term for one step. Absent terms are
/// empty (warmup steps only carry `l1_sup` and `total_g`).
struct LossReport {
  std::optional<double> l1_sup, percep_sup, adv_g_sup, adv_g_unsup, cons_l1, cons_percep, total_g, d_loss;

  bool has_adversarial_terms() const { return adv_g_sup.has_value() && d_loss.has_value() && percep_sup.has_value(); }
};

inline nlohmann::json to_json(const LossReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"l1_sup", opt(r.l1_sup)},           {"percep_sup", opt(r.percep_sup)}, {"adv_g_sup", opt(r.adv_g_sup)},
          {"adv_g_unsup", opt(r.adv_g_unsup)}, {"cons_l1", opt(r.cons_l1)},       {"cons_percep", opt(r.cons_percep)},
          {"total_g", opt(r.total_g)},         {"d_loss", opt(r.d_loss)}};
}

inline LossReport loss_report_from_json(const nlohmann::json& j) {
  auto opt = [&](const char* k) -> std::optional<double> {
    if (!j.contains(k) || j.at(k).is_null()) return std::nullopt;
    return j.at(k).get<double>();
  };
  return {opt("l1_sup"), opt("percep_sup"), opt("adv_g_sup"), opt("adv_g_unsup"),
          opt("cons_l1"), opt("cons_percep"), opt("total_g"),  opt("d_loss")};
}

// ---------------------------------------------------------------------------
// Pixel and feature distances

inline void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw ShapeError(std::string(what) + ": operands have different shapes");
}

/// Mean absolute difference over batch, channels and pixels.
inline torch::Tensor l1_pixel(const torch::Tensor& a, const torch::Tensor& b) {
  require_same_shape(a, b, "l1_pixel");
  return (a - b).abs().mean();
}

/// Mean absolute difference between tap feature maps.
inline torch::Tensor perceptual(const torch::Tensor& a, const torch::Tensor& b, FeatureExtractor& phi) {
  require_same_shape(a, b, "perceptual");
  return (phi->forward(a) - phi->forward(b)).abs().mean();
}

// ---------------------------------------------------------------------------
// Adversarial terms (probability form)

inline void require_probabilities(const torch::Tensor& p, const char* what) {
  auto bad = torch::logical_or(torch::isnan(p), torch::logical_or(p < 0.0, p > 1.0));
  if (bad.any().item<bool>()) throw DomainError(std::string(what) + ": probabilities must lie in [0, 1]");
}

/// Mean of -log D(G(x)).
inline torch::Tensor adv_generator(const torch::Tensor& d_on_fake) {
  require_probabilities(d_on_fake, "adv_generator");
  return -torch::log(d_on_fake.clamp_min(kProbabilityFloor)).mean();
}

/// Binary cross-entropy of the discriminator: mean(-log p_real) + mean(-log(1 - p_fake)).
inline torch::Tensor adv_discriminator(const torch::Tensor& d_on_real, const torch::Tensor& d_on_fake) {
  require_probabilities(d_on_real, "adv_discriminator");
  require_probabilities(d_on_fake, "adv_discriminator");
  return -torch::log(d_on_real.clamp_min(kProbabilityFloor)).mean() -
         torch::log((1.0 - d_on_fake).clamp_min(kProbabilityFloor)).mean();
}

// ---------------------------------------------------------------------------
// Adversarial terms (logit form). Same values as above without the clamping
// floor; the trainer uses these since sigmoid saturates in 32-bit floats.

enum class AdversarialMode { standard, relativistic };

inline std::string to_string(AdversarialMode m) { return m == AdversarialMode::standard ? "standard" : "relativistic"; }

inline AdversarialMode parse_adversarial_mode(std::string_view s) {
  if (s == "standard") return AdversarialMode::standard;
  if (s == "relativistic") return AdversarialMode::relativistic;
  throw ConfigError("unknown adversarial mode '" + std::string(s) + "'");
}

/// -log sigmoid(z) averaged.
inline torch::Tensor adv_generator_logits(const torch::Tensor& fake_logits) {
  return torch::softplus(-fake_logits).mean();
}

inline torch::Tensor adv_discriminator_logits(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  return torch::softplus(-real_logits).mean() + torch::softplus(fake_logits).mean();
}

/// Relativistic average generator term; `real_logits` should be detached.
inline torch::Tensor adv_generator_relativistic(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  auto real_rel = real_logits - fake_logits.mean();
  auto fake_rel = fake_logits - real_logits.mean();
  return 0.5 * (torch::softplus(real_rel).mean() + torch::softplus(-fake_rel).mean());
}

inline torch::Tensor adv_discriminator_relativistic(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  auto real_rel = real_logits - fake_logits.mean();
  auto fake_rel = fake_logits - real_logits.mean();
  return torch::softplus(-real_rel).mean() + torch::softplus(fake_rel).mean();
}

// ---------------------------------------------------------------------------
// Consistency

struct ConsistencyTerms {
  torch::Tensor l1;
  torch::Tensor percep;
};

/// Compares unpaired LR inputs with the degraded generator outputs F(sr_u).
/// Gradients flow through F into `sr_u`. Single-channel data is replicated
/// to RGB for the feature extractor.
inline ConsistencyTerms consistency(const torch::Tensor& lr_u, const torch::Tensor& sr_u, const DegradationSpec& degradation,
                                    FeatureExtractor& phi) {
  require_nchw(lr_u, "consistency LR input");
  require_nchw(sr_u, "consistency SR input");
  if (sr_u.size(0) != lr_u.size(0) || sr_u.size(1) != lr_u.size(1) ||
      sr_u.size(2) != degradation.scale * lr_u.size(2) || sr_u.size(3) != degradation.scale * lr_u.size(3))
    throw ShapeError("consistency: SR batch must be scale x the LR batch");
  auto lr_back = degrade(sr_u, degradation);
  return {l1_pixel(lr_u, lr_back), perceptual(replicate_to_rgb(lr_u), replicate_to_rgb(lr_back), phi)};
}

// ---------------------------------------------------------------------------
// Total generator objective

/// Graph-carrying objective terms; undefined tensors are absent terms.
struct GeneratorLossTerms {
  torch::Tensor percep_sup, adv_g_sup, l1_sup, cons_percep, adv_g_unsup, cons_l1;
};

/// percep_sup + lambda adv_g_sup + eta l1_sup + alpha cons_percep + gamma adv_g_unsup + beta cons_l1,
/// accumulated left to right over the present terms.
inline torch::Tensor total_generator(const GeneratorLossTerms& t, const LossWeights& w) {
  w.validate();
  torch::Tensor total;
  auto add = [&](const torch::Tensor& term, std::optional<double> weight) {
    if (!term.defined()) return;
    auto c = weight ? term * *weight : term;
    total = total.defined() ? total + c : c;
  };
  add(t.percep_sup, std::nullopt);
  add(t.adv_g_sup, w.lambda_sup_adv);
  add(t.l1_sup, w.eta_sup_l1);
  add(t.cons_percep, w.alpha_cons_percep);
  add(t.adv_g_unsup, w.gamma_unsup_adv);
  add(t.cons_l1, w.beta_cons_l1);
  return total.defined() ? total : torch::zeros({});
}

/// Scalar form over a report; absent terms count as 0.
inline double total_generator(const LossReport& r, const LossWeights& w) {
  w.validate();
  std::optional<double> total;
  auto add = [&](const std::optional<double>& term, std::optional<double> weight) {
    if (!term) return;
    const double c = weight ? *term * *weight : *term;
    total = total ? *total + c : c;
  };
  add(r.percep_sup, std::nullopt);
  add(r.adv_g_sup, w.lambda_sup_adv);
  add(r.l1_sup, w.eta_sup_l1);
  add(r.cons_percep, w.alpha_cons_percep);
  add(r.adv_g_unsup, w.gamma_unsup_adv);
  add(r.cons_l1, w.beta_cons_l1);
  return total.value_or(0.0);
}

}  // namespace semisr

#endif  // SEMISR_LOSSES_HPP
