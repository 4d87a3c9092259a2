#pragma once

#include <cstdint>
#include <vector>

#include "cwfalab/autodiff.hpp"
#include "cwfalab/rng.hpp"
#include "cwfalab/tensor.hpp"

namespace cwfalab::cwfa {

// Which direction the additive feature shift takes.
enum class Variant {
  Channel,           // spatial-pooled channel descriptor, L2-normalized, scaled by epsilon
  FullTensorNoPool,  // whole feature map normalized by its Frobenius norm (no pooling)
  ChannelGaussian,   // random channel vector instead of the pooled descriptor
};

// Whether the shift is treated as a constant during backprop.
enum class GradMode { Detached, FlowThrough };

// How augmented encoders are chosen when the gate fires.
enum class GateMode { Simultaneous, SampledOne };

struct CwfaConfig {
  double epsilon = 9.0;
  double p_augm = 0.3;
  std::vector<int> encoders = {1, 2, 3, 4};  // 1-based stage indices
  GateMode mode = GateMode::Simultaneous;
  GradMode grad = GradMode::Detached;
  std::uint64_t warmup_iters = 0;
  Variant variant = Variant::Channel;
  bool gaussian_raw = false;  // ChannelGaussian only: add g as-is, skip normalize+scale
};

struct AugmentStats {
  bool degenerate = false;  // hit a (near-)zero-norm descriptor; shift suppressed
};

inline constexpr double kDegenerateTol = 1e-12;

// Channel-descriptor shift p = eps * gap(x) / ||gap(x)||, as a plain tensor.
// Returns zeros and sets *degenerate when the descriptor norm is ~0.
template <typename T>
TensorBase<T> channel_shift(const TensorBase<T>& x, double eps, bool* degenerate = nullptr) {
  TensorBase<T> xbar = global_avg_pool(x);
  const double n = static_cast<double>(l2_norm(xbar));
  if (n <= kDegenerateTol) {
    if (degenerate) *degenerate = true;
    return TensorBase<T>(xbar.shape(), T(0));
  }
  return scale(xbar, static_cast<T>(eps / n));
}

// One application of the augmentation at one feature map (C,H,W). Gating and
// warm-up live in plan_gate; this always augments. `gauss_rng` feeds only the
// ChannelGaussian variant. Identity cases return x itself, bit-exact.
template <typename T>
ad::VarT<T> augment(const ad::VarT<T>& x, const CwfaConfig& cfg, RngStream& gauss_rng,
                    AugmentStats* stats = nullptr) {
  if (x.value().rank() != 3)
    throw ShapeError("cwfa::augment: need a (C,H,W) feature map, got " +
                     shape_str(x.value().shape()));
  const bool eps_scales_shift = !(cfg.variant == Variant::ChannelGaussian && cfg.gaussian_raw);
  if (cfg.epsilon == 0.0 && eps_scales_shift) return x;

  switch (cfg.variant) {
    case Variant::Channel: {
      if (cfg.grad == GradMode::Detached) {
        bool degen = false;
        TensorBase<T> p = channel_shift(x.value(), cfg.epsilon, &degen);
        if (degen) {
          if (stats) stats->degenerate = true;
          return x;
        }
        return ad::add_channel_broadcast(x, ad::VarT<T>::constant(std::move(p)));
      }
      bool degen = false;
      auto xbar = ad::global_avg_pool(x);
      auto p = ad::l2_normalize_scale(xbar, cfg.epsilon, kDegenerateTol, &degen);
      if (degen) {
        if (stats) stats->degenerate = true;
        return x;
      }
      return ad::add_channel_broadcast(x, p);
    }

    case Variant::FullTensorNoPool: {
      if (cfg.grad == GradMode::Detached) {
        const double n = static_cast<double>(l2_norm(x.value()));
        if (n <= kDegenerateTol) {
          if (stats) stats->degenerate = true;
          return x;
        }
        TensorBase<T> shift = scale(x.value(), static_cast<T>(cfg.epsilon / n));
        return ad::add(x, ad::VarT<T>::constant(std::move(shift)));
      }
      bool degen = false;
      auto shift = ad::l2_normalize_scale(x, cfg.epsilon, kDegenerateTol, &degen);
      if (degen) {
        if (stats) stats->degenerate = true;
        return x;
      }
      return ad::add(x, shift);
    }

    case Variant::ChannelGaussian: {
      const std::size_t c = x.value().dim(0);
      TensorBase<T> g(Shape{c});
      for (std::size_t i = 0; i < c; ++i) g[i] = static_cast<T>(gauss_rng.normal());
      if (!cfg.gaussian_raw) {
        const double n = static_cast<double>(l2_norm(g));
        if (n <= kDegenerateTol) {
          if (stats) stats->degenerate = true;
          return x;
        }
        g = scale(g, static_cast<T>(cfg.epsilon / n));
      }
      return ad::add_channel_broadcast(x, ad::VarT<T>::constant(std::move(g)));
    }
  }
  throw ConfigError("cwfa::augment: unknown variant");
}

// Per-iteration gate outcome: which encoders (if any) to augment.
struct GatePlan {
  bool fire = false;
  std::vector<int> encoders;
};

// Draws the Bernoulli gate (and the encoder pick for SampledOne) for one
// training iteration. Consumes no randomness while warming up, when the
// config is inert (empty encoder set, p_augm <= 0), or when the shift is
// identically zero (epsilon == 0 with a scaled variant), so disabling the
// augmentation leaves every other random stream untouched.
GatePlan plan_gate(const CwfaConfig& cfg, std::uint64_t iter, RngStream& rng);

// Throws ConfigError on out-of-range fields; encoder indices are checked
// against the number of stages when known (pass 0 to skip that check).
void validate_config(const CwfaConfig& cfg, int num_stages);

}  // namespace cwfalab::cwfa
