#include "cwfalab/cwfa.hpp"

#include <algorithm>

#include "cwfalab/errors.hpp"

namespace cwfalab::cwfa {

GatePlan plan_gate(const CwfaConfig& cfg, std::uint64_t iter, RngStream& rng) {
  GatePlan plan;
  if (cfg.encoders.empty() || cfg.p_augm <= 0.0 || iter < cfg.warmup_iters) return plan;
  const bool eps_scales_shift = !(cfg.variant == Variant::ChannelGaussian && cfg.gaussian_raw);
  if (cfg.epsilon == 0.0 && eps_scales_shift) return plan;

  plan.fire = rng.bernoulli(cfg.p_augm);
  if (!plan.fire) return plan;
  if (cfg.mode == GateMode::Simultaneous) {
    plan.encoders = cfg.encoders;
  } else {
    plan.encoders = {cfg.encoders[rng.uniform_int(cfg.encoders.size())]};
  }
  return plan;
}

void validate_config(const CwfaConfig& cfg, int num_stages) {
  if (!(cfg.p_augm >= 0.0 && cfg.p_augm <= 1.0))
    throw ConfigError("cwfa: p_augm must lie in [0,1]");
  if (!(cfg.epsilon >= 0.0) || !std::isfinite(cfg.epsilon))
    throw ConfigError("cwfa: epsilon must be a finite non-negative number");
  std::vector<int> seen;
  for (int e : cfg.encoders) {
    if (e < 1 || (num_stages > 0 && e > num_stages))
      throw ConfigError("cwfa: encoder index " + std::to_string(e) + " out of range");
    if (std::find(seen.begin(), seen.end(), e) != seen.end())
      throw ConfigError("cwfa: duplicate encoder index " + std::to_string(e));
    seen.push_back(e);
  }
}

}  // namespace cwfalab::cwfa
