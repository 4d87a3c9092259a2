#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cwfalab/autodiff.hpp"
#include "cwfalab/rng.hpp"
#include "cwfalab/tensor.hpp"

namespace cwfalab::seg {

struct StageConfig {
  int stride = 2;  // patch-embed stride; each stage must downsample
  int dim = 16;
  int depth = 2;
  int heads = 1;
  int mlp_ratio = 4;
  int kernel = 3;  // overlapping patch embed when kernel > stride
};

// Four stages, dims 16/32/64/128, depths 2, heads 1/2/4/8, total stride 16.
std::vector<StageConfig> default_stages();

struct ModelConfig {
  std::vector<StageConfig> stages = default_stages();
  int in_channels = 3;
  int num_classes = 5;
  int decoder_dim = 64;
};

// Called with each stage's output feature map (C,H,W), after the stage-final
// norm, before it feeds the next stage and the decoder. The returned map must
// keep the shape; anything else is rejected.
using StageHook = std::function<ad::Var(int stage_1based, const ad::Var&)>;

// Hierarchical pre-norm transformer encoder with an all-stage fusion decoder.
class Segmenter {
 public:
  explicit Segmenter(ModelConfig cfg);  // params zero-filled; see init_params

  static Segmenter random_init(ModelConfig cfg, RngStream& rng);

  // image is (in_channels,H,W) with H and W divisible by total_stride().
  // Returns per-class logits (num_classes,H,W).
  ad::Var forward(const Tensor& image, const StageHook* hook = nullptr) const;

  const ModelConfig& config() const { return cfg_; }
  int total_stride() const;
  std::size_t param_count() const;

  // canonical order: encoder stages, then decoder
  std::vector<std::pair<std::string, ad::Var>>& named_params() { return params_; }
  const std::vector<std::pair<std::string, ad::Var>>& named_params() const { return params_; }

  void zero_grads();

  // writes <path> (tensor archive) and <path>.meta.json (architecture echo)
  void save(const std::string& path) const;
  static Segmenter load(const std::string& path);

 private:
  void init_params(RngStream& rng);
  ad::Var param(const std::string& name) const;

  ModelConfig cfg_;
  std::vector<std::pair<std::string, ad::Var>> params_;
};

}  // namespace cwfalab::seg
