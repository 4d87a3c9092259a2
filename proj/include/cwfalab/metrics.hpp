#pragma once

#include <cstdint>
#include <vector>

#include "cwfalab/corruptions.hpp"
#include "cwfalab/image_io.hpp"

namespace cwfalab {

// Label value excluded from scoring (and from training loss).
inline constexpr std::uint8_t kIgnoreIndex = 255;

// Global K x K pixel counts, row = ground truth, column = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t k);

  void add(const std::uint8_t* pred, const std::uint8_t* gt, std::size_t n);
  void add(const MaskImage& pred, const MaskImage& gt);

  std::size_t k() const { return k_; }
  std::uint64_t count(std::size_t gt, std::size_t pred) const { return counts_[gt * k_ + pred]; }
  std::uint64_t ignored() const { return ignored_; }
  std::uint64_t total() const;  // scored pixels

  // Percentage mean of per-class TP/(TP+FP+FN); classes absent from both
  // prediction and ground truth are excluded from the mean.
  double mean_iou() const;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t ignored_ = 0;
};

// One global matrix over the whole list (not a per-image average).
double mean_iou(const std::vector<MaskImage>& preds, const std::vector<MaskImage>& gts,
                std::size_t k);

// Noise-family kinds average severities 1..3 only; every other family 1..5.
double severity_average(const std::vector<double>& per_severity, CorruptionFamily family);

// 100 * corrupted_avg / clean, the robustness-preservation ratio.
double retention(double clean_miou, double corrupted_avg);

// Round to one decimal, ties to even; the formatting rule for report tables.
double round1(double v);

}  // namespace cwfalab
