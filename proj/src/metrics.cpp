#include "cwfalab/metrics.hpp"

#include <cmath>

#include "cwfalab/errors.hpp"

namespace cwfalab {

ConfusionMatrix::ConfusionMatrix(std::size_t k) : k_(k), counts_(k * k, 0) {
  if (k < 2) throw ShapeError("confusion matrix needs at least 2 classes");
  if (k > kIgnoreIndex) throw ShapeError("class count collides with the ignore index");
}

void ConfusionMatrix::add(const std::uint8_t* pred, const std::uint8_t* gt, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (gt[i] == kIgnoreIndex) {
      ++ignored_;
      continue;
    }
    if (gt[i] >= k_ || pred[i] >= k_) throw ShapeError("confusion matrix: class id out of range");
    ++counts_[static_cast<std::size_t>(gt[i]) * k_ + pred[i]];
  }
}

void ConfusionMatrix::add(const MaskImage& pred, const MaskImage& gt) {
  if (pred.h != gt.h || pred.w != gt.w || pred.data.size() != gt.data.size())
    throw ShapeError("confusion matrix: prediction and ground truth shapes differ");
  add(pred.data.data(), gt.data.data(), gt.data.size());
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (std::uint64_t c : counts_) t += c;
  return t;
}

double ConfusionMatrix::mean_iou() const {
  double sum = 0.0;
  std::size_t evaluated = 0;
  for (std::size_t c = 0; c < k_; ++c) {
    const std::uint64_t tp = counts_[c * k_ + c];
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t o = 0; o < k_; ++o) {
      if (o == c) continue;
      fp += counts_[o * k_ + c];
      fn += counts_[c * k_ + o];
    }
    const std::uint64_t uni = tp + fp + fn;
    if (uni == 0) continue;  // class absent from both sides: no opinion
    sum += static_cast<double>(tp) / static_cast<double>(uni);
    ++evaluated;
  }
  if (evaluated == 0) throw NumericError("mean_iou: no scorable pixels");
  return 100.0 * sum / static_cast<double>(evaluated);
}

double mean_iou(const std::vector<MaskImage>& preds, const std::vector<MaskImage>& gts,
                std::size_t k) {
  if (preds.empty() || preds.size() != gts.size())
    throw ShapeError("mean_iou: prediction and ground truth lists must match and be non-empty");
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < preds.size(); ++i) cm.add(preds[i], gts[i]);
  return cm.mean_iou();
}

double severity_average(const std::vector<double>& per_severity, CorruptionFamily family) {
  if (per_severity.size() != 5) throw ShapeError("severity_average: expected exactly 5 values");
  const std::size_t n = family == CorruptionFamily::Noise ? 3 : 5;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += per_severity[i];
  return sum / static_cast<double>(n);
}

double retention(double clean_miou, double corrupted_avg) {
  if (!(clean_miou > 0.0)) throw NumericError("retention: clean mIoU must be positive");
  return 100.0 * corrupted_avg / clean_miou;
}

double round1(double v) {
  // nearbyint under the default rounding mode resolves ties to even
  return std::nearbyint(v * 10.0) / 10.0;
}

}  // namespace cwfalab
