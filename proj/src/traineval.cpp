#include "cwfalab/traineval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "cwfalab/errors.hpp"

namespace cwfalab {
namespace {

// Decoupled-decay Adam on the model leaves; first-order state lives here so a
// training run owns exactly one instance.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, ad::Var>>& params, double weight_decay)
      : params_(params), wd_(weight_decay) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const auto& [name, var] : params) {
      m_.emplace_back(var.value().shape());
      v_.emplace_back(var.value().shape());
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      ad::Var& var = params_[i].second;
      const Tensor& g = var.grad();
      if (g.empty()) continue;
      Tensor& theta = var.mutable_value();
      // decay weight matrices only; biases and norm affines stay undecayed
      const bool decay = theta.rank() >= 2;
      const auto shrink = static_cast<float>(decay ? 1.0 - lr * wd_ : 1.0);
      float* th = theta.data();
      const float* gd = g.data();
      float* m = m_[i].data();
      float* v = v_[i].data();
      for (std::size_t j = 0; j < theta.numel(); ++j) {
        m[j] = 0.9f * m[j] + 0.1f * gd[j];
        v[j] = 0.999f * v[j] + 0.001f * gd[j] * gd[j];
        const double mhat = static_cast<double>(m[j]) / bc1;
        const double vhat = static_cast<double>(v[j]) / bc2;
        th[j] = shrink * th[j] - static_cast<float>(lr * mhat / (std::sqrt(vhat) + 1e-8));
      }
    }
  }

 private:
  std::vector<std::pair<std::string, ad::Var>>& params_;
  std::vector<Tensor> m_, v_;
  double wd_;
  std::uint64_t t_ = 0;
};

std::vector<int> mask_labels(const MaskImage& mask) {
  std::vector<int> labels(mask.data.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    labels[i] = mask.data[i] == kIgnoreIndex ? -1 : static_cast<int>(mask.data[i]);
  return labels;
}

MaskImage argmax_map(const Tensor& logits) {
  const std::size_t k = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  MaskImage out;
  out.h = h;
  out.w = w;
  out.data.resize(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t best = 0;
      float bv = logits.at(0, y, x);
      for (std::size_t c = 1; c < k; ++c)
        if (logits.at(c, y, x) > bv) {  // ties keep the lowest class id
          bv = logits.at(c, y, x);
          best = c;
        }
      out.data[y * w + x] = static_cast<std::uint8_t>(best);
    }
  return out;
}

Tensor crop3(const Tensor& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  Tensor out = Tensor::uninit({img.dim(0), h, w});
  for (std::size_t c = 0; c < img.dim(0); ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
  return out;
}

// window start offsets: stride steps, final window clamped to the edge
std::vector<std::size_t> window_starts(std::size_t extent, std::size_t window,
                                       std::size_t stride) {
  std::vector<std::size_t> starts;
  for (std::size_t s = 0;; s += stride) {
    if (s + window >= extent) {
      starts.push_back(extent - window);
      break;
    }
    starts.push_back(s);
  }
  return starts;
}

const char* family_names_for_parse[] = {"Noise", "Blur", "Digital", "Weather", "HeldOut"};

CorruptionFamily family_from_name(const std::string& name) {
  for (int i = 0; i < 5; ++i)
    if (name == family_names_for_parse[i]) return static_cast<CorruptionFamily>(i);
  throw FormatError("unknown corruption family: " + name);
}

}  // namespace

AugmentOptions default_train_augment() {
  AugmentOptions opt;
  opt.flip = true;
  opt.crop_height = 48;
  opt.crop_width = 48;
  return opt;
}

cwfa::CwfaConfig default_cwfa_config() {
  cwfa::CwfaConfig cfg;
  cfg.warmup_iters = 800;
  return cfg;
}

std::vector<std::pair<std::size_t, double>> train_from(seg::Segmenter& model,
                                                       const std::vector<Scene>& scenes,
                                                       const TrainConfig& cfg) {
  if (scenes.empty()) throw ConfigError("train: empty training set");
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (cfg.iterations < 1) throw ConfigError("train: iterations must be >= 1");
  if (cfg.iterations < cfg.cwfa.warmup_iters)
    throw ConfigError("train: iterations fall inside the augmentation warm-up");
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) throw ConfigError("train: bad learning rate");
  if (!(cfg.weight_decay >= 0.0) || !std::isfinite(cfg.weight_decay))
    throw ConfigError("train: bad weight decay");
  cwfa::validate_config(cfg.cwfa, static_cast<int>(model.config().stages.size()));

  RngStream root(cfg.seed, 0x747261696eULL);
  RngStream batch_rng = root.derive(2);
  RngStream aug_rng = root.derive(3);
  RngStream gate_rng = root.derive(4);
  RngStream gauss_rng = root.derive(5);

  AdamW opt(model.named_params(), cfg.weight_decay);
  std::vector<std::pair<std::size_t, double>> curve;
  const auto total = static_cast<double>(cfg.iterations);

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const double lr = cfg.lr * std::pow(1.0 - static_cast<double>(it) / total, cfg.poly_power);
    const cwfa::GatePlan plan = cwfa::plan_gate(cfg.cwfa, it, gate_rng);
    seg::StageHook hook;
    if (plan.fire)
      hook = [&](int stage, const ad::Var& feat) {
        if (std::find(plan.encoders.begin(), plan.encoders.end(), stage) == plan.encoders.end())
          return feat;
        return cwfa::augment(feat, cfg.cwfa, gauss_rng);
      };

    model.zero_grads();
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t idx = batch_rng.uniform_int(scenes.size());
      const Scene sample = augment_train(scenes[idx], aug_rng, cfg.augment);
      ad::Var logits = model.forward(sample.image, plan.fire ? &hook : nullptr);
      ad::Var loss =
          ad::cross_entropy_mean(ad::chw_to_tokens(logits), mask_labels(sample.mask));
      batch_loss += static_cast<double>(loss.value()[0]);
      ad::backward(ad::scale(loss, 1.0 / static_cast<double>(cfg.batch_size)));
    }
    batch_loss /= static_cast<double>(cfg.batch_size);
    if (!std::isfinite(batch_loss))
      throw NumericError("training diverged at iteration " + std::to_string(it) +
                         ": batch loss = " + std::to_string(batch_loss));
    opt.step(lr);

    if (it % cfg.log_every == 0 || it + 1 == cfg.iterations)
      curve.emplace_back(it, batch_loss);
  }
  return curve;
}

TrainResult train(const DatasetSpec& data, const TrainConfig& cfg) {
  seg::ModelConfig mc;
  mc.num_classes = static_cast<int>(data.num_classes);
  RngStream init_rng = RngStream(cfg.seed, 0x747261696eULL).derive(1);
  seg::Segmenter model = seg::Segmenter::random_init(mc, init_rng);
  const std::vector<Scene> scenes = generate_split(data, false);
  auto curve = train_from(model, scenes, cfg);
  return {std::move(model), std::move(curve)};
}

MaskImage predict(const seg::Segmenter& model, const Tensor& image) {
  ad::NoGradGuard ng;
  return argmax_map(model.forward(image).value());
}

MaskImage sliding_window_predict(const seg::Segmenter& model, const Tensor& image,
                                 std::size_t window, std::size_t stride) {
  if (image.rank() != 3) throw ShapeError("sliding_window_predict: need a (C,H,W) image");
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (window == 0 || window > h || window > w)
    throw ShapeError("sliding_window_predict: window must fit inside the image");
  if (stride == 0 || stride > window)
    throw ShapeError("sliding_window_predict: stride must be in [1, window]");

  ad::NoGradGuard ng;
  const auto k = static_cast<std::size_t>(model.config().num_classes);
  Tensor sums({k, h, w});
  Tensor coverage({1, h, w});
  for (const std::size_t y0 : window_starts(h, window, stride))
    for (const std::size_t x0 : window_starts(w, window, stride)) {
      const Tensor logits = model.forward(crop3(image, y0, x0, window, window)).value();
      for (std::size_t c = 0; c < k; ++c)
        for (std::size_t y = 0; y < window; ++y)
          for (std::size_t x = 0; x < window; ++x)
            sums.at(c, y0 + y, x0 + x) += logits.at(c, y, x);
      for (std::size_t y = 0; y < window; ++y)
        for (std::size_t x = 0; x < window; ++x) coverage.at(0, y0 + y, x0 + x) += 1.0f;
    }
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) sums.at(c, y, x) /= coverage.at(0, y, x);
  return argmax_map(sums);
}

EvalReport evaluate(const seg::Segmenter& model, const std::vector<Scene>& val,
                    const std::vector<CorruptionKind>& kinds, std::uint64_t seed) {
  if (val.empty()) throw ShapeError("evaluate: empty validation set");
  if (kinds.empty()) throw ShapeError("evaluate: no corruption kinds requested");
  const auto k = static_cast<std::size_t>(model.config().num_classes);

  EvalReport report;
  {
    ConfusionMatrix cm(k);
    for (const Scene& scene : val) cm.add(predict(model, scene.image), scene.mask);
    report.clean_miou = cm.mean_iou();
  }

  for (const CorruptionKind kind : kinds) {
    std::array<double, 5> per{};
    for (int s = 1; s <= 5; ++s) {
      ConfusionMatrix cm(k);
      for (std::size_t i = 0; i < val.size(); ++i) {
        const Tensor corrupted =
            corrupt(val[i].image, {kind, s}, grid_cell_stream(seed, i, kind, s));
        cm.add(predict(model, corrupted), val[i].mask);
      }
      per[static_cast<std::size_t>(s - 1)] = cm.mean_iou();
    }
    report.grid[kind] = per;
    report.per_kind_avg[kind] =
        severity_average(std::vector<double>(per.begin(), per.end()), family_of(kind));
  }

  double overall = 0.0;
  std::map<CorruptionFamily, std::pair<double, std::size_t>> fam;
  for (const auto& [kind, avg] : report.per_kind_avg) {
    overall += avg;
    auto& [sum, count] = fam[family_of(kind)];
    sum += avg;
    ++count;
  }
  report.overall_avg = overall / static_cast<double>(report.per_kind_avg.size());
  for (const auto& [family, sc] : fam)
    report.family_avg[family] = sc.first / static_cast<double>(sc.second);
  report.retention = retention(report.clean_miou, report.overall_avg);
  return report;
}

std::vector<std::pair<double, double>> inference_perturbation_sweep(
    const seg::Segmenter& model, const std::vector<Scene>& val, int encoder_idx,
    const std::vector<double>& epsilons) {
  if (val.empty()) throw ShapeError("perturbation sweep: empty validation set");
  if (encoder_idx < 1 || encoder_idx > static_cast<int>(model.config().stages.size()))
    throw ConfigError("perturbation sweep: encoder index out of range");

  ad::NoGradGuard ng;
  const auto k = static_cast<std::size_t>(model.config().num_classes);
  cwfa::CwfaConfig cfg;  // Channel variant, detached: the shift is a constant
  std::vector<std::pair<double, double>> curve;
  for (const double eps : epsilons) {
    cfg.epsilon = eps;
    RngStream unused(0, 0);
    seg::StageHook hook = [&](int stage, const ad::Var& feat) {
      if (stage != encoder_idx) return feat;
      return cwfa::augment(feat, cfg, unused);
    };
    ConfusionMatrix cm(k);
    for (const Scene& scene : val)
      cm.add(argmax_map(model.forward(scene.image, &hook).value()), scene.mask);
    curve.emplace_back(eps, cm.mean_iou());
  }
  return curve;
}

// ---- serialization ----

nlohmann::json eval_report_json(const EvalReport& report) {
  nlohmann::json grid, kind_avg, fam_avg;
  for (const auto& [kind, per] : report.grid) grid[kind_name(kind)] = per;
  for (const auto& [kind, avg] : report.per_kind_avg) kind_avg[kind_name(kind)] = avg;
  for (const auto& [family, avg] : report.family_avg) fam_avg[family_name(family)] = avg;
  return nlohmann::json{{"clean_miou", report.clean_miou},
                        {"family_avg", fam_avg},
                        {"grid", grid},
                        {"overall_avg", report.overall_avg},
                        {"per_kind_avg", kind_avg},
                        {"retention", report.retention}};
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport report;
  report.clean_miou = j.at("clean_miou").get<double>();
  report.overall_avg = j.at("overall_avg").get<double>();
  report.retention = j.at("retention").get<double>();
  for (const auto& [name, per] : j.at("grid").items())
    report.grid[kind_from_name(name)] = per.get<std::array<double, 5>>();
  for (const auto& [name, avg] : j.at("per_kind_avg").items())
    report.per_kind_avg[kind_from_name(name)] = avg.get<double>();
  for (const auto& [name, avg] : j.at("family_avg").items())
    report.family_avg[family_from_name(name)] = avg.get<double>();
  return report;
}

void write_eval_report(const EvalReport& report, const std::string& json_path,
                       const std::string& csv_path) {
  {
    std::ofstream out(json_path);
    out << eval_report_json(report).dump(2) << "\n";
    if (!out) throw FormatError("cannot write " + json_path);
  }
  std::ofstream csv(csv_path);
  csv << "kind,severity,miou\n";
  char line[128];
  std::snprintf(line, sizeof line, "Clean,0,%.10g\n", report.clean_miou);
  csv << line;
  for (const auto& [kind, per] : report.grid)
    for (int s = 1; s <= 5; ++s) {
      std::snprintf(line, sizeof line, "%s,%d,%.10g\n", kind_name(kind), s, per[s - 1]);
      csv << line;
    }
  if (!csv) throw FormatError("cannot write " + csv_path);
}

void write_loss_curve_csv(const std::vector<std::pair<std::size_t, double>>& curve,
                          const std::string& path) {
  std::ofstream out(path);
  out << "iteration,loss\n";
  char line[64];
  for (const auto& [it, loss] : curve) {
    std::snprintf(line, sizeof line, "%zu,%.10g\n", it, loss);
    out << line;
  }
  if (!out) throw FormatError("cannot write " + path);
}

namespace {

const char* variant_name(cwfa::Variant v) {
  switch (v) {
    case cwfa::Variant::Channel: return "Channel";
    case cwfa::Variant::FullTensorNoPool: return "FullTensorNoPool";
    case cwfa::Variant::ChannelGaussian: return "ChannelGaussian";
  }
  throw ConfigError("unknown variant");
}

cwfa::Variant variant_from_name(const std::string& name) {
  if (name == "Channel") return cwfa::Variant::Channel;
  if (name == "FullTensorNoPool") return cwfa::Variant::FullTensorNoPool;
  if (name == "ChannelGaussian") return cwfa::Variant::ChannelGaussian;
  throw ConfigError("unknown augmentation variant: " + name);
}

}  // namespace

nlohmann::json train_config_json(const TrainConfig& cfg, const DatasetSpec& data) {
  nlohmann::json aug{{"flip", cfg.augment.flip},
                     {"crop_height", cfg.augment.crop_height},
                     {"crop_width", cfg.augment.crop_width},
                     {"corruption_prob", cfg.augment.corruption_prob}};
  if (cfg.augment.image_corruption) {
    aug["corruption_kind"] = kind_name(cfg.augment.image_corruption->kind);
    aug["corruption_severity"] = cfg.augment.image_corruption->severity;
  }
  nlohmann::json cw{{"epsilon", cfg.cwfa.epsilon},
                    {"p_augm", cfg.cwfa.p_augm},
                    {"encoders", cfg.cwfa.encoders},
                    {"gate_mode", cfg.cwfa.mode == cwfa::GateMode::SampledOne ? "SampledOne"
                                                                              : "Simultaneous"},
                    {"grad", cfg.cwfa.grad == cwfa::GradMode::FlowThrough ? "FlowThrough"
                                                                          : "Detached"},
                    {"warmup_iters", cfg.cwfa.warmup_iters},
                    {"variant", variant_name(cfg.cwfa.variant)},
                    {"gaussian_raw", cfg.cwfa.gaussian_raw}};
  nlohmann::json ds{{"num_classes", data.num_classes}, {"height", data.height},
                    {"width", data.width},             {"train_count", data.train_count},
                    {"val_count", data.val_count},     {"seed", data.seed}};
  return nlohmann::json{{"iterations", cfg.iterations},
                        {"batch_size", cfg.batch_size},
                        {"lr", cfg.lr},
                        {"weight_decay", cfg.weight_decay},
                        {"poly_power", cfg.poly_power},
                        {"seed", cfg.seed},
                        {"log_every", cfg.log_every},
                        {"cwfa", cw},
                        {"augment", aug},
                        {"dataset", ds}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.iterations = j.value("iterations", cfg.iterations);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.lr = j.value("lr", cfg.lr);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.poly_power = j.value("poly_power", cfg.poly_power);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.log_every = j.value("log_every", cfg.log_every);
  if (j.contains("cwfa")) {
    const auto& c = j.at("cwfa");
    cfg.cwfa.epsilon = c.value("epsilon", cfg.cwfa.epsilon);
    cfg.cwfa.p_augm = c.value("p_augm", cfg.cwfa.p_augm);
    cfg.cwfa.encoders = c.value("encoders", cfg.cwfa.encoders);
    if (c.contains("gate_mode"))
      cfg.cwfa.mode = c.at("gate_mode").get<std::string>() == "SampledOne"
                          ? cwfa::GateMode::SampledOne
                          : cwfa::GateMode::Simultaneous;
    if (c.contains("grad"))
      cfg.cwfa.grad = c.at("grad").get<std::string>() == "FlowThrough"
                          ? cwfa::GradMode::FlowThrough
                          : cwfa::GradMode::Detached;
    cfg.cwfa.warmup_iters = c.value("warmup_iters", cfg.cwfa.warmup_iters);
    if (c.contains("variant")) cfg.cwfa.variant = variant_from_name(c.at("variant"));
    cfg.cwfa.gaussian_raw = c.value("gaussian_raw", cfg.cwfa.gaussian_raw);
  }
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    cfg.augment.flip = a.value("flip", cfg.augment.flip);
    cfg.augment.crop_height = a.value("crop_height", cfg.augment.crop_height);
    cfg.augment.crop_width = a.value("crop_width", cfg.augment.crop_width);
    cfg.augment.corruption_prob = a.value("corruption_prob", cfg.augment.corruption_prob);
    if (a.contains("corruption_kind"))
      cfg.augment.image_corruption =
          CorruptionSpec{kind_from_name(a.at("corruption_kind").get<std::string>()),
                         a.value("corruption_severity", 3)};
  }
  return cfg;
}

DatasetSpec dataset_spec_from_json(const nlohmann::json& j) {
  DatasetSpec spec;
  spec.num_classes = j.value("num_classes", spec.num_classes);
  spec.height = j.value("height", spec.height);
  spec.width = j.value("width", spec.width);
  spec.train_count = j.value("train_count", spec.train_count);
  spec.val_count = j.value("val_count", spec.val_count);
  spec.seed = j.value("seed", spec.seed);
  return spec;
}

}  // namespace cwfalab
