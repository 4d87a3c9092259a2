#include "cwfalab/segmenter.hpp"

#include <fstream>
#include <unordered_map>

#include "cwfalab/archive.hpp"
#include "cwfalab/errors.hpp"
#include "json.hpp"

namespace cwfalab::seg {

using json = nlohmann::ordered_json;

std::vector<StageConfig> default_stages() {
  std::vector<StageConfig> s(4);
  s[0] = {2, 16, 2, 1, 4, 3};
  s[1] = {2, 32, 2, 2, 4, 3};
  s[2] = {2, 64, 2, 4, 4, 3};
  s[3] = {2, 128, 2, 8, 4, 3};
  return s;
}

namespace {

void validate(const ModelConfig& cfg) {
  if (cfg.stages.empty()) throw ConfigError("segmenter: need at least one stage");
  if (cfg.in_channels < 1) throw ConfigError("segmenter: in_channels must be positive");
  if (cfg.num_classes < 2) throw ConfigError("segmenter: need at least two classes");
  if (cfg.decoder_dim < 1) throw ConfigError("segmenter: decoder_dim must be positive");
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const auto& s = cfg.stages[i];
    const std::string where = "segmenter stage " + std::to_string(i + 1) + ": ";
    if (s.stride < 2) throw ConfigError(where + "stride must be >= 2 so resolution shrinks");
    if (s.kernel < s.stride) throw ConfigError(where + "kernel must cover the stride");
    if (s.dim < 1 || s.depth < 1 || s.mlp_ratio < 1)
      throw ConfigError(where + "dim, depth, mlp_ratio must be positive");
    if (s.heads < 1 || s.dim % s.heads != 0)
      throw ConfigError(where + "heads must divide dim");
  }
}

std::string stage_prefix(std::size_t s) { return "stage" + std::to_string(s + 1) + "."; }

}  // namespace

Segmenter::Segmenter(ModelConfig cfg) : cfg_(std::move(cfg)) {
  validate(cfg_);
  auto add = [&](const std::string& name, Shape shape) {
    params_.emplace_back(name, ad::Var::param(Tensor(std::move(shape))));
  };

  int c_prev = cfg_.in_channels;
  for (std::size_t s = 0; s < cfg_.stages.size(); ++s) {
    const auto& sc = cfg_.stages[s];
    const auto d = static_cast<std::size_t>(sc.dim);
    const std::string sp = stage_prefix(s);
    add(sp + "embed.weight", {d, static_cast<std::size_t>(c_prev * sc.kernel * sc.kernel)});
    add(sp + "embed.bias", {d});
    for (int b = 0; b < sc.depth; ++b) {
      const std::string bp = sp + "block" + std::to_string(b + 1) + ".";
      add(bp + "ln1.gamma", {d});
      add(bp + "ln1.beta", {d});
      for (const char* w : {"wq", "wk", "wv", "wo"}) add(bp + "attn." + w, {d, d});
      for (const char* bb : {"bq", "bk", "bv", "bo"}) add(bp + "attn." + bb, {d});
      add(bp + "ln2.gamma", {d});
      add(bp + "ln2.beta", {d});
      const auto hidden = d * static_cast<std::size_t>(sc.mlp_ratio);
      add(bp + "mlp.w1", {hidden, d});
      add(bp + "mlp.b1", {hidden});
      add(bp + "mlp.w2", {d, hidden});
      add(bp + "mlp.b2", {d});
    }
    add(sp + "norm.gamma", {d});
    add(sp + "norm.beta", {d});
    c_prev = sc.dim;
  }

  const auto dd = static_cast<std::size_t>(cfg_.decoder_dim);
  for (std::size_t s = 0; s < cfg_.stages.size(); ++s) {
    add("decoder.proj" + std::to_string(s + 1) + ".weight",
        {dd, static_cast<std::size_t>(cfg_.stages[s].dim)});
    add("decoder.proj" + std::to_string(s + 1) + ".bias", {dd});
  }
  add("decoder.fuse.weight", {dd, dd * cfg_.stages.size()});
  add("decoder.fuse.bias", {dd});
  add("decoder.cls.weight", {static_cast<std::size_t>(cfg_.num_classes), dd});
  add("decoder.cls.bias", {static_cast<std::size_t>(cfg_.num_classes)});
}

Segmenter Segmenter::random_init(ModelConfig cfg, RngStream& rng) {
  Segmenter m(std::move(cfg));
  m.init_params(rng);
  return m;
}

void Segmenter::init_params(RngStream& rng) {
  auto ends_with = [](const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  };
  for (auto& [name, var] : params_) {
    Tensor& t = var.mutable_value();
    if (ends_with(name, ".gamma")) {
      t.fill(1.0f);
    } else if (ends_with(name, ".weight") && name.find(".embed.") != std::string::npos) {
      const double std_dev = std::sqrt(2.0 / static_cast<double>(t.dim(1)));
      for (std::size_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<float>(rng.normal(0.0, std_dev));
    } else if (t.rank() == 2) {  // linear weights
      for (std::size_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<float>(rng.normal(0.0, 0.02));
    }
    // biases and betas stay zero
  }
}

ad::Var Segmenter::param(const std::string& name) const {
  for (const auto& [n, v] : params_)
    if (n == name) return v;
  throw FormatError("segmenter: unknown parameter " + name);
}

int Segmenter::total_stride() const {
  int ts = 1;
  for (const auto& s : cfg_.stages) ts *= s.stride;
  return ts;
}

std::size_t Segmenter::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : params_) n += v.value().numel();
  return n;
}

void Segmenter::zero_grads() {
  for (auto& [name, v] : params_) v.zero_grad();
}

ad::Var Segmenter::forward(const Tensor& image, const StageHook* hook) const {
  if (image.rank() != 3 || image.dim(0) != static_cast<std::size_t>(cfg_.in_channels))
    throw ShapeError("segmenter: input must be (" + std::to_string(cfg_.in_channels) +
                     ",H,W), got " + shape_str(image.shape()));
  const std::size_t h_in = image.dim(1), w_in = image.dim(2);
  const auto ts = static_cast<std::size_t>(total_stride());
  if (h_in == 0 || w_in == 0 || h_in % ts != 0 || w_in % ts != 0)
    throw ShapeError("segmenter: H and W must be positive multiples of " + std::to_string(ts));

  ad::Var cur = ad::Var::constant(image);
  std::vector<ad::Var> feats;
  std::vector<std::pair<std::size_t, std::size_t>> dims;

  for (std::size_t s = 0; s < cfg_.stages.size(); ++s) {
    const auto& sc = cfg_.stages[s];
    const std::string sp = stage_prefix(s);
    const auto geom =
        conv_geom(cur.value().shape(), static_cast<std::size_t>(sc.kernel),
                  static_cast<std::size_t>(sc.stride), static_cast<std::size_t>(sc.kernel / 2));
    auto cols = ad::im2col(cur, geom);
    auto tok = ad::add_row_bias(ad::matmul_nt(cols, param(sp + "embed.weight")),
                                param(sp + "embed.bias"));

    for (int b = 0; b < sc.depth; ++b) {
      const std::string bp = sp + "block" + std::to_string(b + 1) + ".";
      auto x1 = ad::layer_norm_rows(tok, param(bp + "ln1.gamma"), param(bp + "ln1.beta"));
      auto q = ad::add_row_bias(ad::matmul_nt(x1, param(bp + "attn.wq")),
                                param(bp + "attn.bq"));
      auto k = ad::add_row_bias(ad::matmul_nt(x1, param(bp + "attn.wk")),
                                param(bp + "attn.bk"));
      auto v = ad::add_row_bias(ad::matmul_nt(x1, param(bp + "attn.wv")),
                                param(bp + "attn.bv"));
      auto a = ad::multihead_attention(q, k, v, sc.heads);
      auto o = ad::add_row_bias(ad::matmul_nt(a, param(bp + "attn.wo")),
                                param(bp + "attn.bo"));
      tok = ad::add(tok, o);
      auto x2 = ad::layer_norm_rows(tok, param(bp + "ln2.gamma"), param(bp + "ln2.beta"));
      auto m = ad::gelu(
          ad::add_row_bias(ad::matmul_nt(x2, param(bp + "mlp.w1")), param(bp + "mlp.b1")));
      auto m2 = ad::add_row_bias(ad::matmul_nt(m, param(bp + "mlp.w2")), param(bp + "mlp.b2"));
      tok = ad::add(tok, m2);
    }
    tok = ad::layer_norm_rows(tok, param(sp + "norm.gamma"), param(sp + "norm.beta"));
    auto feat = ad::tokens_to_chw(tok, geom.h_out, geom.w_out);

    if (hook && *hook) {
      auto hooked = (*hook)(static_cast<int>(s + 1), feat);
      if (!hooked.defined() || hooked.value().shape() != feat.value().shape())
        throw ShapeError("segmenter: stage hook must preserve the feature-map shape");
      feat = hooked;
    }
    feats.push_back(feat);
    dims.emplace_back(geom.h_out, geom.w_out);
    cur = feat;
  }

  // decoder: project every stage to a common width, upsample to the finest
  // stage resolution, fuse, classify, then upsample to the input size
  const auto [h1, w1] = dims[0];
  std::vector<ad::Var> ups;
  for (std::size_t s = 0; s < feats.size(); ++s) {
    const std::string pp = "decoder.proj" + std::to_string(s + 1) + ".";
    auto t = ad::chw_to_tokens(feats[s]);
    auto p = ad::add_row_bias(ad::matmul_nt(t, param(pp + "weight")), param(pp + "bias"));
    auto pc = ad::tokens_to_chw(p, dims[s].first, dims[s].second);
    ups.push_back(s == 0 ? pc : ad::bilinear_resize(pc, h1, w1));
  }
  auto cat = ad::concat_channels(ups);
  auto ct = ad::chw_to_tokens(cat);
  auto fused = ad::gelu(
      ad::add_row_bias(ad::matmul_nt(ct, param("decoder.fuse.weight")), param("decoder.fuse.bias")));
  auto logits_tok = ad::add_row_bias(ad::matmul_nt(fused, param("decoder.cls.weight")),
                                     param("decoder.cls.bias"));
  auto logits = ad::tokens_to_chw(logits_tok, h1, w1);
  return ad::bilinear_resize(logits, h_in, w_in);
}

void Segmenter::save(const std::string& path) const {
  NamedTensors entries;
  entries.reserve(params_.size());
  for (const auto& [name, v] : params_) entries.emplace_back(name, v.value());
  save_archive(path, entries);

  json meta;
  meta["format"] = 1;
  meta["in_channels"] = cfg_.in_channels;
  meta["num_classes"] = cfg_.num_classes;
  meta["decoder_dim"] = cfg_.decoder_dim;
  meta["stages"] = json::array();
  for (const auto& s : cfg_.stages) {
    json j;
    j["stride"] = s.stride;
    j["dim"] = s.dim;
    j["depth"] = s.depth;
    j["heads"] = s.heads;
    j["mlp_ratio"] = s.mlp_ratio;
    j["kernel"] = s.kernel;
    meta["stages"].push_back(j);
  }
  std::ofstream out(path + ".meta.json", std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path + ".meta.json");
  out << meta.dump(2) << "\n";
}

Segmenter Segmenter::load(const std::string& path) {
  std::ifstream in(path + ".meta.json");
  if (!in) throw FormatError("missing checkpoint metadata: " + path + ".meta.json");
  json meta;
  try {
    in >> meta;
  } catch (const json::exception& e) {
    throw FormatError("bad checkpoint metadata: " + std::string(e.what()));
  }

  ModelConfig cfg;
  try {
    if (meta.at("format").get<int>() != 1) throw FormatError("unsupported checkpoint format");
    cfg.in_channels = meta.at("in_channels").get<int>();
    cfg.num_classes = meta.at("num_classes").get<int>();
    cfg.decoder_dim = meta.at("decoder_dim").get<int>();
    cfg.stages.clear();
    for (const auto& j : meta.at("stages")) {
      StageConfig s;
      s.stride = j.at("stride").get<int>();
      s.dim = j.at("dim").get<int>();
      s.depth = j.at("depth").get<int>();
      s.heads = j.at("heads").get<int>();
      s.mlp_ratio = j.at("mlp_ratio").get<int>();
      s.kernel = j.at("kernel").get<int>();
      cfg.stages.push_back(s);
    }
  } catch (const json::exception& e) {
    throw FormatError("bad checkpoint metadata: " + std::string(e.what()));
  }

  Segmenter m(cfg);
  const auto entries = load_archive(path);
  if (entries.size() != m.params_.size())
    throw FormatError("checkpoint has " + std::to_string(entries.size()) + " tensors, expected " +
                      std::to_string(m.params_.size()));
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& [n, t] : entries) by_name.emplace(n, &t);
  for (auto& [name, var] : m.params_) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint missing parameter " + name);
    if (it->second->shape() != var.value().shape())
      throw FormatError("checkpoint shape mismatch for " + name + ": " +
                        shape_str(it->second->shape()) + " vs " + shape_str(var.value().shape()));
    var.mutable_value() = *it->second;
  }
  return m;
}

}  // namespace cwfalab::seg
