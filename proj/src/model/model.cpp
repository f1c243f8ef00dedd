#include "stanet/model/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "stanet/errors.hpp"
#include "stanet/numerics/gradcheck.hpp"
#include "stanet/numerics/graph.hpp"
#include "stanet/numerics/ops.hpp"

namespace stanet::model {

using attention::Projected;
using attention::project_feature;
using attention::project_rows;
using attention::spatialformer;
using attention::SpatialFormerParams;

// ---- names and config text --------------------------------------------------

namespace {

const std::pair<AttentionVariant, const char*> kVariantNames[] = {
    {AttentionVariant::kNone, "none"},   {AttentionVariant::kSelf, "self"},
    {AttentionVariant::kCross, "cross"}, {AttentionVariant::kAlignment, "alignment"},
    {AttentionVariant::kSfsa, "sfsa"},   {AttentionVariant::kSfta, "sfta"},
    {AttentionVariant::kSta, "sta"},     {AttentionVariant::kSfea, "sfea"},
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ConfigError("'" + key + "' expects a boolean, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long n = std::stoull(v, &used);
    if (used == v.size() && v.find('-') == std::string::npos) return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
}

bool uses_sfsa_layer(AttentionVariant v) {
  return v != AttentionVariant::kNone && v != AttentionVariant::kSfta;
}
bool uses_reverse_layer(AttentionVariant v) {
  return v == AttentionVariant::kSfsa || v == AttentionVariant::kSta || v == AttentionVariant::kSfea;
}
bool uses_sfta_layer(AttentionVariant v) {
  return v == AttentionVariant::kSfta || v == AttentionVariant::kSta || v == AttentionVariant::kSfea;
}

}  // namespace

std::string to_string(AttentionVariant v) {
  for (const auto& [value, name] : kVariantNames)
    if (value == v) return name;
  return "unknown";
}

AttentionVariant parse_variant(const std::string& s) {
  if (s == "superglue-cross") return AttentionVariant::kCross;
  for (const auto& [value, name] : kVariantNames)
    if (s == name) return value;
  throw ConfigError("unknown attention variant '" + s +
                    "' (expected none, self, cross, superglue-cross, alignment, sfsa, sfta, sta or sfea)");
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(number) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(number) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

void ModelConfig::validate() const {
  if (backbone.channels == 0) throw ConfigError("channels must be positive");
  if (!backbone.pass_through) {
    if (backbone.in_channels == 0) throw ConfigError("in_channels must be positive");
    if (backbone.blocks == 0) throw ConfigError("the backbone needs at least one block");
    if (backbone.pooled > backbone.blocks) throw ConfigError("pooled blocks exceed backbone blocks");
  }
  if (base_classes == 0) throw ConfigError("base_classes must be positive");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("temperature must be positive");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be positive");
  if (!(init_noise >= 0.0)) throw ConfigError("init_noise must be non-negative");
  if (nta && novel_epochs == 0) throw ConfigError("novel_epochs must be at least 1 when NTA is on");
  if (!(novel_lr > 0.0)) throw ConfigError("novel_lr must be positive");
}

std::string ModelConfig::to_text() const {
  std::ostringstream out;
  auto b = [](bool v) { return v ? "1" : "0"; };
  out << "variant=" << to_string(variant) << "\n"
      << "use_projections=" << b(layer.use_projections) << "\n"
      << "logit_scale=" << b(layer.logit_scale) << "\n"
      << "normalization=" << attention::to_string(layer.normalization) << "\n"
      << "ffn=" << (layer.ffn == attention::FfnMode::kMlp ? "mlp" : "identity") << "\n"
      << "backbone=" << (backbone.pass_through ? "features" : "conv") << "\n"
      << "in_channels=" << backbone.in_channels << "\n"
      << "channels=" << backbone.channels << "\n"
      << "blocks=" << backbone.blocks << "\n"
      << "pooled=" << backbone.pooled << "\n"
      << "base_classes=" << base_classes << "\n"
      << "rotation=" << b(rotation_task) << "\n"
      << "share_sfsa=" << b(share_sfsa) << "\n"
      << "detach_w_g=" << b(detach_w_g) << "\n"
      << "learn_temperature=" << b(learn_temperature) << "\n"
      << "temperature=" << format_double(temperature) << "\n"
      << "init_noise=" << format_double(init_noise) << "\n"
      << "lambda=" << format_double(lambda) << "\n"
      << "plain_sum=" << b(plain_sum) << "\n"
      << "nta=" << b(nta) << "\n"
      << "novel_epochs=" << novel_epochs << "\n"
      << "novel_lr=" << format_double(novel_lr) << "\n";
  return out.str();
}

ModelConfig ModelConfig::from_keys(const std::map<std::string, std::string>& keys) {
  ModelConfig c;
  auto has = [&](const char* k) -> const std::string* {
    auto it = keys.find(k);
    return it == keys.end() ? nullptr : &it->second;
  };
  if (auto v = has("variant")) c.variant = parse_variant(*v);
  if (auto v = has("use_projections")) c.layer.use_projections = parse_bool("use_projections", *v);
  if (auto v = has("logit_scale")) c.layer.logit_scale = parse_bool("logit_scale", *v);
  if (auto v = has("normalization")) c.layer.normalization = attention::parse_normalization(*v);
  if (auto v = has("ffn")) {
    if (*v == "mlp") c.layer.ffn = attention::FfnMode::kMlp;
    else if (*v == "identity") c.layer.ffn = attention::FfnMode::kIdentity;
    else throw ConfigError("'ffn' expects mlp or identity, got '" + *v + "'");
  }
  if (auto v = has("backbone")) {
    if (*v == "features") c.backbone.pass_through = true;
    else if (*v == "conv") c.backbone.pass_through = false;
    else throw ConfigError("'backbone' expects conv or features, got '" + *v + "'");
  }
  if (auto v = has("in_channels")) c.backbone.in_channels = parse_size("in_channels", *v);
  if (auto v = has("channels")) c.backbone.channels = parse_size("channels", *v);
  if (auto v = has("blocks")) c.backbone.blocks = parse_size("blocks", *v);
  if (auto v = has("pooled")) c.backbone.pooled = parse_size("pooled", *v);
  if (auto v = has("base_classes")) c.base_classes = parse_size("base_classes", *v);
  if (auto v = has("rotation")) c.rotation_task = parse_bool("rotation", *v);
  if (auto v = has("share_sfsa")) c.share_sfsa = parse_bool("share_sfsa", *v);
  if (auto v = has("detach_w_g")) c.detach_w_g = parse_bool("detach_w_g", *v);
  if (auto v = has("learn_temperature")) c.learn_temperature = parse_bool("learn_temperature", *v);
  if (auto v = has("temperature")) c.temperature = parse_double("temperature", *v);
  if (auto v = has("init_noise")) c.init_noise = parse_double("init_noise", *v);
  if (auto v = has("lambda")) c.lambda = parse_double("lambda", *v);
  if (auto v = has("plain_sum")) c.plain_sum = parse_bool("plain_sum", *v);
  if (auto v = has("nta")) c.nta = parse_bool("nta", *v);
  if (auto v = has("novel_epochs")) c.novel_epochs = parse_size("novel_epochs", *v);
  if (auto v = has("novel_lr")) c.novel_lr = parse_double("novel_lr", *v);
  return c;
}

// ---- backbone -------------------------------------------------------------

Backbone Backbone::create(const BackboneConfig& config, Rng& rng) {
  Backbone b;
  b.config = config;
  if (config.pass_through) return b;
  std::size_t ci = config.in_channels;
  for (std::size_t i = 0; i < config.blocks; ++i) {
    const std::size_t co = config.channels;
    b.weights.push_back(randn({co, ci, 3, 3}, rng, std::sqrt(2.0 / static_cast<double>(ci * 9))));
    b.biases.push_back(Tensor::zeros({co}));
    ci = co;
  }
  return b;
}

Tensor Backbone::forward(const Tensor& x) const {
  if (x.rank() != 3) throw DimensionError("backbone expects a [ch x H x W] input, got " + shape_to_string(x.shape()));
  if (config.pass_through) {
    if (x.dim(0) != config.channels) {
      throw DimensionError("pass-through backbone expects " + std::to_string(config.channels) + " channels, got " +
                           shape_to_string(x.shape()));
    }
    return x;
  }
  if (x.dim(0) != config.in_channels) {
    throw DimensionError("backbone expects " + std::to_string(config.in_channels) + " input channels, got " +
                         shape_to_string(x.shape()));
  }
  Tensor h = x;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    h = ops::relu(ops::conv2d(h, weights[i], biases[i], 1));
    if (i < config.pooled) h = ops::max_pool2(h);
  }
  return h;
}

NamedTensors Backbone::named_parameters() const {
  NamedTensors out;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.emplace_back("backbone.conv" + std::to_string(i) + ".w", weights[i]);
    out.emplace_back("backbone.conv" + std::to_string(i) + ".b", biases[i]);
  }
  return out;
}

// ---- parameters -------------------------------------------------------------

StanetParams StanetParams::create(const ModelConfig& config, Rng& rng) {
  config.validate();
  StanetParams p;
  p.config = config;
  const std::size_t c = config.channels();
  const double head_std = 1.0 / std::sqrt(static_cast<double>(c));
  p.backbone = Backbone::create(config.backbone, rng);
  p.sta = sta::StaParams::create(c, config.layer, rng, config.init_noise, config.share_sfsa);
  p.sta.detach_w_g = config.detach_w_g;
  if (config.variant == AttentionVariant::kSfea) p.sta.w_e = randn({config.base_classes, c}, rng, head_std);
  p.heads.w_g = randn({config.base_classes, c}, rng, head_std);
  p.heads.b_g = Tensor::zeros({config.base_classes});
  p.heads.w_r = randn({4, c}, rng, head_std);
  p.heads.b_r = Tensor::zeros({4});
  p.heads.temperature = Tensor::scalar(config.temperature);
  p.loss.alpha_g = Tensor::scalar(1.0);
  p.loss.alpha_r = Tensor::scalar(1.0);
  p.loss.lambda = config.lambda;
  p.loss.plain_sum = config.plain_sum;
  return p;
}

NamedTensors StanetParams::named_parameters() const {
  NamedTensors out = backbone.named_parameters();
  const AttentionVariant v = config.variant;
  auto add_layer = [&](const std::string& prefix, const SpatialFormerParams& layer) {
    for (auto& [name, t] : layer.named_parameters()) out.emplace_back(prefix + name, t);
  };
  if (uses_sfsa_layer(v)) add_layer("sta.sfsa.", sta.sfsa_layer);
  if (uses_reverse_layer(v) && !sta.share_sfsa) add_layer("sta.sfsa_reverse.", sta.sfsa_reverse);
  if (uses_sfta_layer(v)) add_layer("sta.sfta.", sta.sfta_layer);
  if (sta.w_e.defined()) out.emplace_back("sta.w_e", sta.w_e);
  out.emplace_back("heads.global.w", heads.w_g);
  out.emplace_back("heads.global.b", heads.b_g);
  out.emplace_back("heads.rotation.w", heads.w_r);
  out.emplace_back("heads.rotation.b", heads.b_r);
  out.emplace_back("metric.temperature", heads.temperature);
  out.emplace_back("loss.alpha_g", loss.alpha_g);
  out.emplace_back("loss.alpha_r", loss.alpha_r);
  return out;
}

std::vector<Tensor> StanetParams::trainable() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named_parameters()) {
    if (name.rfind("heads.rotation.", 0) == 0 && !config.rotation_task) continue;
    if (name == "metric.temperature" && !config.learn_temperature) continue;
    if (name.rfind("loss.alpha", 0) == 0 && config.plain_sum) continue;
    if (name == "loss.alpha_r" && !config.rotation_task) continue;
    out.push_back(t);
  }
  return out;
}

void StanetParams::set_requires_grad(bool value) {
  for (auto& [name, t] : named_parameters()) t.set_requires_grad(false);
  if (value)
    for (Tensor& t : trainable()) t.set_requires_grad(true);
}

std::uint64_t StanetParams::hash() const { return hash_tensors(named_parameters()); }

// ---- heads and losses -------------------------------------------------------

Tensor prototype(const std::vector<Tensor>& supports) {
  if (supports.empty()) throw ContractError("prototype needs at least one support feature");
  for (const Tensor& s : supports) {
    if (s.shape() != supports.front().shape())
      throw DimensionError("prototype: support shapes differ: " + shape_to_string(s.shape()) + " vs " +
                           shape_to_string(supports.front().shape()));
  }
  if (supports.size() == 1) return supports.front();
  return ops::scale(ops::add_n(supports), 1.0 / static_cast<double>(supports.size()));
}

namespace {

// GAP of a [c x h x w] map as a [1 x c] row; a [c] vector is taken as pooled.
Tensor pooled_row(const Tensor& f) {
  Tensor g = f.rank() == 3 ? ops::global_avg_pool(f) : f;
  if (g.rank() != 1) throw DimensionError("expected a [c x h x w] or [c] feature, got " + shape_to_string(f.shape()));
  return ops::reshape(g, {1, g.dim(0)});
}

Tensor linear_head(const Tensor& feature, const Tensor& w, const Tensor& b, const char* name) {
  Tensor x = pooled_row(feature);
  if (x.dim(1) != w.dim(1)) {
    throw DimensionError(std::string(name) + " head expects " + std::to_string(w.dim(1)) + " channels, got " +
                         shape_to_string(feature.shape()));
  }
  Tensor logits = ops::add_row_bias(ops::matmul_nt(x, w), b);
  return ops::reshape(logits, {w.dim(0)});
}

void require_finite_scalar(const Tensor& t, const char* name) {
  if (!t.defined() || t.numel() != 1) throw ContractError(std::string(name) + " must be a one-element tensor");
  if (!std::isfinite(t.item())) throw NumericError(std::string(name) + " is not finite");
}

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace

Tensor metric_classify(const std::vector<Tensor>& q_bar, const std::vector<Tensor>& p_bar, const Tensor& temperature) {
  if (q_bar.empty()) throw ContractError("metric_classify needs at least one class pair");
  if (q_bar.size() != p_bar.size()) throw DimensionError("metric_classify: query and prototype counts differ");
  if (temperature.numel() != 1) throw DimensionError("metric_classify: temperature must have one element");
  std::vector<Tensor> cos;
  cos.reserve(q_bar.size());
  for (std::size_t k = 0; k < q_bar.size(); ++k) {
    Tensor q = pooled_row(q_bar[k]), p = pooled_row(p_bar[k]);
    if (q.shape() != p.shape()) throw DimensionError("metric_classify: pair " + std::to_string(k) + " disagrees on channels");
    cos.push_back(ops::patch_cosine(q, p));
  }
  const std::size_t n = cos.size();
  Tensor column = ops::reshape(ops::concat(cos), {n, 1});
  return ops::reshape(ops::matmul(column, ops::reshape(temperature, {1, 1})), {n});
}

Tensor global_classify(const Tensor& feature, const ClassifierWeights& heads) {
  return linear_head(feature, heads.w_g, heads.b_g, "global");
}

Tensor rotation_classify(const Tensor& feature, const ClassifierWeights& heads) {
  if (heads.w_r.dim(0) != 4) throw DimensionError("the rotation head must have exactly 4 rows");
  return linear_head(feature, heads.w_r, heads.b_r, "rotation");
}

Tensor multitask_loss(const Tensor& l_m, const Tensor& l_g, const Tensor& l_r, const LossWeights& weights) {
  require_finite_scalar(l_m, "l_m");
  require_finite_scalar(l_g, "l_g");
  if (l_r.defined()) require_finite_scalar(l_r, "l_r");
  Tensor total = ops::scale(l_m, 0.5);
  if (weights.plain_sum) {
    total = ops::add(total, l_g);
    if (l_r.defined()) total = ops::add(total, l_r);
    return total;
  }
  if (!(weights.lambda > 0.0)) throw NumericError("lambda must be positive");
  auto term = [&](const Tensor& l, const Tensor& alpha, const char* name) {
    require_finite_scalar(alpha, name);
    if (!(alpha.item() > 0.0)) throw NumericError(std::string(name) + " must be positive, got " + format_double(alpha.item()));
    Tensor w = ops::reciprocal(ops::scale(ops::square(alpha), 2.0));
    Tensor lw = ops::add_scalar(w, weights.lambda);
    return ops::sub(ops::mul(lw, l), ops::log(lw));
  };
  total = ops::add(total, term(l_g, weights.alpha_g, "alpha_g"));
  if (l_r.defined()) total = ops::add(total, term(l_r, weights.alpha_r, "alpha_r"));
  return total;
}

Tensor rotate_query(const Tensor& image, int quarter_turns) {
  if (image.rank() < 2) throw DimensionError("rotate_query needs two spatial axes, got " + shape_to_string(image.shape()));
  const int turns = ((quarter_turns % 4) + 4) % 4;
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  if (turns % 2 == 1 && h != w) {
    throw DimensionError("rotate_query: odd quarter turns need a square spatial extent, got " +
                         shape_to_string(image.shape()));
  }
  return turns == 0 ? image.clone() : ops::rot90(image, turns);
}

Tensor fuse_predictions(const Tensor& y_m, const Tensor& y_n) {
  if (y_m.rank() != 1 || y_m.shape() != y_n.shape()) {
    throw DimensionError("fuse_predictions: shapes " + shape_to_string(y_m.shape()) + " and " +
                         shape_to_string(y_n.shape()) + " differ");
  }
  const std::size_t n = y_m.dim(0);
  return ops::reshape(ops::add(ops::softmax_rows(ops::reshape(y_m, {1, n})), ops::softmax_rows(ops::reshape(y_n, {1, n}))),
                      {n});
}

// ---- pairwise attention -----------------------------------------------------

namespace {

// Everything about one side of a pair that does not depend on the other side.
struct SideCache {
  Tensor raw;
  Projected fwd, rev;  // under the sfsa layer and its reverse
  Tensor own;          // self-attended or target-attended map, variant dependent
  const std::vector<Tensor>* supports = nullptr;
};

class PairAttention {
 public:
  explicit PairAttention(const StanetParams& params) : p_(params), v_(params.config.variant) {
    const sta::StaParams& s = p_.sta;
    if (v_ == AttentionVariant::kSfta || v_ == AttentionVariant::kSta)
      reference_ = project_rows(sta::class_reference(p_.heads.w_g, s), s.sfta_layer);
    if (v_ == AttentionVariant::kSfea) {
      if (!s.w_e.defined()) throw ConfigError("the sfea variant needs w_e");
      reference_ = project_rows(s.w_e, s.sfta_layer);
    }
  }

  SideCache side(const Tensor& f, const std::vector<Tensor>* supports = nullptr) const {
    const sta::StaParams& s = p_.sta;
    SideCache c;
    c.raw = f;
    c.supports = supports;
    switch (v_) {
      case AttentionVariant::kNone:
      case AttentionVariant::kAlignment:
        break;
      case AttentionVariant::kSelf:
        c.own = attention::self_attention(f, s.sfsa_layer);
        break;
      case AttentionVariant::kCross:
        c.fwd = project_feature(f, s.sfsa_layer);
        break;
      case AttentionVariant::kSfsa:
      case AttentionVariant::kSta:
      case AttentionVariant::kSfea:
        c.fwd = project_feature(f, s.sfsa_layer);
        if (!s.share_sfsa) c.rev = project_feature(f, s.sfsa_reverse);
        if (v_ != AttentionVariant::kSfsa) c.own = spatialformer(project_feature(f, s.sfta_layer), reference_, s.sfta_layer);
        break;
      case AttentionVariant::kSfta:
        c.own = spatialformer(project_feature(f, s.sfta_layer), reference_, s.sfta_layer);
        break;
    }
    return c;
  }

  sta::FeaturePair pair(const SideCache& proto, const SideCache& query) const {
    const sta::StaParams& s = p_.sta;
    if (proto.raw.shape() != query.raw.shape()) {
      throw DimensionError("prototype " + shape_to_string(proto.raw.shape()) + " and query " +
                           shape_to_string(query.raw.shape()) + " differ");
    }
    switch (v_) {
      case AttentionVariant::kNone:
        return {proto.raw, query.raw};
      case AttentionVariant::kSelf:
      case AttentionVariant::kSfta:
        return {proto.own, query.own};
      case AttentionVariant::kCross:
        return {attention::cross_attention(proto.fwd, query.fwd, s.sfsa_layer),
                attention::cross_attention(query.fwd, proto.fwd, s.sfsa_layer)};
      case AttentionVariant::kAlignment: {
        if (!proto.supports || proto.supports->empty())
          throw ContractError("the alignment variant needs the class support features");
        return {attention::align_prototype(query.raw, *proto.supports, s.sfsa_layer), query.raw};
      }
      case AttentionVariant::kSfsa:
      case AttentionVariant::kSta:
      case AttentionVariant::kSfea: {
        Tensor p_bar = spatialformer(proto.fwd, query.fwd, s.sfsa_layer);
        Tensor q_bar = s.share_sfsa ? spatialformer(query.fwd, proto.fwd, s.sfsa_layer)
                                    : spatialformer(query.rev, proto.rev, s.sfsa_reverse);
        if (v_ == AttentionVariant::kSfsa) return {p_bar, q_bar};
        return {ops::add(p_bar, proto.own), ops::add(q_bar, query.own)};
      }
    }
    throw ContractError("unhandled attention variant");
  }

 private:
  const StanetParams& p_;
  AttentionVariant v_;
  Projected reference_;
};

std::vector<Tensor> embed_all(const Backbone& backbone, const std::vector<Tensor>& inputs) {
  std::vector<Tensor> out;
  out.reserve(inputs.size());
  for (const Tensor& x : inputs) out.push_back(backbone.forward(x));
  return out;
}

// Per-class support lists and prototypes from label-tagged features.
void class_prototypes(const std::vector<Tensor>& support, std::span<const std::size_t> labels, std::size_t way,
                      std::vector<std::vector<Tensor>>& groups, std::vector<Tensor>& protos) {
  if (support.size() != labels.size()) throw ContractError("support features and labels differ in count");
  groups.assign(way, {});
  for (std::size_t i = 0; i < support.size(); ++i) {
    if (labels[i] >= way) throw ContractError("support label " + std::to_string(labels[i]) + " outside the episode");
    groups[labels[i]].push_back(support[i]);
  }
  protos.clear();
  for (std::size_t k = 0; k < way; ++k) {
    if (groups[k].empty()) throw ContractError("class " + std::to_string(k) + " has no support item");
    protos.push_back(prototype(groups[k]));
  }
}

Tensor metric_logits(const PairAttention& attend, const std::vector<SideCache>& protos, const SideCache& query,
                     const Tensor& temperature) {
  std::vector<Tensor> q_bar, p_bar;
  for (const SideCache& p : protos) {
    auto [pb, qb] = attend.pair(p, query);
    p_bar.push_back(pb);
    q_bar.push_back(qb);
  }
  return metric_classify(q_bar, p_bar, temperature);
}

}  // namespace

sta::FeaturePair attend_pair(const Tensor& p_k, const std::vector<Tensor>& supports, const Tensor& q,
                             const StanetParams& params) {
  PairAttention attend(params);
  return attend.pair(attend.side(p_k, &supports), attend.side(q));
}

PairMaps attention_maps(const Tensor& p_k, const Tensor& q, const StanetParams& params) {
  NoGradScope no_grad;
  PairMaps maps;
  const sta::StaParams& s = params.sta;
  const AttentionVariant v = params.config.variant;
  if (v == AttentionVariant::kSfsa || v == AttentionVariant::kSta || v == AttentionVariant::kSfea) {
    attention::SpatialFormerTrace tp, tq;
    Projected pf = project_feature(p_k, s.sfsa_layer), qf = project_feature(q, s.sfsa_layer);
    spatialformer(pf, qf, s.sfsa_layer, &tp);
    if (s.share_sfsa) spatialformer(qf, pf, s.sfsa_layer, &tq);
    else spatialformer(project_feature(q, s.sfsa_reverse), project_feature(p_k, s.sfsa_reverse), s.sfsa_reverse, &tq);
    maps.sfsa_prototype = tp.cosine;
    maps.sfsa_query = tq.cosine;
  }
  if (uses_sfta_layer(v)) {
    const Tensor rows = v == AttentionVariant::kSfea ? s.w_e : sta::class_reference(params.heads.w_g, s);
    Projected ref = project_rows(rows, s.sfta_layer);
    attention::SpatialFormerTrace tp, tq;
    spatialformer(project_feature(p_k, s.sfta_layer), ref, s.sfta_layer, &tp);
    spatialformer(project_feature(q, s.sfta_layer), ref, s.sfta_layer, &tq);
    maps.sfta_prototype = tp.cosine;
    maps.sfta_query = tq.cosine;
  }
  return maps;
}

// ---- Step 1 -------------------------------------------------------------------

Step1Output stanet_forward_step1(const episodic::Episode& episode, const StanetParams& params,
                                 std::span<const std::size_t> base_rows) {
  const std::size_t way = episode.way;
  if (way == 0) throw ContractError("step 1 needs a non-empty episode");
  if (base_rows.size() != way) throw ContractError("base_rows must map every local class to a global row");
  for (std::size_t r : base_rows)
    if (r >= params.config.base_classes)
      throw ContractError("global row " + std::to_string(r) + " outside the " +
                          std::to_string(params.config.base_classes) + " base classes");
  if (episode.query.empty()) throw ContractError("step 1 needs at least one query");
  if (episode.query.size() != episode.query_labels.size()) throw ContractError("query features and labels differ in count");

  std::vector<std::vector<Tensor>> groups;
  std::vector<Tensor> protos;
  class_prototypes(embed_all(params.backbone, episode.support), episode.support_labels, way, groups, protos);

  PairAttention attend(params);
  std::vector<SideCache> proto_sides;
  for (std::size_t k = 0; k < way; ++k) proto_sides.push_back(attend.side(protos[k], &groups[k]));

  const std::size_t copies = params.config.rotation_task ? 4 : 1;
  std::vector<Tensor> metric_rows, global_rows, rotation_rows;
  std::vector<std::size_t> metric_labels, global_labels, rotation_labels;
  for (std::size_t i = 0; i < episode.query.size(); ++i) {
    const std::size_t label = episode.query_labels[i];
    if (label >= way) throw ContractError("query label " + std::to_string(label) + " outside the episode");
    for (std::size_t t = 0; t < copies; ++t) {
      Tensor q = params.backbone.forward(rotate_query(episode.query[i], static_cast<int>(t)));
      Tensor y_m = metric_logits(attend, proto_sides, attend.side(q), params.heads.temperature);
      metric_rows.push_back(ops::reshape(y_m, {1, way}));
      metric_labels.push_back(label);
      global_rows.push_back(ops::reshape(global_classify(q, params.heads), {1, params.config.base_classes}));
      global_labels.push_back(base_rows[label]);
      if (params.config.rotation_task) {
        rotation_rows.push_back(ops::reshape(rotation_classify(q, params.heads), {1, 4}));
        rotation_labels.push_back(t);
      }
    }
  }

  Step1Output out;
  Tensor metric = ops::concat(metric_rows);
  out.l_m = ops::cross_entropy(metric, metric_labels);
  out.l_g = ops::cross_entropy(ops::concat(global_rows), global_labels);
  if (params.config.rotation_task) out.l_r = ops::cross_entropy(ops::concat(rotation_rows), rotation_labels);
  out.total = multitask_loss(out.l_m, out.l_g, out.l_r, params.loss);

  std::size_t correct = 0;
  for (std::size_t r = 0; r < metric_labels.size(); ++r) {
    const std::size_t pred = argmax(metric.data().subspan(r * way, way));
    out.predictions.push_back(pred);
    correct += pred == metric_labels[r];
  }
  out.metric_accuracy = static_cast<double>(correct) / static_cast<double>(metric_labels.size());
  return out;
}

// ---- Step 2 -------------------------------------------------------------------

Step2Output stanet_infer_step2(const episodic::Episode& episode, const StanetParams& params) {
  NoGradScope no_grad;
  const std::size_t way = episode.way;
  if (way == 0) throw ContractError("step 2 needs a non-empty episode");
  if (episode.query.size() != episode.query_labels.size()) throw ContractError("query features and labels differ in count");

  std::vector<Tensor> support = embed_all(params.backbone, episode.support);
  std::vector<Tensor> queries = embed_all(params.backbone, episode.query);

  Step2Output out;
  // A one-way classifier gets a zero gradient and never moves off its zero
  // initialisation, so there is nothing to rectify with.
  const bool use_nta = params.config.nta && way > 1;
  if (use_nta) {
    out.classifier = nta::finetune_novel(
        nta::NovelClassifier::zeros(way, params.config.channels(), params.config.novel_lr, params.config.novel_epochs),
        support, episode.support_labels);
    support = nta::nta_update_batch(out.classifier, support);
    queries = nta::nta_update_batch(out.classifier, queries);
  }

  std::vector<std::vector<Tensor>> groups;
  std::vector<Tensor> protos;
  class_prototypes(support, episode.support_labels, way, groups, protos);
  PairAttention attend(params);
  std::vector<SideCache> proto_sides;
  for (std::size_t k = 0; k < way; ++k) proto_sides.push_back(attend.side(protos[k], &groups[k]));

  std::size_t correct = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    Tensor y = metric_logits(attend, proto_sides, attend.side(queries[i]), params.heads.temperature);
    if (use_nta) y = fuse_predictions(y, nta::novel_logits(out.classifier, queries[i]));
    const std::size_t pred = argmax(y.data());
    out.predictions.push_back(pred);
    correct += pred == episode.query_labels[i];
  }
  out.accuracy = queries.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(queries.size());
  return out;
}

double step1_gradcheck(const episodic::Episode& episode, const StanetParams& params,
                       std::span<const std::size_t> base_rows, std::size_t count, Rng& rng, double h) {
  StanetParams p = params;
  std::vector<Tensor> tensors = p.trainable();
  std::size_t total = 0;
  for (const Tensor& t : tensors) total += t.numel();
  if (total == 0) throw ContractError("no trainable parameters to check");

  std::vector<std::pair<std::size_t, std::size_t>> picks;
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  for (std::size_t n = 0; n < count; ++n) {
    std::size_t flat = pick(rng), ti = 0;
    while (flat >= tensors[ti].numel()) flat -= tensors[ti++].numel();
    picks.emplace_back(ti, flat);
  }

  p.set_requires_grad(true);
  {
    Graph graph;
    GraphScope scope(graph);
    for (Tensor& t : tensors) t.zero_grad();
    graph.backward(stanet_forward_step1(episode, p, base_rows).total);
  }
  std::vector<double> analytic;
  for (auto [ti, i] : picks) analytic.push_back(tensors[ti].grad()[i]);
  for (Tensor& t : tensors) t.clear_grad();
  p.set_requires_grad(false);

  auto loss = [&]() {
    NoGradScope no_grad;
    return stanet_forward_step1(episode, p, base_rows).total.item();
  };
  double worst = 0.0;
  for (std::size_t n = 0; n < picks.size(); ++n) {
    auto [ti, i] = picks[n];
    const double saved = tensors[ti][i];
    auto central = [&](double step) {
      tensors[ti][i] = saved + step;
      const double up = loss();
      tensors[ti][i] = saved - step;
      const double down = loss();
      tensors[ti][i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("non-finite loss during the gradient check");
      return (up - down) / (2.0 * step);
    };
    // A ReLU or max-pool switch inside [x - h, x + h] shows up as a disagreement
    // with the h/10 estimate; the smaller step then stays on one side of it.
    double numeric = central(h);
    const double fine = central(h / 10.0);
    if (relative_error(numeric, fine) > 1e-4) numeric = fine;
    worst = std::max(worst, relative_error(analytic[n], numeric));
  }
  return worst;
}

// ---- checkpoints ------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const StanetParams& params, bool step1_complete) {
  TensorFile file;
  file.flags = step1_complete ? kStep1Complete : 0u;
  file.metadata = params.config.to_text();
  for (const auto& [name, t] : params.named_parameters()) file.tensors.emplace_back(name, t.detach());
  write_tensor_file(path, file);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  TensorFile file = read_tensor_file(path);
  ModelConfig config;
  try {
    config = ModelConfig::from_keys(parse_key_values(file.metadata));
    config.validate();
  } catch (const ConfigError& e) {
    throw LoadError(path.string() + ": bad model config in checkpoint: " + e.what());
  }
  Rng rng(0);
  LoadedCheckpoint out;
  out.params = StanetParams::create(config, rng);
  NamedTensors expected = out.params.named_parameters();
  for (auto& [name, t] : expected) {
    const Tensor& stored = [&]() -> const Tensor& {
      try {
        return file.get(name, t.shape());
      } catch (const LoadError& e) {
        throw LoadError(path.string() + ": " + e.what());
      }
    }();
    std::copy(stored.data().begin(), stored.data().end(), t.data().begin());
  }
  for (const auto& [name, t] : file.tensors) {
    const bool known = std::any_of(expected.begin(), expected.end(), [&](const auto& e) { return e.first == name; });
    if (!known) throw LoadError(path.string() + ": unexpected tensor '" + name + "' for this model config");
  }
  out.step1_complete = (file.flags & kStep1Complete) != 0;
  return out;
}

}  // namespace stanet::model
