#include "stanet/attention/attention.hpp"

#include <cmath>

#include "stanet/errors.hpp"
#include "stanet/numerics/ops.hpp"

namespace stanet::attention {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kSelf: return "self";
    case Variant::kCross: return "cross";
    case Variant::kAlignment: return "alignment";
    case Variant::kSpatialFormer: return "spatialformer";
  }
  return "?";
}

std::string to_string(Normalization n) {
  switch (n) {
    case Normalization::kNone: return "none";
    case Normalization::kBeforeFfn: return "pre";
    case Normalization::kAfterFfn: return "post";
  }
  return "?";
}

Normalization parse_normalization(const std::string& s) {
  if (s == "none" || s == "off") return Normalization::kNone;
  if (s == "pre") return Normalization::kBeforeFfn;
  if (s == "post" || s == "on") return Normalization::kAfterFfn;
  throw ConfigError("unknown normalization '" + s + "' (expected none, pre or post)");
}

// ---- params ---------------------------------------------------------------

SpatialFormerParams SpatialFormerParams::create(std::size_t channels, const LayerOptions& options, Rng& rng,
                                                double init_noise) {
  if (channels == 0) throw ConfigError("attention layer needs at least one channel");
  auto near_identity = [&] { return ops::add(Tensor::identity(channels), randn({channels, channels}, rng, init_noise)); };
  SpatialFormerParams p;
  p.channels = channels;
  p.options = options;
  if (options.use_projections) {
    p.w_q = near_identity();
    p.w_k = near_identity();
    p.w_v = near_identity();
  }
  p.ffn_w1 = near_identity();
  p.ffn_b1 = Tensor::zeros({channels});
  p.ffn_w2 = near_identity();
  p.ffn_b2 = Tensor::zeros({channels});
  return p;
}

SpatialFormerParams SpatialFormerParams::identity(std::size_t channels, bool use_projections) {
  SpatialFormerParams p;
  p.channels = channels;
  p.options.use_projections = use_projections;
  p.options.ffn = FfnMode::kIdentity;
  if (use_projections) {
    p.w_q = Tensor::identity(channels);
    p.w_k = Tensor::identity(channels);
    p.w_v = Tensor::identity(channels);
  }
  p.ffn_w1 = Tensor::identity(channels);
  p.ffn_b1 = Tensor::zeros({channels});
  p.ffn_w2 = Tensor::identity(channels);
  p.ffn_b2 = Tensor::zeros({channels});
  return p;
}

std::vector<std::pair<std::string, Tensor>> SpatialFormerParams::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  if (options.use_projections) {
    out.emplace_back("w_q", w_q);
    out.emplace_back("w_k", w_k);
    out.emplace_back("w_v", w_v);
  }
  out.emplace_back("ffn_w1", ffn_w1);
  out.emplace_back("ffn_b1", ffn_b1);
  out.emplace_back("ffn_w2", ffn_w2);
  out.emplace_back("ffn_b2", ffn_b2);
  return out;
}

std::vector<Tensor> SpatialFormerParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void SpatialFormerParams::set_requires_grad(bool value) {
  for (auto& [name, t] : named_parameters()) {
    Tensor handle = t;
    handle.set_requires_grad(value);
  }
}

void SpatialFormerParams::validate() const {
  const Shape square = {channels, channels};
  const Shape vec = {channels};
  auto expect = [](const char* name, const Tensor& t, const Shape& s) {
    if (!t.defined() || t.shape() != s) {
      throw DimensionError(std::string("attention weight ") + name + " should be " + shape_to_string(s) + ", got " +
                           (t.defined() ? shape_to_string(t.shape()) : std::string("nothing")));
    }
  };
  if (options.use_projections) {
    expect("w_q", w_q, square);
    expect("w_k", w_k, square);
    expect("w_v", w_v, square);
  } else if (w_q.defined() || w_k.defined() || w_v.defined()) {
    throw ConfigError("projection weights present on a layer configured without projections");
  }
  expect("ffn_w1", ffn_w1, square);
  expect("ffn_b1", ffn_b1, vec);
  expect("ffn_w2", ffn_w2, square);
  expect("ffn_b2", ffn_b2, vec);
}

AttentionConfig::AttentionConfig(std::size_t channels, Variant variant, LayerOptions options)
    : channels_(channels), variant_(variant), options_(options) {
  if (channels_ == 0) throw ConfigError("attention config needs c > 0");
}

SpatialFormerParams AttentionConfig::make_params(Rng& rng, double init_noise) const {
  return SpatialFormerParams::create(channels_, options_, rng, init_noise);
}

// ---- building blocks ------------------------------------------------------

namespace {

void require_channels(const char* op, const Tensor& t, std::size_t axis, std::size_t channels) {
  if (t.dim(axis) != channels) {
    throw DimensionError(std::string(op) + ": expected " + std::to_string(channels) + " channels, got " +
                         shape_to_string(t.shape()));
  }
}

void require_feature(const char* op, const Tensor& f, std::size_t channels) {
  if (f.rank() != 3) throw DimensionError(std::string(op) + ": expected a [c x h x w] feature, got " + shape_to_string(f.shape()));
  require_channels(op, f, 0, channels);
}

// Projection weights are ignored outright when the layer is configured
// without them.
Tensor project_with(const Tensor& x, const SpatialFormerParams& params, const Tensor& w) {
  return params.options.use_projections ? project(x, w) : x;
}

}  // namespace

Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, bool logit_scale) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.shape() != v.shape()) {
    throw DimensionError("attention_core: incompatible q " + shape_to_string(q.shape()) + ", k " +
                         shape_to_string(k.shape()) + ", v " + shape_to_string(v.shape()));
  }
  Tensor logits = ops::matmul_nt(q, k);
  if (logit_scale) logits = ops::scale(logits, 1.0 / std::sqrt(static_cast<double>(q.dim(1))));
  return ops::matmul(ops::softmax_rows(logits), v);
}

Tensor spatial_attention(const Tensor& q, const Tensor& a) {
  return ops::add(q, ops::scale_rows(q, ops::patch_cosine(q, a)));
}

Tensor feed_forward(const Tensor& x, const SpatialFormerParams& params) {
  Tensor y = x;
  if (params.options.normalization == Normalization::kBeforeFfn) y = ops::layer_norm_rows(y);
  if (params.options.ffn == FfnMode::kMlp) {
    Tensor hidden = ops::relu(ops::add_row_bias(ops::matmul_nt(y, params.ffn_w1), params.ffn_b1));
    y = ops::add_row_bias(ops::matmul_nt(hidden, params.ffn_w2), params.ffn_b2);
  }
  if (params.options.normalization == Normalization::kAfterFfn) y = ops::layer_norm_rows(y);
  return y;
}

Tensor project(const Tensor& x, const Tensor& w) { return w.defined() ? ops::matmul_nt(x, w) : x; }

Projected project_feature(const Tensor& f, const SpatialFormerParams& params) {
  require_feature("project_feature", f, params.channels);
  Projected p;
  p.h = f.dim(1);
  p.w = f.dim(2);
  p.x = ops::to_positions(f);
  p.q = project_with(p.x, params, params.w_q);
  p.k = project_with(p.x, params, params.w_k);
  p.v = project_with(p.x, params, params.w_v);
  return p;
}

Projected project_rows(const Tensor& rows, const SpatialFormerParams& params) {
  if (rows.rank() != 2) throw DimensionError("project_rows: expected [n x c], got " + shape_to_string(rows.shape()));
  require_channels("project_rows", rows, 1, params.channels);
  Projected p;
  p.h = rows.dim(0);
  p.w = 1;
  p.x = rows;
  p.q = project_with(rows, params, params.w_q);
  p.k = project_with(rows, params, params.w_k);
  p.v = project_with(rows, params, params.w_v);
  return p;
}

// ---- Transformer forms ----------------------------------------------------

Tensor cross_attention(const Projected& f_q, const Projected& f_s, const SpatialFormerParams& params) {
  Tensor a = attention_core(f_q.q, f_s.k, f_s.v, params.options.logit_scale);
  return ops::from_positions(feed_forward(ops::add(f_q.x, a), params), f_q.h, f_q.w);
}

Tensor cross_attention(const Tensor& f_q, const Tensor& f_s, const SpatialFormerParams& params) {
  require_feature("cross_attention", f_q, params.channels);
  require_feature("cross_attention", f_s, params.channels);
  return cross_attention(project_feature(f_q, params), project_feature(f_s, params), params);
}

Tensor self_attention(const Tensor& f, const SpatialFormerParams& params) {
  require_feature("self_attention", f, params.channels);
  Projected p = project_feature(f, params);
  return cross_attention(p, p, params);
}

Tensor align_prototype(const Tensor& f_q, const std::vector<Tensor>& supports, const SpatialFormerParams& params) {
  if (supports.empty()) throw ContractError("align_prototype needs at least one support feature");
  require_feature("align_prototype", f_q, params.channels);
  for (const Tensor& s : supports) {
    if (s.shape() != supports.front().shape()) {
      throw DimensionError("align_prototype: support shapes differ: " + shape_to_string(s.shape()) + " vs " +
                           shape_to_string(supports.front().shape()));
    }
  }
  require_feature("align_prototype", supports.front(), params.channels);
  Tensor q = project_with(ops::to_positions(f_q), params, params.w_q);
  std::vector<Tensor> terms;
  terms.reserve(supports.size());
  for (const Tensor& s : supports) {
    Tensor x = ops::to_positions(s);
    terms.push_back(attention_core(q, project_with(x, params, params.w_k), project_with(x, params, params.w_v),
                                   params.options.logit_scale));
  }
  return ops::from_positions(ops::add_n(terms), f_q.dim(1), f_q.dim(2));
}

// ---- SpatialFormer ----------------------------------------------------------

Tensor spatialformer(const Projected& f, const Projected& reference, const SpatialFormerParams& params,
                     SpatialFormerTrace* trace) {
  Tensor a = attention_core(f.q, reference.k, reference.v, params.options.logit_scale);
  Tensor cosine = ops::patch_cosine(f.q, a);
  if (trace) trace->cosine = cosine;
  Tensor q_prime = ops::add(f.q, ops::scale_rows(f.q, cosine));
  return ops::from_positions(feed_forward(ops::add(f.x, q_prime), params), f.h, f.w);
}

Tensor spatialformer(const Tensor& f, const Tensor& r, const SpatialFormerParams& params, SpatialFormerTrace* trace) {
  require_feature("spatialformer", f, params.channels);
  if (r.rank() != 2) throw DimensionError("spatialformer: reference must be [c x n], got " + shape_to_string(r.shape()));
  require_channels("spatialformer", r, 0, params.channels);
  return spatialformer(project_feature(f, params), project_rows(ops::transpose(r), params), params, trace);
}

Tensor flatten_reference(const Tensor& f) {
  if (f.rank() != 3) throw DimensionError("flatten_reference: expected [c x h x w], got " + shape_to_string(f.shape()));
  return ops::reshape(f, {f.dim(0), f.dim(1) * f.dim(2)});
}

Tensor apply(const AttentionConfig& config, const SpatialFormerParams& params, const Tensor& f,
             const Tensor& reference) {
  if (params.channels != config.channels()) {
    throw DimensionError("attention params have " + std::to_string(params.channels) + " channels, config " +
                         std::to_string(config.channels()));
  }
  switch (config.variant()) {
    case Variant::kSelf: return self_attention(f, params);
    case Variant::kCross: return cross_attention(f, reference, params);
    case Variant::kSpatialFormer: return spatialformer(f, flatten_reference(reference), params);
    case Variant::kAlignment: return align_prototype(f, {reference}, params);
  }
  throw ConfigError("unknown attention variant");
}

}  // namespace stanet::attention
