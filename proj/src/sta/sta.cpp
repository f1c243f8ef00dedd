#include "stanet/sta/sta.hpp"

#include "stanet/errors.hpp"
#include "stanet/numerics/ops.hpp"

namespace stanet::sta {

using attention::Projected;
using attention::project_feature;
using attention::project_rows;
using attention::spatialformer;

StaParams StaParams::create(std::size_t channels, const attention::LayerOptions& options, Rng& rng,
                            double init_noise, bool share_sfsa) {
  StaParams p;
  p.sfsa_layer = SpatialFormerParams::create(channels, options, rng, init_noise);
  p.sfta_layer = SpatialFormerParams::create(channels, options, rng, init_noise);
  p.share_sfsa = share_sfsa;
  if (!share_sfsa) p.sfsa_reverse = SpatialFormerParams::create(channels, options, rng, init_noise);
  return p;
}

std::vector<std::pair<std::string, Tensor>> StaParams::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto add = [&](const std::string& prefix, const SpatialFormerParams& layer) {
    for (auto& [name, t] : layer.named_parameters()) out.emplace_back(prefix + name, t);
  };
  add("sfsa.", sfsa_layer);
  add("sfta.", sfta_layer);
  if (!share_sfsa) add("sfsa_reverse.", sfsa_reverse);
  if (w_e.defined()) out.emplace_back("w_e", w_e);
  return out;
}

void StaParams::validate() const {
  sfsa_layer.validate();
  sfta_layer.validate();
  if (sfta_layer.channels != sfsa_layer.channels) throw DimensionError("sfsa and sfta layers disagree on channels");
  if (!share_sfsa) {
    sfsa_reverse.validate();
    if (sfsa_reverse.channels != sfsa_layer.channels)
      throw DimensionError("reverse sfsa layer disagrees on channels");
  }
  if (w_e.defined() && (w_e.rank() != 2 || w_e.dim(1) != channels()))
    throw DimensionError("w_e should be [C x " + std::to_string(channels()) + "], got " + shape_to_string(w_e.shape()));
}

namespace {

void require_pair(const char* op, const Tensor& p_k, const Tensor& q) {
  if (p_k.shape() != q.shape()) {
    throw DimensionError(std::string(op) + ": prototype " + shape_to_string(p_k.shape()) + " and query " +
                         shape_to_string(q.shape()) + " differ");
  }
}

void require_reference(const char* op, const Tensor& w, std::size_t channels) {
  if (w.rank() != 2 || w.dim(1) != channels) {
    throw DimensionError(std::string(op) + ": reference weights should be [n x " + std::to_string(channels) +
                         "], got " + shape_to_string(w.shape()));
  }
}

}  // namespace

FeaturePair sfsa(const Tensor& p_k, const Tensor& q, const StaParams& params) {
  require_pair("sfsa", p_k, q);
  const SpatialFormerParams& forward = params.sfsa_layer;
  const SpatialFormerParams& reverse = params.share_sfsa ? params.sfsa_layer : params.sfsa_reverse;
  Projected pf = project_feature(p_k, forward), qf = project_feature(q, forward);
  if (params.share_sfsa) return {spatialformer(pf, qf, forward), spatialformer(qf, pf, forward)};
  Projected pr = project_feature(p_k, reverse), qr = project_feature(q, reverse);
  return {spatialformer(pf, qf, forward), spatialformer(qr, pr, reverse)};
}

Tensor class_reference(const Tensor& w, const StaParams& params) {
  return params.detach_w_g ? w.detach() : w;
}

FeaturePair sfta(const Tensor& p_k, const Tensor& q, const Tensor& w_g, const StaParams& params) {
  require_pair("sfta", p_k, q);
  require_reference("sfta", w_g, params.sfta_layer.channels);
  const SpatialFormerParams& layer = params.sfta_layer;
  Projected ref = project_rows(class_reference(w_g, params), layer);
  return {spatialformer(project_feature(p_k, layer), ref, layer),
          spatialformer(project_feature(q, layer), ref, layer)};
}

FeaturePair sta(const Tensor& p_k, const Tensor& q, const Tensor& w_g, const StaParams& params) {
  auto [ps, qs] = sfsa(p_k, q, params);
  auto [pt, qt] = sfta(p_k, q, w_g, params);
  return {ops::add(ps, pt), ops::add(qs, qt)};
}

Tensor sfea(const Tensor& f, const Tensor& w_e, const StaParams& params) {
  if (!w_e.defined()) throw ConfigError("the embedding attention variant needs w_e");
  require_reference("sfea", w_e, params.sfta_layer.channels);
  const SpatialFormerParams& layer = params.sfta_layer;
  return spatialformer(project_feature(f, layer), project_rows(w_e, layer), layer);
}

}  // namespace stanet::sta
