#pragma once

#include <string>
#include <utility>
#include <vector>

#include "stanet/attention/attention.hpp"

// Semantic and target attention built from two SpatialFormer layers.
namespace stanet::sta {

using attention::SpatialFormerParams;

using FeaturePair = std::pair<Tensor, Tensor>;

struct StaParams {
  // Applied both ways inside SFSA unless share_sfsa is false, in which case
  // the query-side direction uses sfsa_reverse.
  SpatialFormerParams sfsa_layer;
  SpatialFormerParams sfta_layer;  // prototype and query paths share it
  SpatialFormerParams sfsa_reverse;
  bool share_sfsa = true;
  // Block gradients from SFTA into the global classifier weights.
  bool detach_w_g = false;
  Tensor w_e;  // [C x c] learnable reference; only for the embedding variant

  static StaParams create(std::size_t channels, const attention::LayerOptions& options, Rng& rng,
                          double init_noise = 0.01, bool share_sfsa = true);

  std::size_t channels() const { return sfsa_layer.channels; }
  // Layer tensors prefixed "sfsa.", "sfta.", "sfsa_reverse." plus "w_e".
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  void validate() const;
};

// (SF(p_k, q), SF(q, p_k)); each reference is flattened to [c x hw].
FeaturePair sfsa(const Tensor& p_k, const Tensor& q, const StaParams& params);

// (SF(p_k, W_G^T), SF(q, W_G^T)): every base-class weight row is one
// reference vector.
FeaturePair sfta(const Tensor& p_k, const Tensor& q, const Tensor& w_g, const StaParams& params);

// Element-wise sum of the sfsa and sfta pairs.
FeaturePair sta(const Tensor& p_k, const Tensor& q, const Tensor& w_g, const StaParams& params);

// SF(f, W_E^T) through the sfta layer. Throws ConfigError without w_e.
Tensor sfea(const Tensor& f, const Tensor& w_e, const StaParams& params);

// The classifier weights as SpatialFormer reference rows, detached when
// params.detach_w_g is set.
Tensor class_reference(const Tensor& w, const StaParams& params);

}  // namespace stanet::sta
