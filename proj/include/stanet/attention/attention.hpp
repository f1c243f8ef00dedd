#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "stanet/numerics/random.hpp"
#include "stanet/numerics/tensor.hpp"

// Single-head attention layers over [c x h x w] feature maps.
//
// Internally features are handled position-major: a map f becomes
// X = [h*w x c], and Q, K, V, A all share that layout. Projections W_Q, W_K,
// W_V are 1x1 convolutions, i.e. [c x c] matrices applied per position.
namespace stanet::attention {

enum class Variant { kSelf, kCross, kAlignment, kSpatialFormer };

enum class FfnMode {
  kMlp,       // linear -> ReLU -> linear, hidden width c
  kIdentity,  // net(x) = x; for identities and ablations
};

enum class Normalization {
  kNone,
  kBeforeFfn,  // FFN(LN(x))
  kAfterFfn,   // LN(FFN(x))
};

struct LayerOptions {
  bool use_projections = true;
  bool logit_scale = false;  // multiply QK^T by 1/sqrt(c)
  Normalization normalization = Normalization::kNone;
  FfnMode ffn = FfnMode::kMlp;
};

std::string to_string(Variant v);
std::string to_string(Normalization n);
Normalization parse_normalization(const std::string& s);

// Weights of one attention layer. Projection matrices are [c_out x c_in];
// they are left undefined when options.use_projections is false, in which
// case Q = f and K = V = r exactly.
struct SpatialFormerParams {
  std::size_t channels = 0;
  LayerOptions options;
  Tensor w_q, w_k, w_v;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;

  // Projections and FFN weights start at identity plus N(0, init_noise^2)
  // perturbation, biases at zero.
  static SpatialFormerParams create(std::size_t channels, const LayerOptions& options, Rng& rng,
                                    double init_noise = 0.01);
  // Exact identity projections and an identity FFN.
  static SpatialFormerParams identity(std::size_t channels, bool use_projections = true);

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  void set_requires_grad(bool value);
  // Throws DimensionError when any weight extent differs from channels.
  void validate() const;
};

class AttentionConfig {
 public:
  AttentionConfig(std::size_t channels, Variant variant, LayerOptions options = {});

  std::size_t channels() const { return channels_; }
  Variant variant() const { return variant_; }
  const LayerOptions& options() const { return options_; }

  SpatialFormerParams make_params(Rng& rng, double init_noise = 0.01) const;

 private:
  std::size_t channels_;
  Variant variant_;
  LayerOptions options_;
};

// A = softmax_rows(Q K^T * scale) V; q [p x c], k and v [n x c].
Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, bool logit_scale = false);

// Q' = Q + Q (.) PatchCosine(Q, A), per position; q and a [p x c].
Tensor spatial_attention(const Tensor& q, const Tensor& a);

// Position-wise FFN (with the configured normalisation) on x [p x c].
Tensor feed_forward(const Tensor& x, const SpatialFormerParams& params);

// x [p x c] through a [c x c] projection, or x itself when w is undefined.
Tensor project(const Tensor& x, const Tensor& w);

// Feature positions with their Q/K/V projections, computed once and reused
// across the many (feature, reference) pairings of an episode.
struct Projected {
  Tensor x;  // [p x c]
  Tensor q, k, v;
  std::size_t h = 0, w = 0;
};
Projected project_feature(const Tensor& f, const SpatialFormerParams& params);
// A reference given as rows [n x c], e.g. classifier weights.
Projected project_rows(const Tensor& rows, const SpatialFormerParams& params);

// f' = FFN(f + A), Q, K, V all from f.
Tensor self_attention(const Tensor& f, const SpatialFormerParams& params);

// f' = FFN(f_q + A) with Q from f_q and K, V from f_s. Spatial sizes may differ.
Tensor cross_attention(const Tensor& f_q, const Tensor& f_s, const SpatialFormerParams& params);
Tensor cross_attention(const Projected& f_q, const Projected& f_s, const SpatialFormerParams& params);

// Query-aligned prototype sum_i softmax(Q K_i^T) V_i, returned in the
// query's [c x h x w] layout.
Tensor align_prototype(const Tensor& f_q, const std::vector<Tensor>& supports, const SpatialFormerParams& params);

// Per-position cosine map recorded while evaluating a SpatialFormer.
struct SpatialFormerTrace {
  Tensor cosine;  // [h*w]
};

// f' = FFN(f + SpatialAttention(Q, A)), Q from f, K and V from the
// reference r [c x n].
Tensor spatialformer(const Tensor& f, const Tensor& r, const SpatialFormerParams& params,
                     SpatialFormerTrace* trace = nullptr);
Tensor spatialformer(const Projected& f, const Projected& reference, const SpatialFormerParams& params,
                     SpatialFormerTrace* trace = nullptr);

// [c x h x w] -> [c x h*w], the reference layout of an instance feature.
Tensor flatten_reference(const Tensor& f);

// Dispatches on config.variant(): kSelf ignores the reference, kCross and
// kSpatialFormer attend from f over the reference feature map. kAlignment
// needs a support list and is served by align_prototype.
Tensor apply(const AttentionConfig& config, const SpatialFormerParams& params, const Tensor& f,
             const Tensor& reference);

}  // namespace stanet::attention
