#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "stanet/attention/attention.hpp"
#include "stanet/episodic/episodic.hpp"
#include "stanet/nta/nta.hpp"
#include "stanet/numerics/tensor_io.hpp"
#include "stanet/sta/sta.hpp"

// STANet assembly: backbone, prototypes, classifier heads, the multi-task
// loss and the two-step train / infer passes.
namespace stanet::model {

// Attention applied to each (prototype, query) pair before the metric head.
// kSelf, kCross and kAlignment are Transformer baselines; kSfea is SFSA plus
// the learnable-embedding form of SFTA.
enum class AttentionVariant { kNone, kSelf, kCross, kAlignment, kSfsa, kSfta, kSta, kSfea };

std::string to_string(AttentionVariant v);
// Accepts the to_string names plus "superglue-cross" for kCross.
AttentionVariant parse_variant(const std::string& s);

// "key=value" lines, '#' comments and blank lines ignored; surrounding
// whitespace trimmed. Throws ConfigError on a line without '='.
std::map<std::string, std::string> parse_key_values(const std::string& text);

// ---- backbone -------------------------------------------------------------

struct BackboneConfig {
  bool pass_through = false;  // inputs already are [c x h x w] features
  std::size_t in_channels = 3;
  std::size_t channels = 32;
  std::size_t blocks = 3;     // conv3x3 + ReLU each
  std::size_t pooled = 2;     // the first `pooled` blocks end in 2x2 max pooling
};

struct Backbone {
  BackboneConfig config;
  std::vector<Tensor> weights, biases;  // [co x ci x 3 x 3], [co]

  // He-normal weights, zero biases.
  static Backbone create(const BackboneConfig& config, Rng& rng);
  Tensor forward(const Tensor& x) const;
  NamedTensors named_parameters() const;  // backbone.convN.w / .b
};

// ---- heads and losses -----------------------------------------------------

struct ClassifierWeights {
  Tensor w_g, b_g;    // [C_base x c], [C_base]
  Tensor w_r, b_r;    // [4 x c], [4]
  Tensor temperature; // [1]
};

struct LossWeights {
  Tensor alpha_g, alpha_r;  // [1] each, learnable
  double lambda = 1.0;
  bool plain_sum = false;   // 0.5 L_M + L_G + L_R instead of the weighted form
};

struct ModelConfig {
  AttentionVariant variant = AttentionVariant::kSta;
  attention::LayerOptions layer;
  BackboneConfig backbone;
  std::size_t base_classes = 0;
  bool rotation_task = true;
  bool share_sfsa = true;
  bool detach_w_g = false;
  bool learn_temperature = true;
  double temperature = 10.0;
  double init_noise = 0.01;
  double lambda = 1.0;
  bool plain_sum = false;
  bool nta = true;
  std::size_t novel_epochs = 100;
  double novel_lr = 0.01;

  std::size_t channels() const { return backbone.channels; }
  // Throws ConfigError on inconsistent values.
  void validate() const;
  // Round-trips through parse_key_values / from_keys.
  std::string to_text() const;
  // Reads the keys it knows; unknown keys are left for the caller.
  static ModelConfig from_keys(const std::map<std::string, std::string>& keys);
};

struct StanetParams {
  ModelConfig config;
  Backbone backbone;
  sta::StaParams sta;
  ClassifierWeights heads;
  LossWeights loss;

  static StanetParams create(const ModelConfig& config, Rng& rng);
  // Every stored tensor, in a fixed order. Only layers the variant uses are
  // present.
  NamedTensors named_parameters() const;
  // The tensors Step 1 optimises under this config.
  std::vector<Tensor> trainable() const;
  void set_requires_grad(bool value);
  // Bit-level hash over named_parameters().
  std::uint64_t hash() const;
};

// ---- operations -------------------------------------------------------------

// Element-wise mean. Empty list -> ContractError.
Tensor prototype(const std::vector<Tensor>& supports);

// logit_k = temperature * cos(GAP(q_bar[k]), GAP(p_bar[k])) -> [N].
Tensor metric_classify(const std::vector<Tensor>& q_bar, const std::vector<Tensor>& p_bar, const Tensor& temperature);

// Linear logits on the pooled feature.
Tensor global_classify(const Tensor& feature, const ClassifierWeights& heads);
Tensor rotation_classify(const Tensor& feature, const ClassifierWeights& heads);

// 0.5 l_m + sum_j ((lambda + w_j) l_j - log(lambda + w_j)), w_j = 1/(2 alpha_j^2).
// l_r may be undefined (rotation task off). Non-positive alpha -> NumericError.
Tensor multitask_loss(const Tensor& l_m, const Tensor& l_g, const Tensor& l_r, const LossWeights& weights);

// Counter-clockwise quarter turns of the spatial axes.
Tensor rotate_query(const Tensor& image, int quarter_turns);

// softmax(y_m) + softmax(y_n).
Tensor fuse_predictions(const Tensor& y_m, const Tensor& y_n);

// The enhanced pair (P-bar, Q-bar) for one class under params.config.variant.
// `supports` is only read by kAlignment.
sta::FeaturePair attend_pair(const Tensor& p_k, const std::vector<Tensor>& supports, const Tensor& q,
                             const StanetParams& params);

// PatchCosine maps recorded for one (prototype, query) pair; undefined for
// modules the variant lacks. Each is [h*w].
struct PairMaps {
  Tensor sfsa_prototype, sfsa_query;
  Tensor sfta_prototype, sfta_query;
};
PairMaps attention_maps(const Tensor& p_k, const Tensor& q, const StanetParams& params);

struct Step1Output {
  Tensor l_m, l_g, l_r;  // l_r undefined without the rotation task
  Tensor total;
  std::vector<std::size_t> predictions;  // metric argmax per query copy
  double metric_accuracy = 0.0;
};

// One Step 1 pass on a base episode. base_rows[k] is the global classifier
// row of local class k. Records on the active graph when params require
// gradients.
Step1Output stanet_forward_step1(const episodic::Episode& episode, const StanetParams& params,
                                 std::span<const std::size_t> base_rows);

struct Step2Output {
  std::vector<std::size_t> predictions;
  double accuracy = 0.0;
  nta::NovelClassifier classifier;  // fine-tuned; empty weights when NTA is off
};

// Step 2 on a novel episode with frozen params: fine-tune the novel
// classifier, rectify features, attend, fuse. Nothing is recorded.
Step2Output stanet_infer_step2(const episodic::Episode& episode, const StanetParams& params);

// Central-difference check of Step 1's total loss on `count` trainable
// scalars drawn at random; returns the worst relative error. A coordinate
// whose h and h/10 estimates disagree (a kink nearby) uses the h/10 one.
// Parameter values are restored afterwards.
double step1_gradcheck(const episodic::Episode& episode, const StanetParams& params,
                       std::span<const std::size_t> base_rows, std::size_t count, Rng& rng, double h = 1e-5);

// ---- checkpoints ------------------------------------------------------------

inline constexpr std::uint32_t kStep1Complete = 1u;

void save_checkpoint(const std::filesystem::path& path, const StanetParams& params, bool step1_complete);

struct LoadedCheckpoint {
  StanetParams params;
  bool step1_complete = false;
};
// Rebuilds the config from the metadata and checks every tensor's presence
// and shape; LoadError names the offending tensor.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace stanet::model
