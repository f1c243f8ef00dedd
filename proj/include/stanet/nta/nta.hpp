#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "stanet/numerics/tensor.hpp"

// Novel task attention: a linear classifier fitted on the support set picks,
// per feature, the class weight that rectifies it channel-wise.
namespace stanet::nta {

struct NovelClassifier {
  Tensor w;  // [N x c], no bias
  double lr = 0.01;
  std::size_t epochs = 100;

  // Zero-initialised weights.
  static NovelClassifier zeros(std::size_t ways, std::size_t channels, double lr = 0.01, std::size_t epochs = 100);

  std::size_t ways() const { return w.dim(0); }
  std::size_t channels() const { return w.dim(1); }
};

// Logits W * GAP(f) -> [N].
Tensor novel_logits(const NovelClassifier& classifier, const Tensor& feature);

// Full-batch gradient descent on the mean cross-entropy of the pooled
// support features. Features are detached first, so nothing upstream moves.
// Throws ContractError when the support is empty, a label is out of range or
// a class has no support item.
NovelClassifier finetune_novel(const NovelClassifier& classifier, const std::vector<Tensor>& support,
                               std::span<const std::size_t> labels);
NovelClassifier finetune_novel(const NovelClassifier& classifier, const std::vector<Tensor>& support,
                               std::span<const std::size_t> labels, std::size_t epochs, double lr);

// Index of the strongest logit; ties go to the lowest index.
std::size_t strongest_class(const NovelClassifier& classifier, const Tensor& feature);
// Row w^k for k = strongest_class.
Tensor select_rectifier(const NovelClassifier& classifier, const Tensor& feature);

// f (.) w_k / ||w_k||, channel-wise. Zero w_k -> NumericError.
Tensor nta_rectify(const Tensor& feature, const Tensor& w_k);

// Every feature rectified by its own strongest-class weight.
std::vector<Tensor> nta_update_batch(const NovelClassifier& classifier, const std::vector<Tensor>& features);

}  // namespace stanet::nta
