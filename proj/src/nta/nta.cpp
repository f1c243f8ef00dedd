#include "stanet/nta/nta.hpp"

#include <string>

#include "stanet/errors.hpp"
#include "stanet/numerics/graph.hpp"
#include "stanet/numerics/ops.hpp"
#include "stanet/numerics/optim.hpp"

namespace stanet::nta {

NovelClassifier NovelClassifier::zeros(std::size_t ways, std::size_t channels, double lr, std::size_t epochs) {
  if (ways == 0 || channels == 0) throw ConfigError("novel classifier needs N > 0 and c > 0");
  NovelClassifier n;
  n.w = Tensor::zeros({ways, channels});
  n.lr = lr;
  n.epochs = epochs;
  return n;
}

Tensor novel_logits(const NovelClassifier& classifier, const Tensor& feature) {
  Tensor pooled = ops::reshape(ops::global_avg_pool(feature), {1, feature.dim(0)});
  return ops::reshape(ops::matmul_nt(pooled, classifier.w), {classifier.ways()});
}

NovelClassifier finetune_novel(const NovelClassifier& classifier, const std::vector<Tensor>& support,
                               std::span<const std::size_t> labels) {
  return finetune_novel(classifier, support, labels, classifier.epochs, classifier.lr);
}

NovelClassifier finetune_novel(const NovelClassifier& classifier, const std::vector<Tensor>& support,
                               std::span<const std::size_t> labels, std::size_t epochs, double lr) {
  if (support.empty()) throw ContractError("finetune_novel: empty support set");
  if (support.size() != labels.size()) throw ContractError("finetune_novel: one label per support feature required");
  const std::size_t n_way = classifier.ways();
  std::vector<bool> seen(n_way, false);
  for (std::size_t y : labels) {
    if (y >= n_way) throw ContractError("finetune_novel: label " + std::to_string(y) + " outside " + std::to_string(n_way) + "-way");
    seen[y] = true;
  }
  for (std::size_t k = 0; k < n_way; ++k)
    if (!seen[k]) throw ContractError("finetune_novel: class " + std::to_string(k) + " has no support item");

  Tensor pooled;
  {
    NoGradScope frozen;
    std::vector<Tensor> rows;
    for (const Tensor& f : support) rows.push_back(ops::reshape(ops::global_avg_pool(f.detach()), {1, f.dim(0)}));
    pooled = ops::concat(rows);
  }

  NovelClassifier out = classifier;
  out.w = classifier.w.clone().set_requires_grad(true);
  std::vector<Tensor> params = {out.w};
  for (std::size_t step = 0; step < epochs; ++step) {
    Graph graph;
    GraphScope scope(graph);
    graph.backward(ops::cross_entropy(ops::matmul_nt(pooled, out.w), labels));
    sgd_step(params, lr);
  }
  out.w.set_requires_grad(false);
  return out;
}

std::size_t strongest_class(const NovelClassifier& classifier, const Tensor& feature) {
  NoGradScope no_grad;
  Tensor logits = novel_logits(classifier, feature);
  std::size_t best = 0;
  for (std::size_t k = 1; k < logits.numel(); ++k)
    if (logits[k] > logits[best]) best = k;
  return best;
}

Tensor select_rectifier(const NovelClassifier& classifier, const Tensor& feature) {
  return ops::row(classifier.w, strongest_class(classifier, feature));
}

Tensor nta_rectify(const Tensor& feature, const Tensor& w_k) {
  return ops::broadcast_mul_channel(feature, ops::l2_normalize(w_k));
}

std::vector<Tensor> nta_update_batch(const NovelClassifier& classifier, const std::vector<Tensor>& features) {
  std::vector<Tensor> out;
  out.reserve(features.size());
  for (const Tensor& f : features) out.push_back(nta_rectify(f, select_rectifier(classifier, f)));
  return out;
}

}  // namespace stanet::nta
