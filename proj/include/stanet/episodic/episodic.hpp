#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stanet/numerics/random.hpp"
#include "stanet/numerics/tensor.hpp"

// Few-shot datasets, the N-way M-shot sampler and synthetic generators.
namespace stanet::episodic {

enum class Split { kBase, kVal, kTest };

std::string to_string(Split s);
Split parse_split(const std::string& s);

// Top-left corner of a planted patch, in input pixels.
struct PatchLocation {
  std::size_t row = 0, col = 0;
};

struct Item {
  Tensor data;  // image [ch x H x W] or feature [c x h x w]
  std::size_t class_id = 0;
  std::optional<PatchLocation> patch;
};

class FewShotDataset {
 public:
  // Registers an empty class. Throws ContractError if it already exists,
  // which is also what keeps splits disjoint.
  void add_class(std::size_t class_id, Split split);
  // Throws ContractError for an unknown class and DimensionError when the
  // shape differs from earlier items.
  std::size_t add_item(Tensor data, std::size_t class_id, std::optional<PatchLocation> patch = std::nullopt);

  std::vector<std::size_t> classes(Split split) const;  // ascending ids
  std::vector<std::size_t> all_classes() const;
  Split split_of(std::size_t class_id) const;
  const std::vector<std::size_t>& items_of(std::size_t class_id) const;
  const Item& item(std::size_t index) const { return items_.at(index); }
  std::size_t size() const { return items_.size(); }
  const Shape& item_shape() const { return item_shape_; }

  std::size_t patch_size = 0;  // side of planted patches, 0 when none

  // Checks split disjointness and per-class item indices.
  void validate() const;

  // Copy whose items are randomly reassigned among the classes of each
  // split, keeping every class's item count. Destroys any link between
  // content and label.
  FewShotDataset shuffled_labels(Rng& rng) const;

 private:
  std::vector<Item> items_;
  std::map<std::size_t, std::vector<std::size_t>> index_;
  std::map<std::size_t, Split> split_;
  Shape item_shape_;
};

struct Episode {
  std::size_t way = 0, shot = 0;
  // Dataset class id of each local label 0..N-1.
  std::vector<std::size_t> class_ids;
  // Support ordered by local label, M items each.
  std::vector<Tensor> support;
  std::vector<std::size_t> support_labels;
  std::vector<std::size_t> support_items;
  std::vector<Tensor> query;
  std::vector<std::size_t> query_labels;
  std::vector<std::size_t> query_items;

  std::vector<Tensor> support_of(std::size_t label) const;
};

// Uniform classes from the split, then uniform items per class, all without
// replacement. Throws ContractError naming the counts when the split has
// fewer than n classes or a chosen class has fewer than m + q items.
Episode sample_episode(const FewShotDataset& data, Split split, std::size_t n, std::size_t m, std::size_t q_per_class,
                       Rng& rng);

struct SplitCounts {
  std::size_t base = 0, val = 0, test = 0;
  std::size_t total() const { return base + val + test; }
};

struct PlantedSpec {
  SplitCounts classes{8, 0, 8};
  std::size_t per_class = 20;
  std::size_t img_size = 16;
  std::size_t channels = 3;
  std::size_t patch_size = 4;
  double patch_gain = 2.0;      // per-pixel RMS of a class patch
  double noise = 0.1;
  std::size_t textures = 4;     // shared background pool
  double texture_gain = 0.5;    // per-pixel RMS of a background texture
};

// Class patches are mutually orthogonal; each image is one pool texture
// with its class patch pasted at a random location, plus Gaussian noise.
// Throws ConfigError when img_size < 8, the patch does not fit, or there are
// more classes than patch dimensions.
FewShotDataset make_synthetic_planted(const PlantedSpec& spec, Rng& rng);

struct FeatureSpec {
  SplitCounts classes{8, 0, 8};
  std::size_t per_class = 20;
  std::size_t channels = 16, h = 3, w = 3;
  double separation = 3.0;  // norm of each class mean
  double spread = 1.0;      // per-entry standard deviation around it
};

// Class mean = separation * u_k with u_k uniform on the unit sphere; every
// position of an item is that mean plus N(0, spread^2) noise.
FewShotDataset make_synthetic_features(const FeatureSpec& spec, Rng& rng);

// Directory layout: manifest.txt with "class <id> <split> <count>" lines (and
// "patch_size <p>" when set) plus class_<id>.stan tensor files holding
// item.<i> (and patch.<i> locations). Loading checks counts against the
// manifest; failures raise LoadError.
void save_dataset(const FewShotDataset& data, const std::filesystem::path& dir);
FewShotDataset load_dataset(const std::filesystem::path& dir);

}  // namespace stanet::episodic
