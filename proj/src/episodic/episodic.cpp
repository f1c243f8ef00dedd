#include "stanet/episodic/episodic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "stanet/errors.hpp"
#include "stanet/numerics/tensor_io.hpp"

namespace stanet::episodic {

std::string to_string(Split s) {
  switch (s) {
    case Split::kBase: return "base";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "base") return Split::kBase;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split '" + s + "' (expected base, val or test)");
}

// ---- dataset --------------------------------------------------------------

void FewShotDataset::add_class(std::size_t class_id, Split split) {
  if (split_.count(class_id)) throw ContractError("class " + std::to_string(class_id) + " registered twice");
  split_[class_id] = split;
  index_[class_id];
}

std::size_t FewShotDataset::add_item(Tensor data, std::size_t class_id, std::optional<PatchLocation> patch) {
  auto it = index_.find(class_id);
  if (it == index_.end()) throw ContractError("item for unregistered class " + std::to_string(class_id));
  if (items_.empty()) {
    item_shape_ = data.shape();
  } else if (data.shape() != item_shape_) {
    throw DimensionError("item shape " + shape_to_string(data.shape()) + " differs from dataset shape " +
                         shape_to_string(item_shape_));
  }
  items_.push_back({std::move(data), class_id, patch});
  it->second.push_back(items_.size() - 1);
  return items_.size() - 1;
}

std::vector<std::size_t> FewShotDataset::classes(Split split) const {
  std::vector<std::size_t> out;
  for (const auto& [id, s] : split_)
    if (s == split) out.push_back(id);
  return out;
}

std::vector<std::size_t> FewShotDataset::all_classes() const {
  std::vector<std::size_t> out;
  for (const auto& [id, s] : split_) out.push_back(id);
  return out;
}

Split FewShotDataset::split_of(std::size_t class_id) const {
  auto it = split_.find(class_id);
  if (it == split_.end()) throw ContractError("unknown class " + std::to_string(class_id));
  return it->second;
}

const std::vector<std::size_t>& FewShotDataset::items_of(std::size_t class_id) const {
  auto it = index_.find(class_id);
  if (it == index_.end()) throw ContractError("unknown class " + std::to_string(class_id));
  return it->second;
}

void FewShotDataset::validate() const {
  std::map<std::size_t, int> seen;
  for (Split s : {Split::kBase, Split::kVal, Split::kTest})
    for (std::size_t id : classes(s))
      if (++seen[id] > 1) throw ContractError("class " + std::to_string(id) + " appears in two splits");
  std::vector<int> owner(items_.size(), 0);
  for (const auto& [id, idx] : index_) {
    for (std::size_t i : idx) {
      if (i >= items_.size() || items_[i].class_id != id)
        throw ContractError("index of class " + std::to_string(id) + " is inconsistent");
      ++owner[i];
    }
  }
  for (int o : owner)
    if (o != 1) throw ContractError("an item is indexed by zero or several classes");
}

FewShotDataset FewShotDataset::shuffled_labels(Rng& rng) const {
  FewShotDataset out;
  out.patch_size = patch_size;
  for (const auto& [id, s] : split_) out.add_class(id, s);
  for (Split s : {Split::kBase, Split::kVal, Split::kTest}) {
    const auto ids = classes(s);
    std::vector<std::size_t> pool;
    for (std::size_t id : ids) pool.insert(pool.end(), index_.at(id).begin(), index_.at(id).end());
    std::shuffle(pool.begin(), pool.end(), rng);
    std::size_t next = 0;
    for (std::size_t id : ids)
      for (std::size_t j = 0; j < index_.at(id).size(); ++j) {
        const Item& src = items_[pool[next++]];
        out.add_item(src.data, id, src.patch);
      }
  }
  return out;
}

std::vector<Tensor> Episode::support_of(std::size_t label) const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < support.size(); ++i)
    if (support_labels[i] == label) out.push_back(support[i]);
  return out;
}

// ---- sampling -------------------------------------------------------------

namespace {

// k distinct entries of pool, uniformly, in random order.
std::vector<std::size_t> pick(std::vector<std::size_t> pool, std::size_t k, Rng& rng) {
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> d(i, pool.size() - 1);
    std::swap(pool[i], pool[d(rng)]);
  }
  pool.resize(k);
  return pool;
}

}  // namespace

Episode sample_episode(const FewShotDataset& data, Split split, std::size_t n, std::size_t m, std::size_t q_per_class,
                       Rng& rng) {
  if (n == 0 || m == 0) throw ContractError("an episode needs n >= 1 and m >= 1");
  const auto pool = data.classes(split);
  if (pool.size() < n) {
    throw ContractError("split " + to_string(split) + " has " + std::to_string(pool.size()) + " classes, episode needs " +
                        std::to_string(n));
  }
  Episode ep;
  ep.way = n;
  ep.shot = m;
  ep.class_ids = pick(pool, n, rng);
  for (std::size_t k = 0; k < n; ++k) {
    const auto& items = data.items_of(ep.class_ids[k]);
    if (items.size() < m + q_per_class) {
      throw ContractError("class " + std::to_string(ep.class_ids[k]) + " has " + std::to_string(items.size()) +
                          " items, episode needs " + std::to_string(m) + " + " + std::to_string(q_per_class));
    }
    const auto chosen = pick(items, m + q_per_class, rng);
    for (std::size_t j = 0; j < chosen.size(); ++j) {
      const bool is_support = j < m;
      (is_support ? ep.support : ep.query).push_back(data.item(chosen[j]).data);
      (is_support ? ep.support_labels : ep.query_labels).push_back(k);
      (is_support ? ep.support_items : ep.query_items).push_back(chosen[j]);
    }
  }
  return ep;
}

// ---- synthetic data -------------------------------------------------------

namespace {

void register_splits(FewShotDataset& data, const SplitCounts& counts) {
  std::size_t id = 0;
  for (std::size_t i = 0; i < counts.base; ++i) data.add_class(id++, Split::kBase);
  for (std::size_t i = 0; i < counts.val; ++i) data.add_class(id++, Split::kVal);
  for (std::size_t i = 0; i < counts.test; ++i) data.add_class(id++, Split::kTest);
}

void scale_to_rms(std::vector<double>& v, double rms) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  const double cur = std::sqrt(ss / static_cast<double>(v.size()));
  if (cur > 0.0)
    for (double& x : v) x *= rms / cur;
}

// Orthonormal rows by Gram-Schmidt on Gaussian draws.
std::vector<std::vector<double>> orthonormal(std::size_t count, std::size_t dim, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::vector<double>> basis;
  while (basis.size() < count) {
    std::vector<double> v(dim);
    for (double& x : v) x = g(rng);
    for (const auto& b : basis) {
      const double d = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
      for (std::size_t i = 0; i < dim; ++i) v[i] -= d * b[i];
    }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm < 1e-6) continue;
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  return basis;
}

}  // namespace

FewShotDataset make_synthetic_planted(const PlantedSpec& spec, Rng& rng) {
  const std::size_t s = spec.img_size, p = spec.patch_size, ch = spec.channels;
  if (s < 8) throw ConfigError("planted images need img_size >= 8");
  if (p == 0 || p > s) throw ConfigError("patch size must be in 1..img_size");
  if (ch == 0 || spec.textures == 0) throw ConfigError("planted images need channels and textures");
  const std::size_t dim = ch * p * p;
  if (spec.classes.total() > dim) {
    throw ConfigError(std::to_string(spec.classes.total()) + " classes cannot have orthogonal " + std::to_string(dim) +
                      "-dimensional patches");
  }
  FewShotDataset data;
  data.patch_size = p;
  register_splits(data, spec.classes);

  auto patches = orthonormal(spec.classes.total(), dim, rng);
  for (auto& v : patches) scale_to_rms(v, spec.patch_gain);

  // Smooth textures: white noise through a 3x3 box filter (wrapping).
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::vector<double>> textures;
  for (std::size_t t = 0; t < spec.textures; ++t) {
    std::vector<double> raw(ch * s * s), smooth(ch * s * s, 0.0);
    for (double& x : raw) x = g(rng);
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < s; ++j)
          for (std::size_t di = 0; di < 3; ++di)
            for (std::size_t dj = 0; dj < 3; ++dj)
              smooth[(c * s + i) * s + j] += raw[(c * s + (i + s + di - 1) % s) * s + (j + s + dj - 1) % s] / 9.0;
    scale_to_rms(smooth, spec.texture_gain);
    textures.push_back(std::move(smooth));
  }

  std::uniform_int_distribution<std::size_t> pick_texture(0, spec.textures - 1), pick_pos(0, s - p);
  std::normal_distribution<double> noise(0.0, spec.noise > 0.0 ? spec.noise : 1.0);
  for (std::size_t id : data.all_classes()) {
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      std::vector<double> img = textures[pick_texture(rng)];
      const PatchLocation at{pick_pos(rng), pick_pos(rng)};
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t di = 0; di < p; ++di)
          for (std::size_t dj = 0; dj < p; ++dj)
            img[(c * s + at.row + di) * s + at.col + dj] = patches[id][(c * p + di) * p + dj];
      if (spec.noise > 0.0)
        for (double& x : img) x += noise(rng);
      data.add_item(Tensor({ch, s, s}, std::move(img)), id, at);
    }
  }
  return data;
}

FewShotDataset make_synthetic_features(const FeatureSpec& spec, Rng& rng) {
  if (spec.separation < 0.0 || spec.spread < 0.0) throw ConfigError("separation and spread must be >= 0");
  if (spec.channels == 0 || spec.h == 0 || spec.w == 0) throw ConfigError("feature extents must be positive");
  FewShotDataset data;
  register_splits(data, spec.classes);
  std::normal_distribution<double> g(0.0, 1.0);
  const std::size_t c = spec.channels, hw = spec.h * spec.w;
  for (std::size_t id : data.all_classes()) {
    std::vector<double> mean(c);
    double norm = 0.0;
    while (norm < 1e-9) {
      for (double& x : mean) x = g(rng);
      norm = std::sqrt(std::inner_product(mean.begin(), mean.end(), mean.begin(), 0.0));
    }
    for (double& x : mean) x *= spec.separation / norm;
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      std::vector<double> f(c * hw);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t m = 0; m < hw; ++m) f[ch * hw + m] = mean[ch] + spec.spread * g(rng);
      data.add_item(Tensor({c, spec.h, spec.w}, std::move(f)), id);
    }
  }
  return data;
}

// ---- on-disk format -------------------------------------------------------

void save_dataset(const FewShotDataset& data, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw LoadError("cannot create " + dir.string() + ": " + ec.message());
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw LoadError("cannot write " + (dir / "manifest.txt").string());
  if (data.patch_size) manifest << "patch_size " << data.patch_size << "\n";
  for (std::size_t id : data.all_classes()) {
    const auto& idx = data.items_of(id);
    manifest << "class " << id << " " << to_string(data.split_of(id)) << " " << idx.size() << "\n";
    TensorFile file;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const Item& it = data.item(idx[j]);
      file.tensors.emplace_back("item." + std::to_string(j), it.data);
      if (it.patch) {
        file.tensors.emplace_back("patch." + std::to_string(j),
                                  Tensor::vector({static_cast<double>(it.patch->row), static_cast<double>(it.patch->col)}));
      }
    }
    write_tensor_file(dir / ("class_" + std::to_string(id) + ".stan"), file);
  }
  if (!manifest) throw LoadError("write failed for the manifest in " + dir.string());
}

FewShotDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw LoadError("no manifest.txt in " + dir.string());
  FewShotDataset data;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream in(line);
    std::string kind;
    in >> kind;
    if (kind == "patch_size") {
      if (!(in >> data.patch_size)) throw LoadError("manifest line " + std::to_string(line_no) + ": bad patch_size");
      continue;
    }
    std::size_t id = 0, count = 0;
    std::string split;
    if (kind != "class" || !(in >> id >> split >> count))
      throw LoadError("manifest line " + std::to_string(line_no) + ": expected 'class <id> <split> <count>'");
    try {
      data.add_class(id, parse_split(split));
    } catch (const std::exception& e) {
      throw LoadError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    const TensorFile file = read_tensor_file(dir / ("class_" + std::to_string(id) + ".stan"));
    std::size_t items = 0;
    for (const auto& [name, t] : file.tensors)
      if (name.rfind("item.", 0) == 0) ++items;
    if (items != count) {
      throw LoadError("class " + std::to_string(id) + ": manifest says " + std::to_string(count) + " items, file has " +
                      std::to_string(items));
    }
    for (std::size_t j = 0; j < count; ++j) {
      const Tensor* t = file.find("item." + std::to_string(j));
      if (!t) throw LoadError("class " + std::to_string(id) + ": item." + std::to_string(j) + " missing");
      std::optional<PatchLocation> patch;
      if (const Tensor* at = file.find("patch." + std::to_string(j)))
        patch = PatchLocation{static_cast<std::size_t>((*at)[0]), static_cast<std::size_t>((*at)[1])};
      try {
        data.add_item(*t, id, patch);
      } catch (const DimensionError& e) {
        throw LoadError("class " + std::to_string(id) + " item." + std::to_string(j) + ": " + e.what());
      }
    }
  }
  return data;
}

}  // namespace stanet::episodic
