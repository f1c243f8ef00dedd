#include "stanet/harness/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "stanet/errors.hpp"
#include "stanet/numerics/gradcheck.hpp"
#include "stanet/numerics/graph.hpp"
#include "stanet/numerics/ops.hpp"
#include "stanet/numerics/optim.hpp"

namespace stanet::harness {

namespace {

// Independent seed streams derived from the run seed.
enum Stream : std::uint64_t { kInitStream = 0, kTrainStream = 1, kDataStream = 2, kEvalStream = 3, kShuffleStream = 4 };

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits = 4) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long n = std::stoull(v, &used);
    if (used == v.size() && v.find('-') == std::string::npos) return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ConfigError("'" + key + "' expects a boolean, got '" + v + "'");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
  if (!out) throw ConfigError("write failed for " + path.string());
}

// Creates dir, refusing to reuse an existing one.
void fresh_directory(const std::filesystem::path& dir) {
  if (std::filesystem::exists(dir))
    throw ContractError(dir.string() + " already exists; reports are never overwritten (choose another run_id)");
  std::filesystem::create_directories(dir);
}

std::vector<std::size_t> rows_for(const episodic::Episode& e, const std::map<std::size_t, std::size_t>& rows) {
  std::vector<std::size_t> out;
  for (std::size_t id : e.class_ids) out.push_back(rows.at(id));
  return out;
}

}  // namespace

// ---- configuration --------------------------------------------------------------

void RunConfig::apply(const std::map<std::string, std::string>& keys) {
  const auto model_keys = model::parse_key_values(model.to_text());
  std::map<std::string, std::string> merged = model_keys;
  for (const auto& [key, value] : keys) {
    if (model_keys.count(key)) {
      merged[key] = value;
      continue;
    }
    if (key == "way") way = to_size(key, value);
    else if (key == "shot") shot = to_size(key, value);
    else if (key == "queries") queries = to_size(key, value);
    else if (key == "epochs") epochs = to_size(key, value);
    else if (key == "episodes_per_epoch") episodes_per_epoch = to_size(key, value);
    else if (key == "episodes") eval_episodes = to_size(key, value);
    else if (key == "lr") lr = to_double(key, value);
    else if (key == "clip") clip = to_double(key, value);
    else if (key == "seed") seed = to_size(key, value);
    else if (key == "data") data = value;
    else if (key == "data_dir") data_dir = value;
    else if (key == "shuffle_labels") shuffle_labels = to_bool(key, value);
    else if (key == "out") out = value;
    else if (key == "checkpoint") checkpoint = value;
    else if (key == "run_id") run_id = value;
    else if (key == "threads") threads = to_size(key, value);
    else if (key == "planted.base_classes") planted.classes.base = to_size(key, value);
    else if (key == "planted.val_classes") planted.classes.val = to_size(key, value);
    else if (key == "planted.test_classes") planted.classes.test = to_size(key, value);
    else if (key == "planted.per_class") planted.per_class = to_size(key, value);
    else if (key == "planted.img_size") planted.img_size = to_size(key, value);
    else if (key == "planted.channels") planted.channels = to_size(key, value);
    else if (key == "planted.patch_size") planted.patch_size = to_size(key, value);
    else if (key == "planted.patch_gain") planted.patch_gain = to_double(key, value);
    else if (key == "planted.noise") planted.noise = to_double(key, value);
    else if (key == "planted.textures") planted.textures = to_size(key, value);
    else if (key == "planted.texture_gain") planted.texture_gain = to_double(key, value);
    else if (key == "features.base_classes") features.classes.base = to_size(key, value);
    else if (key == "features.val_classes") features.classes.val = to_size(key, value);
    else if (key == "features.test_classes") features.classes.test = to_size(key, value);
    else if (key == "features.per_class") features.per_class = to_size(key, value);
    else if (key == "features.channels") features.channels = to_size(key, value);
    else if (key == "features.h") features.h = to_size(key, value);
    else if (key == "features.w") features.w = to_size(key, value);
    else if (key == "features.separation") features.separation = to_double(key, value);
    else if (key == "features.spread") features.spread = to_double(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  model = model::ModelConfig::from_keys(merged);
}

void RunConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs (E1) must be at least 1");
  if (eval_episodes < 1) throw ConfigError("episodes (E2) must be at least 1");
  if (episodes_per_epoch < 1) throw ConfigError("episodes_per_epoch must be at least 1");
  if (way < 1 || shot < 1 || queries < 1) throw ConfigError("way, shot and queries must all be at least 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (!(clip >= 0.0)) throw ConfigError("clip must be non-negative");
  if (data != "planted" && data != "features" && data != "dir")
    throw ConfigError("data must be planted, features or dir, got '" + data + "'");
  if (data == "dir" && data_dir.empty()) throw ConfigError("data=dir needs data_dir");
  model::ModelConfig m = model;
  m.base_classes = std::max<std::size_t>(1, m.base_classes);
  m.validate();
}

std::string RunConfig::to_text() const {
  std::ostringstream o;
  o << model.to_text() << "way=" << way << "\nshot=" << shot << "\nqueries=" << queries << "\nepochs=" << epochs
    << "\nepisodes_per_epoch=" << episodes_per_epoch << "\nepisodes=" << eval_episodes << "\nlr=" << fmt(lr)
    << "\nclip=" << fmt(clip) << "\nseed=" << seed << "\ndata=" << data << "\ndata_dir=" << data_dir.string()
    << "\nshuffle_labels=" << (shuffle_labels ? 1 : 0) << "\nout=" << out.string()
    << "\ncheckpoint=" << checkpoint.string() << "\nrun_id=" << run_id << "\nthreads=" << threads
    << "\nplanted.base_classes=" << planted.classes.base << "\nplanted.val_classes=" << planted.classes.val
    << "\nplanted.test_classes=" << planted.classes.test << "\nplanted.per_class=" << planted.per_class
    << "\nplanted.img_size=" << planted.img_size << "\nplanted.channels=" << planted.channels
    << "\nplanted.patch_size=" << planted.patch_size << "\nplanted.patch_gain=" << fmt(planted.patch_gain)
    << "\nplanted.noise=" << fmt(planted.noise) << "\nplanted.textures=" << planted.textures
    << "\nplanted.texture_gain=" << fmt(planted.texture_gain) << "\nfeatures.base_classes=" << features.classes.base
    << "\nfeatures.val_classes=" << features.classes.val << "\nfeatures.test_classes=" << features.classes.test
    << "\nfeatures.per_class=" << features.per_class << "\nfeatures.channels=" << features.channels
    << "\nfeatures.h=" << features.h << "\nfeatures.w=" << features.w
    << "\nfeatures.separation=" << fmt(features.separation) << "\nfeatures.spread=" << fmt(features.spread) << "\n";
  return o.str();
}

std::filesystem::path RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? out / training_id() / "checkpoint.stan" : checkpoint;
}

namespace {

std::string short_hash(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf, 12);
}

}  // namespace

std::string RunConfig::resolved_run_id() const {
  if (!run_id.empty()) return run_id;
  RunConfig c = *this;
  c.threads = 0;  // parallelism does not change results
  return short_hash(c.to_text());
}

std::string RunConfig::training_id() const {
  if (!run_id.empty()) return run_id;
  const RunConfig defaults;
  RunConfig c = *this;
  c.threads = 0;
  c.checkpoint.clear();
  c.eval_episodes = defaults.eval_episodes;
  c.model.nta = defaults.model.nta;
  c.model.novel_epochs = defaults.model.novel_epochs;
  c.model.novel_lr = defaults.model.novel_lr;
  return short_hash(c.to_text());
}

std::size_t RunConfig::worker_count() const {
  if (threads > 0) return threads;
  if (const char* env = std::getenv("STANET_THREADS")) {
    try {
      const long n = std::stol(env);
      if (n > 0) return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("STANET_THREADS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  RunConfig c;
  try {
    c.apply(model::parse_key_values(buf.str()));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return c;
}

episodic::FewShotDataset build_dataset(const RunConfig& config) {
  Rng rng(mix_seed(config.seed, kDataStream));
  episodic::FewShotDataset data;
  if (config.data == "planted") data = episodic::make_synthetic_planted(config.planted, rng);
  else if (config.data == "features") data = episodic::make_synthetic_features(config.features, rng);
  else data = episodic::load_dataset(config.data_dir);
  if (config.shuffle_labels) {
    Rng shuffle(mix_seed(config.seed, kShuffleStream));
    data = data.shuffled_labels(shuffle);
  }
  return data;
}

model::ModelConfig model_for_data(const RunConfig& config, const episodic::FewShotDataset& data) {
  model::ModelConfig m = config.model;
  m.base_classes = data.classes(episodic::Split::kBase).size();
  const Shape& shape = data.item_shape();
  if (shape.size() != 3) throw ConfigError("items must be [ch x H x W]");
  if (config.data == "features") m.backbone.pass_through = true;
  if (m.backbone.pass_through) m.backbone.channels = shape[0];
  else m.backbone.in_channels = shape[0];
  if (m.base_classes == 0) throw ConfigError("the dataset has no base classes to train on");
  m.validate();
  return m;
}

std::map<std::size_t, std::size_t> base_class_rows(const episodic::FewShotDataset& data) {
  std::map<std::size_t, std::size_t> rows;
  for (std::size_t id : data.classes(episodic::Split::kBase)) rows.emplace(id, rows.size());
  return rows;
}

// ---- Step 1 -------------------------------------------------------------------

constexpr double kMinAlpha = 0.1;

TrainResult train_model(const RunConfig& config, const episodic::FewShotDataset& data) {
  config.validate();
  Rng init(mix_seed(config.seed, kInitStream));
  TrainResult result{model::StanetParams::create(model_for_data(config, data), init), {}};
  model::StanetParams& params = result.params;
  const auto rows = base_class_rows(data);
  params.set_requires_grad(true);
  std::vector<Tensor> trainable = params.trainable();

  Rng rng(mix_seed(config.seed, kTrainStream));
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochLoss sums;
    sums.epoch = epoch;
    for (std::size_t step = 0; step < config.episodes_per_epoch; ++step) {
      episodic::Episode e =
          episodic::sample_episode(data, episodic::Split::kBase, config.way, config.shot, config.queries, rng);
      const std::vector<std::size_t> base_rows = rows_for(e, rows);
      Graph graph;
      GraphScope scope(graph);
      for (Tensor& t : trainable) t.zero_grad();
      model::Step1Output out;
      try {
        out = model::stanet_forward_step1(e, params, base_rows);
      } catch (const NumericError& err) {
        throw NumericError("epoch " + std::to_string(epoch) + " step " + std::to_string(step) + ": " + err.what());
      }
      const double total = out.total.item();
      if (!std::isfinite(total)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                           " (l_m " + fmt(out.l_m.item()) + ", l_g " + fmt(out.l_g.item()) + ")");
      }
      graph.backward(out.total);
      if (config.clip > 0.0) clip_grad_norm(trainable, config.clip);
      sgd_step(trainable, config.lr);
      // w_j = 1/(2 alpha^2) has a pole at 0; keep a step from crossing it.
      for (Tensor* a : {&params.loss.alpha_g, &params.loss.alpha_r}) a->data()[0] = std::max(a->data()[0], kMinAlpha);
      sums.total += total;
      sums.l_m += out.l_m.item();
      sums.l_g += out.l_g.item();
      if (out.l_r.defined()) sums.l_r += out.l_r.item();
      sums.metric_accuracy += out.metric_accuracy;
    }
    const double n = static_cast<double>(config.episodes_per_epoch);
    sums.total /= n;
    sums.l_m /= n;
    sums.l_g /= n;
    sums.l_r /= n;
    sums.metric_accuracy /= n;
    result.curve.push_back(sums);
  }
  params.set_requires_grad(false);
  return result;
}

TrainResult run_train(const RunConfig& config) {
  config.validate();
  const episodic::FewShotDataset data = build_dataset(config);
  const auto dir = config.out / config.training_id() / "train";
  fresh_directory(dir);
  TrainResult result = train_model(config, data);

  std::ostringstream csv;
  csv << "epoch,total,l_m,l_g,l_r,metric_accuracy\n";
  for (const EpochLoss& e : result.curve)
    csv << e.epoch << "," << fmt(e.total) << "," << fmt(e.l_m) << "," << fmt(e.l_g) << "," << fmt(e.l_r) << ","
        << fmt(e.metric_accuracy) << "\n";
  write_text(dir / "loss.csv", csv.str());
  write_text(dir / "config.txt", config.to_text());
  const auto ckpt = config.checkpoint_path();
  if (ckpt.has_parent_path()) std::filesystem::create_directories(ckpt.parent_path());
  model::save_checkpoint(ckpt, result.params, true);
  return result;
}

// ---- Step 2 -------------------------------------------------------------------

MetricsReport MetricsReport::from_accuracies(std::vector<double> accuracies) {
  MetricsReport r;
  r.accuracies = std::move(accuracies);
  const double n = static_cast<double>(r.accuracies.size());
  if (r.accuracies.empty()) return r;
  double sum = 0.0;
  for (double a : r.accuracies) sum += a;
  r.mean = sum / n;
  if (r.accuracies.size() > 1) {
    double sq = 0.0;
    for (double a : r.accuracies) sq += (a - r.mean) * (a - r.mean);
    r.ci_half_width = 1.96 * std::sqrt(sq / (n - 1.0)) / std::sqrt(n);
  }
  return r;
}

std::string MetricsReport::summary() const {
  std::ostringstream o;
  o << "run_id " << run_id << "\n"
    << "episodes " << accuracies.size() << "\n"
    << "accuracy " << fixed(100.0 * mean, 2) << "% +- " << fixed(100.0 * ci_half_width, 2) << "%\n"
    << "mean " << fmt(mean) << "\n"
    << "ci95_half_width " << fmt(ci_half_width) << "\n"
    << "\n# config\n"
    << config_text;
  return o.str();
}

PairedDifference paired_difference(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("paired_difference: lists differ in length");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  MetricsReport r = MetricsReport::from_accuracies(std::move(d));
  return {r.mean, r.ci_half_width};
}

std::vector<double> evaluate_episodes(const model::StanetParams& params, const episodic::FewShotDataset& data,
                                      const RunConfig& config) {
  const std::uint64_t before = params.hash();
  const std::size_t n = config.eval_episodes;
  std::vector<double> acc(n, 0.0);
  const std::uint64_t stream = mix_seed(config.seed, kEvalStream);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&]() {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        Rng rng(mix_seed(stream, i));
        episodic::Episode e =
            episodic::sample_episode(data, episodic::Split::kTest, config.way, config.shot, config.queries, rng);
        acc[i] = model::stanet_infer_step2(e, params).accuracy;
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  const std::size_t workers = std::min(config.worker_count(), n);
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  if (params.hash() != before) throw VerificationError("Step 1 parameters changed during evaluation");
  return acc;
}

model::StanetParams load_for_eval(const RunConfig& config, const std::filesystem::path& checkpoint) {
  model::LoadedCheckpoint loaded = model::load_checkpoint(checkpoint);
  if (!loaded.step1_complete)
    throw ContractError(checkpoint.string() + " lacks the Step-1-complete flag; run train first");
  loaded.params.config.nta = config.model.nta;
  loaded.params.config.novel_epochs = config.model.novel_epochs;
  loaded.params.config.novel_lr = config.model.novel_lr;
  return loaded.params;
}

void write_report(const MetricsReport& report, const std::filesystem::path& dir) {
  std::ostringstream csv;
  csv << "episode_idx,accuracy\n";
  for (std::size_t i = 0; i < report.accuracies.size(); ++i) csv << i << "," << fmt(report.accuracies[i]) << "\n";
  write_text(dir / "metrics.csv", csv.str());
  write_text(dir / "summary.txt", report.summary());
  write_text(dir / "runtime.txt", "seconds " + fixed(report.seconds, 3) + "\n");
}

MetricsReport run_eval(const RunConfig& config, const std::filesystem::path& checkpoint) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  model::StanetParams params = load_for_eval(config, checkpoint);
  const episodic::FewShotDataset data = build_dataset(config);
  const auto dir = config.out / config.resolved_run_id() / "eval";
  fresh_directory(dir);
  MetricsReport report = MetricsReport::from_accuracies(evaluate_episodes(params, data, config));
  report.run_id = config.resolved_run_id();
  report.config_text = config.to_text();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_report(report, dir);
  return report;
}

// ---- gradient checks ----------------------------------------------------------

namespace {

constexpr int kTrials = 5;

using attention::SpatialFormerParams;

// Tensor bumped away from zero so kinks and ties are not straddled by the
// finite-difference step.
Tensor away_from_zero(Shape shape, Rng& rng) {
  Tensor t = randn(std::move(shape), rng);
  for (double& v : t.data())
    if (std::abs(v) < 0.05) v += v < 0 ? -0.05 : 0.05;
  return t;
}

SpatialFormerParams random_layer(std::size_t c, const attention::LayerOptions& options, Rng& rng) {
  SpatialFormerParams p = SpatialFormerParams::create(c, options, rng, 0.3);
  p.ffn_b1 = randn(p.ffn_b1.shape(), rng, 0.5);
  p.ffn_b2 = randn(p.ffn_b2.shape(), rng, 0.5);
  return p;
}

// Layer weights from xs[offset..], in named_parameters order.
SpatialFormerParams layer_from(const SpatialFormerParams& base, const std::vector<Tensor>& xs, std::size_t offset) {
  SpatialFormerParams p = base;
  std::size_t i = offset;
  if (p.options.use_projections) {
    p.w_q = xs[i++];
    p.w_k = xs[i++];
    p.w_v = xs[i++];
  }
  p.ffn_w1 = xs[i++];
  p.ffn_b1 = xs[i++];
  p.ffn_w2 = xs[i++];
  p.ffn_b2 = xs[i++];
  return p;
}

void append(std::vector<Tensor>& xs, const SpatialFormerParams& p) {
  for (const Tensor& t : p.parameters()) xs.push_back(t);
}

GradcheckEntry simple(std::string name, std::vector<Shape> shapes, TensorFn fn, bool positive = false) {
  return {std::move(name), 1e-4, [shapes, fn, positive](Rng& rng) {
            double worst = 0.0;
            for (int t = 0; t < kTrials; ++t) {
              std::vector<Tensor> in;
              for (const Shape& s : shapes) {
                Tensor x = away_from_zero(s, rng);
                if (positive)
                  for (double& v : x.data()) v = std::abs(v) + 0.5;
                in.push_back(x);
              }
              worst = std::max(worst, check_gradients(fn, in, rng).max_relative_error);
            }
            return worst;
          }};
}

// A layer-based op: inputs are the given feature shapes followed by the
// layer weights.
GradcheckEntry layered(std::string name, std::vector<Shape> shapes, std::size_t layers,
                       std::function<Tensor(const std::vector<Tensor>&, const std::vector<SpatialFormerParams>&)> fn,
                       attention::LayerOptions options = {}) {
  const std::size_t c = 3;
  return {std::move(name), 1e-4, [=](Rng& rng) {
            double worst = 0.0;
            for (int t = 0; t < kTrials; ++t) {
              std::vector<Tensor> in;
              for (const Shape& s : shapes) in.push_back(randn(s, rng));
              std::vector<SpatialFormerParams> base;
              for (std::size_t l = 0; l < layers; ++l) {
                base.push_back(random_layer(c, options, rng));
                append(in, base.back());
              }
              const std::size_t per_layer = base.empty() ? 0 : base.front().parameters().size();
              auto op = [&](const std::vector<Tensor>& xs) {
                std::vector<SpatialFormerParams> ls;
                for (std::size_t l = 0; l < layers; ++l) ls.push_back(layer_from(base[l], xs, shapes.size() + l * per_layer));
                return fn(xs, ls);
              };
              worst = std::max(worst, check_gradients(op, in, rng).max_relative_error);
            }
            return worst;
          }};
}

sta::StaParams sta_from(const std::vector<SpatialFormerParams>& ls) {
  sta::StaParams s;
  s.sfsa_layer = ls[0];
  s.sfta_layer = ls[1];
  if (ls.size() > 2) {
    s.sfsa_reverse = ls[2];
    s.share_sfsa = false;
  }
  return s;
}

}  // namespace

std::vector<GradcheckEntry> default_gradcheck_registry(const RunConfig& config) {
  using V = std::vector<Tensor>;
  using L = std::vector<SpatialFormerParams>;
  static const std::vector<std::size_t> labels = {2, 0, 1};
  std::vector<GradcheckEntry> r;
  r.push_back(simple("matmul", {{3, 4}, {4, 2}}, [](const V& x) { return ops::matmul(x[0], x[1]); }));
  r.push_back(simple("matmul_nt", {{3, 4}, {5, 4}}, [](const V& x) { return ops::matmul_nt(x[0], x[1]); }));
  r.push_back(simple("transpose", {{3, 4}}, [](const V& x) { return ops::transpose(x[0]); }));
  r.push_back(simple("add", {{2, 3}, {2, 3}}, [](const V& x) { return ops::add(x[0], x[1]); }));
  r.push_back(simple("sub", {{2, 3}, {2, 3}}, [](const V& x) { return ops::sub(x[0], x[1]); }));
  r.push_back(simple("mul", {{2, 3}, {2, 3}}, [](const V& x) { return ops::mul(x[0], x[1]); }));
  r.push_back(simple("scale", {{2, 3}}, [](const V& x) { return ops::scale(x[0], -1.7); }));
  r.push_back(simple("add_scalar", {{2, 3}}, [](const V& x) { return ops::add_scalar(x[0], 0.3); }));
  r.push_back(simple("add_n", {{2, 3}, {2, 3}}, [](const V& x) { return ops::add_n({x[0], x[1], x[0]}); }));
  r.push_back(simple("relu", {{3, 5}}, [](const V& x) { return ops::relu(x[0]); }));
  r.push_back(simple("log", {{4}}, [](const V& x) { return ops::log(x[0]); }, true));
  r.push_back(simple("square", {{4}}, [](const V& x) { return ops::square(x[0]); }));
  r.push_back(simple("reciprocal", {{4}}, [](const V& x) { return ops::reciprocal(x[0]); }, true));
  r.push_back(simple("sum", {{3, 5}}, [](const V& x) { return ops::sum(x[0]); }));
  r.push_back(simple("mean", {{3, 5}}, [](const V& x) { return ops::mean(x[0]); }));
  r.push_back(simple("softmax_rows", {{3, 5}}, [](const V& x) { return ops::softmax_rows(x[0]); }));
  r.push_back(simple("log_softmax_rows", {{3, 5}}, [](const V& x) { return ops::log_softmax_rows(x[0]); }));
  r.push_back(simple("cross_entropy", {{3, 4}}, [](const V& x) { return ops::cross_entropy(x[0], labels); }));
  r.push_back(simple("add_row_bias", {{3, 4}, {4}}, [](const V& x) { return ops::add_row_bias(x[0], x[1]); }));
  r.push_back(simple("scale_rows", {{3, 4}, {3}}, [](const V& x) { return ops::scale_rows(x[0], x[1]); }));
  r.push_back(simple("layer_norm_rows", {{3, 5}}, [](const V& x) { return ops::layer_norm_rows(x[0]); }));
  r.push_back(simple("patch_cosine", {{6, 4}, {6, 4}}, [](const V& x) { return ops::patch_cosine(x[0], x[1]); }));
  r.push_back(simple("broadcast_mul_spatial", {{3, 2, 2}, {2, 2}},
                     [](const V& x) { return ops::broadcast_mul_spatial(x[0], x[1]); }));
  r.push_back(simple("broadcast_mul_channel", {{3, 2, 2}, {3}},
                     [](const V& x) { return ops::broadcast_mul_channel(x[0], x[1]); }));
  r.push_back(simple("global_avg_pool", {{3, 2, 2}}, [](const V& x) { return ops::global_avg_pool(x[0]); }));
  r.push_back(simple("conv2d", {{2, 4, 4}, {3, 2, 3, 3}, {3}}, [](const V& x) { return ops::conv2d(x[0], x[1], x[2], 1); }));
  r.push_back(simple("max_pool2", {{2, 4, 4}}, [](const V& x) { return ops::max_pool2(x[0]); }));
  r.push_back(simple("reshape", {{3, 4}}, [](const V& x) { return ops::reshape(x[0], {6, 2}); }));
  r.push_back(simple("concat", {{2, 3}, {1, 3}}, [](const V& x) { return ops::concat({x[0], x[1]}); }));
  r.push_back(simple("to_positions", {{3, 2, 2}}, [](const V& x) { return ops::to_positions(x[0]); }));
  r.push_back(simple("from_positions", {{4, 3}}, [](const V& x) { return ops::from_positions(x[0], 2, 2); }));
  r.push_back(simple("l2_normalize", {{5}}, [](const V& x) { return ops::l2_normalize(x[0]); }));

  r.push_back(simple("attention_core", {{4, 3}, {5, 3}, {5, 3}},
                     [](const V& x) { return attention::attention_core(x[0], x[1], x[2]); }));
  r.push_back(simple("spatial_attention", {{4, 3}, {4, 3}},
                     [](const V& x) { return attention::spatial_attention(x[0], x[1]); }));
  r.push_back(layered("feed_forward", {{4, 3}}, 1, [](const V& x, const L& l) { return attention::feed_forward(x[0], l[0]); }));
  r.push_back(layered("self_attention", {{3, 2, 2}}, 1,
                      [](const V& x, const L& l) { return attention::self_attention(x[0], l[0]); }));
  r.push_back(layered("cross_attention", {{3, 2, 2}, {3, 3, 2}}, 1,
                      [](const V& x, const L& l) { return attention::cross_attention(x[0], x[1], l[0]); }));
  r.push_back(layered("align_prototype", {{3, 2, 2}, {3, 2, 2}, {3, 2, 2}}, 1, [](const V& x, const L& l) {
    return attention::align_prototype(x[0], {x[1], x[2]}, l[0]);
  }));
  r.push_back(layered("spatialformer", {{3, 2, 2}, {3, 5}}, 1,
                      [](const V& x, const L& l) { return attention::spatialformer(x[0], x[1], l[0]); }));
  attention::LayerOptions post;
  post.normalization = attention::Normalization::kAfterFfn;
  post.logit_scale = true;
  r.push_back(layered("spatialformer_post_norm", {{3, 2, 2}, {3, 5}}, 1,
                      [](const V& x, const L& l) { return attention::spatialformer(x[0], x[1], l[0]); }, post));
  r.push_back(layered("sfsa", {{3, 2, 2}, {3, 2, 2}}, 2, [](const V& x, const L& l) {
    auto [p, q] = sta::sfsa(x[0], x[1], sta_from(l));
    return ops::concat({p, q});
  }));
  r.push_back(layered("sfsa_unshared", {{3, 2, 2}, {3, 2, 2}}, 3, [](const V& x, const L& l) {
    auto [p, q] = sta::sfsa(x[0], x[1], sta_from(l));
    return ops::concat({p, q});
  }));
  r.push_back(layered("sfta", {{3, 2, 2}, {3, 2, 2}, {4, 3}}, 2, [](const V& x, const L& l) {
    auto [p, q] = sta::sfta(x[0], x[1], x[2], sta_from(l));
    return ops::concat({p, q});
  }));
  r.push_back(layered("sta", {{3, 2, 2}, {3, 2, 2}, {4, 3}}, 2, [](const V& x, const L& l) {
    auto [p, q] = sta::sta(x[0], x[1], x[2], sta_from(l));
    return ops::concat({p, q});
  }));
  r.push_back(layered("sfea", {{3, 2, 2}, {4, 3}}, 2,
                      [](const V& x, const L& l) { return sta::sfea(x[0], x[1], sta_from(l)); }));
  r.push_back(simple("nta_rectify", {{3, 2, 2}, {3}}, [](const V& x) { return nta::nta_rectify(x[0], x[1]); }));
  r.push_back(simple("prototype", {{3, 2, 2}, {3, 2, 2}, {3, 2, 2}},
                     [](const V& x) { return model::prototype({x[0], x[1], x[2]}); }));
  r.push_back(simple("metric_classify", {{3, 2, 2}, {3, 2, 2}, {3, 2, 2}, {3, 2, 2}, {1}}, [](const V& x) {
    return model::metric_classify({x[0], x[1]}, {x[2], x[3]}, x[4]);
  }));
  r.push_back(simple("global_classify", {{3, 2, 2}, {5, 3}, {5}}, [](const V& x) {
    model::ClassifierWeights h;
    h.w_g = x[1];
    h.b_g = x[2];
    return model::global_classify(x[0], h);
  }));
  r.push_back(simple(
      "multitask_loss", {{1}, {1}, {1}, {1}, {1}},
      [](const V& x) {
        model::LossWeights w;
        w.alpha_g = x[3];
        w.alpha_r = x[4];
        return model::multitask_loss(x[0], x[1], x[2], w);
      },
      true));
  r.push_back(simple("fuse_predictions", {{4}, {4}}, [](const V& x) { return model::fuse_predictions(x[0], x[1]); }));

  const model::AttentionVariant variant = config.model.variant;
  const attention::LayerOptions options = config.model.layer;
  r.push_back({"stanet_forward_step1 (16 params)", 1e-3, [variant, options](Rng& rng) {
                 double worst = 0.0;
                 for (int t = 0; t < 3; ++t) {
                   model::ModelConfig m;
                   m.variant = variant;
                   m.layer = options;
                   m.backbone.in_channels = 3;
                   m.backbone.channels = 4;
                   m.backbone.blocks = 2;
                   m.backbone.pooled = 1;
                   m.base_classes = 5;
                   model::StanetParams p = model::StanetParams::create(m, rng);
                   for (auto& [name, x] : p.named_parameters()) {
                     if (name.rfind("sta.", 0) != 0) continue;
                     Tensor noise = randn(x.shape(), rng, 0.3);
                     for (std::size_t i = 0; i < x.numel(); ++i) x[i] += noise[i];
                   }
                   for (Tensor& b : p.backbone.biases) b = randn(b.shape(), rng, 0.1);
                   episodic::Episode e;
                   e.way = 3;
                   e.shot = 1;
                   for (std::size_t k = 0; k < 3; ++k) {
                     e.class_ids.push_back(k);
                     e.support.push_back(randn({3, 8, 8}, rng));
                     e.support_labels.push_back(k);
                     e.query.push_back(randn({3, 8, 8}, rng));
                     e.query_labels.push_back(k);
                   }
                   const std::vector<std::size_t> rows{0, 3, 1};
                   worst = std::max(worst, model::step1_gradcheck(e, p, rows, 16, rng));
                 }
                 return worst;
               }});
  return r;
}

std::vector<GradcheckRow> run_gradcheck(const std::vector<GradcheckEntry>& registry, std::uint64_t seed) {
  std::vector<GradcheckRow> rows;
  for (std::size_t i = 0; i < registry.size(); ++i) {
    Rng rng(mix_seed(seed, i));
    const double err = registry[i].run(rng);
    rows.push_back({registry[i].name, err, registry[i].threshold, std::isfinite(err) && err < registry[i].threshold});
  }
  return rows;
}

std::string format_gradcheck(const std::vector<GradcheckRow>& rows) {
  std::size_t width = 2;
  for (const auto& r : rows) width = std::max(width, r.name.size());
  std::ostringstream o;
  char line[256];
  std::snprintf(line, sizeof(line), "%-*s  %-12s  %-9s  %s\n", static_cast<int>(width), "op", "max_rel_err", "threshold",
                "result");
  o << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%-*s  %-12.3e  %-9.0e  %s\n", static_cast<int>(width), r.name.c_str(), r.error,
                  r.threshold, r.passed ? "pass" : "FAIL");
    o << line;
  }
  return o.str();
}

// ---- attention dumps ----------------------------------------------------------

AttentionDump collect_attention(const model::StanetParams& params, const episodic::FewShotDataset& data,
                                const RunConfig& config, std::uint64_t episode_seed) {
  NoGradScope no_grad;
  Rng rng(episode_seed);
  AttentionDump dump;
  dump.episode = episodic::sample_episode(data, episodic::Split::kTest, config.way, config.shot, config.queries, rng);
  const episodic::Episode& e = dump.episode;
  std::vector<Tensor> protos;
  for (std::size_t k = 0; k < e.way; ++k) {
    std::vector<Tensor> feats;
    for (const Tensor& s : e.support_of(k)) feats.push_back(params.backbone.forward(s));
    protos.push_back(model::prototype(feats));
  }
  dump.h = protos.front().dim(1);
  dump.w = protos.front().dim(2);
  std::vector<Tensor> queries;
  for (const Tensor& q : e.query) queries.push_back(params.backbone.forward(q));

  auto put = [&](const std::string& module, std::size_t k, std::size_t j, const Tensor& map) {
    if (!map.defined()) return;
    auto& grid = dump.maps[module];
    grid.resize(e.way, std::vector<std::vector<double>>(queries.size()));
    grid[k][j].assign(map.data().begin(), map.data().end());
  };
  for (std::size_t k = 0; k < e.way; ++k) {
    for (std::size_t j = 0; j < queries.size(); ++j) {
      model::PairMaps m = model::attention_maps(protos[k], queries[j], params);
      put("sfsa_prototype", k, j, m.sfsa_prototype);
      put("sfsa_query", k, j, m.sfsa_query);
      put("sfta_prototype", k, j, m.sfta_prototype);
      put("sfta_query", k, j, m.sfta_query);
    }
  }
  return dump;
}

std::vector<std::filesystem::path> write_attention(const AttentionDump& dump, const std::filesystem::path& dir) {
  const auto maps_dir = dir / "maps";
  std::filesystem::create_directories(maps_dir);
  std::vector<std::filesystem::path> written;
  for (const auto& [module, grid] : dump.maps) {
    for (std::size_t k = 0; k < grid.size(); ++k) {
      for (std::size_t j = 0; j < grid[k].size(); ++j) {
        const auto& v = grid[k][j];
        const std::string stem = module + "_class" + std::to_string(k) + "_query" + std::to_string(j);
        std::ostringstream csv;
        for (std::size_t r = 0; r < dump.h; ++r) {
          for (std::size_t c = 0; c < dump.w; ++c) csv << (c ? "," : "") << fmt(v[r * dump.w + c]);
          csv << "\n";
        }
        write_text(maps_dir / (stem + ".csv"), csv.str());
        std::string pgm = "P5\n" + std::to_string(dump.w) + " " + std::to_string(dump.h) + "\n255\n";
        for (double x : v) {
          const double level = std::clamp((x + 1.0) * 0.5, 0.0, 1.0) * 255.0;
          pgm.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(level))));
        }
        write_text(maps_dir / (stem + ".pgm"), pgm);
        written.push_back(maps_dir / (stem + ".csv"));
        written.push_back(maps_dir / (stem + ".pgm"));
      }
    }
  }
  return written;
}

std::vector<int> patch_mask(const episodic::Item& item, std::size_t patch_size, std::size_t img_size, std::size_t h,
                            std::size_t w) {
  if (!item.patch) throw ContractError("item has no planted patch");
  if (h == 0 || w == 0 || img_size % h != 0 || img_size % w != 0)
    throw DimensionError("feature grid does not tile the image evenly");
  const std::size_t sh = img_size / h, sw = img_size / w;
  auto overlap = [](std::size_t a0, std::size_t a1, std::size_t b0, std::size_t b1) {
    const std::size_t lo = std::max(a0, b0), hi = std::min(a1, b1);
    return hi > lo ? hi - lo : 0;
  };
  std::vector<int> mask(h * w, 0);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t area = overlap(r * sh, (r + 1) * sh, item.patch->row, item.patch->row + patch_size) *
                               overlap(c * sw, (c + 1) * sw, item.patch->col, item.patch->col + patch_size);
      if (area == 0) mask[r * w + c] = -1;
      else if (2 * area >= sh * sw) mask[r * w + c] = 1;
    }
  }
  return mask;
}

// ---- ablation -------------------------------------------------------------------

std::vector<AblationRow> ablate(const RunConfig& config, const std::vector<std::string>& labels) {
  if (labels.empty()) throw ConfigError("ablation needs at least one variant");
  config.validate();
  const episodic::FewShotDataset data = build_dataset(config);
  std::vector<AblationRow> rows;
  for (const std::string& label : labels) {
    RunConfig c = config;
    std::string name = label;
    if (const auto colon = label.find(':'); colon != std::string::npos) {
      name = label.substr(0, colon);
      const std::string flag = label.substr(colon + 1);
      if (flag == "nta") c.model.nta = true;
      else if (flag == "nonta") c.model.nta = false;
      else throw ConfigError("ablation label '" + label + "': suffix must be :nta or :nonta");
    }
    c.model.variant = model::parse_variant(name);
    const auto start = std::chrono::steady_clock::now();
    TrainResult trained = train_model(c, data);
    AblationRow row;
    row.label = label;
    row.report = MetricsReport::from_accuracies(evaluate_episodes(trained.params, data, c));
    row.report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    row.report.config_text = c.to_text();
    row.report.run_id = c.resolved_run_id();
    rows.push_back(std::move(row));
  }
  for (AblationRow& r : rows) r.vs_first = paired_difference(r.report.accuracies, rows.front().report.accuracies);
  return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream o;
  char line[256];
  std::snprintf(line, sizeof(line), "%-16s  %-9s  %-9s  %-12s  %-9s\n", "variant", "mean", "ci95", "diff_vs_first",
                "diff_ci95");
  o << line;
  for (const AblationRow& r : rows) {
    std::snprintf(line, sizeof(line), "%-16s  %-9.4f  %-9.4f  %-+12.4f  %-9.4f\n", r.label.c_str(), r.report.mean,
                  r.report.ci_half_width, r.vs_first.mean, r.vs_first.ci_half_width);
    o << line;
  }
  return o.str();
}

std::vector<AblationRow> run_ablation(const RunConfig& config, const std::vector<std::string>& labels) {
  config.validate();
  const auto dir = config.out / config.resolved_run_id() / "ablation";
  fresh_directory(dir);
  std::vector<AblationRow> rows = ablate(config, labels);
  std::ostringstream csv;
  csv << "variant,episode_idx,accuracy\n";
  for (const AblationRow& r : rows)
    for (std::size_t i = 0; i < r.report.accuracies.size(); ++i)
      csv << r.label << "," << i << "," << fmt(r.report.accuracies[i]) << "\n";
  write_text(dir / "ablation.csv", csv.str());
  write_text(dir / "summary.txt", format_ablation(rows) + "\n# config\n" + config.to_text());
  return rows;
}

}  // namespace stanet::harness
