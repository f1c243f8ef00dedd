// One pass/fail line per acceptance criterion. Exit status 0 only if every
// selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "oracles.hpp"
#include "stanet/harness/harness.hpp"
#include "stanet/model/model.hpp"
#include "stanet/nta/nta.hpp"
#include "stanet/numerics/ops.hpp"
#include "stanet/sta/sta.hpp"

using namespace stanet;
using harness::RunConfig;

namespace {

constexpr double kOracleTol = 1e-12;

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), pattern, args...);
  return buf;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("stanet_acceptance_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

attention::SpatialFormerParams random_layer(std::size_t c, Rng& rng, bool logit_scale = false) {
  attention::LayerOptions o;
  o.logit_scale = logit_scale;
  return attention::SpatialFormerParams::create(c, o, rng, 0.3);
}

sta::StaParams random_sta(std::size_t c, Rng& rng, bool share) {
  attention::LayerOptions o;
  sta::StaParams p = sta::StaParams::create(c, o, rng, 0.3, share);
  p.w_e = randn({6, c}, rng);
  return p;
}

oracle::Vec sf_oracle(const Tensor& f, const oracle::Mat& ref_rows, const attention::SpatialFormerParams& layer) {
  return oracle::unpositions(oracle::spatialformer(oracle::positions(f), ref_rows, oracle::layer_from(layer)));
}

oracle::Vec plus(oracle::Vec a, const oracle::Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

// ---- 1: forward operations against loop oracles ---------------------------

Outcome oracle_equivalence() {
  constexpr int kInstances = 10;
  std::vector<std::pair<std::string, std::function<double(Rng&)>>> ops_under_test;
  auto add = [&](std::string name, std::function<double(Rng&)> fn) { ops_under_test.emplace_back(name, fn); };

  add("matmul", [](Rng& r) {
    Tensor a = randn({3, 4}, r), b = randn({4, 2}, r);
    return oracle::max_abs_diff(ops::matmul(a, b), oracle::matmul(oracle::to_mat(a), oracle::to_mat(b)).v);
  });
  add("softmax_rows", [](Rng& r) {
    Tensor x = randn({4, 5}, r, 3.0);
    return oracle::max_abs_diff(ops::softmax_rows(x), oracle::softmax_rows(oracle::to_mat(x)).v);
  });
  add("patch_cosine", [](Rng& r) {
    Tensor q = randn({6, 4}, r), a = randn({6, 4}, r);
    return oracle::max_abs_diff(ops::patch_cosine(q, a), oracle::patch_cosine(oracle::to_mat(q), oracle::to_mat(a)));
  });
  add("broadcast_mul_spatial", [](Rng& r) {
    Tensor f = randn({3, 2, 4}, r), s = randn({8}, r);
    return oracle::max_abs_diff(ops::broadcast_mul_spatial(f, s),
                                oracle::broadcast_mul_spatial(oracle::to_vec(f), 3, oracle::to_vec(s)));
  });
  add("broadcast_mul_channel", [](Rng& r) {
    Tensor f = randn({3, 2, 4}, r), v = randn({3}, r);
    return oracle::max_abs_diff(ops::broadcast_mul_channel(f, v),
                                oracle::broadcast_mul_channel(oracle::to_vec(f), 3, oracle::to_vec(v)));
  });
  add("attention_core", [](Rng& r) {
    Tensor q = randn({5, 4}, r), k = randn({7, 4}, r), v = randn({7, 4}, r);
    double worst = 0.0;
    for (bool s : {false, true})
      worst = std::max(worst, oracle::max_abs_diff(attention::attention_core(q, k, v, s),
                                                   oracle::attention_core(oracle::to_mat(q), oracle::to_mat(k),
                                                                          oracle::to_mat(v), s)
                                                       .v));
    return worst;
  });
  add("spatial_attention", [](Rng& r) {
    Tensor q = randn({6, 4}, r), a = randn({6, 4}, r);
    return oracle::max_abs_diff(attention::spatial_attention(q, a),
                                oracle::spatial_attention(oracle::to_mat(q), oracle::to_mat(a)).v);
  });
  add("spatialformer", [](Rng& r) {
    Tensor f = randn({4, 3, 3}, r), ref = randn({4, 5}, r);
    auto layer = random_layer(4, r, r() % 2 == 0);
    return oracle::max_abs_diff(attention::spatialformer(f, ref, layer),
                                sf_oracle(f, oracle::transpose(oracle::to_mat(ref)), layer));
  });
  add("sfsa", [](Rng& r) {
    Tensor p = randn({4, 3, 3}, r), q = randn({4, 3, 3}, r);
    const bool share = r() % 2 == 0;
    auto params = random_sta(4, r, share);
    auto [a, b] = sta::sfsa(p, q, params);
    const auto& reverse = share ? params.sfsa_layer : params.sfsa_reverse;
    return std::max(oracle::max_abs_diff(a, sf_oracle(p, oracle::positions(q), params.sfsa_layer)),
                    oracle::max_abs_diff(b, sf_oracle(q, oracle::positions(p), reverse)));
  });
  add("sfta", [](Rng& r) {
    Tensor p = randn({4, 3, 3}, r), q = randn({4, 3, 3}, r), w = randn({6, 4}, r);
    auto params = random_sta(4, r, true);
    auto [a, b] = sta::sfta(p, q, w, params);
    const auto ref = oracle::to_mat(w);
    return std::max(oracle::max_abs_diff(a, sf_oracle(p, ref, params.sfta_layer)),
                    oracle::max_abs_diff(b, sf_oracle(q, ref, params.sfta_layer)));
  });
  add("sta", [](Rng& r) {
    Tensor p = randn({4, 3, 3}, r), q = randn({4, 3, 3}, r), w = randn({6, 4}, r);
    auto params = random_sta(4, r, true);
    auto [a, b] = sta::sta(p, q, w, params);
    const auto ref = oracle::to_mat(w);
    auto pa = plus(sf_oracle(p, oracle::positions(q), params.sfsa_layer), sf_oracle(p, ref, params.sfta_layer));
    auto qa = plus(sf_oracle(q, oracle::positions(p), params.sfsa_layer), sf_oracle(q, ref, params.sfta_layer));
    return std::max(oracle::max_abs_diff(a, pa), oracle::max_abs_diff(b, qa));
  });
  add("sfea", [](Rng& r) {
    Tensor f = randn({4, 3, 3}, r);
    auto params = random_sta(4, r, true);
    return oracle::max_abs_diff(sta::sfea(f, params.w_e, params),
                                sf_oracle(f, oracle::to_mat(params.w_e), params.sfta_layer));
  });
  add("nta_rectify", [](Rng& r) {
    Tensor f = randn({5, 2, 3}, r), w = randn({5}, r);
    auto wv = oracle::to_vec(w);
    const double norm = std::sqrt(oracle::dot(wv, wv));
    for (double& x : wv) x /= norm;
    return oracle::max_abs_diff(nta::nta_rectify(f, w), oracle::broadcast_mul_channel(oracle::to_vec(f), 5, wv));
  });
  add("prototype", [](Rng& r) {
    std::vector<Tensor> s = {randn({3, 2, 2}, r), randn({3, 2, 2}, r), randn({3, 2, 2}, r)};
    oracle::Vec mean(12, 0.0);
    for (const auto& t : s)
      for (std::size_t i = 0; i < 12; ++i) mean[i] += t[i];
    for (double& x : mean) x /= 3.0;
    return oracle::max_abs_diff(model::prototype(s), mean);
  });
  add("metric_classify", [](Rng& r) {
    std::vector<Tensor> q, p;
    for (int k = 0; k < 4; ++k) {
      q.push_back(randn({5, 2, 3}, r));
      p.push_back(randn({5, 2, 3}, r));
    }
    const double tau = 0.5 + 10.0 * std::uniform_real_distribution<double>(0.0, 1.0)(r);
    oracle::Vec expect;
    for (int k = 0; k < 4; ++k)
      expect.push_back(tau * oracle::cosine(oracle::gap(oracle::to_vec(q[k]), 5), oracle::gap(oracle::to_vec(p[k]), 5)));
    return oracle::max_abs_diff(model::metric_classify(q, p, Tensor::scalar(tau)), expect);
  });
  add("multitask_loss", [](Rng& r) {
    std::uniform_real_distribution<double> u(0.1, 3.0);
    const double lm = u(r), lg = u(r), lr = u(r), ag = u(r), ar = u(r), lambda = u(r);
    model::LossWeights w{Tensor::scalar(ag), Tensor::scalar(ar), lambda, false};
    const double got =
        model::multitask_loss(Tensor::scalar(lm), Tensor::scalar(lg), Tensor::scalar(lr), w).item();
    double expect = 0.5 * lm;
    for (auto [l, a] : {std::pair{lg, ag}, std::pair{lr, ar}}) {
      const double weight = lambda + 1.0 / (2.0 * a * a);
      expect += weight * l - std::log(weight);
    }
    return std::abs(got - expect);
  });

  Rng rng(2024);
  double worst = 0.0;
  std::string worst_op;
  for (const auto& [name, fn] : ops_under_test) {
    for (int i = 0; i < kInstances; ++i) {
      const double err = fn(rng);
      if (!(err <= worst) || worst_op.empty()) {
        worst = err;
        worst_op = name;
      }
    }
  }
  return {std::isfinite(worst) && worst <= kOracleTol,
          fmt("%zu ops x %d instances, max abs diff %.2e (%s), tol 1e-12", ops_under_test.size(), kInstances, worst,
              worst_op.c_str())};
}

// ---- 2: gradient suite -----------------------------------------------------

Outcome gradient_suite() {
  RunConfig config;
  auto rows = harness::run_gradcheck(harness::default_gradcheck_registry(config), config.seed);
  double op_worst = 0.0, step1 = 0.0;
  std::size_t failed = 0;
  for (const auto& r : rows) {
    if (!r.passed) ++failed;
    if (r.threshold == 1e-3)
      step1 = r.error;
    else
      op_worst = std::max(op_worst, r.error);
  }
  return {failed == 0, fmt("%zu rows, %zu failed; worst op %.2e (< 1e-4), step-1 subset %.2e (< 1e-3)", rows.size(),
                           failed, op_worst, step1)};
}

// ---- 3: SpatialFormer identities --------------------------------------------

Outcome spatialformer_identities() {
  Rng rng(31);
  double triple = 0.0;
  for (int i = 0; i < 10; ++i) {
    Tensor f = randn({5, 1, 1}, rng);
    Tensor out = attention::spatialformer(f, attention::flatten_reference(f),
                                          attention::SpatialFormerParams::identity(5));
    for (std::size_t c = 0; c < 5; ++c) triple = std::max(triple, std::abs(out[c] - 3.0 * f[c]));
  }
  // Positions along e0 attend to a value along e1 only, so their cosine is 0.
  Tensor f({2, 1, 3}, {2.0, 0.0, 1.5, 0.0, 1.0, 0.0});
  Tensor r = Tensor::matrix({{0.0, 0.0}, {1.0, 4.0}});
  attention::SpatialFormerTrace trace;
  Tensor out = attention::spatialformer(f, r, attention::SpatialFormerParams::identity(2), &trace);
  double doubled = 0.0;
  for (std::size_t m : {0u, 2u}) {
    doubled = std::max(doubled, std::abs(trace.cosine[m]));
    for (std::size_t c = 0; c < 2; ++c) doubled = std::max(doubled, std::abs(out[c * 3 + m] - 2.0 * f[c * 3 + m]));
  }
  return {triple <= kOracleTol && doubled <= kOracleTol,
          fmt("single position -> 3f: max err %.2e; cos = 0 -> 2f: max err %.2e; tol 1e-12", triple, doubled)};
}

// ---- 4: loss value ------------------------------------------------------------

Outcome loss_value() {
  model::LossWeights w{Tensor::scalar(1.0), Tensor::scalar(1.0), 1.0, false};
  const Tensor one = Tensor::scalar(1.0);
  const double got = model::multitask_loss(one, one, one, w).item();
  const double expect = 0.5 + 2.0 * (1.5 - std::log(1.5));
  return {std::abs(got - expect) <= kOracleTol, fmt("total %.15f, expected %.15f", got, expect)};
}

// ---- 5: NTA invariances -------------------------------------------------------

Outcome nta_invariances() {
  Rng rng(55);
  std::uniform_real_distribution<double> log_scale(-4.0, 4.0);
  double scale_err = 0.0;
  for (int i = 0; i < 100; ++i) {
    Tensor f = randn({6, 3, 2}, rng), w = randn({6}, rng);
    const double a = std::exp(log_scale(rng));
    scale_err = std::max(scale_err, max_abs_diff(nta::nta_rectify(f, ops::scale(w, a)), nta::nta_rectify(f, w)));
  }
  std::size_t mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 2 + rng() % 9, c = 1 + rng() % 8;
    nta::NovelClassifier clf = nta::NovelClassifier::zeros(n, c);
    clf.w = randn({n, c}, rng);
    Tensor f = randn({c, 2, 2}, rng);
    const auto pooled = oracle::gap(oracle::to_vec(f), c);
    std::size_t best = 0;
    double best_logit = -INFINITY;
    for (std::size_t k = 0; k < n; ++k) {
      double logit = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) logit += clf.w[k * c + ch] * pooled[ch];
      if (logit > best_logit) {
        best_logit = logit;
        best = k;
      }
    }
    if (nta::strongest_class(clf, f) != best) ++mismatches;
    const double a = std::exp(log_scale(rng));
    if (nta::strongest_class(clf, ops::scale(f, a)) != best) ++mismatches;
  }
  return {scale_err <= kOracleTol && mismatches == 0,
          fmt("scale invariance max err %.2e (tol 1e-12); argmax mismatches %zu / 1000 classifiers", scale_err,
              mismatches)};
}

// ---- synthetic-task configuration ---------------------------------------------

RunConfig planted_config(std::uint64_t seed, const std::filesystem::path& out) {
  RunConfig c;
  c.apply({{"way", "5"},
           {"shot", "1"},
           {"queries", "3"},
           {"epochs", "10"},
           {"episodes_per_epoch", "20"},
           {"episodes", "200"},
           {"planted.patch_gain", "2"},
           {"planted.texture_gain", "0.5"}});
  c.seed = seed;
  c.out = out;
  return c;
}

// ---- 6: STA vs baselines ---------------------------------------------------------

Outcome sta_vs_baselines() {
  const auto dir = scratch("c6");
  std::vector<double> sta_acc, none_acc, cross_acc;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto rows = harness::ablate(planted_config(seed, dir), {"sta", "none", "superglue-cross"});
    sta_acc.insert(sta_acc.end(), rows[0].report.accuracies.begin(), rows[0].report.accuracies.end());
    none_acc.insert(none_acc.end(), rows[1].report.accuracies.begin(), rows[1].report.accuracies.end());
    cross_acc.insert(cross_acc.end(), rows[2].report.accuracies.begin(), rows[2].report.accuracies.end());
    per_seed += fmt(" [seed %d: sta %.3f none %.3f cross %.3f]", static_cast<int>(seed), rows[0].report.mean,
                    rows[1].report.mean, rows[2].report.mean);
  }
  std::filesystem::remove_all(dir);
  const auto vs_none = harness::paired_difference(sta_acc, none_acc);
  const auto vs_cross = harness::paired_difference(sta_acc, cross_acc);
  return {vs_none.significant() && vs_cross.significant(),
          fmt("600 paired episodes: sta-none %+.4f +/- %.4f, sta-cross %+.4f +/- %.4f;", vs_none.mean,
              vs_none.ci_half_width, vs_cross.mean, vs_cross.ci_half_width) +
              per_seed};
}

// ---- 7: NTA shot scaling ------------------------------------------------------------

Outcome nta_shot_scaling() {
  const auto dir = scratch("c7");
  std::vector<harness::PairedDifference> gains;
  std::string detail;
  for (std::size_t shot : {1, 5}) {
    RunConfig c;
    // Class means at distance 1 keep both shot counts well below the ceiling.
    c.apply({{"data", "features"}, {"features.separation", "1"}, {"way", "5"}, {"queries", "3"}, {"epochs", "5"},
             {"episodes_per_epoch", "20"}, {"episodes", "200"}});
    c.shot = shot;
    c.out = dir;
    auto rows = harness::ablate(c, {"sta:nonta", "sta:nta"});
    gains.push_back(rows[1].vs_first);
    detail += fmt("%zu-shot: nonta %.4f nta %.4f gain %+.4f +/- %.4f; ", shot, rows[0].report.mean,
                  rows[1].report.mean, rows[1].vs_first.mean, rows[1].vs_first.ci_half_width);
  }
  std::filesystem::remove_all(dir);
  // The two gains come from independent episode sets; their CIs add in quadrature.
  const double ci = std::hypot(gains[0].ci_half_width, gains[1].ci_half_width);
  return {gains[1].mean >= gains[0].mean - ci, detail + fmt("need gain5 >= gain1 - %.4f", ci)};
}

// ---- 8: localization ------------------------------------------------------------------

Outcome localization() {
  RunConfig c = planted_config(1, scratch("c8"));
  const auto data = harness::build_dataset(c);
  const model::StanetParams params = harness::train_model(c, data).params;
  std::size_t wins = 0;
  constexpr std::size_t kEpisodes = 100;
  for (std::size_t i = 0; i < kEpisodes; ++i) {
    harness::AttentionDump dump = harness::collect_attention(params, data, c, mix_seed(c.seed, 100 + i));
    const auto& e = dump.episode;
    double patch_sum = 0.0, back_sum = 0.0;
    std::size_t patch_n = 0, back_n = 0;
    for (std::size_t j = 0; j < e.query.size(); ++j) {
      const std::size_t k = e.query_labels[j];
      const auto mask = harness::patch_mask(data.item(e.query_items[j]), data.patch_size,
                                            data.item_shape()[1], dump.h, dump.w);
      const auto& map = dump.maps.at("sfsa_query")[k][j];
      for (std::size_t m = 0; m < map.size(); ++m) {
        if (mask[m] == 1) {
          patch_sum += map[m];
          ++patch_n;
        } else if (mask[m] == -1) {
          back_sum += map[m];
          ++back_n;
        }
      }
    }
    if (patch_n > 0 && back_n > 0 && patch_sum / patch_n > back_sum / back_n) ++wins;
  }
  std::filesystem::remove_all(c.out);
  return {wins * 5 >= kEpisodes * 4, fmt("patch mean > background mean in %zu / %zu episodes (need 80)", wins,
                                         kEpisodes)};
}

// ---- 9: chance level ------------------------------------------------------------------

Outcome chance_level() {
  RunConfig c = planted_config(1, scratch("c9"));
  c.shuffle_labels = true;
  const auto data = harness::build_dataset(c);
  const model::StanetParams params = harness::train_model(c, data).params;
  auto report = harness::MetricsReport::from_accuracies(harness::evaluate_episodes(params, data, c));
  std::filesystem::remove_all(c.out);
  const double chance = 1.0 / static_cast<double>(c.way);
  return {std::abs(report.mean - chance) <= report.ci_half_width,
          fmt("mean %.4f +/- %.4f over %zu episodes, chance %.4f", report.mean, report.ci_half_width,
              report.accuracies.size(), chance)};
}

// ---- 10: determinism and freeze ------------------------------------------------------------

Outcome determinism_and_freeze() {
  // The same invocation twice, in the same place; the first result is moved
  // aside before the second run.
  const auto dir = scratch("c10");
  RunConfig c = planted_config(7, dir / "run");
  c.epochs = 2;
  c.eval_episodes = 50;
  auto run = [&](const std::string& keep_as) {
    harness::run_train(c);
    const std::uint64_t before = model::load_checkpoint(c.checkpoint_path()).params.hash();
    auto report = harness::run_eval(c, c.checkpoint_path());
    const std::uint64_t after = model::load_checkpoint(c.checkpoint_path()).params.hash();
    const auto eval_dir = c.out / report.run_id / "eval";
    auto result = std::tuple{slurp(c.checkpoint_path()),
                             slurp(eval_dir / "metrics.csv") + slurp(eval_dir / "summary.txt"), before == after};
    std::filesystem::rename(c.out, dir / keep_as);
    return result;
  };
  auto [ckpt_a, report_a, frozen_a] = run("first");
  auto [ckpt_b, report_b, frozen_b] = run("second");
  std::filesystem::remove_all(dir);
  const bool same_ckpt = !ckpt_a.empty() && ckpt_a == ckpt_b;
  const bool same_report = !report_a.empty() && report_a == report_b;
  return {same_ckpt && same_report && frozen_a && frozen_b,
          fmt("checkpoints %s, reports %s, parameter hash %s across Step 2", same_ckpt ? "identical" : "DIFFER",
              same_report ? "identical" : "DIFFER", frozen_a && frozen_b ? "unchanged" : "CHANGED")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "criterion numbers to run (default all)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"oracle equivalence", oracle_equivalence},
      {"gradient suite", gradient_suite},
      {"SpatialFormer identities", spatialformer_identities},
      {"multi-task loss value", loss_value},
      {"NTA invariances", nta_invariances},
      {"STA vs no-attention and cross-attention", sta_vs_baselines},
      {"NTA shot scaling", nta_shot_scaling},
      {"localization", localization},
      {"chance level on shuffled labels", chance_level},
      {"determinism and freeze", determinism_and_freeze},
  };
  const std::set<int> selected(only.begin(), only.end());
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(number)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    all = all && o.passed;
    std::printf("criterion %2d %s  %s: %s (%.1fs)\n", number, o.passed ? "PASS" : "FAIL", criteria[i].first.c_str(),
                o.detail.c_str(), seconds);
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
