#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "stanet/errors.hpp"
#include "stanet/numerics/gradcheck.hpp"
#include "stanet/numerics/graph.hpp"
#include "stanet/numerics/ops.hpp"
#include "stanet/sta/sta.hpp"

using namespace stanet;
using namespace stanet::sta;
using attention::SpatialFormerParams;

namespace {

constexpr double kOracleTol = 1e-12;
constexpr double kGradTol = 1e-4;

Tensor scaled(const Tensor& t, double k) {
  Tensor out = t.clone();
  for (double& x : out.data()) x *= k;
  return out;
}

SpatialFormerParams noisy_layer(std::size_t c, Rng& rng) {
  auto p = SpatialFormerParams::create(c, {}, rng, 0.3);
  p.ffn_b1 = randn({c}, rng, 0.5);
  p.ffn_b2 = randn({c}, rng, 0.5);
  return p;
}

StaParams random_sta(std::size_t c, Rng& rng) {
  StaParams p;
  p.sfsa_layer = noisy_layer(c, rng);
  p.sfta_layer = noisy_layer(c, rng);
  return p;
}

StaParams identity_sta(std::size_t c) {
  StaParams p;
  p.sfsa_layer = SpatialFormerParams::identity(c);
  p.sfta_layer = SpatialFormerParams::identity(c);
  return p;
}

// Straight-line SpatialFormer on a feature and reference rows.
std::vector<double> sf_oracle(const Tensor& f, const oracle::Mat& ref_rows, const SpatialFormerParams& layer) {
  return oracle::unpositions(oracle::spatialformer(oracle::positions(f), ref_rows, oracle::layer_from(layer)));
}

std::vector<double> plus(std::vector<double> a, const std::vector<double>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

}  // namespace

TEST_CASE("sfsa") {
  Rng rng(41);
  SUBCASE("identical single-position inputs triple") {
    Tensor p = randn({4, 1, 1}, rng);
    auto [a, b] = sfsa(p, p.clone(), identity_sta(4));
    CHECK(max_abs_diff(a, scaled(p, 3.0)) <= kOracleTol);
    CHECK(max_abs_diff(b, scaled(p, 3.0)) <= kOracleTol);
  }
  SUBCASE("swapping the arguments swaps the pair") {
    auto params = random_sta(3, rng);
    Tensor p = randn({3, 2, 2}, rng), q = randn({3, 2, 2}, rng);
    auto [a, b] = sfsa(p, q, params);
    auto [c, d] = sfsa(q, p, params);
    CHECK(bit_equal(a, d));
    CHECK(bit_equal(b, c));
  }
  SUBCASE("random pair equals two spatialformer evaluations") {
    auto params = random_sta(4, rng);
    Tensor p = randn({4, 3, 2}, rng), q = randn({4, 3, 2}, rng);
    auto [a, b] = sfsa(p, q, params);
    CHECK(oracle::max_abs_diff(a, sf_oracle(p, oracle::positions(q), params.sfsa_layer)) <= kOracleTol);
    CHECK(oracle::max_abs_diff(b, sf_oracle(q, oracle::positions(p), params.sfsa_layer)) <= kOracleTol);
  }
  SUBCASE("no-sharing mode uses the reverse layer for the query side") {
    auto params = random_sta(3, rng);
    params.share_sfsa = false;
    params.sfsa_reverse = noisy_layer(3, rng);
    params.validate();
    Tensor p = randn({3, 2, 2}, rng), q = randn({3, 2, 2}, rng);
    auto [a, b] = sfsa(p, q, params);
    CHECK(oracle::max_abs_diff(a, sf_oracle(p, oracle::positions(q), params.sfsa_layer)) <= kOracleTol);
    CHECK(oracle::max_abs_diff(b, sf_oracle(q, oracle::positions(p), params.sfsa_reverse)) <= kOracleTol);
    CHECK(params.named_parameters().size() == 21);
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(sfsa(randn({3, 2, 2}, rng), randn({3, 2, 3}, rng), random_sta(3, rng)), DimensionError);
  }
}

TEST_CASE("sfta") {
  Rng rng(43);
  SUBCASE("single class weight equal to a constant query triples it") {
    Tensor v = randn({3}, rng);
    Tensor q({3, 2, 2}, std::vector<double>(12));
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t m = 0; m < 4; ++m) q[ch * 4 + m] = v[ch];
    Tensor w_g({1, 3}, {v[0], v[1], v[2]});
    auto [p_out, q_out] = sfta(randn({3, 2, 2}, rng), q, w_g, identity_sta(3));
    CHECK(max_abs_diff(q_out, scaled(q, 3.0)) <= kOracleTol);
  }
  SUBCASE("both paths share the layer") {
    auto params = random_sta(3, rng);
    Tensor x = randn({3, 2, 3}, rng), w_g = randn({5, 3}, rng);
    auto [a, b] = sfta(x, x, w_g, params);
    CHECK(bit_equal(a, b));
  }
  SUBCASE("random inputs equal two spatialformer evaluations") {
    auto params = random_sta(4, rng);
    Tensor p = randn({4, 2, 3}, rng), q = randn({4, 2, 3}, rng), w_g = randn({6, 4}, rng);
    auto [a, b] = sfta(p, q, w_g, params);
    auto ref = oracle::to_mat(w_g);
    CHECK(oracle::max_abs_diff(a, sf_oracle(p, ref, params.sfta_layer)) <= kOracleTol);
    CHECK(oracle::max_abs_diff(b, sf_oracle(q, ref, params.sfta_layer)) <= kOracleTol);
  }
  SUBCASE("channel mismatch") {
    auto params = random_sta(4, rng);
    CHECK_THROWS_AS(sfta(randn({4, 2, 2}, rng), randn({4, 2, 2}, rng), randn({6, 3}, rng), params), DimensionError);
  }
}

TEST_CASE("sta") {
  Rng rng(47);
  SUBCASE("zeroed target branch leaves sfsa") {
    auto params = random_sta(3, rng);
    for (auto& [name, t] : params.sfta_layer.named_parameters()) {
      if (name.rfind("ffn", 0) == 0) {
        Tensor h = t;
        for (double& x : h.data()) x = 0.0;
      }
    }
    Tensor p = randn({3, 2, 2}, rng), q = randn({3, 2, 2}, rng);
    auto [a, b] = sta::sta(p, q, Tensor::zeros({4, 3}), params);
    auto [c, d] = sfsa(p, q, params);
    CHECK(bit_equal(a, c));
    CHECK(bit_equal(b, d));
  }
  SUBCASE("enhanced query depends on the prototype") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng r(mix_seed(47, seed));
      auto params = random_sta(3, r);
      Tensor p1 = randn({3, 2, 2}, r), p2 = randn({3, 2, 2}, r), q = randn({3, 2, 2}, r), w_g = randn({4, 3}, r);
      auto [a1, q1] = sta::sta(p1, q, w_g, params);
      auto [a2, q2] = sta::sta(p2, q, w_g, params);
      CHECK(a1.shape() == p1.shape());
      CHECK(q1.shape() == q.shape());
      CHECK(max_abs_diff(q1, q2) > 0.0);
      // Purity: same inputs, same outputs.
      CHECK(bit_equal(sta::sta(p1, q, w_g, params).first, a1));
    }
  }
  SUBCASE("random equals the sum of both module oracles") {
    auto params = random_sta(4, rng);
    Tensor p = randn({4, 3, 3}, rng), q = randn({4, 3, 3}, rng), w_g = randn({5, 4}, rng);
    auto [a, b] = sta::sta(p, q, w_g, params);
    auto ref = oracle::to_mat(w_g);
    auto pa = plus(sf_oracle(p, oracle::positions(q), params.sfsa_layer), sf_oracle(p, ref, params.sfta_layer));
    auto qa = plus(sf_oracle(q, oracle::positions(p), params.sfsa_layer), sf_oracle(q, ref, params.sfta_layer));
    CHECK(oracle::max_abs_diff(a, pa) <= kOracleTol);
    CHECK(oracle::max_abs_diff(b, qa) <= kOracleTol);
  }
}

TEST_CASE("perturbing a layer changes both elements of its pair") {
  Rng rng(53);
  auto params = random_sta(3, rng);
  Tensor p = randn({3, 2, 2}, rng), q = randn({3, 2, 2}, rng), w_g = randn({4, 3}, rng);
  auto sa = sfsa(p, q, params);
  auto ta = sfta(p, q, w_g, params);

  auto bumped = params;
  bumped.sfsa_layer.w_k = ops::add_scalar(params.sfsa_layer.w_k, 0.05);
  auto sb = sfsa(p, q, bumped);
  CHECK(max_abs_diff(sa.first, sb.first) > 0.0);
  CHECK(max_abs_diff(sa.second, sb.second) > 0.0);
  CHECK(bit_equal(sfta(p, q, w_g, bumped).first, ta.first));

  bumped = params;
  bumped.sfta_layer.w_q = ops::add_scalar(params.sfta_layer.w_q, 0.05);
  auto tb = sfta(p, q, w_g, bumped);
  CHECK(max_abs_diff(ta.first, tb.first) > 0.0);
  CHECK(max_abs_diff(ta.second, tb.second) > 0.0);
}

TEST_CASE("sfea") {
  Rng rng(59);
  auto params = random_sta(3, rng);
  Tensor f = randn({3, 2, 2}, rng), w = randn({5, 3}, rng);
  SUBCASE("w_e equal to w_g matches the sfta query path") {
    CHECK(bit_equal(sfea(f, w.clone(), params), sfta(randn({3, 2, 2}, rng), f, w, params).second));
  }
  SUBCASE("single matching row at a single position triples") {
    Tensor g = randn({3, 1, 1}, rng);
    Tensor w_e({1, 3}, {g[0], g[1], g[2]});
    CHECK(max_abs_diff(sfea(g, w_e, identity_sta(3)), scaled(g, 3.0)) <= kOracleTol);
  }
  SUBCASE("random against oracle") {
    CHECK(oracle::max_abs_diff(sfea(f, w, params), sf_oracle(f, oracle::to_mat(w), params.sfta_layer)) <= kOracleTol);
  }
  SUBCASE("missing embedding") { CHECK_THROWS_AS(sfea(f, Tensor(), params), ConfigError); }
}

TEST_CASE("gradients through sta") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CAPTURE(seed);
    Rng rng(mix_seed(61, seed));
    auto base = random_sta(3, rng);
    std::vector<Tensor> inputs = {randn({3, 2, 2}, rng), randn({3, 2, 2}, rng), randn({4, 3}, rng)};
    auto names = base.named_parameters();
    for (auto& [name, t] : names) inputs.push_back(t.clone());
    TensorFn op = [&](const std::vector<Tensor>& in) {
      StaParams p = base;
      std::size_t i = 3;
      for (auto* layer : {&p.sfsa_layer, &p.sfta_layer}) {
        layer->w_q = in[i++];
        layer->w_k = in[i++];
        layer->w_v = in[i++];
        layer->ffn_w1 = in[i++];
        layer->ffn_b1 = in[i++];
        layer->ffn_w2 = in[i++];
        layer->ffn_b2 = in[i++];
      }
      auto [a, b] = sta::sta(in[0], in[1], in[2], p);
      return ops::concat({a, ops::scale(b, 0.7)});
    };
    auto result = check_gradients(op, inputs, rng);
    CHECK(result.max_relative_error < kGradTol);
  }
}

TEST_CASE("detaching the class weights blocks their gradient") {
  Rng rng(67);
  auto params = random_sta(3, rng);
  params.detach_w_g = true;
  Tensor p = randn({3, 2, 2}, rng).set_requires_grad(true), q = randn({3, 2, 2}, rng);
  Tensor w_g = randn({4, 3}, rng).set_requires_grad(true);
  Graph g;
  {
    GraphScope scope(g);
    auto [a, b] = sfta(p, q, w_g, params);
    g.backward(ops::sum(ops::add(a, b)));
  }
  CHECK(p.has_grad());
  CHECK_FALSE(w_g.has_grad());

  params.detach_w_g = false;
  Graph g2;
  {
    GraphScope scope(g2);
    auto [a, b] = sfta(p, q, w_g, params);
    g2.backward(ops::sum(ops::add(a, b)));
  }
  CHECK(w_g.has_grad());
}
