#include <doctest.h>

#include <cmath>
#include <random>

#include "deltaroute/errors.hpp"
#include "deltaroute/model.hpp"
#include "deltaroute/routing.hpp"
#include "support/oracles.hpp"

using namespace deltaroute;

namespace {

std::vector<Tensor64> random_sources(std::mt19937_64& rng, std::size_t n, const Shape& shape,
                                     bool requires_grad = false) {
  std::vector<Tensor64> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(oracle::random_tensor(rng, shape, -2, 2, requires_grad));
  }
  return out;
}

double max_abs(std::span<const double> v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace

TEST_CASE("mode names round-trip and only five are accepted") {
  CHECK(all_mode_names().size() == 5);
  for (const auto& name : all_mode_names()) {
    auto kind = parse_mode(name);
    REQUIRE(kind.has_value());
    CHECK(mode_name(*kind) == name);
  }
  CHECK_FALSE(parse_mode("DeltaBlock").has_value());
  CHECK_FALSE(parse_mode("").has_value());
}

TEST_CASE("additive routing at zero query") {
  std::mt19937_64 rng(1);
  RoutingSite<double> site(4, 1e-6);
  for (auto w : site.query.data()) CHECK(w == 0.0);
  auto residual = oracle::random_tensor(rng, {2, 3, 4}, -1, 1, false);

  SUBCASE("single source adds it whole") {
    auto v = random_sources(rng, 1, {2, 3, 4});
    auto out = depth_route_additive<double>(v, residual, site).output;
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == residual[i] + v[0][i]);
  }
  SUBCASE("three sources add their mean") {
    auto v = random_sources(rng, 3, {2, 3, 4});
    auto out = depth_route_additive<double>(v, residual, site).output;
    for (std::size_t i = 0; i < out.numel(); ++i) {
      const double expected = residual[i] + (v[0][i] + v[1][i] + v[2][i]) / 3.0;
      CHECK(std::abs(out[i] - expected) < 1e-14);
    }
  }
  SUBCASE("empty sources return the residual itself") {
    auto out = depth_route_additive<double>({}, residual, site).output;
    CHECK(out.same_node(residual));
  }
}

TEST_CASE("additive routing matches brute force with a random query") {
  std::mt19937_64 rng(2);
  RoutingSite<double> site(4, 1e-6);
  site.query = oracle::random_tensor(rng, {4}, -2, 2);
  site.norm.gain = oracle::random_tensor(rng, {4}, 0.5, 1.5);
  auto residual = oracle::random_tensor(rng, {1, 1, 4}, -1, 1, false);
  auto sources = random_sources(rng, 4, {1, 1, 4});
  auto routed = depth_route_additive<double>(sources, residual, site);

  std::vector<std::vector<double>> raw;
  for (const auto& s : sources) raw.push_back(s.to_vector());
  auto [expected, alpha] = oracle::route(raw, residual.to_vector(), site.query.to_vector(),
                                         site.norm.gain.to_vector(), 1e-6, true);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(routed.output[i] - expected[i]) < 1e-14);
  for (std::size_t n = 0; n < 4; ++n) CHECK(std::abs(routed.weights[n] - alpha[n]) < 1e-15);
}

TEST_CASE("replacement routing") {
  std::mt19937_64 rng(3);
  RoutingSite<double> site(4, 1e-6);
  auto one = random_sources(rng, 1, {1, 2, 4});
  auto out = depth_route_replace<double>(one, site).output;
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == one[0][i]);

  auto many = random_sources(rng, 5, {1, 2, 4});
  auto mean_out = depth_route_replace<double>(many, site).output;
  for (std::size_t i = 0; i < mean_out.numel(); ++i) {
    double m = 0;
    for (const auto& s : many) m += s[i];
    CHECK(std::abs(mean_out[i] - m / 5.0) < 1e-14);
  }

  site.query = oracle::random_tensor(rng, {4}, -2, 2);
  auto routed = depth_route_replace<double>(many, site);
  for (std::size_t t = 0; t < 2; ++t) {
    std::vector<std::vector<double>> raw;
    for (const auto& s : many) raw.emplace_back(s.data().begin() + t * 4, s.data().begin() + t * 4 + 4);
    auto [expected, alpha] = oracle::route(raw, std::vector<double>(4, 0.0), site.query.to_vector(),
                                           site.norm.gain.to_vector(), 1e-6, false);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(routed.output[t * 4 + i] - expected[i]) < 1e-14);
  }

  CHECK_THROWS_AS(depth_route_replace<double>({}, site), ContractError);
}

TEST_CASE("source shape mismatch is a dimension error") {
  RoutingSite<double> site(4, 1e-6);
  auto residual = Tensor64::zeros({1, 2, 4});
  std::vector<Tensor64> bad{Tensor64::zeros({1, 2, 4}), Tensor64::zeros({1, 3, 4})};
  CHECK_THROWS_AS(depth_route_additive<double>(bad, residual, site), DimensionError);
  std::vector<Tensor64> off{Tensor64::zeros({1, 3, 4})};
  CHECK_THROWS_AS(depth_route_additive<double>(off, residual, site), DimensionError);
}

TEST_CASE("null source") {
  std::mt19937_64 rng(4);
  RoutingSite<double> site(4, 1e-6);
  auto residual = oracle::random_tensor(rng, {1, 3, 4}, -1, 1, false);

  std::vector<Tensor64> only_null;
  null_source_inject(only_null, residual.shape());
  auto out = depth_route_additive<double>(only_null, residual, site).output;
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == residual[i]);

  auto v = random_sources(rng, 1, {1, 3, 4});
  null_source_inject(v, residual.shape());
  auto half = depth_route_additive<double>(v, residual, site).output;
  for (std::size_t i = 0; i < half.numel(); ++i) {
    CHECK(std::abs(half[i] - (residual[i] + v[0][i] / 2.0)) < 1e-15);
  }

  // Even with a trained query, a null-only store is the identity.
  site.query = oracle::random_tensor(rng, {4}, -3, 3);
  auto again = depth_route_additive<double>(only_null, residual, site).output;
  for (std::size_t i = 0; i < again.numel(); ++i) CHECK(again[i] == residual[i]);

  // The query still learns through non-null sources.
  auto sources = random_sources(rng, 2, {1, 3, 4});
  null_source_inject(sources, residual.shape());
  auto r = oracle::random_tensor(rng, {1, 3, 4}, -1, 1, false);
  auto check = oracle::check_gradient({site.query}, [&] {
    return oracle::project(depth_route_additive<double>(sources, residual, site).output, r);
  });
  CHECK(check.relative_error < 1e-6);
  CHECK(check.analytic_norm > 0.0);
}

TEST_CASE("routing gradients through rmsnorm and softmax over depth") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> dim(1, 4);
  for (int trial = 0; trial < 20; ++trial) {
    CAPTURE(trial);
    const std::size_t n = dim(rng), b = dim(rng), t = dim(rng), d = 1 + dim(rng);
    RoutingSite<double> site(d, 1e-6);
    site.query = oracle::random_tensor(rng, {d}, -2, 2);
    site.norm.gain = oracle::random_tensor(rng, {d}, 0.5, 1.5);
    auto sources = random_sources(rng, n, {b, t, d}, true);
    auto residual = oracle::random_tensor(rng, {b, t, d});
    auto r = oracle::random_tensor(rng, {b, t, d}, -1, 1, false);
    std::vector<Tensor64> inputs = sources;
    inputs.push_back(residual);
    inputs.push_back(site.query);
    inputs.push_back(site.norm.gain);
    CHECK(oracle::check_gradient(inputs, [&] {
            return oracle::project(depth_route_additive<double>(sources, residual, site).output, r);
          }).relative_error < 1e-6);
    inputs.pop_back();
    inputs.pop_back();
    inputs.pop_back();
    inputs.push_back(site.query);
    inputs.push_back(site.norm.gain);
    CHECK(oracle::check_gradient(inputs, [&] {
            return oracle::project(depth_route_replace<double>(sources, site).output, r);
          }).relative_error < 1e-6);
  }
}

TEST_CASE("zero-query routing is a bounded perturbation and weights lie on the simplex") {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> count(1, 6);
  for (int trial = 0; trial < 100; ++trial) {
    RoutingSite<double> site(5, 1e-6);
    auto residual = oracle::random_tensor(rng, {2, 3, 5}, -3, 3, false);
    auto sources = random_sources(rng, count(rng), {2, 3, 5});
    auto routed = depth_route_additive<double>(sources, residual, site);
    double bound = 0;
    for (const auto& s : sources) bound = std::max(bound, max_abs(s.data()));
    auto delta = sub(routed.output, residual);
    CHECK(max_abs(delta.data()) <= bound + 1e-12);

    site.query = oracle::random_tensor(rng, {5}, -4, 4);
    auto w = depth_route_additive<double>(sources, residual, site).weights;
    const std::size_t n = w.dim(0), rows = w.numel() / n;
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0;
      for (std::size_t s = 0; s < n; ++s) {
        CHECK(w[s * rows + r] >= 0.0);
        total += w[s * rows + r];
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("replacement and additive diverge whenever the residual is nonzero") {
  std::mt19937_64 rng(7);
  RoutingSite<double> site(4, 1e-6);
  auto sources = random_sources(rng, 3, {1, 2, 4});
  auto residual = oracle::random_tensor(rng, {1, 2, 4}, 0.5, 1.0, false);
  auto replaced = depth_route_replace<double>(sources, site).output;
  auto added = depth_route_additive<double>(sources, residual, site).output;
  for (std::size_t i = 0; i < replaced.numel(); ++i) {
    CHECK(std::abs((added[i] - replaced[i]) - residual[i]) < 1e-14);
    CHECK(added[i] != replaced[i]);
  }
  auto zero = Tensor64::zeros({1, 2, 4});
  auto same = depth_route_additive<double>(sources, zero, site).output;
  for (std::size_t i = 0; i < same.numel(); ++i) CHECK(same[i] == replaced[i]);
}

TEST_CASE("delta attnres store grows by one per sublayer and telescopes") {
  std::mt19937_64 rng(8);
  DeltaStore<double> store({RoutingKind::DeltaAttnRes, 4, false});
  auto hidden = oracle::random_tensor(rng, {1, 2, 3}, -1, 1, false);
  store.seed(hidden);
  CHECK(store.sources().size() == 1);
  for (int sub_i = 0; sub_i < 2; ++sub_i) {
    auto out = oracle::random_tensor(rng, {1, 2, 3}, -1, 1, false);
    hidden = add(hidden, out);
    store.update_delta_attnres(out);
  }
  CHECK(store.sources().size() == 3);
  auto rebuilt = store.sources()[0];
  for (std::size_t i = 1; i < store.sources().size(); ++i) rebuilt = add(rebuilt, store.sources()[i]);
  for (std::size_t i = 0; i < rebuilt.numel(); ++i) CHECK(std::abs(rebuilt[i] - hidden[i]) < 1e-15);
}

TEST_CASE("delta block store closes blocks at boundaries") {
  SUBCASE("zero sublayers give zero deltas") {
    DeltaStore<double> store({RoutingKind::DeltaBlock, 2, false});
    auto emb = Tensor64::full({1, 1, 2}, 0.5);
    store.seed(emb);
    for (std::size_t l = 0; l < 4; ++l) {
      auto partial = store.routing_sources(emb).back();
      for (auto v : partial.data()) CHECK(v == 0.0);
      store.update_delta_block(emb, l, 4);
    }
    CHECK(store.completed_blocks() == 2);
    CHECK(store.sources().size() == 3);
    for (std::size_t i = 1; i < 3; ++i) {
      for (auto v : store.sources()[i].data()) CHECK(v == 0.0);
    }
  }
  SUBCASE("twelve layers in blocks of three leave five sources") {
    DeltaStore<double> store({RoutingKind::DeltaBlock, block_size_for_blocks(12, 4), false});
    std::mt19937_64 rng(9);
    auto hidden = oracle::random_tensor(rng, {1, 1, 2}, -1, 1, false);
    store.seed(hidden);
    for (std::size_t l = 0; l < 12; ++l) {
      hidden = add(hidden, oracle::random_tensor(rng, {1, 1, 2}, -1, 1, false));
      auto live = store.routing_sources(hidden);
      CHECK(live.size() == store.sources().size() + 1);
      auto rebuilt = live[0];
      for (std::size_t i = 1; i < live.size(); ++i) rebuilt = add(rebuilt, live[i]);
      for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(rebuilt[i] - hidden[i]) < 1e-12);
      store.update_delta_block(hidden, l, 12);
    }
    CHECK(store.sources().size() == 5);
  }
  SUBCASE("short last block still closes") {
    DeltaStore<double> store({RoutingKind::DeltaBlock, 3, false});
    auto h = Tensor64::zeros({1, 1, 1});
    store.seed(h);
    for (std::size_t l = 0; l < 5; ++l) store.update_delta_block(h, l, 5);
    CHECK(store.completed_blocks() == 2);
  }
}

TEST_CASE("attnres store resets its partial block at boundaries") {
  SUBCASE("full attnres resets before every layer") {
    DeltaStore<double> store({RoutingKind::FullAttnRes, 4, false});
    store.seed(Tensor64::zeros({1, 1, 1}));
    for (std::size_t l = 0; l < 5; ++l) {
      CHECK(store.attnres_boundary(l));
      store.attnres_accumulate(Tensor64::zeros({1, 1, 1}));
    }
    CHECK(store.completed_blocks() == 5);
  }
  SUBCASE("first layer routes over the embedding alone") {
    DeltaStore<double> store({RoutingKind::AttnRes, 2, false});
    auto emb = Tensor64::full({1, 1, 2}, 0.25);
    store.seed(emb);
    auto sources = store.routing_sources(emb);
    REQUIRE(sources.size() == 1);
    CHECK(sources[0].same_node(emb));
    CHECK(store.sources().empty());
  }
  SUBCASE("zero sublayers over two blocks of two") {
    DeltaStore<double> store({RoutingKind::AttnRes, 2, false});
    auto emb = Tensor64::full({1, 1, 2}, 0.25);
    store.seed(emb);
    for (std::size_t l = 0; l < 4; ++l) {
      store.attnres_boundary(l);
      store.attnres_accumulate(Tensor64::zeros({1, 1, 2}));
      store.attnres_accumulate(Tensor64::zeros({1, 1, 2}));
    }
    // The first stored block is the embedding; after the reset nothing
    // accumulates, so the second stored block is zero.
    REQUIRE(store.sources().size() == 2);
    for (auto v : store.sources()[0].data()) CHECK(v == 0.25);
    for (auto v : store.sources()[1].data()) CHECK(v == 0.0);
    for (auto v : store.partial_block().data()) CHECK(v == 0.0);
  }
}

TEST_CASE("routing parameter count") {
  CHECK(routing_param_count({RoutingKind::DeltaBlock, 4, false}, 4096, 36) == 589824);
  CHECK(routing_param_count({RoutingKind::DeltaBlock, 4, false}, 768, 12) == 36864);
  CHECK(routing_param_count({RoutingKind::Baseline, 4, false}, 768, 12) == 0);

  // Enumerate the parameters of a constructed model.
  ModelConfig cfg;
  cfg.d_model = 768;
  cfg.n_layers = 12;
  cfg.n_heads = 12;
  cfg.mlp_width = 8;
  cfg.vocab_size = 8;
  cfg.routing = {RoutingKind::DeltaBlock, 3, false};
  Model model(cfg);
  CHECK(model.routing_parameter_count() == 36864);
  CHECK(routing_param_count(cfg) == 36864);
}
