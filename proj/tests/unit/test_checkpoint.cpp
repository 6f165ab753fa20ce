#include <doctest.h>

#include <cstring>
#include <fstream>

#include "deltaroute/checkpoint.hpp"
#include "deltaroute/errors.hpp"
#include "deltaroute/trainer.hpp"
#include "support/corpus.hpp"
#include "support/temp_dir.hpp"

using namespace deltaroute;

namespace {

ModelConfig config_for(RoutingKind kind, std::uint64_t seed = 11) {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_layers = 4;
  cfg.n_heads = 4;
  cfg.max_seq_len = 32;
  cfg.routing = {kind, 2, false};
  cfg.seed = seed;
  return cfg;
}

TokenBatch batch_from(const std::string& text, std::size_t batch, std::size_t seq) {
  TokenBatch tb{batch, seq, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) tb.ids.push_back(static_cast<unsigned char>(text[i]));
  return tb;
}

bool bit_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

/// A few hundred steps of Baseline on the toy corpus; small enough to stay fast.
Checkpoint trained_baseline(std::uint64_t seed) {
  Model model(config_for(RoutingKind::Baseline, seed));
  TrainConfig t;
  t.steps = 150;
  t.warmup_steps = 15;
  t.peak_lr = 5e-3;
  t.batch_size = 8;
  t.seq_len = 32;
  t.eval_every = 150;
  t.eval_windows = 4;
  t.seed = seed;
  train(model, t, ByteDataset::from_bytes(oracle::toy_corpus(80000, seed), t.seq_len));
  return snapshot(model);
}

}  // namespace

TEST_CASE("fnv1a64 known vectors") {
  auto hash = [](std::string_view s) {
    return fnv1a64(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
  };
  CHECK(hash("") == 0xcbf29ce484222325ULL);
  CHECK(hash("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(hash("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("save and load reproduce parameters and forward outputs bit-exactly") {
  oracle::TempDir dir;
  const auto text = oracle::toy_corpus(200);
  for (auto kind : {RoutingKind::Baseline, RoutingKind::AttnRes, RoutingKind::FullAttnRes,
                    RoutingKind::DeltaAttnRes, RoutingKind::DeltaBlock}) {
    CAPTURE(mode_name(kind));
    Model model(config_for(kind));
    // Move routing parameters off their initial values so the round trip is meaningful.
    for (const auto& p : model.parameters()) {
      auto handle = p.value;
      auto data = handle.mutable_data();
      for (std::size_t i = 0; i < data.size(); ++i) data[i] += 0.001f * static_cast<float>(i % 7);
    }
    const auto path = dir / (std::string(mode_name(kind)) + ".ckpt");
    save_model(model, path);
    const Model loaded = load_model(path);
    CHECK(loaded.config().routing.kind == kind);
    CHECK(loaded.config().routing.block_size == 2);
    REQUIRE(loaded.parameters().size() == model.parameters().size());
    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
      CHECK(loaded.parameters()[i].name == model.parameters()[i].name);
      CHECK(bit_equal(loaded.parameters()[i].value.data(), model.parameters()[i].value.data()));
    }
    const auto tokens = batch_from(text, 2, 16);
    CHECK(bit_equal(model.forward(tokens).logits.data(), loaded.forward(tokens).logits.data()));
  }
}

TEST_CASE("corrupt or truncated checkpoints are format errors") {
  const auto bytes = serialize(snapshot(Model(config_for(RoutingKind::DeltaBlock))));
  for (std::size_t n = 0; n < bytes.size(); n += 37) {
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
    CHECK_THROWS_AS(deserialize(cut), FormatError);
  }
  for (std::size_t pos : {std::size_t{9}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    auto flipped = bytes;
    flipped[pos] ^= 0x10;
    CHECK_THROWS_AS(deserialize(flipped), FormatError);
  }
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_WITH_AS(deserialize(magic), doctest::Contains("magic"), FormatError);
  auto version = bytes;
  version[8] = 2;
  CHECK_THROWS_WITH_AS(deserialize(version), doctest::Contains("version"), FormatError);

  oracle::TempDir dir;
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), IoError);
  std::ofstream(dir / "short.ckpt", std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), 100);
  CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), FormatError);
}

TEST_CASE("restore rejects a mismatched mode or shape") {
  const auto delta = snapshot(Model(config_for(RoutingKind::DeltaBlock)));
  Model attnres(config_for(RoutingKind::AttnRes));
  CHECK_THROWS_WITH_AS(restore(attnres, delta), doctest::Contains("delta_block"), FormatError);

  auto wider = config_for(RoutingKind::DeltaBlock);
  wider.d_model = 64;
  Model wide(wider);
  CHECK_THROWS_AS(restore(wide, delta), FormatError);
}

TEST_CASE("convert copies the backbone verbatim and resets routing") {
  const auto base = snapshot(Model(config_for(RoutingKind::Baseline)));
  for (auto kind : {RoutingKind::AttnRes, RoutingKind::FullAttnRes, RoutingKind::DeltaAttnRes,
                    RoutingKind::DeltaBlock}) {
    CAPTURE(mode_name(kind));
    const auto routed = convert(base, {kind, 2, false});
    CHECK(routed.config.routing.kind == kind);
    CHECK(routed.config.seed == base.config.seed);
    const Model model = instantiate(routed);
    std::size_t routing_tensors = 0;
    for (const auto& p : model.parameters()) {
      if (is_routing_param(p.kind)) {
        ++routing_tensors;
        const float expected = p.kind == ParamKind::RoutingQuery ? 0.0f : 1.0f;
        for (float v : p.value.data()) CHECK(v == expected);
      } else {
        const auto* src = base.find(p.name);
        REQUIRE(src);
        CHECK(bit_equal(src->values, p.value.data()));
      }
    }
    CHECK(routing_tensors == 4 * model.config().n_layers);
  }
  const auto routed = convert(base, {RoutingKind::DeltaBlock, 2, false});
  CHECK_THROWS_AS(convert(routed, {RoutingKind::AttnRes, 2, false}), ContractError);
}

TEST_CASE("converted delta block with only the null source reproduces baseline logits") {
  const auto base_ckpt = trained_baseline(3);
  const Model base = instantiate(base_ckpt);
  const auto tokens = batch_from(oracle::toy_corpus(500, 99), 2, 32);
  const auto expected = base.forward(tokens).logits;
  for (auto kind : {RoutingKind::DeltaBlock, RoutingKind::DeltaAttnRes}) {
    const Model routed = instantiate(convert(base_ckpt, {kind, 2, true}));
    ForwardOptions opts;
    opts.null_only_sources = true;
    CHECK(bit_equal(routed.forward(tokens, opts).logits.data(), expected.data()));
  }
}

TEST_CASE("converted delta block routes a convex combination of its sources") {
  const auto base_ckpt = trained_baseline(4);
  const Model routed = instantiate(convert(base_ckpt, {RoutingKind::DeltaBlock, 2, false}));
  const auto tokens = batch_from(oracle::toy_corpus(500, 7), 2, 32);
  const auto result = routed.forward(tokens);
  const auto& sources = result.store.sources();
  REQUIRE(sources.size() == 3);

  RoutingSite<float> site(routed.config().d_model, 1e-6f);
  const auto* query = routed.find_parameter("layers.3.mlp_route.query");
  REQUIRE(query);
  CHECK(bit_equal(query->value.data(), site.query.data()));
  const auto zero = Tensor::zeros(sources[0].shape());
  const auto mixed = depth_route_additive<float>(sources, zero, site).output;
  const std::size_t d = routed.config().d_model;
  for (std::size_t row = 0; row < mixed.numel() / d; ++row) {
    for (std::size_t j = 0; j < d; ++j) {
      float bound = 0;
      for (const auto& s : sources) bound = std::max(bound, std::abs(s.data()[row * d + j]));
      CHECK(std::abs(mixed.data()[row * d + j]) <= bound * (1 + 1e-6f));
    }
  }
}

TEST_CASE("replacement conversion spikes the loss while delta conversion stays close") {
  const auto tokens = batch_from(oracle::toy_corpus(2000, 21), 8, 32);
  for (std::uint64_t seed : {1, 2, 3}) {
    CAPTURE(seed);
    const auto base_ckpt = trained_baseline(seed);
    NoGradGuard no_grad;
    const double base = instantiate(base_ckpt).loss(tokens).item();
    const double attnres =
        instantiate(convert(base_ckpt, {RoutingKind::AttnRes, 2, false})).loss(tokens).item();
    const double delta =
        instantiate(convert(base_ckpt, {RoutingKind::DeltaBlock, 2, false})).loss(tokens).item();
    CHECK(attnres > base);
    CHECK(attnres > delta);
    CHECK(std::abs(delta - base) / base < 0.02);
  }
}
