#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "deltaroute/errors.hpp"
#include "deltaroute/trainer.hpp"
#include "support/corpus.hpp"
#include "support/temp_dir.hpp"

using namespace deltaroute;

namespace {

/// Textbook AdamW step in 64-bit, written independently of the library.
struct ReferenceAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double theta, double g, double lr, double b1, double b2, double eps, double wd) {
    ++t;
    theta -= lr * wd * theta;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    return theta - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

ModelConfig small_model(RoutingKind kind = RoutingKind::Baseline) {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  cfg.max_seq_len = 64;
  cfg.routing = {kind, 1, false};
  cfg.seed = 3;
  return cfg;
}

TrainConfig small_train(std::size_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.warmup_steps = steps / 10;
  t.peak_lr = 3e-3;
  t.batch_size = 4;
  t.seq_len = 32;
  t.eval_every = std::max<std::size_t>(1, steps / 4);
  t.eval_windows = 8;
  t.seed = 5;
  return t;
}

std::vector<nlohmann::ordered_json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::vector<nlohmann::ordered_json> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(nlohmann::ordered_json::parse(line));
  return out;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("adamw single step matches the 64-bit reference") {
  double theta = 0.5;
  const double g = 1.0;
  AdamMoments state;
  adamw_update<double>({&theta, 1}, std::span<const double>(&g, 1), state, 1, 0.1,
                       {0.9, 0.95, 1e-8, 0.0}, true);
  CHECK(std::abs(theta - (0.5 - 0.1 * 1.0 / (1.0 + 1e-8))) < 1e-15);

  // Ten steps with varying gradients, decay on.
  std::mt19937_64 rng(1);
  std::normal_distribution<double> dist;
  double lib = 0.3, ref_theta = 0.3;
  float lib32 = 0.3f;
  AdamMoments s64, s32;
  ReferenceAdam ref;
  for (std::size_t t = 1; t <= 10; ++t) {
    const double grad = dist(rng);
    const float grad32 = static_cast<float>(grad);
    const double lr = 0.01 * static_cast<double>(t);
    adamw_update<double>({&lib, 1}, std::span<const double>(&grad, 1), s64, t, lr,
                         {0.9, 0.95, 1e-8, 0.1}, true);
    adamw_update<float>({&lib32, 1}, std::span<const float>(&grad32, 1), s32, t, lr,
                        {0.9, 0.95, 1e-8, 0.1}, true);
    ref_theta = ref.step(ref_theta, grad, lr, 0.9,
                         0.95, 1e-8, 0.1);
    CHECK(std::abs(lib - ref_theta) < 1e-14);
    CHECK(std::abs(lib32 - ref_theta) < 1e-6);
  }
}

TEST_CASE("adamw with zero gradient is pure decay") {
  double theta = 2.0;
  const double g = 0.0;
  AdamMoments state;
  adamw_update<double>({&theta, 1}, std::span<const double>(&g, 1), state, 1, 0.01,
                       {0.9, 0.95, 1e-8, 0.1}, true);
  CHECK(theta == 2.0 * (1.0 - 0.01 * 0.1));

  double gain = 2.0;
  AdamMoments other;
  adamw_update<double>({&gain, 1}, std::span<const double>(&g, 1), other, 1, 0.01,
                       {0.9, 0.95, 1e-8, 0.1}, false);
  CHECK(gain == 2.0);
}

TEST_CASE("adamw decays only matrices and embeddings and names non-finite gradients") {
  Model model(small_model(RoutingKind::DeltaBlock));
  std::vector<std::vector<float>> before;
  for (const auto& p : model.parameters()) before.emplace_back(p.value.data().begin(), p.value.data().end());
  model.zero_grad();
  AdamW<float> opt(model.parameters(), {0.9, 0.95, 1e-8, 0.5});
  opt.step(0.1, 0.1);
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const auto& p = model.parameters()[i];
    CAPTURE(p.name);
    const bool unchanged = std::equal(before[i].begin(), before[i].end(), p.value.data().begin());
    CHECK(unchanged == !takes_weight_decay(p.kind));
  }

  auto bad = model.find_parameter("layers.1.mlp_route.query")->value;
  bad.mutable_grad()[3] = std::nanf("");
  try {
    opt.step(0.1, 0.1);
    FAIL("expected a NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layers.1.mlp_route.query") != std::string::npos);
  }
}

TEST_CASE("learning rate schedule") {
  TrainConfig cfg;
  cfg.steps = 1000;
  cfg.warmup_steps = 100;
  cfg.peak_lr = 3e-3;
  CHECK(lr_at(0, cfg) == 0.0);
  CHECK(lr_at(1, cfg) == doctest::Approx(3e-5));
  CHECK(lr_at(100, cfg) == 3e-3);
  CHECK(std::abs(lr_at(1000, cfg)) < 1e-12);
  CHECK(lr_at(550, cfg) == doctest::Approx(1.5e-3));
  for (std::size_t s = 1; s <= 100; ++s) CHECK(lr_at(s, cfg) >= lr_at(s - 1, cfg));
  for (std::size_t s = 101; s <= 1000; ++s) CHECK(lr_at(s, cfg) <= lr_at(s - 1, cfg));
}

TEST_CASE("train config validation names fields") {
  TrainConfig cfg;
  cfg.warmup_steps = cfg.steps;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("train.warmup_steps"), ConfigError);
  cfg = TrainConfig{};
  cfg.peak_lr = 0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("train.peak_lr"), ConfigError);
  cfg = TrainConfig{};
  cfg.routing_lr = -1.0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("train.routing_lr"), ConfigError);
}

TEST_CASE("byte dataset windows and split") {
  auto data = ByteDataset::from_bytes(oracle::toy_corpus(1000), 100);
  CHECK(data.n_train() == 9);
  CHECK(data.n_val() == 1);
  for (std::size_t i = 0; i < data.n_train(); ++i)
    for (auto id : data.train_window(i)) CHECK((id >= 0 && id < 256));

  std::string high(300, '\xff');
  auto bytes = ByteDataset::from_bytes(high, 10);
  CHECK(bytes.train_window(0)[0] == 255);
  CHECK(bytes.n_val() == 3);
  // The validation windows are the tail of the file.
  std::string ordered;
  for (int i = 0; i < 40; ++i) ordered.push_back(static_cast<char>('a' + i / 10));
  auto tail = ByteDataset::from_bytes(ordered, 10);
  CHECK(tail.n_val() == 1);
  CHECK(tail.val_window(0)[0] == 'd');

  CHECK_THROWS_AS(ByteDataset::from_bytes("", 10), ConfigError);
  CHECK_THROWS_AS(ByteDataset::from_bytes("short", 10), ConfigError);
  oracle::TempDir dir;
  std::ofstream(dir / "empty.txt").close();
  CHECK_THROWS_WITH_AS(ByteDataset::from_file(dir / "empty.txt", 10), doctest::Contains("train.data_path"),
                       ConfigError);
  CHECK_THROWS_AS(ByteDataset::from_file(dir / "missing.txt", 10), ConfigError);
}

TEST_CASE("batch sampler is a seeded per-epoch permutation") {
  BatchSampler a(10, 3, 7), b(10, 3, 7), c(10, 3, 8);
  std::vector<std::size_t> seen;
  bool differs = false;
  for (int i = 0; i < 3; ++i) {
    auto x = a.next();
    CHECK(x == b.next());
    differs |= x != c.next();
    seen.insert(seen.end(), x.begin(), x.end());
  }
  CHECK(differs);
  std::sort(seen.begin(), seen.end());
  CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
  a.next();
  CHECK(a.epoch() == 1);
  CHECK_THROWS_AS(BatchSampler(2, 3, 0), ConfigError);
}

TEST_CASE("training lowers the loss and writes consistent metrics") {
  oracle::TempDir dir;
  ModelConfig mcfg = small_model();
  mcfg.d_model = 64;
  mcfg.n_layers = 4;
  Model model(mcfg);
  auto tcfg = small_train(200);
  auto data = ByteDataset::from_bytes(oracle::toy_corpus(60000), tcfg.seq_len);
  TrainOutputs out;
  out.metrics_path = dir / "metrics.jsonl";
  auto result = train(model, tcfg, data, out);

  REQUIRE(result.records.size() == 5);
  CHECK(result.records.front().step == 0);
  CHECK(result.records.back().step == 200);
  CHECK(result.records.back().train_loss < result.records.front().train_loss);
  CHECK(result.records.back().val_loss < result.records.front().val_loss);
  CHECK(result.records.back().tokens_seen == 200 * 4 * 32);

  auto lines = read_jsonl(out.metrics_path);
  REQUIRE(lines.size() == 5);
  const std::vector<std::string> fields{"step", "train_loss", "val_loss", "val_ppl",
                                        "lr",   "tokens_seen", "wall_time"};
  for (const auto& line : lines) {
    std::vector<std::string> keys;
    for (const auto& [k, v] : line.items()) keys.push_back(k);
    CHECK(keys == fields);
    CHECK(line["val_ppl"].get<double>() == std::exp(line["val_loss"].get<double>()));
  }
}

TEST_CASE("identical runs produce identical metrics and checkpoints") {
  oracle::TempDir dir;
  auto tcfg = small_train(30);
  auto data = ByteDataset::from_bytes(oracle::toy_corpus(20000), tcfg.seq_len);
  for (int run = 0; run < 2; ++run) {
    Model model(small_model(RoutingKind::DeltaBlock));
    TrainOutputs out;
    out.metrics_path = dir / ("m" + std::to_string(run) + ".jsonl");
    out.checkpoint_path = dir / ("c" + std::to_string(run) + ".ckpt");
    train(model, tcfg, data, out);
  }
  auto a = read_jsonl(dir / "m0.jsonl"), b = read_jsonl(dir / "m1.jsonl");
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].contains("max_weight"));
    a[i].erase("wall_time");
    b[i].erase("wall_time");
    CHECK(a[i].dump() == b[i].dump());
  }
  CHECK(slurp(dir / "c0.ckpt") == slurp(dir / "c1.ckpt"));
}

TEST_CASE("routing learning rate scales the first routing update linearly") {
  auto data = ByteDataset::from_bytes(oracle::toy_corpus(20000), 32);
  auto first_update = [&](double routing_lr) {
    Model model(small_model(RoutingKind::DeltaBlock));
    auto tcfg = small_train(10);
    tcfg.routing_lr = routing_lr;
    tcfg.eval_every = 1;
    std::vector<float> query;
    TrainOutputs out;
    out.on_record = [&](const MetricsRecord& r) {
      if (r.step != 1) return;
      auto q = model.find_parameter("layers.0.attn_route.query")->value.data();
      query.assign(q.begin(), q.end());
    };
    train(model, tcfg, data, out);
    return query;  // initial query is zero, so this is the update itself
  };
  const auto small = first_update(1e-3);
  const auto large = first_update(4e-3);
  double norm_small = 0, norm_large = 0;
  for (std::size_t i = 0; i < small.size(); ++i) {
    norm_small += double(small[i]) * small[i];
    norm_large += double(large[i]) * large[i];
  }
  REQUIRE(norm_small > 0);
  CHECK(std::sqrt(norm_large / norm_small) == doctest::Approx(4.0).epsilon(1e-4));
}

TEST_CASE("zero routing learning rate freezes routing parameters") {
  Model model(small_model(RoutingKind::DeltaAttnRes));
  auto tcfg = small_train(20);
  tcfg.routing_lr = 0.0;
  auto data = ByteDataset::from_bytes(oracle::toy_corpus(20000), tcfg.seq_len);
  std::vector<float> backbone_before(model.find_parameter("layers.0.attn.q")->value.data().begin(),
                                     model.find_parameter("layers.0.attn.q")->value.data().end());
  train(model, tcfg, data);
  for (const auto& p : model.parameters()) {
    if (!is_routing_param(p.kind)) continue;
    const float expected = p.kind == ParamKind::RoutingQuery ? 0.0f : 1.0f;
    for (float v : p.value.data()) CHECK(v == expected);
  }
  auto after = model.find_parameter("layers.0.attn.q")->value.data();
  CHECK_FALSE(std::equal(after.begin(), after.end(), backbone_before.begin()));
}

TEST_CASE("training rejects a corpus that cannot fill a batch before any step") {
  oracle::TempDir dir;
  Model model(small_model());
  auto tcfg = small_train(10);
  tcfg.batch_size = 64;
  auto data = ByteDataset::from_bytes(oracle::toy_corpus(2000), tcfg.seq_len);
  TrainOutputs out;
  out.metrics_path = dir / "metrics.jsonl";
  CHECK_THROWS_WITH_AS(train(model, tcfg, data, out), doctest::Contains("train.batch_size"), ConfigError);
  CHECK_FALSE(std::filesystem::exists(out.metrics_path));
}
