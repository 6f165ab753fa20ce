#include "deltaroute/config.hpp"

#include <algorithm>
#include <fstream>
#include <initializer_list>

#include "deltaroute/errors.hpp"

namespace deltaroute {

namespace {

using json = nlohmann::json;

/// Typed access to one config section with field-qualified errors.
class Section {
 public:
  Section(const json& doc, std::string name, bool required)
      : name_(std::move(name)) {
    if (!doc.contains(name_)) {
      if (required) throw ConfigError(name_ + ": missing section");
      node_ = &empty();
      return;
    }
    node_ = &doc.at(name_);
    if (!node_->is_object()) throw ConfigError(name_ + ": expected an object");
  }

  void allow_only(std::initializer_list<const char*> keys) const {
    for (const auto& [key, value] : node_->items()) {
      const bool known = std::any_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; });
      if (!known) throw ConfigError(field(key) + ": unknown field");
    }
  }

  bool has(const char* key) const { return node_->contains(key) && !node_->at(key).is_null(); }

  std::size_t count(const char* key, std::optional<std::size_t> fallback = std::nullopt) const {
    if (!has(key)) return require(key, fallback);
    const auto& v = node_->at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
      throw ConfigError(field(key) + ": expected a non-negative integer");
    }
    return v.get<std::size_t>();
  }

  double real(const char* key, std::optional<double> fallback = std::nullopt) const {
    if (!has(key)) return require(key, fallback);
    const auto& v = node_->at(key);
    if (!v.is_number()) throw ConfigError(field(key) + ": expected a number");
    return v.get<double>();
  }

  std::optional<double> optional_real(const char* key) const {
    if (!has(key)) return std::nullopt;
    return real(key);
  }

  bool flag(const char* key, bool fallback) const {
    if (!has(key)) return fallback;
    const auto& v = node_->at(key);
    if (!v.is_boolean()) throw ConfigError(field(key) + ": expected true or false");
    return v.get<bool>();
  }

  std::string text(const char* key, std::optional<std::string> fallback = std::nullopt) const {
    if (!has(key)) return require(key, fallback);
    const auto& v = node_->at(key);
    if (!v.is_string()) throw ConfigError(field(key) + ": expected a string");
    return v.get<std::string>();
  }

  const json& raw(const char* key) const { return node_->at(key); }
  std::string field(const std::string& key) const { return name_ + "." + key; }

 private:
  template <typename T>
  T require(const char* key, const std::optional<T>& fallback) const {
    if (!fallback) throw ConfigError(field(key) + ": missing required field");
    return *fallback;
  }

  static const json& empty() {
    static const json e = json::object();
    return e;
  }

  std::string name_;
  const json* node_ = nullptr;
};

std::uint64_t read_seed(const json& doc) {
  if (!doc.contains("seed")) return 0;
  const auto& v = doc.at("seed");
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
    throw ConfigError("seed: expected a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

json model_config_to_json(const ModelConfig& c) {
  return {{"seed", c.seed},
          {"model",
           {{"d_model", c.d_model},
            {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},
            {"mlp_width", c.resolved_mlp_width()},
            {"vocab_size", c.vocab_size},
            {"max_seq_len", c.max_seq_len},
            {"rope_theta", c.rope_theta},
            {"init_std", c.init_std},
            {"norm_eps", c.norm_eps},
            {"tie_embeddings", c.tie_embeddings}}},
          {"routing",
           {{"mode", std::string(mode_name(c.routing.kind))},
            {"block_size", c.routing.block_size},
            {"null_source", c.routing.null_source}}}};
}

ModelConfig model_config_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config: expected a JSON object");
  const ModelConfig d;
  ModelConfig c;
  c.seed = read_seed(doc);

  Section model(doc, "model", true);
  model.allow_only({"d_model", "n_layers", "n_heads", "mlp_width", "vocab_size", "max_seq_len",
                    "rope_theta", "init_std", "norm_eps", "tie_embeddings"});
  c.d_model = model.count("d_model");
  c.n_layers = model.count("n_layers");
  c.n_heads = model.count("n_heads");
  c.mlp_width = model.count("mlp_width", 0);
  c.vocab_size = model.count("vocab_size", d.vocab_size);
  c.max_seq_len = model.count("max_seq_len", d.max_seq_len);
  c.rope_theta = model.real("rope_theta", d.rope_theta);
  c.init_std = model.real("init_std", d.init_std);
  c.norm_eps = model.real("norm_eps", d.norm_eps);
  c.tie_embeddings = model.flag("tie_embeddings", d.tie_embeddings);

  Section routing(doc, "routing", true);
  routing.allow_only({"mode", "block_size", "num_blocks", "null_source"});
  const auto name = routing.text("mode");
  const auto kind = parse_mode(name);
  if (!kind) {
    throw ConfigError("routing.mode: unknown mode '" + name +
                      "' (expected baseline, attnres, full_attnres, delta_attnres or delta_block)");
  }
  c.routing.kind = *kind;
  if (routing.has("block_size") && routing.has("num_blocks")) {
    throw ConfigError("routing.num_blocks: give either block_size or num_blocks, not both");
  }
  if (routing.has("num_blocks")) {
    const auto blocks = routing.count("num_blocks");
    if (blocks == 0) throw ConfigError("routing.num_blocks must be positive");
    c.routing.block_size = block_size_for_blocks(c.n_layers, blocks);
  } else {
    c.routing.block_size = routing.count("block_size", d.routing.block_size);
  }
  c.routing.null_source = routing.flag("null_source", false);
  c.validate();
  return c;
}

json experiment_to_json(const ExperimentConfig& config) {
  json doc = model_config_to_json(config.model);
  const auto& t = config.train;
  doc["train"] = {{"steps", t.steps},
                  {"warmup_steps", t.warmup_steps},
                  {"peak_lr", t.peak_lr},
                  {"routing_lr", optional_json(t.routing_lr)},
                  {"batch_size", t.batch_size},
                  {"seq_len", t.seq_len},
                  {"betas", {t.beta1, t.beta2}},
                  {"adam_eps", t.adam_eps},
                  {"weight_decay", t.weight_decay},
                  {"grad_clip", optional_json(t.grad_clip)},
                  {"eval_every", t.eval_every},
                  {"eval_windows", t.eval_windows},
                  {"val_fraction", t.val_fraction},
                  {"data_path", t.data_path},
                  {"record_sharpness", t.record_sharpness}};
  return doc;
}

ExperimentConfig experiment_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config: expected a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (key != "seed" && key != "model" && key != "routing" && key != "train") {
      throw ConfigError(key + ": unknown section");
    }
  }
  ExperimentConfig config;
  config.model = model_config_from_json(doc);

  Section train(doc, "train", true);
  train.allow_only({"steps", "warmup_steps", "peak_lr", "routing_lr", "batch_size", "seq_len",
                    "betas", "adam_eps", "weight_decay", "grad_clip", "eval_every",
                    "eval_windows", "val_fraction", "data_path", "record_sharpness"});
  const TrainConfig d;
  TrainConfig& t = config.train;
  t.steps = train.count("steps");
  t.warmup_steps = train.count("warmup_steps", std::min(d.warmup_steps, t.steps / 10));
  t.peak_lr = train.real("peak_lr", d.peak_lr);
  t.routing_lr = train.optional_real("routing_lr");
  t.batch_size = train.count("batch_size", d.batch_size);
  t.seq_len = train.count("seq_len", d.seq_len);
  if (train.has("betas")) {
    const auto& b = train.raw("betas");
    if (!b.is_array() || b.size() != 2 || !b[0].is_number() || !b[1].is_number()) {
      throw ConfigError("train.betas: expected two numbers");
    }
    t.beta1 = b[0].get<double>();
    t.beta2 = b[1].get<double>();
  }
  t.adam_eps = train.real("adam_eps", d.adam_eps);
  t.weight_decay = train.real("weight_decay", d.weight_decay);
  t.grad_clip = train.optional_real("grad_clip");
  t.eval_every = train.count("eval_every", d.eval_every);
  t.eval_windows = train.count("eval_windows", d.eval_windows);
  t.val_fraction = train.real("val_fraction", d.val_fraction);
  t.data_path = train.text("data_path");
  t.record_sharpness = train.flag("record_sharpness", d.record_sharpness);
  t.seed = config.model.seed;
  t.validate();
  if (t.seq_len - 1 > config.model.max_seq_len) {
    throw ConfigError("train.seq_len: exceeds model.max_seq_len + 1");
  }
  return config;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config: cannot read " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON (" + e.what() + ")");
  }
  auto config = experiment_from_json(doc);
  std::filesystem::path data(config.train.data_path);
  if (data.is_relative()) config.train.data_path = (path.parent_path() / data).lexically_normal().string();
  return config;
}

}  // namespace deltaroute
