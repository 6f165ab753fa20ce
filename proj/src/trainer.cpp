#include "deltaroute/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include <json.hpp>

#include "deltaroute/analyzer.hpp"
#include "deltaroute/checkpoint.hpp"
#include "deltaroute/errors.hpp"

namespace deltaroute {

void TrainConfig::validate() const {
  if (steps == 0) throw ConfigError("train.steps must be positive");
  if (warmup_steps >= steps) throw ConfigError("train.warmup_steps must be below train.steps");
  if (!(peak_lr > 0.0)) throw ConfigError("train.peak_lr must be positive");
  // Zero is allowed: it freezes the routing parameters.
  if (routing_lr && !(*routing_lr >= 0.0)) throw ConfigError("train.routing_lr must not be negative");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (seq_len < 2) throw ConfigError("train.seq_len must be at least 2");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.betas[0] must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.betas[1] must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must not be negative");
  if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("train.grad_clip must be positive");
  if (eval_every == 0) throw ConfigError("train.eval_every must be positive");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("train.val_fraction must lie in (0, 1)");
  }
}

double lr_at(std::size_t step, const TrainConfig& config) {
  if (step >= config.steps) return 0.0;
  if (step <= config.warmup_steps) {
    if (config.warmup_steps == 0) return config.peak_lr;
    return config.peak_lr * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
  }
  const double progress = static_cast<double>(step - config.warmup_steps) /
                          static_cast<double>(config.steps - config.warmup_steps);
  return config.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename Scalar>
void adamw_update(std::span<Scalar> param, std::span<const Scalar> grad, AdamMoments& state,
                  std::size_t t, double lr, const AdamHyper& hyper, bool decay) {
  if (param.size() != grad.size()) throw DimensionError("adamw: gradient size differs from parameter");
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  if (state.m.size() != param.size()) throw DimensionError("adamw: moment size differs from parameter");
  if (t == 0) throw ContractError("adamw: step count starts at 1");
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
  const double shrink = decay ? 1.0 - lr * hyper.weight_decay : 1.0;
  const double b1 = hyper.beta1, b2 = hyper.beta2, eps = hyper.eps;
  const double step_size = lr / c1, inv_c2 = 1.0 / c2;
  Scalar* __restrict theta = param.data();
  const Scalar* __restrict g = grad.data();
  double* __restrict m = state.m.data();
  double* __restrict v = state.v.data();
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double gi = g[i];
    m[i] = b1 * m[i] + (1.0 - b1) * gi;
    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
    theta[i] = static_cast<Scalar>(static_cast<double>(theta[i]) * shrink -
                                   step_size * m[i] / (std::sqrt(v[i] * inv_c2) + eps));
  }
}

template <typename Scalar>
AdamW<Scalar>::AdamW(const ParameterList<Scalar>& params, AdamHyper hyper)
    : params_(params), state_(params.size()), hyper_(hyper) {}

template <typename Scalar>
void AdamW<Scalar>::step(double backbone_lr, double routing_lr) {
  for (const auto& p : params_) {
    for (Scalar g : p.value.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient in parameter " + p.name);
      }
    }
  }
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    const double lr = is_routing_param(p.kind) ? routing_lr : backbone_lr;
    auto handle = p.value;
    adamw_update<Scalar>(handle.mutable_data(), p.value.grad(), state_[i], t_, lr, hyper_,
                         takes_weight_decay(p.kind));
  }
}

template <typename Scalar>
double clip_grad_norm(const ParameterList<Scalar>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    for (Scalar g : p.value.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      auto handle = p.value;
      for (auto& g : handle.mutable_grad()) g = static_cast<Scalar>(g * factor);
    }
  }
  return norm;
}

ByteDataset ByteDataset::from_file(const std::filesystem::path& path, std::size_t seq_len,
                                   double val_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("train.data_path: cannot read " + path.string());
  std::string bytes{std::istreambuf_iterator<char>(in), {}};
  if (bytes.empty()) throw ConfigError("train.data_path: " + path.string() + " is empty");
  return from_bytes(std::move(bytes), seq_len, val_fraction);
}

ByteDataset ByteDataset::from_bytes(std::string bytes, std::size_t seq_len, double val_fraction) {
  if (bytes.empty()) throw ConfigError("train.data_path: corpus is empty");
  if (seq_len < 2) throw ConfigError("train.seq_len must be at least 2");
  const std::size_t windows = bytes.size() / seq_len;
  if (windows < 2) {
    throw ConfigError("train.data_path: corpus of " + std::to_string(bytes.size()) +
                      " bytes holds fewer than two windows of " + std::to_string(seq_len));
  }
  ByteDataset data;
  data.seq_len_ = seq_len;
  data.n_val_ = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(static_cast<double>(windows) * val_fraction)));
  data.n_train_ = windows - data.n_val_;
  data.tokens_.resize(windows * seq_len);
  for (std::size_t i = 0; i < data.tokens_.size(); ++i) {
    data.tokens_[i] = static_cast<std::int32_t>(static_cast<unsigned char>(bytes[i]));
  }
  return data;
}

std::span<const std::int32_t> ByteDataset::train_window(std::size_t i) const {
  if (i >= n_train_) throw IndexError("training window " + std::to_string(i) + " out of range");
  return {tokens_.data() + i * seq_len_, seq_len_};
}

std::span<const std::int32_t> ByteDataset::val_window(std::size_t i) const {
  if (i >= n_val_) throw IndexError("validation window " + std::to_string(i) + " out of range");
  return {tokens_.data() + (n_train_ + i) * seq_len_, seq_len_};
}

TokenBatch ByteDataset::train_batch(std::span<const std::size_t> windows) const {
  TokenBatch batch{windows.size(), seq_len_, {}};
  batch.ids.reserve(windows.size() * seq_len_);
  for (auto w : windows) {
    auto span = train_window(w);
    batch.ids.insert(batch.ids.end(), span.begin(), span.end());
  }
  return batch;
}

TokenBatch ByteDataset::val_batch(std::size_t first, std::size_t count) const {
  TokenBatch batch{count, seq_len_, {}};
  batch.ids.reserve(count * seq_len_);
  for (std::size_t i = 0; i < count; ++i) {
    auto span = val_window(first + i);
    batch.ids.insert(batch.ids.end(), span.begin(), span.end());
  }
  return batch;
}

BatchSampler::BatchSampler(std::size_t n_windows, std::size_t batch_size, std::uint64_t seed)
    : n_windows_(n_windows), batch_size_(batch_size), seed_(seed) {
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (n_windows < batch_size) {
    throw ConfigError("train.batch_size: " + std::to_string(batch_size) + " exceeds the " +
                      std::to_string(n_windows) + " training windows in the corpus");
  }
  reshuffle();
}

void BatchSampler::reshuffle() {
  order_.resize(n_windows_);
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::mt19937_64 rng(seed_ * 0x9E3779B97F4A7C15ULL + epoch_);
  std::shuffle(order_.begin(), order_.end(), rng);
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next() {
  if (cursor_ + batch_size_ > n_windows_) {
    ++epoch_;
    reshuffle();
  }
  std::vector<std::size_t> out(order_.begin() + cursor_, order_.begin() + cursor_ + batch_size_);
  cursor_ += batch_size_;
  return out;
}

std::string metrics_json_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["train_loss"] = r.train_loss;
  j["val_loss"] = r.val_loss;
  j["val_ppl"] = r.val_ppl;
  j["lr"] = r.lr;
  j["tokens_seen"] = r.tokens_seen;
  if (r.max_weight) j["max_weight"] = *r.max_weight;
  j["wall_time"] = r.wall_time;
  return j.dump();
}

double evaluate(const Model& model, const ByteDataset& data, std::size_t max_windows,
                std::size_t batch_size) {
  NoGradGuard no_grad;
  const std::size_t total = max_windows ? std::min(max_windows, data.n_val()) : data.n_val();
  double sum = 0;
  for (std::size_t first = 0; first < total; first += batch_size) {
    const std::size_t count = std::min(batch_size, total - first);
    sum += model.loss(data.val_batch(first, count)).item() * static_cast<double>(count);
  }
  return sum / static_cast<double>(total);
}

namespace {

std::vector<double> sharpness_snapshot(const Model& model, const ByteDataset& data,
                                       std::size_t batch_size) {
  NoGradGuard no_grad;
  ForwardOptions opts;
  opts.record_trace = true;
  auto batch = data.val_batch(0, std::min(batch_size, data.n_val()));
  auto trace = model.forward(batch, opts).trace;
  std::vector<double> out;
  for (const auto& site : sharpness(*trace).sites) out.push_back(site.value);
  return out;
}

}  // namespace

TrainResult train(Model& model, const TrainConfig& config, const ByteDataset& data,
                  const TrainOutputs& outputs) {
  config.validate();
  if (data.seq_len() != config.seq_len) {
    throw ContractError("dataset windows differ from train.seq_len");
  }
  if (config.seq_len - 1 > model.config().max_seq_len) {
    throw ConfigError("train.seq_len: exceeds model.max_seq_len + 1");
  }
  BatchSampler sampler(data.n_train(), config.batch_size, config.seed);

  std::ofstream metrics;
  if (!outputs.metrics_path.empty()) {
    metrics.open(outputs.metrics_path, std::ios::binary | std::ios::trunc);
    if (!metrics) throw IoError("cannot write " + outputs.metrics_path.string());
  }

  const auto start = std::chrono::steady_clock::now();
  const bool snapshot_routing = config.record_sharpness && model.config().routing.routed();
  TrainResult result;
  auto emit = [&](std::size_t step, double train_loss) {
    MetricsRecord r;
    r.step = step;
    r.train_loss = train_loss;
    r.val_loss = evaluate(model, data, config.eval_windows, config.batch_size);
    r.val_ppl = std::exp(r.val_loss);
    r.lr = lr_at(step, config);
    r.tokens_seen = step * config.batch_size * config.seq_len;
    if (snapshot_routing) r.max_weight = sharpness_snapshot(model, data, config.batch_size);
    r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (metrics.is_open()) {
      metrics << metrics_json_line(r) << '\n';
      metrics.flush();
      if (!metrics) throw IoError("failed writing " + outputs.metrics_path.string());
    }
    if (outputs.on_record) outputs.on_record(r);
    result.records.push_back(std::move(r));
  };

  {
    // Step 0 reports the loss of the first training batch without updating.
    BatchSampler peek = sampler;
    NoGradGuard no_grad;
    emit(0, model.loss(data.train_batch(peek.next())).item());
  }

  AdamW<float> optimizer(model.parameters(),
                         {config.beta1, config.beta2, config.adam_eps, config.weight_decay});
  double running = 0;
  std::size_t since_record = 0;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const auto batch = data.train_batch(sampler.next());
    model.zero_grad();
    auto loss = model.loss(batch);
    loss.backward();
    if (config.grad_clip) clip_grad_norm(model.parameters(), *config.grad_clip);
    const double lr = lr_at(step, config);
    const double routing_lr =
        config.routing_lr ? *config.routing_lr * (lr / config.peak_lr) : lr;
    optimizer.step(lr, routing_lr);
    running += loss.item();
    ++since_record;
    if (step % config.eval_every == 0 || step == config.steps) {
      emit(step, running / static_cast<double>(since_record));
      running = 0;
      since_record = 0;
    }
  }
  model.zero_grad();
  if (!outputs.checkpoint_path.empty()) save_model(model, outputs.checkpoint_path);
  return result;
}

template void adamw_update<float>(std::span<float>, std::span<const float>, AdamMoments&,
                                  std::size_t, double, const AdamHyper&, bool);
template void adamw_update<double>(std::span<double>, std::span<const double>, AdamMoments&,
                                   std::size_t, double, const AdamHyper&, bool);
template double clip_grad_norm<float>(const ParameterList<float>&, double);
template double clip_grad_norm<double>(const ParameterList<double>&, double);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace deltaroute
