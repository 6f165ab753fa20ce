#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deltaroute/model.hpp"

namespace deltaroute {

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t warmup_steps = 100;
  double peak_lr = 1e-3;
  /// Separate peak rate for routing queries and gains; unset means peak_lr.
  std::optional<double> routing_lr;
  std::size_t batch_size = 8;
  std::size_t seq_len = 64;  // tokens per window, including the shifted target
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  std::optional<double> grad_clip;  // global L2 norm
  std::size_t eval_every = 100;
  std::size_t eval_windows = 64;  // cap on validation windows per evaluation; 0 = all
  double val_fraction = 0.1;
  std::string data_path;
  std::uint64_t seed = 0;
  bool record_sharpness = true;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Linear ramp 0 -> peak over warmup, then cosine down to exactly 0 at `steps`.
double lr_at(std::size_t step, const TrainConfig& config);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

/// One AdamW update of a flat parameter. `t` is the 1-based step count used
/// for bias correction; decay is decoupled: theta *= (1 - lr * wd) first.
template <typename Scalar>
void adamw_update(std::span<Scalar> param, std::span<const Scalar> grad, AdamMoments& state,
                  std::size_t t, double lr, const AdamHyper& hyper, bool decay);

template <typename Scalar>
class AdamW {
 public:
  AdamW(const ParameterList<Scalar>& params, AdamHyper hyper);

  /// Applies one update using the gradients currently stored on the
  /// parameters. Throws NumericError naming the first non-finite gradient.
  void step(double backbone_lr, double routing_lr);
  std::size_t steps_taken() const { return t_; }

 private:
  ParameterList<Scalar> params_;
  std::vector<AdamMoments> state_;
  AdamHyper hyper_;
  std::size_t t_ = 0;
};

/// Global L2 norm of all gradients; rescales them to `max_norm` when above it.
/// Returns the norm before clipping.
template <typename Scalar>
double clip_grad_norm(const ParameterList<Scalar>& params, double max_norm);

/// Byte-level corpus cut into contiguous non-overlapping windows. The last
/// max(1, floor(n * val_fraction)) windows are held out for validation.
class ByteDataset {
 public:
  static ByteDataset from_file(const std::filesystem::path& path, std::size_t seq_len,
                               double val_fraction = 0.1);
  static ByteDataset from_bytes(std::string bytes, std::size_t seq_len, double val_fraction = 0.1);

  std::size_t seq_len() const { return seq_len_; }
  std::size_t n_train() const { return n_train_; }
  std::size_t n_val() const { return n_val_; }
  std::span<const std::int32_t> train_window(std::size_t i) const;
  std::span<const std::int32_t> val_window(std::size_t i) const;

  TokenBatch train_batch(std::span<const std::size_t> windows) const;
  TokenBatch val_batch(std::size_t first, std::size_t count) const;

 private:
  std::vector<std::int32_t> tokens_;
  std::size_t seq_len_ = 0;
  std::size_t n_train_ = 0;
  std::size_t n_val_ = 0;
};

/// Shuffled training order, reshuffled every epoch from the seed. A partial
/// batch at the end of an epoch is dropped.
class BatchSampler {
 public:
  BatchSampler(std::size_t n_windows, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();
  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle();

  std::size_t n_windows_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

struct MetricsRecord {
  std::size_t step = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_ppl = 0.0;
  double lr = 0.0;
  std::size_t tokens_seen = 0;
  double wall_time = 0.0;
  /// Per-site routing sharpness on the first validation batch, (layer, attn, mlp) order.
  std::optional<std::vector<double>> max_weight;
};

/// One JSON object on a single line, fields in declaration order.
std::string metrics_json_line(const MetricsRecord& record);

struct TrainOutputs {
  std::filesystem::path metrics_path;     // empty: no file
  std::filesystem::path checkpoint_path;  // empty: no checkpoint
  std::function<void(const MetricsRecord&)> on_record;
};

struct TrainResult {
  std::vector<MetricsRecord> records;
};

/// Mean next-token loss over the first `max_windows` validation windows
/// (all when 0), evaluated in batches of `batch_size`.
double evaluate(const Model& model, const ByteDataset& data, std::size_t max_windows,
                std::size_t batch_size);

/// Records at step 0 (before any update), every eval_every steps and at the
/// final step.
TrainResult train(Model& model, const TrainConfig& config, const ByteDataset& data,
                  const TrainOutputs& outputs = {});

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace deltaroute
