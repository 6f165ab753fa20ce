#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "deltaroute/layers.hpp"
#include "deltaroute/routing.hpp"
#include "deltaroute/tensor.hpp"

namespace deltaroute {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t mlp_width = 0;  // 0 selects 4 * d_model
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 128;
  double rope_theta = 10000.0;
  double init_std = 0.02;
  double norm_eps = 1e-6;
  bool tie_embeddings = false;
  RoutingMode routing;
  std::uint64_t seed = 0;

  std::size_t resolved_mlp_width() const { return mlp_width ? mlp_width : 4 * d_model; }
  /// Throws ConfigError naming the offending field.
  void validate() const;
};

std::size_t routing_param_count(const ModelConfig& config);

/// Token ids laid out [batch, seq].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;
};

enum class SublayerKind { Attention, Mlp };
std::string_view sublayer_name(SublayerKind kind);

/// Routing weights recorded at one site during a forward pass.
struct SiteTrace {
  std::size_t layer = 0;
  SublayerKind kind = SublayerKind::Attention;
  std::size_t n_sources = 0;
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<double> weights;  // [n_sources, batch, seq]

  double weight(std::size_t source, std::size_t b, std::size_t t) const {
    return weights[(source * batch + b) * seq + t];
  }
};

struct RoutingTrace {
  std::string mode;
  std::vector<SiteTrace> sites;  // ordered by (layer, attention, mlp)
};

/// Residual-stream states h_0 (embedding) through h_{2L}, one per sublayer
/// boundary, each [batch, seq, d].
struct HiddenCapture {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t d = 0;
  std::vector<std::vector<double>> states;
};

struct ForwardOptions {
  bool record_trace = false;
  bool capture_hidden = false;
  /// Contrived store holding only the null source at every routing site.
  bool null_only_sources = false;
};

template <typename Scalar>
struct ForwardResult {
  BasicTensor<Scalar> logits;        // [B, T, V]
  BasicTensor<Scalar> embedding;     // h_0
  BasicTensor<Scalar> final_hidden;  // input to the final norm
  DeltaStore<Scalar> store;          // state at the end of the pass
  std::optional<RoutingTrace> trace;
  std::optional<HiddenCapture> hidden;
};

template <typename Scalar>
class BasicModel {
 public:
  using Tensor = BasicTensor<Scalar>;

  explicit BasicModel(ModelConfig config);
  BasicModel(const BasicModel&) = delete;
  BasicModel& operator=(const BasicModel&) = delete;
  BasicModel(BasicModel&&) noexcept = default;
  BasicModel& operator=(BasicModel&&) noexcept = default;

  const ModelConfig& config() const { return config_; }

  ForwardResult<Scalar> forward(const TokenBatch& tokens, const ForwardOptions& options = {}) const;

  /// Next-token cross-entropy: positions 0..T-2 predict 1..T-1.
  Tensor loss(const TokenBatch& tokens, const ForwardOptions& options = {}) const;

  /// Parameters in initialization order.
  const ParameterList<Scalar>& parameters() const { return parameters_; }
  const Parameter<Scalar>* find_parameter(const std::string& name) const;
  std::size_t parameter_count() const;
  std::size_t routing_parameter_count() const;
  void zero_grad();

 private:
  struct Layer {
    RoutingSite<Scalar> attn_route;
    RoutingSite<Scalar> mlp_route;
    NormLayer<Scalar> attn_norm;
    NormLayer<Scalar> mlp_norm;
    AttentionSublayer<Scalar> attention;
    MlpSublayer<Scalar> mlp;
  };

  ModelConfig config_;
  TokenEmbedding<Scalar> embed_;
  std::vector<Layer> layers_;
  NormLayer<Scalar> final_norm_;
  LmHead<Scalar> lm_head_;
  ParameterList<Scalar> parameters_;
};

using Model = BasicModel<float>;
using Model64 = BasicModel<double>;

extern template class BasicModel<float>;
extern template class BasicModel<double>;

}  // namespace deltaroute
