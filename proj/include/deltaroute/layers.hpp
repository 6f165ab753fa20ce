#pragma once

// Pre-norm transformer building blocks. Weights are stored [in, out] so a
// projection is matmul(x, W). No biases anywhere.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "deltaroute/ops.hpp"
#include "deltaroute/tensor.hpp"

namespace deltaroute {

enum class ParamKind { Matrix, Embedding, NormGain, RoutingQuery, RoutingGain };

inline bool is_routing_param(ParamKind kind) {
  return kind == ParamKind::RoutingQuery || kind == ParamKind::RoutingGain;
}

/// AdamW skips decay for gains and routing queries.
inline bool takes_weight_decay(ParamKind kind) {
  return kind == ParamKind::Matrix || kind == ParamKind::Embedding;
}

template <typename Scalar>
struct Parameter {
  std::string name;
  BasicTensor<Scalar> value;
  ParamKind kind;
};

template <typename Scalar>
using ParameterList = std::vector<Parameter<Scalar>>;

/// Seeded source of initial weights: truncated normal (cut at two standard
/// deviations) for projections.
class Initializer {
 public:
  Initializer(std::uint64_t seed, double stddev) : engine_(seed), stddev_(stddev) {}

  template <typename Scalar>
  BasicTensor<Scalar> truncated_normal(Shape shape);

 private:
  std::mt19937_64 engine_;
  double stddev_;
};

template <typename Scalar>
class NormLayer {
 public:
  NormLayer() = default;
  NormLayer(std::size_t width, Scalar eps);

  BasicTensor<Scalar> forward(const BasicTensor<Scalar>& x) const;
  void collect(const std::string& prefix, ParamKind kind, ParameterList<Scalar>& out) const;

  BasicTensor<Scalar> gain;
  Scalar eps = Scalar(1e-6);
};

template <typename Scalar>
class AttentionSublayer {
 public:
  AttentionSublayer() = default;
  AttentionSublayer(std::size_t d_model, std::size_t n_heads, double rope_theta,
                    Initializer& init);

  /// Causal self-attention with rotary q/k over x[B, T, d].
  BasicTensor<Scalar> forward(const BasicTensor<Scalar>& x) const;
  void collect(const std::string& prefix, ParameterList<Scalar>& out) const;

  BasicTensor<Scalar> w_query, w_key, w_value, w_output;
  std::size_t n_heads = 1;
  double rope_theta = 10000.0;
};

template <typename Scalar>
class MlpSublayer {
 public:
  MlpSublayer() = default;
  MlpSublayer(std::size_t d_model, std::size_t width, Initializer& init);

  /// down(silu(gate(x)) * up(x))
  BasicTensor<Scalar> forward(const BasicTensor<Scalar>& x) const;
  void collect(const std::string& prefix, ParameterList<Scalar>& out) const;

  BasicTensor<Scalar> w_gate, w_up, w_down;
};

template <typename Scalar>
class TokenEmbedding {
 public:
  TokenEmbedding() = default;
  TokenEmbedding(std::size_t vocab, std::size_t d_model, Initializer& init);

  BasicTensor<Scalar> forward(std::span<const std::int32_t> ids, std::size_t batch,
                              std::size_t seq) const;
  void collect(const std::string& prefix, ParameterList<Scalar>& out) const;

  BasicTensor<Scalar> table;  // [V, d]
};

template <typename Scalar>
class LmHead {
 public:
  LmHead() = default;
  /// With `tied`, projects through the embedding table and owns no weight.
  LmHead(std::size_t d_model, std::size_t vocab, bool tied, Initializer& init);

  BasicTensor<Scalar> forward(const BasicTensor<Scalar>& h,
                              const TokenEmbedding<Scalar>& embed) const;
  void collect(const std::string& prefix, ParameterList<Scalar>& out) const;

  BasicTensor<Scalar> weight;  // [d, V], undefined when tied
  bool tied = false;
};

}  // namespace deltaroute
