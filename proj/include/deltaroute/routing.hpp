#pragma once

// Depth routing: softmax attention over a list of depth-indexed source
// tensors, per (batch, position). Each routing site owns a query vector w
// (zero at init) and an RMSNorm gain applied to the sources before scoring:
//
//   alpha_n = softmax_n( w . rmsnorm(source_n) )
//   additive:    out = residual + sum_n alpha_n * source_n
//   replacement: out =            sum_n alpha_n * source_n
//
// DeltaStore keeps the per-pass source list for each mechanism:
//   DeltaAttnRes  embedding, then every raw attention / MLP output
//   DeltaBlock    embedding, then one delta per completed block, plus the live
//                 partial delta (hidden - last boundary) at routing time
//   AttnRes       completed block states plus the live partial block, which is
//                 reset at every block boundary

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deltaroute/layers.hpp"
#include "deltaroute/tensor.hpp"

namespace deltaroute {

enum class RoutingKind { Baseline, AttnRes, FullAttnRes, DeltaAttnRes, DeltaBlock };

/// CLI / config spelling: baseline, attnres, full_attnres, delta_attnres, delta_block.
std::string_view mode_name(RoutingKind kind);
std::optional<RoutingKind> parse_mode(std::string_view name);
const std::vector<std::string>& all_mode_names();

struct RoutingMode {
  RoutingKind kind = RoutingKind::Baseline;
  std::size_t block_size = 4;  // layers per block
  bool null_source = false;

  bool routed() const { return kind != RoutingKind::Baseline; }
  bool additive() const {
    return kind == RoutingKind::DeltaAttnRes || kind == RoutingKind::DeltaBlock;
  }
  bool replacement() const {
    return kind == RoutingKind::AttnRes || kind == RoutingKind::FullAttnRes;
  }
  /// FullAttnRes always uses one layer per block.
  std::size_t effective_block_size() const {
    return kind == RoutingKind::FullAttnRes ? 1 : block_size;
  }
};

/// Layers per block for a requested number of blocks: ceil(L / B).
std::size_t block_size_for_blocks(std::size_t n_layers, std::size_t num_blocks);

/// Two sites per layer, each holding a d-wide query and a d-wide norm gain.
std::size_t routing_param_count(const RoutingMode& mode, std::size_t d_model,
                                std::size_t n_layers);

template <typename Scalar>
class RoutingSite {
 public:
  RoutingSite() = default;
  RoutingSite(std::size_t d_model, Scalar eps);

  void collect(const std::string& prefix, ParameterList<Scalar>& out) const;

  BasicTensor<Scalar> query;  // [d], zero at init
  NormLayer<Scalar> norm;
};

template <typename Scalar>
struct RoutedOutput {
  BasicTensor<Scalar> output;
  BasicTensor<Scalar> weights;  // [N, B, T]; undefined when no sources were routed
};

/// residual + sum_n alpha_n * sources[n]. An empty source list returns
/// `residual` itself.
template <typename Scalar>
RoutedOutput<Scalar> depth_route_additive(std::span<const BasicTensor<Scalar>> sources,
                                          const BasicTensor<Scalar>& residual,
                                          const RoutingSite<Scalar>& site);

/// sum_n alpha_n * sources[n]; requires at least one source.
template <typename Scalar>
RoutedOutput<Scalar> depth_route_replace(std::span<const BasicTensor<Scalar>> sources,
                                         const RoutingSite<Scalar>& site);

/// Appends an all-zero source of the given shape. Its logit is exactly zero and
/// its contribution is exactly zero whatever weight it receives.
template <typename Scalar>
void null_source_inject(std::vector<BasicTensor<Scalar>>& sources, const Shape& shape);

template <typename Scalar>
class DeltaStore {
 public:
  using Tensor = BasicTensor<Scalar>;

  DeltaStore() = default;
  explicit DeltaStore(RoutingMode mode) : mode_(mode) {}

  /// Starts a pass from the embedding output.
  void seed(const Tensor& embedding);

  /// Completed sources plus, for DeltaBlock and AttnRes, the live partial.
  std::vector<Tensor> routing_sources(const Tensor& hidden) const;

  /// DeltaAttnRes: append one raw sublayer output.
  void update_delta_attnres(const Tensor& sublayer_out);

  /// DeltaBlock: after layer `layer_index` completes, close the block when the
  /// layer ends one (or is the final layer of a short last block).
  void update_delta_block(const Tensor& hidden, std::size_t layer_index, std::size_t n_layers);

  /// AttnRes: boundary check ahead of the attention sublayer. Stores the
  /// partial block and resets it.
  bool attnres_boundary(std::size_t layer_index);
  /// AttnRes: partial block accumulates a sublayer output (restarting from it
  /// after a reset).
  void attnres_accumulate(const Tensor& sublayer_out);

  const std::vector<Tensor>& sources() const { return sources_; }
  const Tensor& last_boundary() const { return last_boundary_; }
  const Tensor& partial_block() const { return partial_; }
  std::size_t completed_blocks() const { return completed_blocks_; }
  const RoutingMode& mode() const { return mode_; }

 private:
  RoutingMode mode_;
  std::vector<Tensor> sources_;
  Tensor last_boundary_;
  Tensor partial_;
  std::size_t completed_blocks_ = 0;
};

extern template class RoutingSite<float>;
extern template class RoutingSite<double>;
extern template class DeltaStore<float>;
extern template class DeltaStore<double>;

}  // namespace deltaroute
