#include "deltaroute/routing.hpp"

#include <array>

#include "deltaroute/errors.hpp"
#include "deltaroute/ops.hpp"

namespace deltaroute {

namespace {

constexpr std::array<std::pair<RoutingKind, std::string_view>, 5> kModeNames{{
    {RoutingKind::Baseline, "baseline"},
    {RoutingKind::AttnRes, "attnres"},
    {RoutingKind::FullAttnRes, "full_attnres"},
    {RoutingKind::DeltaAttnRes, "delta_attnres"},
    {RoutingKind::DeltaBlock, "delta_block"},
}};

template <typename Scalar>
RoutedOutput<Scalar> mix_sources(std::span<const BasicTensor<Scalar>> sources,
                                 const RoutingSite<Scalar>& site) {
  auto [mixed, weights] = depth_mix(sources, site.query, site.norm.gain, site.norm.eps);
  return {std::move(mixed), std::move(weights)};
}

}  // namespace

std::string_view mode_name(RoutingKind kind) {
  for (const auto& [k, name] : kModeNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

std::optional<RoutingKind> parse_mode(std::string_view name) {
  for (const auto& [k, n] : kModeNames) {
    if (n == name) return k;
  }
  return std::nullopt;
}

const std::vector<std::string>& all_mode_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [k, n] : kModeNames) out.emplace_back(n);
    return out;
  }();
  return names;
}

std::size_t block_size_for_blocks(std::size_t n_layers, std::size_t num_blocks) {
  if (num_blocks == 0) throw ContractError("number of blocks must be positive");
  return (n_layers + num_blocks - 1) / num_blocks;
}

std::size_t routing_param_count(const RoutingMode& mode, std::size_t d_model,
                                std::size_t n_layers) {
  if (!mode.routed()) return 0;
  return 2 * n_layers * 2 * d_model;
}

template <typename Scalar>
RoutingSite<Scalar>::RoutingSite(std::size_t d_model, Scalar eps)
    : query(BasicTensor<Scalar>::zeros({d_model}, true)), norm(d_model, eps) {}

template <typename Scalar>
void RoutingSite<Scalar>::collect(const std::string& prefix, ParameterList<Scalar>& out) const {
  out.push_back({prefix + ".query", query, ParamKind::RoutingQuery});
  norm.collect(prefix + ".norm", ParamKind::RoutingGain, out);
}

template <typename Scalar>
RoutedOutput<Scalar> depth_route_additive(std::span<const BasicTensor<Scalar>> sources,
                                          const BasicTensor<Scalar>& residual,
                                          const RoutingSite<Scalar>& site) {
  if (sources.empty()) return {residual, {}};
  for (const auto& s : sources) {
    if (s.shape() != residual.shape()) {
      throw DimensionError("depth_route: source shape " + shape_to_string(s.shape()) +
                           " differs from residual " + shape_to_string(residual.shape()));
    }
  }
  auto routed = mix_sources(sources, site);
  routed.output = add(residual, routed.output);
  return routed;
}

template <typename Scalar>
RoutedOutput<Scalar> depth_route_replace(std::span<const BasicTensor<Scalar>> sources,
                                         const RoutingSite<Scalar>& site) {
  if (sources.empty()) {
    throw ContractError("replacement routing needs at least one source");
  }
  return mix_sources(sources, site);
}

template <typename Scalar>
void null_source_inject(std::vector<BasicTensor<Scalar>>& sources, const Shape& shape) {
  sources.push_back(BasicTensor<Scalar>::zeros(shape));
}

template <typename Scalar>
void DeltaStore<Scalar>::seed(const Tensor& embedding) {
  sources_.clear();
  completed_blocks_ = 0;
  last_boundary_ = embedding;
  partial_ = embedding;
  if (mode_.additive()) sources_.push_back(embedding);
}

template <typename Scalar>
std::vector<BasicTensor<Scalar>> DeltaStore<Scalar>::routing_sources(const Tensor& hidden) const {
  std::vector<Tensor> out = sources_;
  switch (mode_.kind) {
    case RoutingKind::DeltaBlock:
      out.push_back(sub(hidden, last_boundary_));
      break;
    case RoutingKind::AttnRes:
    case RoutingKind::FullAttnRes:
      out.push_back(partial_);
      break;
    default:
      break;
  }
  return out;
}

template <typename Scalar>
void DeltaStore<Scalar>::update_delta_attnres(const Tensor& sublayer_out) {
  sources_.push_back(sublayer_out);
}

template <typename Scalar>
void DeltaStore<Scalar>::update_delta_block(const Tensor& hidden, std::size_t layer_index,
                                            std::size_t n_layers) {
  const std::size_t block = mode_.effective_block_size();
  const bool boundary = (layer_index + 1) % block == 0 || layer_index + 1 == n_layers;
  if (!boundary) return;
  sources_.push_back(sub(hidden, last_boundary_));
  last_boundary_ = hidden;
  ++completed_blocks_;
}

template <typename Scalar>
bool DeltaStore<Scalar>::attnres_boundary(std::size_t layer_index) {
  if (layer_index % mode_.effective_block_size() != 0) return false;
  sources_.push_back(partial_);
  partial_ = Tensor();
  ++completed_blocks_;
  return true;
}

template <typename Scalar>
void DeltaStore<Scalar>::attnres_accumulate(const Tensor& sublayer_out) {
  partial_ = partial_.defined() ? add(partial_, sublayer_out) : sublayer_out;
}

template class RoutingSite<float>;
template class RoutingSite<double>;
template class DeltaStore<float>;
template class DeltaStore<double>;

#define DELTAROUTE_INSTANTIATE_ROUTING(S)                                                  \
  template RoutedOutput<S> depth_route_additive(std::span<const BasicTensor<S>>,           \
                                                const BasicTensor<S>&, const RoutingSite<S>&); \
  template RoutedOutput<S> depth_route_replace(std::span<const BasicTensor<S>>,            \
                                               const RoutingSite<S>&);                     \
  template void null_source_inject(std::vector<BasicTensor<S>>&, const Shape&);

DELTAROUTE_INSTANTIATE_ROUTING(float)
DELTAROUTE_INSTANTIATE_ROUTING(double)

#undef DELTAROUTE_INSTANTIATE_ROUTING

}  // namespace deltaroute
