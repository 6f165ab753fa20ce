#include "deltaroute/model.hpp"

#include "deltaroute/errors.hpp"
#include "deltaroute/ops.hpp"

namespace deltaroute {

namespace {

void require_positive(std::size_t value, const char* field) {
  if (value == 0) throw ConfigError(std::string("model.") + field + " must be positive");
}

template <typename Scalar>
std::vector<double> as_double(const BasicTensor<Scalar>& t) {
  auto d = t.data();
  return {d.begin(), d.end()};
}

}  // namespace

void ModelConfig::validate() const {
  require_positive(d_model, "d_model");
  require_positive(n_layers, "n_layers");
  require_positive(n_heads, "n_heads");
  require_positive(vocab_size, "vocab_size");
  require_positive(max_seq_len, "max_seq_len");
  if (d_model % n_heads != 0) {
    throw ConfigError("model.n_heads must divide model.d_model");
  }
  if ((d_model / n_heads) % 2 != 0) {
    throw ConfigError("model.d_model / model.n_heads must be even for rotary encoding");
  }
  if (!(init_std > 0.0)) throw ConfigError("model.init_std must be positive");
  if (!(norm_eps > 0.0)) throw ConfigError("model.norm_eps must be positive");
  if (!(rope_theta > 0.0)) throw ConfigError("model.rope_theta must be positive");
  if (routing.block_size == 0) throw ConfigError("routing.block_size must be positive");
}

std::size_t routing_param_count(const ModelConfig& config) {
  return routing_param_count(config.routing, config.d_model, config.n_layers);
}

std::string_view sublayer_name(SublayerKind kind) {
  return kind == SublayerKind::Attention ? "attn" : "mlp";
}

template <typename Scalar>
BasicModel<Scalar>::BasicModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto d = config_.d_model;
  const auto eps = static_cast<Scalar>(config_.norm_eps);
  Initializer init(config_.seed, config_.init_std);

  // Only backbone weights draw from the generator, so every routing mode gets
  // the same backbone for a given seed.
  embed_ = TokenEmbedding<Scalar>(config_.vocab_size, d, init);
  layers_.reserve(config_.n_layers);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    Layer layer;
    layer.attn_norm = NormLayer<Scalar>(d, eps);
    layer.mlp_norm = NormLayer<Scalar>(d, eps);
    layer.attention = AttentionSublayer<Scalar>(d, config_.n_heads, config_.rope_theta, init);
    layer.mlp = MlpSublayer<Scalar>(d, config_.resolved_mlp_width(), init);
    if (config_.routing.routed()) {
      layer.attn_route = RoutingSite<Scalar>(d, Scalar(1e-6));
      layer.mlp_route = RoutingSite<Scalar>(d, Scalar(1e-6));
    }
    layers_.push_back(std::move(layer));
  }
  final_norm_ = NormLayer<Scalar>(d, eps);
  lm_head_ = LmHead<Scalar>(d, config_.vocab_size, config_.tie_embeddings, init);

  embed_.collect("embed", parameters_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto prefix = "layers." + std::to_string(l);
    const auto& layer = layers_[l];
    layer.attn_norm.collect(prefix + ".attn_norm", ParamKind::NormGain, parameters_);
    layer.attention.collect(prefix + ".attn", parameters_);
    layer.mlp_norm.collect(prefix + ".mlp_norm", ParamKind::NormGain, parameters_);
    layer.mlp.collect(prefix + ".mlp", parameters_);
    if (config_.routing.routed()) {
      layer.attn_route.collect(prefix + ".attn_route", parameters_);
      layer.mlp_route.collect(prefix + ".mlp_route", parameters_);
    }
  }
  final_norm_.collect("final_norm", ParamKind::NormGain, parameters_);
  lm_head_.collect("lm_head", parameters_);
}

template <typename Scalar>
ForwardResult<Scalar> BasicModel<Scalar>::forward(const TokenBatch& tokens,
                                                  const ForwardOptions& options) const {
  if (tokens.batch == 0 || tokens.seq == 0 || tokens.ids.size() != tokens.batch * tokens.seq) {
    throw DimensionError("token batch does not match its [batch, seq] layout");
  }
  if (tokens.seq > config_.max_seq_len) {
    throw ContractError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq_len " +
                        std::to_string(config_.max_seq_len));
  }
  const RoutingMode& mode = config_.routing;
  ForwardResult<Scalar> result;
  if (options.record_trace) result.trace = RoutingTrace{std::string(mode_name(mode.kind)), {}};
  if (options.capture_hidden) {
    result.hidden = HiddenCapture{tokens.batch, tokens.seq, config_.d_model, {}};
  }

  Tensor hidden = embed_.forward(tokens.ids, tokens.batch, tokens.seq);
  result.embedding = hidden;
  DeltaStore<Scalar> store(mode);
  store.seed(hidden);
  if (result.hidden) result.hidden->states.push_back(as_double(hidden));

  auto route = [&](const RoutingSite<Scalar>& site, const Tensor& residual, std::size_t layer,
                   SublayerKind kind) -> Tensor {
    if (!mode.routed()) return residual;
    std::vector<Tensor> sources;
    if (!options.null_only_sources) sources = store.routing_sources(residual);
    if (mode.null_source || options.null_only_sources) {
      null_source_inject(sources, residual.shape());
    }
    auto routed = mode.additive()
                      ? depth_route_additive<Scalar>(sources, residual, site)
                      : depth_route_replace<Scalar>(sources, site);
    if (result.trace && routed.weights.defined()) {
      result.trace->sites.push_back({layer, kind, routed.weights.dim(0), tokens.batch,
                                     tokens.seq, as_double(routed.weights)});
    }
    return routed.output;
  };

  auto advance = [&](const Tensor& sublayer_out) {
    if (mode.replacement()) {
      store.attnres_accumulate(sublayer_out);
      hidden = store.partial_block();
    } else {
      hidden = add(hidden, sublayer_out);
      if (mode.kind == RoutingKind::DeltaAttnRes) store.update_delta_attnres(sublayer_out);
    }
    if (result.hidden) result.hidden->states.push_back(as_double(hidden));
  };

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];

    Tensor attn_in = route(layer.attn_route, hidden, l, SublayerKind::Attention);
    if (mode.replacement()) store.attnres_boundary(l);
    advance(layer.attention.forward(layer.attn_norm.forward(attn_in)));

    Tensor mlp_in = route(layer.mlp_route, hidden, l, SublayerKind::Mlp);
    advance(layer.mlp.forward(layer.mlp_norm.forward(mlp_in)));

    if (mode.kind == RoutingKind::DeltaBlock) {
      store.update_delta_block(hidden, l, layers_.size());
    }
  }

  result.final_hidden = hidden;
  result.logits = lm_head_.forward(final_norm_.forward(hidden), embed_);
  result.store = std::move(store);
  return result;
}

template <typename Scalar>
BasicTensor<Scalar> BasicModel<Scalar>::loss(const TokenBatch& tokens,
                                             const ForwardOptions& options) const {
  if (tokens.seq < 2) throw ContractError("loss needs at least two tokens per sequence");
  if (tokens.ids.size() != tokens.batch * tokens.seq) {
    throw DimensionError("token batch does not match its [batch, seq] layout");
  }
  TokenBatch inputs{tokens.batch, tokens.seq - 1, {}};
  std::vector<std::int32_t> targets;
  inputs.ids.reserve(tokens.batch * (tokens.seq - 1));
  targets.reserve(tokens.batch * (tokens.seq - 1));
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    const auto* row = tokens.ids.data() + b * tokens.seq;
    inputs.ids.insert(inputs.ids.end(), row, row + tokens.seq - 1);
    targets.insert(targets.end(), row + 1, row + tokens.seq);
  }
  auto result = forward(inputs, options);
  return cross_entropy(result.logits, std::span<const std::int32_t>(targets));
}

template <typename Scalar>
const Parameter<Scalar>* BasicModel<Scalar>::find_parameter(const std::string& name) const {
  for (const auto& p : parameters_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template <typename Scalar>
std::size_t BasicModel<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters_) n += p.value.numel();
  return n;
}

template <typename Scalar>
std::size_t BasicModel<Scalar>::routing_parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters_) {
    if (is_routing_param(p.kind)) n += p.value.numel();
  }
  return n;
}

template <typename Scalar>
void BasicModel<Scalar>::zero_grad() {
  for (auto& p : parameters_) p.value.zero_grad();
}

template class BasicModel<float>;
template class BasicModel<double>;

}  // namespace deltaroute
