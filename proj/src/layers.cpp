#include "deltaroute/layers.hpp"

#include <cmath>

#include "deltaroute/errors.hpp"

namespace deltaroute {

template <typename Scalar>
BasicTensor<Scalar> Initializer::truncated_normal(Shape shape) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Scalar> data(shape_numel(shape));
  for (auto& v : data) {
    double z = normal(engine_);
    while (std::abs(z) > 2.0) z = normal(engine_);
    v = static_cast<Scalar>(z * stddev_);
  }
  return BasicTensor<Scalar>::from_data(std::move(shape), std::move(data), true);
}

template BasicTensor<float> Initializer::truncated_normal<float>(Shape);
template BasicTensor<double> Initializer::truncated_normal<double>(Shape);

template <typename Scalar>
NormLayer<Scalar>::NormLayer(std::size_t width, Scalar eps)
    : gain(BasicTensor<Scalar>::full({width}, Scalar(1), true)), eps(eps) {
  if (!(eps > Scalar(0))) throw ContractError("norm eps must be positive");
}

template <typename Scalar>
BasicTensor<Scalar> NormLayer<Scalar>::forward(const BasicTensor<Scalar>& x) const {
  return rmsnorm(x, gain, eps);
}

template <typename Scalar>
void NormLayer<Scalar>::collect(const std::string& prefix, ParamKind kind,
                                ParameterList<Scalar>& out) const {
  out.push_back({prefix + ".gain", gain, kind});
}

template <typename Scalar>
AttentionSublayer<Scalar>::AttentionSublayer(std::size_t d_model, std::size_t n_heads,
                                             double rope_theta, Initializer& init)
    : n_heads(n_heads), rope_theta(rope_theta) {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ContractError("head count " + std::to_string(n_heads) + " must divide d_model " +
                        std::to_string(d_model));
  }
  w_query = init.truncated_normal<Scalar>({d_model, d_model});
  w_key = init.truncated_normal<Scalar>({d_model, d_model});
  w_value = init.truncated_normal<Scalar>({d_model, d_model});
  w_output = init.truncated_normal<Scalar>({d_model, d_model});
}

template <typename Scalar>
BasicTensor<Scalar> AttentionSublayer<Scalar>::forward(const BasicTensor<Scalar>& x) const {
  auto q = rotary(matmul(x, w_query), n_heads, rope_theta);
  auto k = rotary(matmul(x, w_key), n_heads, rope_theta);
  auto v = matmul(x, w_value);
  return matmul(causal_attention(q, k, v, n_heads), w_output);
}

template <typename Scalar>
void AttentionSublayer<Scalar>::collect(const std::string& prefix,
                                        ParameterList<Scalar>& out) const {
  out.push_back({prefix + ".q", w_query, ParamKind::Matrix});
  out.push_back({prefix + ".k", w_key, ParamKind::Matrix});
  out.push_back({prefix + ".v", w_value, ParamKind::Matrix});
  out.push_back({prefix + ".o", w_output, ParamKind::Matrix});
}

template <typename Scalar>
MlpSublayer<Scalar>::MlpSublayer(std::size_t d_model, std::size_t width, Initializer& init) {
  w_gate = init.truncated_normal<Scalar>({d_model, width});
  w_up = init.truncated_normal<Scalar>({d_model, width});
  w_down = init.truncated_normal<Scalar>({width, d_model});
}

template <typename Scalar>
BasicTensor<Scalar> MlpSublayer<Scalar>::forward(const BasicTensor<Scalar>& x) const {
  return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down);
}

template <typename Scalar>
void MlpSublayer<Scalar>::collect(const std::string& prefix, ParameterList<Scalar>& out) const {
  out.push_back({prefix + ".gate", w_gate, ParamKind::Matrix});
  out.push_back({prefix + ".up", w_up, ParamKind::Matrix});
  out.push_back({prefix + ".down", w_down, ParamKind::Matrix});
}

template <typename Scalar>
TokenEmbedding<Scalar>::TokenEmbedding(std::size_t vocab, std::size_t d_model,
                                       Initializer& init)
    : table(init.truncated_normal<Scalar>({vocab, d_model})) {}

template <typename Scalar>
BasicTensor<Scalar> TokenEmbedding<Scalar>::forward(std::span<const std::int32_t> ids,
                                                    std::size_t batch, std::size_t seq) const {
  return embedding(table, ids, {batch, seq});
}

template <typename Scalar>
void TokenEmbedding<Scalar>::collect(const std::string& prefix,
                                     ParameterList<Scalar>& out) const {
  out.push_back({prefix + ".weight", table, ParamKind::Embedding});
}

template <typename Scalar>
LmHead<Scalar>::LmHead(std::size_t d_model, std::size_t vocab, bool tied, Initializer& init)
    : tied(tied) {
  if (!tied) weight = init.truncated_normal<Scalar>({d_model, vocab});
}

template <typename Scalar>
BasicTensor<Scalar> LmHead<Scalar>::forward(const BasicTensor<Scalar>& h,
                                            const TokenEmbedding<Scalar>& embed) const {
  return tied ? matmul(h, transpose(embed.table)) : matmul(h, weight);
}

template <typename Scalar>
void LmHead<Scalar>::collect(const std::string& prefix, ParameterList<Scalar>& out) const {
  if (!tied) out.push_back({prefix + ".weight", weight, ParamKind::Matrix});
}

template class NormLayer<float>;
template class NormLayer<double>;
template class AttentionSublayer<float>;
template class AttentionSublayer<double>;
template class MlpSublayer<float>;
template class MlpSublayer<double>;
template class TokenEmbedding<float>;
template class TokenEmbedding<double>;
template class LmHead<float>;
template class LmHead<double>;

}  // namespace deltaroute
