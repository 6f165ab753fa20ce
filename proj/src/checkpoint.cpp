#include "deltaroute/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "deltaroute/config.hpp"
#include "deltaroute/errors.hpp"

namespace deltaroute {

namespace {

constexpr char kMagic[8] = {'D', 'R', 'O', 'U', 'T', 'C', 'K', '\x01'};

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  template <typename T>
  void integer(T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
  void u32(std::size_t value, const char* what) {
    if (value > 0xFFFFFFFFu) throw FormatError(std::string(what) + " too large for the checkpoint format");
    integer<std::uint32_t>(static_cast<std::uint32_t>(value));
  }
  void text(const std::string& s, const char* what) {
    u32(s.size(), what);
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  const std::uint8_t* take(std::size_t n, const char* what) {
    if (n > size_ - pos_) throw FormatError(std::string("checkpoint truncated while reading ") + what);
    const auto* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  template <typename T>
  T integer(const char* what) {
    const auto* p = take(sizeof(T), what);
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(p[i]) << (8 * i);
    return value;
  }
  std::string text(const char* what) {
    const auto n = integer<std::uint32_t>(what);
    const auto* p = take(n, what);
    return {reinterpret_cast<const char*>(p), n};
  }
  std::size_t position() const { return pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= data[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::vector<std::uint8_t> serialize(const Checkpoint& checkpoint) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.integer<std::uint32_t>(kCheckpointVersion);
  w.text(model_config_to_json(checkpoint.config).dump(), "config");
  w.u32(checkpoint.tensors.size(), "tensor count");
  for (const auto& t : checkpoint.tensors) {
    if (t.values.size() != shape_numel(t.shape)) {
      throw DimensionError("checkpoint tensor " + t.name + " holds " + std::to_string(t.values.size()) +
                           " values for shape " + shape_to_string(t.shape));
    }
    w.text(t.name, "tensor name");
    w.u32(t.shape.size(), "tensor rank");
    for (auto d : t.shape) w.integer<std::uint64_t>(d);
  }
  for (const auto& t : checkpoint.tensors) {
    for (float v : t.values) w.integer<std::uint32_t>(std::bit_cast<std::uint32_t>(v));
  }
  auto& out = w.buffer();
  w.integer<std::uint64_t>(fnv1a64(out.data(), out.size()));
  return std::move(out);
}

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof(kMagic) + 8) throw FormatError("checkpoint truncated");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw FormatError("not a checkpoint file (bad magic)");
  const std::size_t body = bytes.size() - 8;
  Reader tail(bytes.data() + body, 8);
  const auto stored = tail.integer<std::uint64_t>("checksum");

  Reader r(bytes.data(), body);
  r.take(sizeof(kMagic), "magic");
  const auto version = r.integer<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  // Verify integrity before trusting any length field.
  if (fnv1a64(bytes.data(), body) != stored) throw FormatError("checkpoint checksum mismatch");

  Checkpoint ckpt;
  const auto config_text = r.text("config");
  try {
    ckpt.config = model_config_from_json(nlohmann::json::parse(config_text));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config is not valid JSON: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config is invalid: ") + e.what());
  }
  const auto count = r.integer<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.text("tensor name");
    const auto rank = r.integer<std::uint32_t>("tensor rank");
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(r.integer<std::uint64_t>("tensor dims"));
    ckpt.tensors.push_back(std::move(t));
  }
  for (auto& t : ckpt.tensors) {
    const std::size_t n = shape_numel(t.shape);
    if (n > (body - r.position()) / 4) throw FormatError("checkpoint truncated while reading payload");
    t.values.resize(n);
    for (auto& v : t.values) v = std::bit_cast<float>(r.integer<std::uint32_t>("payload"));
  }
  if (r.position() != body) throw FormatError("checkpoint has trailing bytes before the checksum");
  return ckpt;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const auto bytes = serialize(checkpoint);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), {}};
  return deserialize(bytes);
}

template <typename Scalar>
Checkpoint snapshot(const BasicModel<Scalar>& model) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  for (const auto& p : model.parameters()) {
    auto data = p.value.data();
    CheckpointTensor t{p.name, p.value.shape(), {}};
    t.values.reserve(data.size());
    for (Scalar v : data) t.values.push_back(static_cast<float>(v));
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

template <typename Scalar>
void restore(BasicModel<Scalar>& model, const Checkpoint& checkpoint) {
  const auto& have = model.config().routing;
  const auto& want = checkpoint.config.routing;
  if (have.kind != want.kind) {
    throw FormatError("checkpoint holds a " + std::string(mode_name(want.kind)) +
                      " model but the target is " + std::string(mode_name(have.kind)));
  }
  const auto& params = model.parameters();
  if (params.size() != checkpoint.tensors.size()) {
    throw FormatError("checkpoint has " + std::to_string(checkpoint.tensors.size()) +
                      " tensors but the model has " + std::to_string(params.size()));
  }
  for (const auto& p : params) {
    const auto* t = checkpoint.find(p.name);
    if (!t) throw FormatError("checkpoint is missing tensor " + p.name);
    if (t->shape != p.value.shape()) {
      throw FormatError("checkpoint tensor " + p.name + " has shape " + shape_to_string(t->shape) +
                        " but the model expects " + shape_to_string(p.value.shape()));
    }
  }
  for (const auto& p : params) {
    const auto* t = checkpoint.find(p.name);
    auto handle = p.value;
    auto dst = handle.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Scalar>(t->values[i]);
  }
}

Model instantiate(const Checkpoint& checkpoint) {
  Model model(checkpoint.config);
  restore(model, checkpoint);
  return model;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  save_checkpoint(snapshot(model), path);
}

Model load_model(const std::filesystem::path& path) { return instantiate(load_checkpoint(path)); }

Checkpoint convert(const Checkpoint& baseline, const RoutingMode& target) {
  if (baseline.config.routing.kind != RoutingKind::Baseline) {
    throw ContractError("convert expects a baseline checkpoint, got " +
                        std::string(mode_name(baseline.config.routing.kind)));
  }
  Checkpoint out;
  out.config = baseline.config;
  out.config.routing = target;
  out.config.validate();

  // A throwaway model supplies the target's parameter table and order. Its
  // routing sites already start at query 0 and gain 1.
  const Model shape_source(out.config);
  for (const auto& p : shape_source.parameters()) {
    CheckpointTensor t{p.name, p.value.shape(), {}};
    if (is_routing_param(p.kind)) {
      t.values.assign(p.value.numel(), p.kind == ParamKind::RoutingQuery ? 0.0f : 1.0f);
    } else {
      const auto* src = baseline.find(p.name);
      if (!src || src->shape != t.shape) {
        throw FormatError("baseline checkpoint lacks a matching tensor for " + p.name);
      }
      t.values = src->values;
    }
    out.tensors.push_back(std::move(t));
  }
  return out;
}

template Checkpoint snapshot<float>(const BasicModel<float>&);
template Checkpoint snapshot<double>(const BasicModel<double>&);
template void restore<float>(BasicModel<float>&, const Checkpoint&);
template void restore<double>(BasicModel<double>&, const Checkpoint&);

}  // namespace deltaroute
