#ifndef DOMPAT_NN_HPP
#define DOMPAT_NN_HPP

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dompat/common.hpp"
#include "dompat/tensor.hpp"

namespace dompat {

// ---------------------------------------------------------------------------
// layer / model specs
// ---------------------------------------------------------------------------

enum class layer_kind { conv, relu, maxpool, flatten, linear, normalize };

inline const char* layer_kind_name(layer_kind k) {
  switch (k) {
    case layer_kind::conv: return "conv";
    case layer_kind::relu: return "relu";
    case layer_kind::maxpool: return "maxpool";
    case layer_kind::flatten: return "flatten";
    case layer_kind::linear: return "linear";
    case layer_kind::normalize: return "normalize";
  }
  return "?";
}

struct layer_spec {
  layer_kind kind = layer_kind::relu;
  // conv
  std::size_t in_channels = 0, out_channels = 0, kernel = 0, stride = 1, pad = 0;
  // linear (weight stored as in_features x out_features)
  std::size_t in_features = 0, out_features = 0;
  // normalize
  std::vector<double> mean, stdev;

  static layer_spec conv2d(std::size_t in_c, std::size_t out_c, std::size_t k, std::size_t stride = 1,
                           std::size_t pad = 0) {
    layer_spec s;
    s.kind = layer_kind::conv;
    s.in_channels = in_c;
    s.out_channels = out_c;
    s.kernel = k;
    s.stride = stride;
    s.pad = pad;
    return s;
  }
  static layer_spec relu() { return layer_spec{}; }
  static layer_spec maxpool(std::size_t k, std::size_t stride) {
    layer_spec s;
    s.kind = layer_kind::maxpool;
    s.kernel = k;
    s.stride = stride;
    return s;
  }
  static layer_spec flatten() {
    layer_spec s;
    s.kind = layer_kind::flatten;
    return s;
  }
  static layer_spec linear(std::size_t in_f, std::size_t out_f) {
    layer_spec s;
    s.kind = layer_kind::linear;
    s.in_features = in_f;
    s.out_features = out_f;
    return s;
  }
  static layer_spec normalize(std::vector<double> mean, std::vector<double> stdev) {
    layer_spec s;
    s.kind = layer_kind::normalize;
    s.mean = std::move(mean);
    s.stdev = std::move(stdev);
    return s;
  }
};

/// Ordered layer stack plus the backbone/head boundary: layers
/// [0, backbone_end) form the backbone, the rest the head.
struct model_spec {
  std::vector<layer_spec> layers;
  std::size_t backbone_end = 0;
  std::size_t in_channels = 0, in_height = 0, in_width = 0;
  std::size_t class_count = 0;
};

namespace detail {

struct shape3 {
  std::size_t c, h, w;
  bool flat = false;     // after flatten: c holds the feature count
};

inline std::string layer_err(std::size_t idx, const layer_spec& l, const std::string& msg) {
  std::ostringstream os;
  os << "layer " << idx << " (" << layer_kind_name(l.kind) << "): " << msg;
  return os.str();
}

}  // namespace detail

/// Output shape of every layer, validating that consecutive layers compose.
/// Throws std::invalid_argument naming the offending layer index.
inline std::vector<detail::shape3> infer_shapes(const model_spec& spec) {
  using detail::layer_err;
  if (spec.layers.empty()) throw std::invalid_argument("model spec has no layers");
  if (spec.backbone_end == 0 || spec.backbone_end >= spec.layers.size()) {
    throw std::invalid_argument("backbone_end must satisfy 0 < backbone_end < layer count");
  }
  if (spec.class_count == 0) throw std::invalid_argument("class_count must be positive");
  detail::shape3 cur{spec.in_channels, spec.in_height, spec.in_width, false};
  std::vector<detail::shape3> out;
  out.reserve(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const layer_spec& l = spec.layers[i];
    switch (l.kind) {
      case layer_kind::normalize:
        if (cur.flat) throw std::invalid_argument(layer_err(i, l, "requires image input"));
        if (l.mean.size() != cur.c || l.stdev.size() != cur.c) {
          throw std::invalid_argument(layer_err(i, l, "mean/std length must equal channel count"));
        }
        break;
      case layer_kind::conv: {
        if (cur.flat) throw std::invalid_argument(layer_err(i, l, "requires image input"));
        if (l.in_channels != cur.c) {
          throw std::invalid_argument(layer_err(i, l, "in_channels does not match incoming channels"));
        }
        if (l.kernel > cur.h + 2 * l.pad || l.kernel > cur.w + 2 * l.pad) {
          throw std::invalid_argument(layer_err(i, l, "kernel larger than padded input"));
        }
        cur.c = l.out_channels;
        cur.h = (cur.h + 2 * l.pad - l.kernel) / l.stride + 1;
        cur.w = (cur.w + 2 * l.pad - l.kernel) / l.stride + 1;
        break;
      }
      case layer_kind::relu:
        break;
      case layer_kind::maxpool:
        if (cur.flat) throw std::invalid_argument(layer_err(i, l, "requires image input"));
        if (l.kernel > cur.h || l.kernel > cur.w) {
          throw std::invalid_argument(layer_err(i, l, "window larger than input"));
        }
        cur.h = (cur.h - l.kernel) / l.stride + 1;
        cur.w = (cur.w - l.kernel) / l.stride + 1;
        break;
      case layer_kind::flatten:
        if (!cur.flat) {
          cur.c = cur.c * cur.h * cur.w;
          cur.h = cur.w = 1;
          cur.flat = true;
        }
        break;
      case layer_kind::linear:
        if (!cur.flat) throw std::invalid_argument(layer_err(i, l, "requires flattened input"));
        if (l.in_features != cur.c) {
          throw std::invalid_argument(layer_err(i, l, "in_features does not match incoming features"));
        }
        cur.c = l.out_features;
        break;
    }
    out.push_back(cur);
  }
  if (!out.back().flat || out.back().c != spec.class_count) {
    throw std::invalid_argument("final layer must output class_count logits");
  }
  return out;
}

/// Index of the last ReLU layer inside the backbone; this is the
/// backbone-output tap.
inline std::size_t last_backbone_relu(const model_spec& spec) {
  for (std::size_t i = spec.backbone_end; i-- > 0;) {
    if (spec.layers[i].kind == layer_kind::relu) return i;
  }
  throw std::invalid_argument("backbone contains no ReLU layer to tap");
}

// ---------------------------------------------------------------------------
// spec <-> canonical JSON
// ---------------------------------------------------------------------------

inline nlohmann::json spec_to_json(const model_spec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : spec.layers) {
    nlohmann::json j;
    j["kind"] = layer_kind_name(l.kind);
    switch (l.kind) {
      case layer_kind::conv:
        j["in_channels"] = l.in_channels;
        j["out_channels"] = l.out_channels;
        j["kernel"] = l.kernel;
        j["stride"] = l.stride;
        j["pad"] = l.pad;
        break;
      case layer_kind::maxpool:
        j["kernel"] = l.kernel;
        j["stride"] = l.stride;
        break;
      case layer_kind::linear:
        j["in_features"] = l.in_features;
        j["out_features"] = l.out_features;
        break;
      case layer_kind::normalize:
        j["mean"] = l.mean;
        j["std"] = l.stdev;
        break;
      default:
        break;
    }
    layers.push_back(std::move(j));
  }
  nlohmann::json j;
  j["backbone_end"] = spec.backbone_end;
  j["class_count"] = spec.class_count;
  j["input_shape"] = {spec.in_channels, spec.in_height, spec.in_width};
  j["layers"] = std::move(layers);
  return j;
}

inline model_spec spec_from_json(const nlohmann::json& j) {
  model_spec spec;
  spec.backbone_end = j.at("backbone_end").get<std::size_t>();
  spec.class_count = j.at("class_count").get<std::size_t>();
  const auto ish = j.at("input_shape");
  if (!ish.is_array() || ish.size() != 3) throw io_error(io_errc::bad_payload, "input_shape must be [C,H,W]");
  spec.in_channels = ish[0].get<std::size_t>();
  spec.in_height = ish[1].get<std::size_t>();
  spec.in_width = ish[2].get<std::size_t>();
  for (const auto& lj : j.at("layers")) {
    const std::string kind = lj.at("kind").get<std::string>();
    layer_spec l;
    if (kind == "conv") {
      l = layer_spec::conv2d(lj.at("in_channels").get<std::size_t>(), lj.at("out_channels").get<std::size_t>(),
                             lj.at("kernel").get<std::size_t>(), lj.at("stride").get<std::size_t>(),
                             lj.at("pad").get<std::size_t>());
    } else if (kind == "relu") {
      l = layer_spec::relu();
    } else if (kind == "maxpool") {
      l = layer_spec::maxpool(lj.at("kernel").get<std::size_t>(), lj.at("stride").get<std::size_t>());
    } else if (kind == "flatten") {
      l = layer_spec::flatten();
    } else if (kind == "linear") {
      l = layer_spec::linear(lj.at("in_features").get<std::size_t>(), lj.at("out_features").get<std::size_t>());
    } else if (kind == "normalize") {
      l = layer_spec::normalize(lj.at("mean").get<std::vector<double>>(),
                                lj.at("std").get<std::vector<double>>());
    } else {
      throw io_error(io_errc::bad_payload, "unknown layer kind '" + kind + "'");
    }
    spec.layers.push_back(std::move(l));
  }
  return spec;
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

/// Layer stack with named parameters. Parameters are keyed "l<idx>.weight" /
/// "l<idx>.bias"; linear weights are stored in_features x out_features.
/// Frozen parameter names must be skipped by every optimizer.
template <typename T = float>
struct model {
  model_spec spec;
  std::map<std::string, tensor<T>> params;
  std::set<std::string> frozen;
  std::string fingerprint;  // hash of the file this model was loaded from, if any

  tensor<T>& param(const std::string& name) { return params.at(name); }
  const tensor<T>& param(const std::string& name) const { return params.at(name); }
};

namespace detail {

inline std::string param_name(std::size_t layer, const char* which) {
  return "l" + std::to_string(layer) + "." + which;
}

}  // namespace detail

/// Seeded Kaiming-uniform (fan-in) initialization: weights from
/// U(-sqrt(6/fan_in), +sqrt(6/fan_in)), biases zero. Bit-identical for a
/// given (spec, seed).
template <typename T = float>
model<T> build_model(const model_spec& spec, std::uint64_t seed) {
  infer_shapes(spec);  // validates
  model<T> m;
  m.spec = spec;
  rng_stream rng(seed);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const layer_spec& l = spec.layers[i];
    if (l.kind == layer_kind::conv) {
      const std::size_t fan_in = l.in_channels * l.kernel * l.kernel;
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      tensor<T> w({l.out_channels, l.in_channels, l.kernel, l.kernel});
      for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
      m.params.emplace(detail::param_name(i, "weight"), std::move(w));
      m.params.emplace(detail::param_name(i, "bias"), tensor<T>({l.out_channels}));
    } else if (l.kind == layer_kind::linear) {
      const double bound = std::sqrt(6.0 / static_cast<double>(l.in_features));
      tensor<T> w({l.in_features, l.out_features});
      for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
      m.params.emplace(detail::param_name(i, "weight"), std::move(w));
      m.params.emplace(detail::param_name(i, "bias"), tensor<T>({l.out_features}));
    }
  }
  return m;
}

enum class tap_mode { none, relu_all, backbone_out };

template <typename T = float>
struct forward_result {
  tensor<T> logits;                                          // N x class_count, pre-softmax
  std::vector<std::pair<std::size_t, tensor<T>>> activations;  // (layer index, output), in order
};

/// Run the stack on an NCHW batch in raw pixel units; the leading normalize
/// layer owns preprocessing. With relu_all, activations holds every ReLU
/// output in layer order; with backbone_out, only the last backbone ReLU.
template <typename T>
forward_result<T> forward(const model<T>& m, const tensor<T>& batch, tap_mode taps = tap_mode::none) {
  if (batch.rank() != 4 || batch.shape()[1] != m.spec.in_channels ||
      batch.shape()[2] != m.spec.in_height || batch.shape()[3] != m.spec.in_width) {
    throw std::invalid_argument("forward: batch shape does not match model input shape");
  }
  const std::size_t n = batch.shape()[0];
  const std::size_t bb_tap = taps == tap_mode::backbone_out ? last_backbone_relu(m.spec) : 0;

  forward_result<T> res;
  tensor<T> cur = batch;
  for (std::size_t i = 0; i < m.spec.layers.size(); ++i) {
    const layer_spec& l = m.spec.layers[i];
    switch (l.kind) {
      case layer_kind::normalize: {
        std::vector<T> mean(l.mean.begin(), l.mean.end());
        std::vector<T> stdev(l.stdev.begin(), l.stdev.end());
        cur = channel_affine(cur, mean, stdev);
        break;
      }
      case layer_kind::conv:
        cur = conv2d(cur, m.param(detail::param_name(i, "weight")), m.param(detail::param_name(i, "bias")),
                     l.stride, l.pad);
        break;
      case layer_kind::relu:
        cur = relu(cur);
        if (taps == tap_mode::relu_all || (taps == tap_mode::backbone_out && i == bb_tap)) {
          res.activations.emplace_back(i, cur);
        }
        break;
      case layer_kind::maxpool:
        cur = maxpool2d(cur, l.kernel, l.stride);
        break;
      case layer_kind::flatten:
        cur = reshape(cur, {n, cur.size() / n});
        break;
      case layer_kind::linear:
        cur = add_rowvec(matmul(cur, m.param(detail::param_name(i, "weight"))),
                         m.param(detail::param_name(i, "bias")));
        break;
    }
  }
  res.logits = cur;
  return res;
}

/// Mark every parameter of layers [0, backbone_end) as frozen.
template <typename T>
void freeze_backbone(model<T>& m) {
  for (std::size_t i = 0; i < m.spec.backbone_end; ++i) {
    for (const char* which : {"weight", "bias"}) {
      const std::string name = detail::param_name(i, which);
      if (m.params.count(name)) m.frozen.insert(name);
    }
  }
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------
// Format: magic "DPFM", u32 version=1, u32 spec-JSON byte length + canonical
// JSON, u32 parameter count, then per parameter (sorted by name): u32 name
// length + name, u32 rank, u32 dims..., raw f32 little-endian data.

inline constexpr char k_model_magic[4] = {'D', 'P', 'F', 'M'};
inline constexpr std::uint32_t k_model_version = 1;

namespace detail {

inline void write_f32le(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32le(out, bits);
}

inline float read_f32le(std::istream& in, const char* what) {
  const std::uint32_t bits = read_u32le(in, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

template <typename T>
void save_model(const model<T>& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error(io_errc::open_failed, "cannot open '" + path + "' for writing");
  out.write(k_model_magic, 4);
  write_u32le(out, k_model_version);
  const std::string spec_json = spec_to_json(m.spec).dump();
  write_u32le(out, static_cast<std::uint32_t>(spec_json.size()));
  out.write(spec_json.data(), static_cast<std::streamsize>(spec_json.size()));
  write_u32le(out, static_cast<std::uint32_t>(m.params.size()));
  for (const auto& [name, t] : m.params) {
    write_u32le(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32le(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) write_u32le(out, static_cast<std::uint32_t>(d));
    for (T v : t.data()) detail::write_f32le(out, static_cast<float>(v));
  }
  if (!out) throw io_error(io_errc::write_failed, "write failed for '" + path + "'");
}

template <typename T = float>
model<T> load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error(io_errc::open_failed, "cannot open '" + path + "'");
  char magic[4];
  read_exact(in, magic, 4, "magic");
  if (std::memcmp(magic, k_model_magic, 4) != 0) {
    throw io_error(io_errc::bad_magic, "bad magic: '" + path + "' is not a model file");
  }
  const std::uint32_t version = read_u32le(in, "version");
  if (version != k_model_version) {
    throw io_error(io_errc::bad_version, "unsupported model format version " + std::to_string(version));
  }
  const std::uint32_t spec_len = read_u32le(in, "spec length");
  std::string spec_json(spec_len, '\0');
  read_exact(in, spec_json.data(), spec_len, "spec JSON");
  model<T> m;
  try {
    m.spec = spec_from_json(nlohmann::json::parse(spec_json));
  } catch (const nlohmann::json::exception& e) {
    throw io_error(io_errc::bad_payload, std::string("malformed model spec JSON: ") + e.what());
  }
  infer_shapes(m.spec);
  const std::uint32_t n_params = read_u32le(in, "parameter count");
  for (std::uint32_t pi = 0; pi < n_params; ++pi) {
    const std::uint32_t name_len = read_u32le(in, "parameter name length");
    std::string name(name_len, '\0');
    read_exact(in, name.data(), name_len, "parameter name");
    const std::uint32_t rank = read_u32le(in, "parameter rank");
    if (rank == 0 || rank > 8) throw io_error(io_errc::bad_payload, "implausible parameter rank");
    std::vector<std::size_t> shape(rank);
    std::size_t total = 1;
    for (auto& d : shape) {
      d = read_u32le(in, "parameter dim");
      total *= d;
    }
    if (total > (std::size_t(1) << 30)) throw io_error(io_errc::bad_payload, "implausible parameter size");
    tensor<T> t(shape);
    auto tv = t.data();
    for (std::size_t i = 0; i < total; ++i) tv[i] = static_cast<T>(detail::read_f32le(in, "parameter data"));
    m.params.emplace(std::move(name), std::move(t));
  }
  m.fingerprint = fingerprint_file(path);
  return m;
}

}  // namespace dompat

#endif  // DOMPAT_NN_HPP
