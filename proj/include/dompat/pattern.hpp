#ifndef DOMPAT_PATTERN_HPP
#define DOMPAT_PATTERN_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dompat/common.hpp"
#include "dompat/data.hpp"
#include "dompat/nn.hpp"
#include "dompat/optim.hpp"
#include "dompat/png_io.hpp"
#include "dompat/tensor.hpp"

namespace dompat {

// ---------------------------------------------------------------------------
// similarity losses (computed on logit vectors)
// ---------------------------------------------------------------------------

/// 1 - a.b / (||a|| ||b||), in [0, 2]. Zero-norm inputs are guarded by
/// adding 1e-12 to each norm rather than raising; the loss compares
/// orientation, not magnitude.
template <typename T>
tensor<T> cos_loss(const tensor<T>& a, const tensor<T>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cos_loss: length mismatch");
  const tensor<T> eps = tensor<T>::scalar(T(1e-12));
  tensor<T> denom = mul(add(l2norm(a), eps), add(l2norm(b), eps));
  return sub(tensor<T>::scalar(T(1)), div(dot(a, b), denom));
}

/// ||a - b||_2.
template <typename T>
tensor<T> ed_loss(const tensor<T>& a, const tensor<T>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("ed_loss: length mismatch");
  return l2norm(sub(a, b));
}

/// KL(q || p) = sum_i q_i log(q_i / p_i) with p = softmax(a) the reference
/// distribution and q = softmax(b): how far the perturbed-image distribution
/// has drifted from the pattern's. Asymmetric, nonnegative, zero iff the
/// softmax distributions match. Uses log-softmax so extreme logits cannot
/// underflow to log(0).
template <typename T>
tensor<T> kld_loss(const tensor<T>& a, const tensor<T>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("kld_loss: length mismatch");
  return dot(softmax(b), sub(log_softmax(b), log_softmax(a)));
}

enum class loss_kind { cos, ed, kld };

inline const char* loss_kind_name(loss_kind k) {
  switch (k) {
    case loss_kind::cos: return "cos";
    case loss_kind::ed: return "ed";
    case loss_kind::kld: return "kld";
  }
  return "?";
}

inline loss_kind loss_kind_from_name(const std::string& name) {
  if (name == "cos") return loss_kind::cos;
  if (name == "ed") return loss_kind::ed;
  if (name == "kld") return loss_kind::kld;
  throw std::invalid_argument("unknown loss kind '" + name + "' (expected cos, ed, or kld)");
}

template <typename T>
tensor<T> pattern_loss(loss_kind kind, const tensor<T>& a, const tensor<T>& b) {
  switch (kind) {
    case loss_kind::cos: return cos_loss(a, b);
    case loss_kind::ed: return ed_loss(a, b);
    case loss_kind::kld: return kld_loss(a, b);
  }
  throw std::invalid_argument("pattern_loss: bad kind");
}

// ---------------------------------------------------------------------------
// configuration / pattern record
// ---------------------------------------------------------------------------

/// Search hyperparameters. Defaults: xi=10 (pixel levels), batch_size=32,
/// epochs=10, lr=0.01.
struct find_config {
  loss_kind loss = loss_kind::cos;
  double xi = 10.0;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  double lr = 0.01;
  std::uint64_t seed = 0;
  // When set, delta + x is clamped to [0, 255] during search and evaluation.
  // Off by default; the sum is fed to the network unclamped.
  bool clamp_sum = false;

  void validate() const {
    if (xi <= 0) throw std::invalid_argument("find: xi must be positive");
    if (batch_size < 1) throw std::invalid_argument("find: batch_size must be >= 1");
    if (lr <= 0) throw std::invalid_argument("find: lr must be positive");
  }
};

/// A found perturbation plus its provenance. delta lives in raw pixel units
/// and always satisfies max|delta_i| <= xi (l-infinity, the only norm order
/// supported).
template <typename T = float>
struct dominant_pattern {
  tensor<T> delta;  // C x H x W
  double xi = 10.0;
  std::string norm_order = "inf";
  std::string model_fingerprint;
  find_config config;
  std::size_t dominant_class = 0;
  double confidence = 0.0;
  std::vector<double> loss_history;  // per-epoch mean loss
  std::size_t feasibility_checks = 0;  // in-loop bound assertions run (not serialized)
};

namespace detail {

template <typename T>
std::size_t argmax_lowest(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

template <typename T>
T linf_norm(const tensor<T>& t) {
  T m = 0;
  for (T v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace detail

/// Predicted class and softmax confidence of the bare pattern. Ties break
/// toward the lowest class index.
template <typename T>
std::pair<std::size_t, double> pattern_predict(const model<T>& m, const dominant_pattern<T>& pat) {
  const auto& s = pat.delta.shape();
  tensor<T> batch = reshape(pat.delta, {1, s[0], s[1], s[2]});
  const tensor<T> probs = softmax(forward(m, batch).logits);
  auto pv = probs.data();
  const std::size_t cls = detail::argmax_lowest(pv);
  return {cls, static_cast<double>(pv[cls])};
}

/// Wrap an existing delta (e.g. a random baseline) as a pattern, computing
/// its dominant class and confidence against the model.
template <typename T>
dominant_pattern<T> pattern_from_delta(const model<T>& m, tensor<T> delta, double xi) {
  dominant_pattern<T> pat;
  pat.delta = std::move(delta);
  pat.xi = xi;
  pat.model_fingerprint = m.fingerprint;
  auto [cls, conf] = pattern_predict(m, pat);
  pat.dominant_class = cls;
  pat.confidence = conf;
  return pat;
}

/// Uniform random delta rescaled so its l-infinity norm is exactly xi; the
/// noise baseline dominant patterns are compared against.
template <typename T = float>
tensor<T> random_linf_delta(std::vector<std::size_t> shape, double xi, std::uint64_t seed) {
  tensor<T> d(std::move(shape));
  rng_stream rng(seed);
  for (auto& v : d.data()) v = static_cast<T>(rng.uniform(-xi, xi));
  const T mx = detail::linf_norm(d);
  if (mx > T(0)) {
    const T scale = static_cast<T>(xi) / mx;
    for (auto& v : d.data()) v *= scale;
  }
  return d;
}

// ---------------------------------------------------------------------------
// the search loop
// ---------------------------------------------------------------------------

/// Find a dominant pattern: starting from delta = 0, repeatedly descend the
/// batch-mean loss between f(delta) and f(delta + x) — the gradient flows
/// through both arguments, with f(delta) shared across the batch — apply a
/// descent-signed Adam update, and clamp delta back into the l-infinity
/// ball. Labels are never consulted. Deterministic for a fixed
/// (model, data, config).
template <typename T>
dominant_pattern<T> find_pattern(const model<T>& mdl, const dataset<T>& data, const find_config& cfg) {
  cfg.validate();
  const std::size_t c = mdl.spec.in_channels, h = mdl.spec.in_height, w = mdl.spec.in_width;
  if (data.size() > 0 &&
      (data.channels() != c || data.height() != h || data.width() != w)) {
    throw std::invalid_argument("find_pattern: dataset shape does not match model input");
  }
  if (cfg.epochs > 0 && data.size() == 0) {
    throw std::invalid_argument("find_pattern: empty dataset");
  }

  const T xi = static_cast<T>(cfg.xi);
  tensor<T> delta({c, h, w});
  adam_state<T> adam({c, h, w}, static_cast<T>(cfg.lr));

  dominant_pattern<T> pat;
  pat.xi = cfg.xi;
  pat.config = cfg;
  pat.model_fingerprint = mdl.fingerprint;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batch_plan = epoch_batches(data.size(), cfg.batch_size, cfg.seed, epoch);
    double epoch_loss = 0.0;
    for (const auto& idx : batch_plan) {
      tape<T> tp;
      tensor<T> d = delta;
      tp.watch(d);

      tensor<T> pattern_logits = row(forward(mdl, reshape(d, {1, c, h, w})).logits, 0);
      tensor<T> perturbed = add(repeat_batch(d, idx.size()), gather(data, idx));
      if (cfg.clamp_sum) perturbed = clamp(perturbed, T(0), T(255));
      tensor<T> batch_logits = forward(mdl, perturbed).logits;

      tensor<T> loss_sum;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        tensor<T> li = pattern_loss(cfg.loss, pattern_logits, row(batch_logits, i));
        loss_sum = i == 0 ? li : add(loss_sum, li);
      }
      tensor<T> loss = mul(loss_sum, tensor<T>::scalar(T(1) / static_cast<T>(idx.size())));
      const double loss_val = static_cast<double>(loss.item());
      if (!std::isfinite(loss_val)) {
        throw numeric_error("find_pattern: non-finite loss at epoch " + std::to_string(epoch));
      }
      backward(loss);

      tensor<T> g({c, h, w}, std::vector<T>(d.grad().begin(), d.grad().end()));
      delta = project_linf(add(delta, adam.step(g)), xi);

      // Algorithm invariant: delta stays inside the ball after every batch.
      ++pat.feasibility_checks;
      if (detail::linf_norm(delta) > xi) {
        throw std::logic_error("find_pattern: l-infinity bound violated after projection");
      }
      epoch_loss += loss_val;
    }
    pat.loss_history.push_back(batch_plan.empty() ? 0.0 : epoch_loss / static_cast<double>(batch_plan.size()));
  }

  pat.delta = delta;
  auto [cls, conf] = pattern_predict(mdl, pat);
  pat.dominant_class = cls;
  pat.confidence = conf;
  return pat;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------
// Format: magic "DPAT", u32 version=1, u32 metadata-JSON byte length +
// canonical JSON (shape, xi, provenance, config, class, confidence, loss
// history), then raw f32 little-endian delta values.

inline constexpr char k_pattern_magic[4] = {'D', 'P', 'A', 'T'};
inline constexpr std::uint32_t k_pattern_version = 1;

template <typename T>
void save_pattern(const dominant_pattern<T>& pat, const std::string& path) {
  nlohmann::json j;
  j["confidence"] = pat.confidence;
  j["delta_shape"] = pat.delta.shape();
  j["dominant_class"] = pat.dominant_class;
  j["loss_history"] = pat.loss_history;
  j["model_fingerprint"] = pat.model_fingerprint;
  j["norm_order"] = pat.norm_order;
  j["train_config"] = {
      {"batch_size", pat.config.batch_size}, {"clamp_sum", pat.config.clamp_sum},
      {"epochs", pat.config.epochs},         {"loss", loss_kind_name(pat.config.loss)},
      {"lr", pat.config.lr},                 {"seed", pat.config.seed},
  };
  j["xi"] = pat.xi;
  const std::string meta = j.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error(io_errc::open_failed, "cannot open '" + path + "' for writing");
  out.write(k_pattern_magic, 4);
  write_u32le(out, k_pattern_version);
  write_u32le(out, static_cast<std::uint32_t>(meta.size()));
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  for (T v : pat.delta.data()) detail::write_f32le(out, static_cast<float>(v));
  if (!out) throw io_error(io_errc::write_failed, "write failed for '" + path + "'");
}

template <typename T = float>
dominant_pattern<T> load_pattern(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error(io_errc::open_failed, "cannot open '" + path + "'");
  char magic[4];
  read_exact(in, magic, 4, "magic");
  if (std::memcmp(magic, k_pattern_magic, 4) != 0) {
    throw io_error(io_errc::bad_magic, "bad magic: '" + path + "' is not a pattern file");
  }
  const std::uint32_t version = read_u32le(in, "version");
  if (version != k_pattern_version) {
    throw io_error(io_errc::bad_version, "unsupported pattern format version " + std::to_string(version));
  }
  const std::uint32_t meta_len = read_u32le(in, "metadata length");
  std::string meta(meta_len, '\0');
  read_exact(in, meta.data(), meta_len, "metadata JSON");

  dominant_pattern<T> pat;
  std::vector<std::size_t> shape;
  try {
    const nlohmann::json j = nlohmann::json::parse(meta);
    pat.confidence = j.at("confidence").get<double>();
    shape = j.at("delta_shape").get<std::vector<std::size_t>>();
    pat.dominant_class = j.at("dominant_class").get<std::size_t>();
    pat.loss_history = j.at("loss_history").get<std::vector<double>>();
    pat.model_fingerprint = j.at("model_fingerprint").get<std::string>();
    pat.norm_order = j.at("norm_order").get<std::string>();
    const auto& tc = j.at("train_config");
    pat.config.batch_size = tc.at("batch_size").get<std::size_t>();
    pat.config.clamp_sum = tc.at("clamp_sum").get<bool>();
    pat.config.epochs = tc.at("epochs").get<std::size_t>();
    pat.config.loss = loss_kind_from_name(tc.at("loss").get<std::string>());
    pat.config.lr = tc.at("lr").get<double>();
    pat.config.seed = tc.at("seed").get<std::uint64_t>();
    pat.xi = j.at("xi").get<double>();
    pat.config.xi = pat.xi;
  } catch (const nlohmann::json::exception& e) {
    throw io_error(io_errc::bad_payload, std::string("malformed pattern metadata: ") + e.what());
  }
  if (shape.size() != 3) throw io_error(io_errc::bad_payload, "pattern delta must be C x H x W");
  std::size_t total = 1;
  for (auto d : shape) total *= d;
  if (total > (std::size_t(1) << 30)) throw io_error(io_errc::bad_payload, "implausible pattern size");
  pat.delta = tensor<T>(shape);
  auto dv = pat.delta.data();
  for (std::size_t i = 0; i < total; ++i) dv[i] = static_cast<T>(detail::read_f32le(in, "delta data"));
  return pat;
}

// ---------------------------------------------------------------------------
// image export
// ---------------------------------------------------------------------------

/// Write the pattern as an 8-bit PNG, mapping [-xi, xi] to [0, 255] via
/// v -> round((v + xi) / (2 xi) * 255) with half-away-from-zero rounding and
/// clamping. Grayscale for 1 channel, RGB for 3.
template <typename T>
void export_png(const dominant_pattern<T>& pat, const std::string& path) {
  const auto& s = pat.delta.shape();
  if (s.size() != 3 || (s[0] != 1 && s[0] != 3)) {
    throw std::invalid_argument("export_png: pattern must have 1 or 3 channels");
  }
  const std::size_t c = s[0], h = s[1], w = s[2];
  auto dv = pat.delta.data();
  std::vector<unsigned char> pixels(w * h * c);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t col = 0; col < w; ++col) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = static_cast<double>(dv[(ch * h + r) * w + col]);
        const long mapped = std::lround((v + pat.xi) / (2.0 * pat.xi) * 255.0);
        pixels[(r * w + col) * c + ch] = static_cast<unsigned char>(std::clamp(mapped, 0L, 255L));
      }
    }
  }
  write_png8(path, w, h, c, pixels);
}

}  // namespace dompat

#endif  // DOMPAT_PATTERN_HPP
