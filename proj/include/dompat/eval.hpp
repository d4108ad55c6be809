#ifndef DOMPAT_EVAL_HPP
#define DOMPAT_EVAL_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "dompat/common.hpp"
#include "dompat/data.hpp"
#include "dompat/nn.hpp"
#include "dompat/pattern.hpp"
#include "dompat/tensor.hpp"

namespace dompat {

// ---------------------------------------------------------------------------
// prediction plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr std::size_t k_predict_chunk = 64;

template <typename T>
void argmax_rows(const tensor<T>& logits, std::vector<std::size_t>& out, std::size_t offset) {
  const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
  auto lv = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    out[offset + r] = argmax_lowest(std::span<const T>(&lv[r * cols], cols));
  }
}

// Runs fn(chunk_index) over [0, n_chunks) on `workers` threads. Results must
// be written to per-chunk slots so the aggregation order is fixed.
template <typename Fn>
void for_each_chunk(std::size_t n_chunks, std::size_t workers, Fn&& fn) {
  if (workers <= 1 || n_chunks <= 1) {
    for (std::size_t i = 0; i < n_chunks; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t used = std::min(workers, n_chunks);
  for (std::size_t t = 0; t < used; ++t) {
    pool.emplace_back([t, used, n_chunks, &fn] {
      for (std::size_t i = t; i < n_chunks; i += used) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

/// Argmax class per image, computed in fixed-size chunks (bitwise identical
/// for any worker count).
template <typename T>
std::vector<std::size_t> predict_classes(const model<T>& m, const tensor<T>& images, std::size_t workers = 1) {
  const std::size_t n = images.shape()[0];
  std::vector<std::size_t> preds(n);
  const std::size_t n_chunks = (n + detail::k_predict_chunk - 1) / detail::k_predict_chunk;
  detail::for_each_chunk(n_chunks, workers, [&](std::size_t ci) {
    const std::size_t lo = ci * detail::k_predict_chunk;
    const std::size_t hi = std::min(n, lo + detail::k_predict_chunk);
    std::vector<std::size_t> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    const std::size_t c = images.shape()[1], h = images.shape()[2], w = images.shape()[3];
    tensor<T> chunk({hi - lo, c, h, w});
    std::copy_n(&images.data()[lo * c * h * w], (hi - lo) * c * h * w, chunk.data().data());
    detail::argmax_rows(forward(m, chunk).logits, preds, lo);
  });
  return preds;
}

/// Predictions on x + delta for every dataset image (clamped to pixel range
/// only when the pattern was trained with clamp_sum).
template <typename T>
std::vector<std::size_t> perturbed_predictions(const model<T>& m, const dominant_pattern<T>& pat,
                                               const dataset<T>& test, std::size_t workers = 1) {
  const std::size_t n = test.size();
  std::vector<std::size_t> preds(n);
  const std::size_t n_chunks = (n + detail::k_predict_chunk - 1) / detail::k_predict_chunk;
  detail::for_each_chunk(n_chunks, workers, [&](std::size_t ci) {
    const std::size_t lo = ci * detail::k_predict_chunk;
    const std::size_t hi = std::min(n, lo + detail::k_predict_chunk);
    std::vector<std::size_t> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    tensor<T> perturbed = add(repeat_batch(pat.delta, hi - lo), gather(test, idx));
    if (pat.config.clamp_sum) perturbed = clamp(perturbed, T(0), T(255));
    detail::argmax_rows(forward(m, perturbed).logits, preds, lo);
  });
  return preds;
}

// ---------------------------------------------------------------------------
// counting metrics
// ---------------------------------------------------------------------------
// The *_from forms operate on prediction sequences; the model-level forms
// wrap them. Keeping the counting layer separate makes the metric identities
// checkable by brute force.

inline double fooling_rate_from(const std::vector<std::size_t>& clean, const std::vector<std::size_t>& pert) {
  if (clean.size() != pert.size()) throw std::invalid_argument("fooling_rate: prediction counts differ");
  if (clean.empty()) throw std::invalid_argument("fooling_rate: empty dataset");
  std::size_t changed = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) changed += clean[i] != pert[i];
  return static_cast<double>(changed) / static_cast<double>(clean.size());
}

inline double dominance_ratio_from(const std::vector<std::size_t>& pert, std::size_t dominant_class) {
  if (pert.empty()) throw std::invalid_argument("dominance_ratio: empty dataset");
  std::size_t hits = 0;
  for (std::size_t p : pert) hits += p == dominant_class;
  return static_cast<double>(hits) / static_cast<double>(pert.size());
}

/// Share of samples covered by the k most frequent predicted classes, for
/// each k. Frequency ties break toward the lower class index.
inline std::map<std::size_t, double> topk_ratio_from(const std::vector<std::size_t>& pert,
                                                     const std::vector<std::size_t>& ks) {
  if (pert.empty()) throw std::invalid_argument("topk_ratio: empty dataset");
  for (std::size_t k : ks) {
    if (k == 0) throw std::invalid_argument("topk_ratio: k must be positive");
  }
  std::map<std::size_t, std::size_t> hist;
  for (std::size_t p : pert) ++hist[p];
  std::vector<std::pair<std::size_t, std::size_t>> by_freq(hist.begin(), hist.end());
  std::sort(by_freq.begin(), by_freq.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::map<std::size_t, double> out;
  for (std::size_t k : ks) {
    std::size_t covered = 0;
    for (std::size_t i = 0; i < std::min(k, by_freq.size()); ++i) covered += by_freq[i].second;
    out[k] = static_cast<double>(covered) / static_cast<double>(pert.size());
  }
  return out;
}

/// 1 - clean share of the dominant class: the ceiling the fooling rate
/// cannot exceed once the pattern's class absorbs every prediction.
inline double fooling_cap_from(const std::vector<std::size_t>& clean, std::size_t dominant_class) {
  if (clean.empty()) throw std::invalid_argument("fooling_cap: empty dataset");
  std::size_t at = 0;
  for (std::size_t c : clean) at += c == dominant_class;
  return 1.0 - static_cast<double>(at) / static_cast<double>(clean.size());
}

template <typename T>
double fooling_rate(const model<T>& m, const dominant_pattern<T>& pat, const dataset<T>& test,
                    std::size_t workers = 1) {
  if (test.size() == 0) throw std::invalid_argument("fooling_rate: empty dataset");
  return fooling_rate_from(predict_classes(m, test.images, workers),
                           perturbed_predictions(m, pat, test, workers));
}

template <typename T>
double dominance_ratio(const model<T>& m, const dominant_pattern<T>& pat, const dataset<T>& test,
                       std::size_t workers = 1) {
  if (test.size() == 0) throw std::invalid_argument("dominance_ratio: empty dataset");
  return dominance_ratio_from(perturbed_predictions(m, pat, test, workers), pat.dominant_class);
}

template <typename T>
std::map<std::size_t, double> topk_ratio(const model<T>& m, const dominant_pattern<T>& pat,
                                         const dataset<T>& test, const std::vector<std::size_t>& ks,
                                         std::size_t workers = 1) {
  if (test.size() == 0) throw std::invalid_argument("topk_ratio: empty dataset");
  return topk_ratio_from(perturbed_predictions(m, pat, test, workers), ks);
}

// ---------------------------------------------------------------------------
// eval report
// ---------------------------------------------------------------------------

struct eval_report {
  double fooling_rate = 0.0;
  double dominance_ratio = 0.0;
  std::map<std::size_t, double> topk;
  std::size_t dominant_class = 0;
  double confidence = 0.0;
  std::map<std::size_t, std::size_t> clean_class_histogram;
  std::map<std::size_t, std::size_t> perturbed_class_histogram;
  std::size_t sample_count = 0;

  /// Construction-time sanity: topk monotone in k, top-1 bounds the
  /// dominance ratio, histograms account for every sample.
  void validate() const {
    double prev = 0.0;
    for (const auto& [k, v] : topk) {
      if (v + 1e-12 < prev) throw std::logic_error("eval report: topk not monotone in k");
      prev = v;
    }
    if (topk.count(1) && topk.at(1) + 1e-12 < dominance_ratio) {
      throw std::logic_error("eval report: top-1 ratio below dominance ratio");
    }
    std::size_t ch = 0, ph = 0;
    for (const auto& [c, n] : clean_class_histogram) ch += n;
    for (const auto& [c, n] : perturbed_class_histogram) ph += n;
    if (ch != sample_count || ph != sample_count) {
      throw std::logic_error("eval report: histograms do not sum to sample count");
    }
  }
};

/// Full evaluation in one prediction pass.
template <typename T>
eval_report evaluate(const model<T>& m, const dominant_pattern<T>& pat, const dataset<T>& test,
                     const std::vector<std::size_t>& ks = {1, 3, 5}, std::size_t workers = 1) {
  if (test.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  const auto clean = predict_classes(m, test.images, workers);
  const auto pert = perturbed_predictions(m, pat, test, workers);
  eval_report r;
  r.fooling_rate = fooling_rate_from(clean, pert);
  r.dominance_ratio = dominance_ratio_from(pert, pat.dominant_class);
  r.topk = topk_ratio_from(pert, ks);
  r.dominant_class = pat.dominant_class;
  r.confidence = pat.confidence;
  for (std::size_t c : clean) ++r.clean_class_histogram[c];
  for (std::size_t p : pert) ++r.perturbed_class_histogram[p];
  r.sample_count = test.size();
  r.validate();
  return r;
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

/// Mean SSIM over all fully-contained windows (uniform window, biased
/// moments), C1 = (0.01 L)^2 and C2 = (0.03 L)^2 for dynamic range L.
template <typename T>
double ssim(const tensor<T>& a, const tensor<T>& b, std::size_t window = 7, double dynamic_range = 1.0) {
  if (a.shape() != b.shape()) throw std::invalid_argument("ssim: shape mismatch");
  if (a.rank() != 2) throw std::invalid_argument("ssim: 2-D images required");
  if (window % 2 == 0 || window == 0) throw std::invalid_argument("ssim: window must be odd");
  const std::size_t h = a.shape()[0], w = a.shape()[1];
  if (window > h || window > w) throw std::invalid_argument("ssim: window larger than image");

  const double c1 = (0.01 * dynamic_range) * (0.01 * dynamic_range);
  const double c2 = (0.03 * dynamic_range) * (0.03 * dynamic_range);
  auto av = a.data();
  auto bv = b.data();
  const double wn = static_cast<double>(window * window);

  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r + window <= h; ++r) {
    for (std::size_t c = 0; c + window <= w; ++c) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t i = 0; i < window; ++i) {
        const T* arow = &av[(r + i) * w + c];
        const T* brow = &bv[(r + i) * w + c];
        for (std::size_t j = 0; j < window; ++j) {
          const double x = arow[j], y = brow[j];
          sa += x;
          sb += y;
          saa += x * x;
          sbb += y * y;
          sab += x * y;
        }
      }
      const double mu_a = sa / wn, mu_b = sb / wn;
      const double var_a = saa / wn - mu_a * mu_a;
      const double var_b = sbb / wn - mu_b * mu_b;
      const double cov = sab / wn - mu_a * mu_b;
      acc += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
             ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// layer-wise feature takeover trace
// ---------------------------------------------------------------------------

struct layer_trace {
  std::vector<std::size_t> layer_indices;
  std::vector<double> vs_pattern_mean, vs_pattern_std;
  std::vector<double> vs_clean_mean, vs_clean_std;
};

namespace detail {

// Collapse an activation to a 2-D map: conv outputs by channel mean, flat
// outputs reshaped to the most-square rectangle. Then min-max normalize to
// [0, 1]; a constant map collapses to zeros.
template <typename T>
tensor<double> activation_map(const tensor<T>& act) {
  std::size_t h = 0, w = 0;
  std::vector<double> map;
  if (act.rank() == 4) {
    const std::size_t c = act.shape()[1];
    h = act.shape()[2];
    w = act.shape()[3];
    map.assign(h * w, 0.0);
    auto av = act.data();
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t i = 0; i < h * w; ++i) map[i] += static_cast<double>(av[ci * h * w + i]);
    for (auto& v : map) v /= static_cast<double>(c);
  } else {
    const std::size_t n = act.size();
    h = 1;
    for (std::size_t d = 1; d * d <= n; ++d) {
      if (n % d == 0) h = d;
    }
    w = n / h;
    auto av = act.data();
    map.assign(av.begin(), av.end());
  }
  double lo = map[0], hi = map[0];
  for (double v : map) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi > lo) {
    for (auto& v : map) v = (v - lo) / (hi - lo);
  } else {
    std::fill(map.begin(), map.end(), 0.0);
  }
  return tensor<double>({h, w}, std::move(map));
}

inline std::size_t fit_window(const tensor<double>& map, std::size_t want = 7) {
  std::size_t m = std::min({want, map.shape()[0], map.shape()[1]});
  if (m % 2 == 0) --m;
  return std::max<std::size_t>(m, 1);
}

template <typename T>
std::vector<tensor<double>> tap_maps(const model<T>& m, const tensor<T>& image,
                                     std::vector<std::size_t>* indices = nullptr) {
  const auto& s = image.shape();
  tensor<T> batch = reshape(image, {1, s[0], s[1], s[2]});
  auto res = forward(m, batch, tap_mode::relu_all);
  std::vector<tensor<double>> maps;
  maps.reserve(res.activations.size());
  for (auto& [idx, act] : res.activations) {
    if (indices) indices->push_back(idx);
    maps.push_back(activation_map(act));
  }
  return maps;
}

}  // namespace detail

/// Per-ReLU-layer SSIM of features(delta + x) against features(delta) and
/// features(x), on channel-mean maps normalized to [0, 1]. The window
/// shrinks (to the next odd size) on maps smaller than 7x7.
template <typename T>
std::pair<std::vector<double>, std::vector<double>> layer_trace_single(
    const model<T>& m, const dominant_pattern<T>& pat, const tensor<T>& x,
    std::vector<std::size_t>* indices = nullptr) {
  if (x.shape() != pat.delta.shape()) throw std::invalid_argument("layer_trace: image/pattern shape mismatch");
  tensor<T> perturbed = add(pat.delta, x);
  if (pat.config.clamp_sum) perturbed = clamp(perturbed, T(0), T(255));
  const auto maps_x = detail::tap_maps(m, x);
  const auto maps_d = detail::tap_maps(m, pat.delta);
  const auto maps_p = detail::tap_maps(m, perturbed, indices);
  std::vector<double> vs_pattern(maps_p.size()), vs_clean(maps_p.size());
  for (std::size_t i = 0; i < maps_p.size(); ++i) {
    const std::size_t win = detail::fit_window(maps_p[i]);
    vs_pattern[i] = ssim(maps_p[i], maps_d[i], win, 1.0);
    vs_clean[i] = ssim(maps_p[i], maps_x[i], win, 1.0);
  }
  return {vs_pattern, vs_clean};
}

/// Mean and standard deviation (population) of both SSIM series over a test
/// set. The pattern's own feature maps are computed once and shared.
template <typename T>
layer_trace aggregate_trace(const model<T>& m, const dominant_pattern<T>& pat, const dataset<T>& test,
                            std::size_t workers = 1) {
  if (test.size() == 0) throw std::invalid_argument("aggregate_trace: empty dataset");
  std::vector<std::size_t> indices;
  const auto maps_d = detail::tap_maps(m, pat.delta, &indices);
  const std::size_t layers = maps_d.size();
  const std::size_t n = test.size();

  std::vector<double> sp(n * layers), sc(n * layers);
  const std::size_t stride = test.channels() * test.height() * test.width();
  detail::for_each_chunk(n, workers, [&](std::size_t i) {
    std::vector<T> pix(test.images.data().begin() + static_cast<std::ptrdiff_t>(i * stride),
                       test.images.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * stride));
    tensor<T> x({test.channels(), test.height(), test.width()}, std::move(pix));
    tensor<T> perturbed = add(pat.delta, x);
    if (pat.config.clamp_sum) perturbed = clamp(perturbed, T(0), T(255));
    const auto maps_x = detail::tap_maps(m, x);
    const auto maps_p = detail::tap_maps(m, perturbed);
    for (std::size_t l = 0; l < layers; ++l) {
      const std::size_t win = detail::fit_window(maps_p[l]);
      sp[i * layers + l] = ssim(maps_p[l], maps_d[l], win, 1.0);
      sc[i * layers + l] = ssim(maps_p[l], maps_x[l], win, 1.0);
    }
  });

  layer_trace out;
  out.layer_indices = indices;
  out.vs_pattern_mean.resize(layers);
  out.vs_pattern_std.resize(layers);
  out.vs_clean_mean.resize(layers);
  out.vs_clean_std.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    double mp = 0, mc = 0;
    for (std::size_t i = 0; i < n; ++i) {
      mp += sp[i * layers + l];
      mc += sc[i * layers + l];
    }
    mp /= static_cast<double>(n);
    mc /= static_cast<double>(n);
    double vp = 0, vc = 0;
    for (std::size_t i = 0; i < n; ++i) {
      vp += (sp[i * layers + l] - mp) * (sp[i * layers + l] - mp);
      vc += (sc[i * layers + l] - mc) * (sc[i * layers + l] - mc);
    }
    out.vs_pattern_mean[l] = mp;
    out.vs_pattern_std[l] = std::sqrt(vp / static_cast<double>(n));
    out.vs_clean_mean[l] = mc;
    out.vs_clean_std[l] = std::sqrt(vc / static_cast<double>(n));
  }
  return out;
}

// ---------------------------------------------------------------------------
// report emission
// ---------------------------------------------------------------------------

enum class report_format { json, csv };

using config_echo = std::vector<std::pair<std::string, std::string>>;

namespace detail {

inline std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string json_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') {
      out.push_back('\\');
      out.push_back(c);
    } else if (static_cast<unsigned char>(c) < 0x20) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "\\u%04x", c);
      out += buf;
    } else {
      out.push_back(c);
    }
  }
  return out;
}

inline std::string config_json(const config_echo& cfg) {
  std::string s = "{";
  bool first = true;
  for (const auto& [k, v] : cfg) {
    if (!first) s += ",";
    first = false;
    s += "\"" + json_escape(k) + "\":\"" + json_escape(v) + "\"";
  }
  return s + "}";
}

template <typename M>
std::string hist_json(const M& hist) {
  std::string s = "{";
  bool first = true;
  for (const auto& [k, v] : hist) {
    if (!first) s += ",";
    first = false;
    s += "\"" + std::to_string(k) + "\":" + std::to_string(v);
  }
  return s + "}";
}

inline std::string real_array_json(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += fmt_real(v[i]);
  }
  return s + "]";
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error(io_errc::open_failed, "cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw io_error(io_errc::write_failed, "write failed for '" + path + "'");
}

}  // namespace detail

// Field order is fixed (alphabetical) and reals carry six decimals; ratios
// are emitted as fractions, not percentages.
inline void emit_report(const eval_report& r, const std::string& path, report_format format,
                        const config_echo& cfg = {}) {
  using detail::fmt_real;
  if (format == report_format::json) {
    std::string s = "{";
    s += "\"clean_class_histogram\":" + detail::hist_json(r.clean_class_histogram);
    s += ",\"confidence\":" + fmt_real(r.confidence);
    s += ",\"config\":" + detail::config_json(cfg);
    s += ",\"dominance_ratio\":" + fmt_real(r.dominance_ratio);
    s += ",\"dominant_class\":" + std::to_string(r.dominant_class);
    s += ",\"fooling_rate\":" + fmt_real(r.fooling_rate);
    s += ",\"perturbed_class_histogram\":" + detail::hist_json(r.perturbed_class_histogram);
    s += ",\"sample_count\":" + std::to_string(r.sample_count);
    s += ",\"tool_version\":\"" + std::string(k_tool_version) + "\"";
    s += ",\"topk\":{";
    bool first = true;
    for (const auto& [k, v] : r.topk) {
      if (!first) s += ",";
      first = false;
      s += "\"" + std::to_string(k) + "\":" + fmt_real(v);
    }
    s += "}}\n";
    detail::write_text(path, s);
  } else {
    std::string s = "field,value\n";
    s += "fooling_rate," + fmt_real(r.fooling_rate) + "\n";
    s += "dominance_ratio," + fmt_real(r.dominance_ratio) + "\n";
    for (const auto& [k, v] : r.topk) s += "top" + std::to_string(k) + "," + fmt_real(v) + "\n";
    s += "dominant_class," + std::to_string(r.dominant_class) + "\n";
    s += "confidence," + fmt_real(r.confidence) + "\n";
    s += "sample_count," + std::to_string(r.sample_count) + "\n";
    detail::write_text(path, s);
  }
}

inline void emit_report(const layer_trace& t, const std::string& path, report_format format,
                        const config_echo& cfg = {}) {
  if (format == report_format::json) {
    std::string s = "{";
    s += "\"config\":" + detail::config_json(cfg);
    s += ",\"layer_indices\":[";
    for (std::size_t i = 0; i < t.layer_indices.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(t.layer_indices[i]);
    }
    s += "]";
    s += ",\"ssim_vs_clean_mean\":" + detail::real_array_json(t.vs_clean_mean);
    s += ",\"ssim_vs_clean_std\":" + detail::real_array_json(t.vs_clean_std);
    s += ",\"ssim_vs_pattern_mean\":" + detail::real_array_json(t.vs_pattern_mean);
    s += ",\"ssim_vs_pattern_std\":" + detail::real_array_json(t.vs_pattern_std);
    s += ",\"tool_version\":\"" + std::string(k_tool_version) + "\"";
    s += "}\n";
    detail::write_text(path, s);
  } else {
    std::string s = "layer,ssim_vs_pattern_mean,ssim_vs_pattern_std,ssim_vs_clean_mean,ssim_vs_clean_std\n";
    for (std::size_t i = 0; i < t.layer_indices.size(); ++i) {
      s += std::to_string(t.layer_indices[i]) + "," + detail::fmt_real(t.vs_pattern_mean[i]) + "," +
           detail::fmt_real(t.vs_pattern_std[i]) + "," + detail::fmt_real(t.vs_clean_mean[i]) + "," +
           detail::fmt_real(t.vs_clean_std[i]) + "\n";
    }
    detail::write_text(path, s);
  }
}

}  // namespace dompat

#endif  // DOMPAT_EVAL_HPP
