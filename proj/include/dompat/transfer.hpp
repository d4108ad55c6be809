#ifndef DOMPAT_TRANSFER_HPP
#define DOMPAT_TRANSFER_HPP

#include <string>
#include <vector>

#include "dompat/common.hpp"
#include "dompat/data.hpp"
#include "dompat/eval.hpp"
#include "dompat/nn.hpp"
#include "dompat/pattern.hpp"
#include "dompat/train.hpp"

namespace dompat {

/// Downstream-task evaluation of a pattern found on the original model,
/// against the head-fine-tuned model that shares its frozen backbone.
struct transfer_report {
  eval_report eval;
  // Mean CoS loss between backbone features of delta and of delta + x over
  // the new test set (frozen backbone, so identical on either model).
  double backbone_cos_loss = 0.0;
  // 1 - clean share of the dominant class on the new task: the fooling-rate
  // ceiling once the pattern's class absorbs every perturbed prediction.
  double theoretical_fooling_cap = 0.0;
  double new_task_accuracy = 0.0;
};

namespace detail {

template <typename T>
std::uint64_t backbone_param_hash(const model<T>& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < m.spec.backbone_end; ++i) {
    for (const char* which : {"weight", "bias"}) {
      const std::string name = param_name(i, which);
      auto it = m.params.find(name);
      if (it == m.params.end()) continue;
      for (T v : it->second.data()) {
        float fv = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &fv, 4);
        for (int b = 0; b < 4; ++b) {
          h ^= (bits >> (8 * b)) & 0xff;
          h *= 0x100000001b3ULL;
        }
      }
    }
  }
  return h;
}

template <typename T>
tensor<T> backbone_features(const model<T>& m, const tensor<T>& image) {
  const auto& s = image.shape();
  auto res = forward(m, reshape(image, {1, s[0], s[1], s[2]}), tap_mode::backbone_out);
  return res.activations.at(0).second;
}

}  // namespace detail

/// Mean over the test set of cos_loss(backbone(delta), backbone(delta + x)).
template <typename T>
double backbone_cos_loss(const model<T>& m, const dominant_pattern<T>& pat, const dataset<T>& test,
                         std::size_t workers = 1) {
  if (test.size() == 0) throw std::invalid_argument("backbone_cos_loss: empty dataset");
  const tensor<T> fd = detail::backbone_features(m, pat.delta);
  const std::size_t n = test.size();
  const std::size_t stride = test.channels() * test.height() * test.width();
  std::vector<double> vals(n);
  detail::for_each_chunk(n, workers, [&](std::size_t i) {
    std::vector<T> pix(test.images.data().begin() + static_cast<std::ptrdiff_t>(i * stride),
                       test.images.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * stride));
    tensor<T> x({test.channels(), test.height(), test.width()}, std::move(pix));
    tensor<T> perturbed = add(pat.delta, x);
    if (pat.config.clamp_sum) perturbed = clamp(perturbed, T(0), T(255));
    vals[i] = static_cast<double>(cos_loss(fd, detail::backbone_features(m, perturbed)).item());
  });
  double acc = 0.0;
  for (double v : vals) acc += v;
  return acc / static_cast<double>(n);
}

/// Evaluate the pattern on the fine-tuned model. The dominant class is
/// recomputed as argmax of the tuned model on the bare delta — the original
/// task's class index is meaningless under a new head. Errors out if the
/// two models do not share backbone parameters bit for bit.
template <typename T>
transfer_report evaluate_transfer(const dominant_pattern<T>& pat, const model<T>& tuned_model,
                                  const model<T>& original_model, const dataset<T>& new_test,
                                  std::size_t workers = 1) {
  if (new_test.size() == 0) throw std::invalid_argument("evaluate_transfer: empty dataset");
  if (tuned_model.spec.backbone_end != original_model.spec.backbone_end ||
      detail::backbone_param_hash(tuned_model) != detail::backbone_param_hash(original_model)) {
    throw std::invalid_argument("backbone mismatch: tuned model does not share the original backbone");
  }

  dominant_pattern<T> on_new = pat;
  auto [cls, conf] = pattern_predict(tuned_model, on_new);
  on_new.dominant_class = cls;
  on_new.confidence = conf;

  transfer_report rep;
  rep.eval = evaluate(tuned_model, on_new, new_test, {1, 3, 5}, workers);
  rep.backbone_cos_loss = backbone_cos_loss(tuned_model, on_new, new_test, workers);

  const auto clean = predict_classes(tuned_model, new_test.images, workers);
  rep.theoretical_fooling_cap = fooling_cap_from(clean, cls);
  if (rep.eval.fooling_rate > rep.theoretical_fooling_cap + 1e-12) {
    throw std::logic_error("transfer report: fooling rate exceeds the theoretical cap");
  }
  rep.new_task_accuracy = new_test.labeled() ? accuracy(tuned_model, new_test, workers) : 0.0;
  return rep;
}

inline void emit_report(const transfer_report& r, const std::string& path, report_format format,
                        const config_echo& cfg = {}) {
  using detail::fmt_real;
  if (format == report_format::json) {
    std::string s = "{";
    s += "\"backbone_cos_loss\":" + fmt_real(r.backbone_cos_loss);
    s += ",\"clean_class_histogram\":" + detail::hist_json(r.eval.clean_class_histogram);
    s += ",\"confidence\":" + fmt_real(r.eval.confidence);
    s += ",\"config\":" + detail::config_json(cfg);
    s += ",\"dominance_ratio\":" + fmt_real(r.eval.dominance_ratio);
    s += ",\"dominant_class\":" + std::to_string(r.eval.dominant_class);
    s += ",\"fooling_rate\":" + fmt_real(r.eval.fooling_rate);
    s += ",\"new_task_accuracy\":" + fmt_real(r.new_task_accuracy);
    s += ",\"perturbed_class_histogram\":" + detail::hist_json(r.eval.perturbed_class_histogram);
    s += ",\"sample_count\":" + std::to_string(r.eval.sample_count);
    s += ",\"theoretical_fooling_cap\":" + fmt_real(r.theoretical_fooling_cap);
    s += ",\"tool_version\":\"" + std::string(k_tool_version) + "\"";
    s += ",\"topk\":{";
    bool first = true;
    for (const auto& [k, v] : r.eval.topk) {
      if (!first) s += ",";
      first = false;
      s += "\"" + std::to_string(k) + "\":" + fmt_real(v);
    }
    s += "}}\n";
    detail::write_text(path, s);
  } else {
    std::string s = "field,value\n";
    s += "fooling_rate," + fmt_real(r.eval.fooling_rate) + "\n";
    s += "dominance_ratio," + fmt_real(r.eval.dominance_ratio) + "\n";
    s += "backbone_cos_loss," + fmt_real(r.backbone_cos_loss) + "\n";
    s += "theoretical_fooling_cap," + fmt_real(r.theoretical_fooling_cap) + "\n";
    s += "new_task_accuracy," + fmt_real(r.new_task_accuracy) + "\n";
    s += "dominant_class," + std::to_string(r.eval.dominant_class) + "\n";
    s += "confidence," + fmt_real(r.eval.confidence) + "\n";
    s += "sample_count," + std::to_string(r.eval.sample_count) + "\n";
    detail::write_text(path, s);
  }
}

}  // namespace dompat

#endif  // DOMPAT_TRANSFER_HPP
