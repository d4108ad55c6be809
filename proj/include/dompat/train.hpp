#ifndef DOMPAT_TRAIN_HPP
#define DOMPAT_TRAIN_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dompat/common.hpp"
#include "dompat/data.hpp"
#include "dompat/eval.hpp"
#include "dompat/nn.hpp"
#include "dompat/optim.hpp"
#include "dompat/tensor.hpp"

namespace dompat {

enum class optimizer_kind { sgd, adam };

inline const char* optimizer_kind_name(optimizer_kind k) {
  return k == optimizer_kind::sgd ? "sgd" : "adam";
}

inline optimizer_kind optimizer_kind_from_name(const std::string& name) {
  if (name == "sgd") return optimizer_kind::sgd;
  if (name == "adam") return optimizer_kind::adam;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected sgd or adam)");
}

struct train_config {
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  optimizer_kind optimizer = optimizer_kind::adam;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (lr <= 0) throw std::invalid_argument("train: lr must be positive");
  }
};

/// Mean negative log-softmax of the labeled class, via log-sum-exp.
template <typename T>
tensor<T> cross_entropy(const tensor<T>& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: N x K logits required");
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != n) throw std::invalid_argument("cross_entropy: label count mismatch");
  for (std::size_t l : labels) {
    if (l >= k) throw std::invalid_argument("cross_entropy: label out of range");
  }
  auto lv = logits.data();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* x = &lv[i * k];
    T mx = x[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[j]);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(x[j] - mx);
    acc += mx + std::log(s) - x[labels[i]];
  }
  tensor<T> out = tensor<T>::scalar(acc / static_cast<T>(n));

  if (tape<T>* tp = logits.tape_handle()) {
    const int il = logits.node_id();
    auto ld = logits.shared_data();
    auto lab = std::make_shared<std::vector<std::size_t>>(labels);
    const int id = tp->record(1, [il, ld, lab, n, k](tape<T>& t, const std::vector<T>& g) {
      // d/dx = (softmax(x) - onehot(label)) / n
      std::vector<T> gl(n * k);
      const T scale = g[0] / static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const T* x = &(*ld)[i * k];
        T mx = x[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[j]);
        T s = 0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(x[j] - mx);
        for (std::size_t j = 0; j < k; ++j) {
          const T soft = std::exp(x[j] - mx) / s;
          gl[i * k + j] = scale * (soft - (j == (*lab)[i] ? T(1) : T(0)));
        }
      }
      t.accumulate(il, gl);
    });
    out.bind_(tp, id);
  }
  return out;
}

namespace detail {

/// param + update as plain values (fresh, detached tensor).
template <typename T>
tensor<T> apply_update(const tensor<T>& param, const tensor<T>& update) {
  tensor<T> out(param.shape());
  auto pv = param.data();
  auto uv = update.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < param.size(); ++i) ov[i] = pv[i] + uv[i];
  return out;
}

}  // namespace detail

/// Run seeded mini-batch epochs on the model in place, skipping frozen
/// parameters entirely. Appends the per-epoch mean loss to `epoch_losses`
/// when given.
template <typename T>
void train_epochs(model<T>& m, const dataset<T>& data, const train_config& cfg,
                  std::vector<double>* epoch_losses = nullptr) {
  cfg.validate();
  if (!data.labeled()) throw std::invalid_argument("train: unlabeled data");
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");

  std::vector<std::string> trainable;
  for (const auto& [name, t] : m.params) {
    if (!m.frozen.count(name)) trainable.push_back(name);
  }
  std::map<std::string, adam_state<T>> adam;
  if (cfg.optimizer == optimizer_kind::adam) {
    for (const auto& name : trainable) {
      adam.emplace(name, adam_state<T>(m.params.at(name).shape(), static_cast<T>(cfg.lr)));
    }
  }

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto plan = epoch_batches(data.size(), cfg.batch_size, cfg.seed, epoch);
    double loss_acc = 0.0;
    for (const auto& idx : plan) {
      tape<T> tp;
      for (const auto& name : trainable) tp.watch(m.params.at(name));

      std::vector<std::size_t> batch_labels(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) batch_labels[i] = (*data.labels)[idx[i]];
      tensor<T> logits = forward(m, gather(data, idx)).logits;
      tensor<T> loss = cross_entropy(logits, batch_labels);
      const double loss_val = static_cast<double>(loss.item());
      if (!std::isfinite(loss_val)) {
        throw numeric_error("train: non-finite loss at epoch " + std::to_string(epoch));
      }
      backward(loss);

      for (const auto& name : trainable) {
        tensor<T>& p = m.params.at(name);
        tensor<T> g(p.shape(), std::vector<T>(p.grad().begin(), p.grad().end()));
        if (cfg.optimizer == optimizer_kind::sgd) {
          m.params.at(name) = sgd_step(p, g, static_cast<T>(cfg.lr));
        } else {
          m.params.at(name) = detail::apply_update(p, adam.at(name).step(g));
        }
      }
      loss_acc += loss_val;
    }
    if (epoch_losses) {
      epoch_losses->push_back(plan.empty() ? 0.0 : loss_acc / static_cast<double>(plan.size()));
    }
  }
}

/// Build a fresh model from the spec and train it. Deterministic per
/// (spec, data, config).
template <typename T = float>
model<T> train_classifier(const model_spec& spec, const dataset<T>& data, const train_config& cfg,
                          std::vector<double>* epoch_losses = nullptr) {
  model<T> m = build_model<T>(spec, cfg.seed);
  train_epochs(m, data, cfg, epoch_losses);
  return m;
}

/// Fraction of argmax-correct predictions.
template <typename T>
double accuracy(const model<T>& m, const dataset<T>& test, std::size_t workers = 1) {
  if (!test.labeled()) throw std::invalid_argument("accuracy: unlabeled data");
  if (test.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
  const auto preds = predict_classes(m, test.images, workers);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == (*test.labels)[i];
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

/// Freeze the backbone and train only the head on a new task. When the new
/// task's class count differs, the final linear layer is reinitialized with
/// the same seeded scheme build_model uses; every other head parameter
/// starts from its pretrained value.
template <typename T>
model<T> fine_tune_head(const model<T>& original, const dataset<T>& new_data, const train_config& cfg,
                        std::vector<double>* epoch_losses = nullptr) {
  if (!new_data.labeled()) throw std::invalid_argument("fine_tune_head: unlabeled data");
  if (new_data.size() == 0) throw std::invalid_argument("fine_tune_head: empty dataset");
  if (new_data.channels() != original.spec.in_channels || new_data.height() != original.spec.in_height ||
      new_data.width() != original.spec.in_width) {
    throw std::invalid_argument("fine_tune_head: dataset shape does not match backbone input shape");
  }

  model<T> tuned = original;
  freeze_backbone(tuned);

  std::size_t new_classes = 0;
  for (std::size_t l : *new_data.labels) new_classes = std::max(new_classes, l + 1);
  if (new_classes != tuned.spec.class_count) {
    const std::size_t last = tuned.spec.layers.size() - 1;
    layer_spec& fl = tuned.spec.layers[last];
    if (fl.kind != layer_kind::linear) {
      throw std::invalid_argument("fine_tune_head: final layer must be linear to retarget the class count");
    }
    fl.out_features = new_classes;
    tuned.spec.class_count = new_classes;
    rng_stream rng(cfg.seed);
    const double bound = std::sqrt(6.0 / static_cast<double>(fl.in_features));
    tensor<T> w({fl.in_features, new_classes});
    for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    tuned.params.at(detail::param_name(last, "weight")) = std::move(w);
    tuned.params.at(detail::param_name(last, "bias")) = tensor<T>({new_classes});
    infer_shapes(tuned.spec);
  }

  train_epochs(tuned, new_data, cfg, epoch_losses);
  return tuned;
}

}  // namespace dompat

#endif  // DOMPAT_TRAIN_HPP
