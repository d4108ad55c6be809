// Command-line driver for the dominant-pattern toolkit. Subcommands cover
// the whole pipeline: synth -> make-spec -> train -> find-pattern ->
// eval / trace / export, plus head fine-tuning (train --init-from
// --freeze-backbone) and the downstream transfer evaluation.
//
// Exit codes: 0 success, 1 configuration/contract error, 2 I/O error,
// 3 numerical failure (non-finite loss).

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dompat/dompat.hpp"

namespace {

using dompat::config_echo;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

dompat::dataset<float> load_dataset(const std::string& data_path, const std::string& labels_path) {
  if (ends_with(data_path, ".bin")) return dompat::load_cifar_binary<float>(data_path);
  return dompat::load_idx<float>(data_path, labels_path);
}

dompat::report_format format_for(const std::string& path) {
  if (ends_with(path, ".json")) return dompat::report_format::json;
  if (ends_with(path, ".csv")) return dompat::report_format::csv;
  throw std::invalid_argument("cannot infer report format from '" + path + "' (use .json or .csv)");
}

// The reference desk-scale stack: three conv+relu blocks with two maxpools,
// then flatten and a two-layer head; the backbone ends at the flatten.
dompat::model_spec reference_spec(std::size_t c, std::size_t h, std::size_t w, std::size_t classes,
                                  std::vector<double> mean, std::vector<double> stdev) {
  using dompat::layer_spec;
  dompat::model_spec s;
  s.in_channels = c;
  s.in_height = h;
  s.in_width = w;
  s.class_count = classes;
  const std::size_t ph = h / 2 / 2, pw = w / 2 / 2;
  s.layers = {
      layer_spec::normalize(std::move(mean), std::move(stdev)),
      layer_spec::conv2d(c, 8, 3, 1, 1),
      layer_spec::relu(),
      layer_spec::maxpool(2, 2),
      layer_spec::conv2d(8, 16, 3, 1, 1),
      layer_spec::relu(),
      layer_spec::maxpool(2, 2),
      layer_spec::conv2d(16, 32, 3, 1, 1),
      layer_spec::relu(),
      layer_spec::flatten(),
      layer_spec::linear(32 * ph * pw, 64),
      layer_spec::relu(),
      layer_spec::linear(64, classes),
  };
  s.backbone_end = 9;
  return s;
}

struct cli_state {
  // synth
  std::string synth_kind = "gratings10";
  std::size_t synth_n = 3200;
  std::size_t synth_h = 28, synth_w = 28;
  std::uint64_t synth_seed = 0;
  std::string synth_out, synth_labels_out;

  // make-spec
  std::string spec_arch = "ref";
  std::size_t spec_classes = 10;
  std::size_t spec_c = 1, spec_h = 28, spec_w = 28;
  std::vector<double> spec_mean, spec_std;
  std::string spec_stats_from, spec_out;

  // train
  std::string train_spec, train_data, train_labels, train_out, train_init_from;
  std::size_t train_epochs = 5, train_batch = 32;
  double train_lr = 1e-3;
  std::string train_opt = "adam";
  std::uint64_t train_seed = 0;
  bool train_freeze_backbone = false;

  // find-pattern
  std::string find_model, find_data, find_labels, find_out;
  std::string find_loss = "cos";
  double find_xi = 10.0, find_lr = 0.01;
  std::size_t find_batch = 32, find_epochs = 10;
  std::uint64_t find_seed = 0;
  bool find_clamp_sum = false;

  // eval
  std::string eval_model, eval_pattern, eval_data, eval_labels, eval_out;
  std::vector<std::size_t> eval_topk = {1, 3, 5};
  std::size_t eval_workers = 1;

  // trace
  std::string trace_model, trace_pattern, trace_data, trace_labels, trace_out;
  std::size_t trace_max_samples = 0;
  std::size_t trace_workers = 1;

  // transfer
  std::string tr_model, tr_tuned, tr_pattern, tr_data, tr_labels, tr_out;
  std::size_t tr_workers = 1;

  // export
  std::string export_pattern, export_out;
};

int cmd_synth(const cli_state& st) {
  dompat::dataset<float> ds;
  dompat::image_shape shape{1, st.synth_h, st.synth_w};
  if (st.synth_kind == "gratings10" || st.synth_kind == "gratings10b" || st.synth_kind == "rings10") {
    ds = dompat::synth_labeled<float>(dompat::labeled_kind_from_name(st.synth_kind), st.synth_n, shape,
                                      st.synth_seed);
  } else {
    ds = dompat::synth_proxy<float>(dompat::proxy_kind_from_name(st.synth_kind), st.synth_n, shape,
                                    st.synth_seed);
  }
  dompat::save_idx(ds, st.synth_out, ds.labeled() ? st.synth_labels_out : std::string{});
  std::printf("synth kind=%s n=%zu shape=1x%zux%zu seed=%llu -> %s\n", st.synth_kind.c_str(), st.synth_n,
              st.synth_h, st.synth_w, static_cast<unsigned long long>(st.synth_seed), st.synth_out.c_str());
  return 0;
}

int cmd_make_spec(const cli_state& st) {
  if (st.spec_arch != "ref") throw std::invalid_argument("unknown arch '" + st.spec_arch + "' (only: ref)");
  std::size_t c = st.spec_c, h = st.spec_h, w = st.spec_w;
  std::vector<double> mean = st.spec_mean, stdev = st.spec_std;
  if (!st.spec_stats_from.empty()) {
    auto ds = load_dataset(st.spec_stats_from, "");
    c = ds.channels();
    h = ds.height();
    w = ds.width();
    auto [m, s] = dompat::channel_stats(ds);
    mean = m;
    stdev = s;
  }
  if (mean.empty()) mean.assign(c, 128.0);
  if (stdev.empty()) stdev.assign(c, 64.0);
  if (mean.size() != c || stdev.size() != c) {
    throw std::invalid_argument("--mean/--std must have one value per channel");
  }
  auto spec = reference_spec(c, h, w, st.spec_classes, mean, stdev);
  dompat::infer_shapes(spec);
  std::ofstream out(st.spec_out, std::ios::trunc);
  if (!out) throw dompat::io_error(dompat::io_errc::open_failed, "cannot open '" + st.spec_out + "' for writing");
  out << dompat::spec_to_json(spec).dump(2) << "\n";
  std::printf("spec arch=ref input=%zux%zux%zu classes=%zu -> %s\n", c, h, w, st.spec_classes,
              st.spec_out.c_str());
  return 0;
}

int cmd_train(const cli_state& st) {
  auto data = load_dataset(st.train_data, st.train_labels);
  dompat::train_config cfg;
  cfg.epochs = st.train_epochs;
  cfg.batch_size = st.train_batch;
  cfg.lr = st.train_lr;
  cfg.optimizer = dompat::optimizer_kind_from_name(st.train_opt);
  cfg.seed = st.train_seed;

  dompat::model<float> m;
  if (!st.train_init_from.empty()) {
    m = dompat::load_model<float>(st.train_init_from);
    if (st.train_freeze_backbone) {
      m = dompat::fine_tune_head(m, data, cfg);
    } else {
      dompat::train_epochs(m, data, cfg);
    }
  } else {
    if (st.train_spec.empty()) throw std::invalid_argument("--spec or --init-from is required");
    std::ifstream in(st.train_spec);
    if (!in) throw dompat::io_error(dompat::io_errc::open_failed, "cannot open '" + st.train_spec + "'");
    dompat::model_spec spec;
    try {
      spec = dompat::spec_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw dompat::io_error(dompat::io_errc::bad_payload, std::string("malformed spec JSON: ") + e.what());
    }
    m = dompat::train_classifier<float>(spec, data, cfg);
  }
  dompat::save_model(m, st.train_out);
  std::printf("config: epochs=%zu batch=%zu lr=%s optimizer=%s seed=%llu\n", cfg.epochs, cfg.batch_size,
              fmt(cfg.lr).c_str(), dompat::optimizer_kind_name(cfg.optimizer),
              static_cast<unsigned long long>(cfg.seed));
  std::printf("accuracy=%.6f\n", dompat::accuracy(m, data));
  std::printf("model -> %s\n", st.train_out.c_str());
  return 0;
}

int cmd_find_pattern(const cli_state& st) {
  auto m = dompat::load_model<float>(st.find_model);
  auto data = load_dataset(st.find_data, st.find_labels);
  dompat::find_config cfg;
  cfg.loss = dompat::loss_kind_from_name(st.find_loss);
  cfg.xi = st.find_xi;
  cfg.batch_size = st.find_batch;
  cfg.epochs = st.find_epochs;
  cfg.lr = st.find_lr;
  cfg.seed = st.find_seed;
  cfg.clamp_sum = st.find_clamp_sum;
  std::printf("config: loss=%s xi=%s b=%zu m=%zu lr=%s seed=%llu clamp_sum=%d\n",
              dompat::loss_kind_name(cfg.loss), fmt(cfg.xi).c_str(), cfg.batch_size, cfg.epochs,
              fmt(cfg.lr).c_str(), static_cast<unsigned long long>(cfg.seed), cfg.clamp_sum ? 1 : 0);
  auto pat = dompat::find_pattern(m, data, cfg);
  dompat::save_pattern(pat, st.find_out);
  std::printf("dominant_class=%zu confidence=%.6f final_loss=%.6f\n", pat.dominant_class, pat.confidence,
              pat.loss_history.empty() ? 0.0 : pat.loss_history.back());
  std::printf("pattern -> %s\n", st.find_out.c_str());
  return 0;
}

config_echo echo_common(const char* command, std::initializer_list<std::pair<std::string, std::string>> kv) {
  config_echo cfg;
  cfg.emplace_back("command", command);
  for (auto& [k, v] : kv) cfg.emplace_back(k, v);
  return cfg;
}

int cmd_eval(const cli_state& st) {
  auto m = dompat::load_model<float>(st.eval_model);
  auto pat = dompat::load_pattern<float>(st.eval_pattern);
  if (!pat.model_fingerprint.empty() && !m.fingerprint.empty() && pat.model_fingerprint != m.fingerprint) {
    std::fprintf(stderr, "warning: pattern was trained against a different model file (fingerprint %s vs %s)\n",
                 pat.model_fingerprint.c_str(), m.fingerprint.c_str());
  }
  auto data = load_dataset(st.eval_data, st.eval_labels);
  auto report = dompat::evaluate(m, pat, data, st.eval_topk, st.eval_workers);
  std::string ks;
  for (std::size_t k : st.eval_topk) ks += (ks.empty() ? "" : ",") + std::to_string(k);
  auto cfg = echo_common("eval", {{"data", st.eval_data},
                                  {"model", st.eval_model},
                                  {"pattern", st.eval_pattern},
                                  {"topk", ks},
                                  {"workers", std::to_string(st.eval_workers)}});
  dompat::emit_report(report, st.eval_out, format_for(st.eval_out), cfg);
  std::printf("fooling_rate=%.6f dominance_ratio=%.6f -> %s\n", report.fooling_rate, report.dominance_ratio,
              st.eval_out.c_str());
  return 0;
}

int cmd_trace(const cli_state& st) {
  auto m = dompat::load_model<float>(st.trace_model);
  auto pat = dompat::load_pattern<float>(st.trace_pattern);
  auto data = load_dataset(st.trace_data, st.trace_labels);
  if (st.trace_max_samples > 0 && data.size() > st.trace_max_samples) {
    std::vector<std::size_t> idx(st.trace_max_samples);
    std::iota(idx.begin(), idx.end(), 0);
    data = dompat::subset(data, idx);
  }
  auto trace = dompat::aggregate_trace(m, pat, data, st.trace_workers);
  auto cfg = echo_common("trace", {{"data", st.trace_data},
                                   {"model", st.trace_model},
                                   {"pattern", st.trace_pattern},
                                   {"samples", std::to_string(data.size())}});
  dompat::emit_report(trace, st.trace_out, format_for(st.trace_out), cfg);
  std::printf("layers=%zu samples=%zu -> %s\n", trace.layer_indices.size(), data.size(), st.trace_out.c_str());
  return 0;
}

int cmd_transfer(const cli_state& st) {
  auto original = dompat::load_model<float>(st.tr_model);
  auto tuned = dompat::load_model<float>(st.tr_tuned);
  auto pat = dompat::load_pattern<float>(st.tr_pattern);
  auto data = load_dataset(st.tr_data, st.tr_labels);
  auto report = dompat::evaluate_transfer(pat, tuned, original, data, st.tr_workers);
  auto cfg = echo_common("transfer", {{"data", st.tr_data},
                                      {"model", st.tr_model},
                                      {"pattern", st.tr_pattern},
                                      {"tuned", st.tr_tuned}});
  dompat::emit_report(report, st.tr_out, format_for(st.tr_out), cfg);
  std::printf("fooling_rate=%.6f dominance_ratio=%.6f cap=%.6f backbone_cos_loss=%.6f -> %s\n",
              report.eval.fooling_rate, report.eval.dominance_ratio, report.theoretical_fooling_cap,
              report.backbone_cos_loss, st.tr_out.c_str());
  return 0;
}

int cmd_export(const cli_state& st) {
  auto pat = dompat::load_pattern<float>(st.export_pattern);
  dompat::export_png(pat, st.export_out);
  const auto& s = pat.delta.shape();
  std::printf("png %zux%zu channels=%zu -> %s\n", s[2], s[1], s[0], st.export_out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dominant-pattern toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML config file with one table per subcommand");
  app.set_version_flag("--version", std::string(dompat::k_tool_version));

  cli_state st;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset as IDX files");
  synth->add_option("--kind", st.synth_kind,
                    "gratings10|gratings10b|rings10|uniform_noise|gaussian_blobs|stripe_textures");
  synth->add_option("--n", st.synth_n, "sample count");
  synth->add_option("--height", st.synth_h);
  synth->add_option("--width", st.synth_w);
  synth->add_option("--seed", st.synth_seed)->envname("DOMPAT_SEED");
  synth->add_option("--out", st.synth_out, "IDX image file")->required();
  synth->add_option("--labels-out", st.synth_labels_out, "IDX label file (labeled kinds)");

  auto* mkspec = app.add_subcommand("make-spec", "write a model spec JSON");
  mkspec->add_option("--arch", st.spec_arch, "architecture name (ref)");
  mkspec->add_option("--classes", st.spec_classes);
  mkspec->add_option("--channels", st.spec_c);
  mkspec->add_option("--height", st.spec_h);
  mkspec->add_option("--width", st.spec_w);
  mkspec->add_option("--mean", st.spec_mean, "per-channel normalize mean");
  mkspec->add_option("--std", st.spec_std, "per-channel normalize std");
  mkspec->add_option("--stats-from", st.spec_stats_from, "dataset to take shape and channel stats from");
  mkspec->add_option("--out", st.spec_out)->required();

  auto* train = app.add_subcommand("train", "train a classifier (or fine-tune a head)");
  train->add_option("--spec", st.train_spec, "model spec JSON");
  train->add_option("--init-from", st.train_init_from, "start from an existing model file");
  train->add_flag("--freeze-backbone", st.train_freeze_backbone,
                  "freeze backbone layers and fine-tune the head (with --init-from)");
  train->add_option("--data", st.train_data)->required();
  train->add_option("--labels", st.train_labels, "IDX label file (required for IDX data)");
  train->add_option("--out", st.train_out)->required();
  train->add_option("--epochs", st.train_epochs);
  train->add_option("--batch", st.train_batch);
  train->add_option("--lr", st.train_lr);
  train->add_option("--optimizer", st.train_opt, "sgd|adam");
  train->add_option("--seed", st.train_seed)->envname("DOMPAT_SEED");

  auto* find = app.add_subcommand("find-pattern", "search a dominant pattern for a model");
  find->add_option("--model", st.find_model)->required();
  find->add_option("--data", st.find_data)->required();
  find->add_option("--labels", st.find_labels, "ignored by the search; labels are never used");
  find->add_option("--loss", st.find_loss, "cos|ed|kld");
  find->add_option("--xi", st.find_xi, "l-infinity bound in pixel levels");
  find->add_option("--batch", st.find_batch);
  find->add_option("--epochs", st.find_epochs);
  find->add_option("--lr", st.find_lr);
  find->add_option("--seed", st.find_seed)->envname("DOMPAT_SEED");
  find->add_flag("--clamp-sum", st.find_clamp_sum, "clamp delta + x to [0,255] during search/eval");
  find->add_option("--out", st.find_out)->required();

  auto* eval = app.add_subcommand("eval", "fooling rate, dominance ratio, top-k report");
  eval->add_option("--model", st.eval_model)->required();
  eval->add_option("--pattern", st.eval_pattern)->required();
  eval->add_option("--data", st.eval_data)->required();
  eval->add_option("--labels", st.eval_labels);
  eval->add_option("--topk", st.eval_topk, "k values for top-k ratios");
  eval->add_option("--workers", st.eval_workers);
  eval->add_option("--out", st.eval_out)->required();

  auto* trace = app.add_subcommand("trace", "layer-wise SSIM feature-takeover trace");
  trace->add_option("--model", st.trace_model)->required();
  trace->add_option("--pattern", st.trace_pattern)->required();
  trace->add_option("--data", st.trace_data)->required();
  trace->add_option("--labels", st.trace_labels);
  trace->add_option("--max-samples", st.trace_max_samples, "0 = all");
  trace->add_option("--workers", st.trace_workers);
  trace->add_option("--out", st.trace_out)->required();

  auto* transfer = app.add_subcommand("transfer", "evaluate a pattern against a head-fine-tuned model");
  transfer->add_option("--model", st.tr_model, "original model file")->required();
  transfer->add_option("--tuned", st.tr_tuned, "fine-tuned model file")->required();
  transfer->add_option("--pattern", st.tr_pattern)->required();
  transfer->add_option("--data", st.tr_data)->required();
  transfer->add_option("--labels", st.tr_labels);
  transfer->add_option("--workers", st.tr_workers);
  transfer->add_option("--out", st.tr_out)->required();

  auto* exportc = app.add_subcommand("export", "export a pattern as an 8-bit PNG");
  exportc->add_option("--pattern", st.export_pattern)->required();
  exportc->add_option("--out", st.export_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(st);
    if (mkspec->parsed()) return cmd_make_spec(st);
    if (train->parsed()) return cmd_train(st);
    if (find->parsed()) return cmd_find_pattern(st);
    if (eval->parsed()) return cmd_eval(st);
    if (trace->parsed()) return cmd_trace(st);
    if (transfer->parsed()) return cmd_transfer(st);
    if (exportc->parsed()) return cmd_export(st);
  } catch (const dompat::numeric_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const dompat::io_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
