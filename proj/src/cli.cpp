#include "deltaroute/cli.hpp"

#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <optional>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "deltaroute/analyzer.hpp"
#include "deltaroute/checkpoint.hpp"
#include "deltaroute/config.hpp"
#include "deltaroute/errors.hpp"
#include "deltaroute/runtime.hpp"
#include "deltaroute/trainer.hpp"

namespace deltaroute {

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

struct Options {
  std::string config;
  std::string mode;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::string trace;
  std::vector<std::size_t> block_sizes;
  std::size_t num_blocks = 4;
  bool null_source = false;
  double routing_lr_ratio = 100.0;
};

std::string number(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

RoutingKind mode_from(const std::string& name) {
  auto kind = parse_mode(name);
  if (!kind) throw ConfigError("--mode: unknown mode '" + name + "'");
  return *kind;
}

ExperimentConfig load_with_overrides(const Options& opts) {
  auto cfg = load_experiment(opts.config);
  if (!opts.mode.empty()) cfg.model.routing.kind = mode_from(opts.mode);
  if (opts.seed) {
    cfg.model.seed = *opts.seed;
    cfg.train.seed = *opts.seed;
  }
  cfg.model.validate();
  return cfg;
}

fs::path ensure_dir(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out + ": " + ec.message());
  return out;
}

void write_json(const fs::path& path, const ordered_json& doc) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << doc.dump(2) << '\n';
}

ByteDataset open_data(const ExperimentConfig& cfg) {
  return ByteDataset::from_file(cfg.train.data_path, cfg.train.seq_len, cfg.train.val_fraction);
}

void check_seq_len(const TrainConfig& train, const ModelConfig& model) {
  if (train.seq_len - 1 > model.max_seq_len) {
    throw ConfigError("train.seq_len: exceeds the model's max_seq_len + 1 (" +
                      std::to_string(model.max_seq_len + 1) + ")");
  }
}

struct Diagnostics {
  std::optional<double> avg_max_weight;
  std::size_t sources = 0;
};

/// Routing trace, heatmap, sharpness and redundancy on the first held-out batch.
Diagnostics export_diagnostics(const Model& model, const ByteDataset& data, std::size_t batch,
                               const fs::path& dir) {
  NoGradGuard no_grad;
  const auto tokens = data.val_batch(0, std::min(batch, data.n_val()));
  ForwardOptions opts;
  opts.record_trace = model.config().routing.routed();
  opts.capture_hidden = true;
  const auto result = model.forward(tokens, opts);

  Diagnostics diag;
  diag.sources = result.store.sources().size();
  if (result.trace && !result.trace->sites.empty()) {
    save_trace(*result.trace, dir / "trace.json");
    export_heatmap(*result.trace, dir / "heatmap.csv");
    diag.avg_max_weight = avg_max_weight(*result.trace);
  }
  const auto red = redundancy(*result.hidden);
  write_json(dir / "redundancy.json", {{"mode", std::string(mode_name(model.config().routing.kind))},
                                       {"cumulative", red.cumulative},
                                       {"delta", red.delta},
                                       {"mean_cumulative", red.mean_cumulative},
                                       {"mean_delta", red.mean_delta}});
  return diag;
}

struct RunSummary {
  MetricsRecord last;
  Diagnostics diag;
};

RunSummary run_training(Model& model, const ExperimentConfig& cfg, const fs::path& dir,
                        std::ostream* log) {
  check_seq_len(cfg.train, model.config());
  const auto data = open_data(cfg);
  ExperimentConfig resolved = cfg;
  resolved.model = model.config();
  write_json(dir / "config.json", experiment_to_json(resolved));

  TrainOutputs outputs;
  outputs.metrics_path = dir / "metrics.jsonl";
  outputs.checkpoint_path = dir / "model.ckpt";
  if (log) {
    outputs.on_record = [log](const MetricsRecord& r) {
      char line[160];
      std::snprintf(line, sizeof(line), "step %6zu  train %.4f  val %.4f  ppl %.2f  lr %.3g\n", r.step,
                    r.train_loss, r.val_loss, r.val_ppl, r.lr);
      *log << line << std::flush;
    };
  }
  auto result = train(model, cfg.train, data, outputs);
  return {result.records.back(), export_diagnostics(model, data, cfg.train.batch_size, dir)};
}

void report(std::ostream& out, const RunSummary& s, const fs::path& dir) {
  out << "final val_loss " << number(s.last.val_loss) << " val_ppl " << number(s.last.val_ppl);
  if (s.diag.avg_max_weight) out << " avg_max_weight " << number(*s.diag.avg_max_weight);
  out << "\noutputs in " << dir.string() << '\n';
}

int cmd_train(const Options& opts, std::ostream& out) {
  const auto cfg = load_with_overrides(opts);
  const auto dir = ensure_dir(opts.out);
  Model model(cfg.model);
  report(out, run_training(model, cfg, dir, &out), dir);
  return 0;
}

int cmd_eval(const Options& opts, std::ostream& out) {
  const auto cfg = load_experiment(opts.config);
  const Model model = load_model(opts.checkpoint);
  check_seq_len(cfg.train, model.config());
  const auto data = open_data(cfg);
  const double loss = evaluate(model, data, cfg.train.eval_windows, cfg.train.batch_size);
  const std::size_t windows =
      cfg.train.eval_windows ? std::min(cfg.train.eval_windows, data.n_val()) : data.n_val();
  ordered_json doc{{"checkpoint", opts.checkpoint},
                   {"mode", std::string(mode_name(model.config().routing.kind))},
                   {"val_loss", loss},
                   {"val_ppl", std::exp(loss)},
                   {"windows", windows}};
  out << doc.dump() << '\n';
  if (!opts.out.empty()) write_json(ensure_dir(opts.out) / "eval.json", doc);
  return 0;
}

int cmd_analyze(const Options& opts, std::ostream& out) {
  if (!opts.trace.empty()) {
    const auto trace = load_trace(opts.trace);
    const auto dir = ensure_dir(opts.out);
    const auto sidecar = export_heatmap(trace, dir / "heatmap.csv");
    out << "wrote " << (dir / "heatmap.csv").string() << " and " << sidecar.string() << '\n';
    return 0;
  }
  if (opts.checkpoint.empty() || opts.config.empty()) {
    throw ConfigError("analyze: give --trace, or --checkpoint together with --config");
  }
  const auto cfg = load_experiment(opts.config);
  const Model model = load_model(opts.checkpoint);
  check_seq_len(cfg.train, model.config());
  const auto dir = ensure_dir(opts.out);
  const auto diag = export_diagnostics(model, open_data(cfg), cfg.train.batch_size, dir);
  out << "sources " << diag.sources;
  if (diag.avg_max_weight) out << " avg_max_weight " << number(*diag.avg_max_weight);
  out << "\noutputs in " << dir.string() << '\n';
  return 0;
}

int cmd_convert(const Options& opts, std::ostream& out) {
  const auto base = load_checkpoint(opts.checkpoint);
  if (opts.num_blocks == 0) throw ConfigError("--num-blocks: must be positive");
  RoutingMode target{mode_from(opts.mode), block_size_for_blocks(base.config.n_layers, opts.num_blocks),
                     opts.null_source};
  const auto converted = convert(base, target);
  const auto path = ensure_dir(opts.out) / (opts.mode + ".ckpt");
  save_checkpoint(converted, path);
  out << "wrote " << path.string() << '\n';
  return 0;
}

int cmd_finetune(const Options& opts, std::ostream& out) {
  auto cfg = load_with_overrides(opts);
  const auto base = load_checkpoint(opts.checkpoint);
  const auto& have = base.config;
  auto mismatch = [](const char* field) {
    return ConfigError(std::string("model.") + field + ": does not match the checkpoint");
  };
  if (cfg.model.d_model != have.d_model) throw mismatch("d_model");
  if (cfg.model.n_layers != have.n_layers) throw mismatch("n_layers");
  if (cfg.model.n_heads != have.n_heads) throw mismatch("n_heads");
  if (!(opts.routing_lr_ratio > 0)) throw ConfigError("--routing-lr-ratio: must be positive");
  if (!cfg.train.routing_lr) cfg.train.routing_lr = opts.routing_lr_ratio * cfg.train.peak_lr;

  Model model = instantiate(convert(base, cfg.model.routing));
  const auto dir = ensure_dir(opts.out);
  report(out, run_training(model, cfg, dir, &out), dir);
  return 0;
}

struct AblationRow {
  std::size_t num_blocks = 0;
  std::size_t block_size = 0;
  RunSummary summary;
};

int cmd_ablate(const Options& opts, std::ostream& out) {
  const auto cfg = load_with_overrides(opts);
  const auto kind = cfg.model.routing.kind;
  if (kind != RoutingKind::DeltaBlock && kind != RoutingKind::AttnRes) {
    throw ConfigError("routing.mode: ablate sweeps block sizes and needs delta_block or attnres");
  }
  for (auto b : opts.block_sizes) {
    if (b == 0) throw ConfigError("--block-sizes: every entry must be positive");
  }
  const auto dir = ensure_dir(opts.out);
  const std::size_t n = opts.block_sizes.size();
  std::vector<AblationRow> rows(n);
  std::vector<std::exception_ptr> failures(n);

  auto run_row = [&](std::size_t i) {
    try {
      auto row_cfg = cfg;
      rows[i].num_blocks = opts.block_sizes[i];
      rows[i].block_size = block_size_for_blocks(cfg.model.n_layers, opts.block_sizes[i]);
      row_cfg.model.routing.block_size = rows[i].block_size;
      Model model(row_cfg.model);
      const auto row_dir = ensure_dir((dir / ("blocks-" + std::to_string(rows[i].num_blocks))).string());
      rows[i].summary = run_training(model, row_cfg, row_dir, nullptr);
    } catch (...) {
      failures[i] = std::current_exception();
    }
  };

  const std::size_t workers = std::min(thread_cap(), n);
  if (workers > 1) {
    set_blas_threads(1);
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) run_row(i);
      });
    }
    for (auto& t : pool) t.join();
  } else {
    for (std::size_t i = 0; i < n; ++i) run_row(i);
  }
  for (auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }

  std::ofstream csv(dir / "ablation.csv");
  if (!csv) throw IoError("cannot write " + (dir / "ablation.csv").string());
  const std::string header = "num_blocks,block_size,sources,seed,steps,final_val_loss,final_val_ppl,avg_max_weight";
  csv << header << '\n';
  out << header << '\n';
  for (const auto& r : rows) {
    const auto& s = r.summary;
    std::string line = std::to_string(r.num_blocks) + ',' + std::to_string(r.block_size) + ',' +
                       std::to_string(s.diag.sources) + ',' + std::to_string(cfg.model.seed) + ',' +
                       std::to_string(s.last.step) + ',' + number(s.last.val_loss) + ',' +
                       number(s.last.val_ppl) + ',' +
                       (s.diag.avg_max_weight ? number(*s.diag.avg_max_weight) : "");
    csv << line << '\n';
    out << line << '\n';
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options opts;
  CLI::App app{"Depth-routed transformer lab", "deltaroute"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  const auto& modes = all_mode_names();
  auto add_config = [&](CLI::App* sub, bool required) {
    auto* o = sub->add_option("--config", opts.config, "Experiment config (JSON)");
    if (required) o->required();
  };
  auto add_mode = [&](CLI::App* sub, bool required) {
    auto* o = sub->add_option("--mode", opts.mode, "Routing mode")->check(CLI::IsMember(modes));
    if (required) o->required();
  };
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", opts.seed, "Override the config seed"); };
  auto add_out = [&](CLI::App* sub, bool required) {
    auto* o = sub->add_option("--out", opts.out, "Output directory");
    if (required) o->required();
  };
  auto add_checkpoint = [&](CLI::App* sub, bool required) {
    auto* o = sub->add_option("--checkpoint", opts.checkpoint, "Checkpoint file");
    if (required) o->required();
  };

  auto* train_cmd = app.add_subcommand("train", "Train a model from a config");
  add_config(train_cmd, true);
  add_mode(train_cmd, false);
  add_seed(train_cmd);
  add_out(train_cmd, true);

  auto* eval_cmd = app.add_subcommand("eval", "Validation loss of a checkpoint");
  add_checkpoint(eval_cmd, true);
  add_config(eval_cmd, true);
  add_out(eval_cmd, false);

  auto* analyze_cmd = app.add_subcommand("analyze", "Export routing heatmap, sharpness and redundancy");
  analyze_cmd->add_option("--trace", opts.trace, "Saved routing trace (JSON)");
  add_checkpoint(analyze_cmd, false);
  add_config(analyze_cmd, false);
  add_out(analyze_cmd, true);

  auto* convert_cmd = app.add_subcommand("convert", "Turn a baseline checkpoint into a routed one");
  add_checkpoint(convert_cmd, true);
  add_mode(convert_cmd, true);
  convert_cmd->add_option("--num-blocks", opts.num_blocks, "Blocks for block-based modes")
      ->capture_default_str();
  convert_cmd->add_flag("--null-source", opts.null_source, "Add the all-zero source to every site");
  add_out(convert_cmd, true);

  auto* finetune_cmd = app.add_subcommand("finetune", "Convert a baseline checkpoint and keep training");
  add_checkpoint(finetune_cmd, true);
  add_config(finetune_cmd, true);
  add_mode(finetune_cmd, false);
  add_seed(finetune_cmd);
  finetune_cmd->add_option("--routing-lr-ratio", opts.routing_lr_ratio,
                           "Routing peak rate as a multiple of peak_lr when routing_lr is unset")
      ->capture_default_str();
  add_out(finetune_cmd, true);

  auto* ablate_cmd = app.add_subcommand("ablate", "Sweep the number of blocks");
  add_config(ablate_cmd, true);
  ablate_cmd->add_option("--block-sizes", opts.block_sizes, "Comma-separated numbers of blocks")
      ->required()
      ->delimiter(',');
  add_seed(ablate_cmd);
  add_out(ablate_cmd, true);

  std::vector<std::string> argv_store{"deltaroute"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string name = chosen->get_name();
  try {
    if (chosen == train_cmd) return cmd_train(opts, out);
    if (chosen == eval_cmd) return cmd_eval(opts, out);
    if (chosen == analyze_cmd) return cmd_analyze(opts, out);
    if (chosen == convert_cmd) return cmd_convert(opts, out);
    if (chosen == finetune_cmd) return cmd_finetune(opts, out);
    return cmd_ablate(opts, out);
  } catch (const ConfigError& e) {
    err << "deltaroute " << name << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "deltaroute " << name << ": " << e.what() << '\n';
    return 1;
  }
}

}  // namespace deltaroute
