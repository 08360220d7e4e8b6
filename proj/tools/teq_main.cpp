// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// teq: pretrain a byte-level LM, train equivalent-transformation scales,
// quantize, evaluate and inspect.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "teq/checkpoint.hpp"
#include "teq/corpus.hpp"
#include "teq/errors.hpp"
#include "teq/metrics.hpp"
#include "teq/pretrain.hpp"
#include "teq/trainer.hpp"

namespace fs = std::filesystem;

namespace {

enum ExitCode : int { kOk = 0, kInternal = 1, kUsage = 2, kData = 3, kDivergence = 4 };

void write_text(const fs::path& path, const std::string& text) {
  teq::write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

/// --seed from the command line or config wins; TEQ_SEED is the fallback.
std::uint64_t resolve_seed(const CLI::Option* opt, std::uint64_t parsed) {
  if (opt->count() > 0) return parsed;
  const char* env = std::getenv("TEQ_SEED");
  if (env == nullptr || *env == '\0') return parsed;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(env, &used);
    if (used != std::string(env).size()) throw std::invalid_argument(env);
    return v;
  } catch (const std::exception&) {
    throw teq::UsageError(fmt::format("TEQ_SEED='{}' is not an unsigned integer", env));
  }
}

teq::ModelGraph load_float_model(const fs::path& path) {
  teq::LoadedCheckpoint ckpt = teq::load_checkpoint(path);
  if (ckpt.is_quantized()) {
    throw teq::UsageError(fmt::format("'{}' is a quantized checkpoint; a float model is required", path.string()));
  }
  return std::move(ckpt.model);
}

std::string quant_echo(const teq::QuantSpec& spec) {
  return fmt::format("n_bits={} group_size={}", spec.n_bits, spec.group_size);
}

/// Reads flat `key = value` TOML and files every key under the subcommand
/// selected on the command line, so one file configures one subcommand.
class SubcommandConfig : public CLI::ConfigTOML {
 public:
  explicit SubcommandConfig(const CLI::App& app) : app_(app) {}

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    std::vector<CLI::ConfigItem> items = CLI::ConfigTOML::from_config(input);
    const std::vector<CLI::App*> selected = app_.get_subcommands();
    if (selected.empty()) return items;
    for (CLI::ConfigItem& item : items) item.parents.insert(item.parents.begin(), selected.front()->get_name());
    return items;
  }

 private:
  const CLI::App& app_;
};

// ---------------------------------------------------------------- corpus

struct CorpusArgs {
  fs::path out;
  std::size_t bytes = 1 << 20;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

void add_corpus(CLI::App& app, CorpusArgs& a) {
  app.add_option("--out", a.out, "Output text file")->required();
  app.add_option("--bytes", a.bytes, "Corpus size in bytes")->capture_default_str()->check(CLI::PositiveNumber);
  a.seed_opt = app.add_option("--seed", a.seed, "Generator seed (fallback: TEQ_SEED)")->capture_default_str();
}

int run_corpus(CorpusArgs& a) {
  const std::uint64_t seed = resolve_seed(a.seed_opt, a.seed);
  write_text(a.out, teq::synthetic_corpus(a.bytes, seed));
  fmt::print("wrote {} bytes to {}\n", a.bytes, a.out.string());
  return kOk;
}

// ---------------------------------------------------------------- pretrain

struct PretrainArgs {
  fs::path corpus;
  fs::path out;
  fs::path trace;
  teq::PretrainConfig cfg;
  CLI::Option* seed_opt = nullptr;
};

void add_pretrain(CLI::App& app, PretrainArgs& a) {
  app.add_option("--corpus", a.corpus, "Training text (bytes are tokens)")->required()->check(CLI::ExistingFile);
  app.add_option("--out", a.out, "Output checkpoint")->required();
  app.add_option("--trace", a.trace, "Optional loss trace CSV");
  app.add_option("--steps", a.cfg.steps, "Optimizer steps")->capture_default_str();
  app.add_option("--batch-size", a.cfg.batch_size, "Windows per step")->capture_default_str();
  app.add_option("--seq-len", a.cfg.seq_len, "Tokens per window")->capture_default_str();
  app.add_option("--lr", a.cfg.lr, "Peak learning rate")->capture_default_str();
  app.add_option("--warmup", a.cfg.warmup_steps, "Linear warmup steps")->capture_default_str();
  app.add_option("--beta1", a.cfg.beta1)->capture_default_str();
  app.add_option("--beta2", a.cfg.beta2)->capture_default_str();
  app.add_option("--weight-decay", a.cfg.weight_decay)->capture_default_str();
  app.add_option("--d-model", a.cfg.model.d_model)->capture_default_str();
  app.add_option("--heads", a.cfg.model.n_heads)->capture_default_str();
  app.add_option("--layers", a.cfg.model.n_layers)->capture_default_str();
  app.add_option("--max-seq-len", a.cfg.model.max_seq_len)->capture_default_str();
  a.seed_opt = app.add_option("--seed", a.cfg.seed, "Init and sampling seed (fallback: TEQ_SEED)")->capture_default_str();
}

int run_pretrain(PretrainArgs& a) {
  a.cfg.seed = resolve_seed(a.seed_opt, a.cfg.seed);
  a.cfg.validate();
  const std::vector<std::int32_t> tokens = teq::load_text_tokens(a.corpus);
  const teq::PretrainResult r = teq::pretrain(tokens, a.cfg);
  teq::save_checkpoint(r.model, a.out);
  if (!a.trace.empty()) write_text(a.trace, r.trace.to_csv());
  fmt::print("tail_loss = {:.6f} (mean of the last {} steps)\n", r.trace.tail_mean(50),
             std::min<std::size_t>(50, r.trace.records.size()));
  fmt::print("uniform_loss = {:.6f}\n", std::log(double(a.cfg.model.vocab_size)));
  fmt::print("checkpoint = {}\n", a.out.string());
  return kOk;
}

// ---------------------------------------------------------------- teq

struct TeqArgs {
  fs::path model;
  fs::path calib;
  fs::path out;
  fs::path trace;
  teq::TrainConfig cfg;
  std::string init = "ones";
  std::string ste = "step-aware";
  int bits = 4;
  int group_size = -1;
  CLI::Option* seed_opt = nullptr;
};

void add_teq(CLI::App& app, TeqArgs& a) {
  app.add_option("--model", a.model, "Float checkpoint")->required()->check(CLI::ExistingFile);
  app.add_option("--calib", a.calib, "Calibration text")->required()->check(CLI::ExistingFile);
  app.add_option("--out", a.out, "Output scales file")->required();
  app.add_option("--trace", a.trace, "Optional loss trace CSV");
  app.add_option("--bits", a.bits, "Weight bits")->capture_default_str();
  app.add_option("--group-size", a.group_size, "Group size along input channels, -1 for whole rows")
      ->capture_default_str();
  app.add_option("--steps", a.cfg.steps)->capture_default_str();
  app.add_option("--lr", a.cfg.lr)->capture_default_str();
  app.add_option("--batch-size", a.cfg.batch_size)->capture_default_str();
  app.add_option("--seq-len", a.cfg.seq_len)->capture_default_str();
  app.add_option("--beta1", a.cfg.beta1)->capture_default_str();
  app.add_option("--beta2", a.cfg.beta2)->capture_default_str();
  app.add_option("--weight-decay", a.cfg.weight_decay)->capture_default_str();
  app.add_option("--init", a.init, "ones, inv-sqrt or auto")->capture_default_str();
  app.add_option("--ste", a.ste, "step-aware or identity")->capture_default_str();
  a.seed_opt = app.add_option("--seed", a.cfg.seed, "Data-order seed (fallback: TEQ_SEED)")->capture_default_str();
}

int run_teq(TeqArgs& a) {
  a.cfg.seed = resolve_seed(a.seed_opt, a.cfg.seed);
  a.cfg.init = teq::parse_init_strategy(a.init);
  a.cfg.ste = teq::parse_ste_mode(a.ste);
  a.cfg.quant = teq::QuantSpec{a.bits, a.group_size, 0};
  a.cfg.validate();
  const teq::ModelGraph model = load_float_model(a.model);
  const std::vector<std::int32_t> calib = teq::load_text_tokens(a.calib);
  const teq::TrainResult r = teq::train(model, calib, a.cfg);

  nlohmann::json meta;
  meta["n_bits"] = a.bits;
  meta["group_size"] = a.group_size;
  meta["steps"] = a.cfg.steps;
  meta["lr"] = a.cfg.lr;
  meta["seed"] = a.cfg.seed;
  meta["init"] = std::string(teq::init_strategy_name(r.strategy));
  meta["ste"] = std::string(teq::ste_mode_name(a.cfg.ste));
  meta["model_hash"] = teq::file_hash(a.model);
  meta["calib_hash"] = teq::file_hash(a.calib);
  teq::save_scales(r.scales, a.out, meta);
  if (!a.trace.empty()) write_text(a.trace, r.trace.to_csv());
  fmt::print("init = {}\n", teq::init_strategy_name(r.strategy));
  const std::size_t window = std::min(a.cfg.tail_window, r.trace.records.size());
  fmt::print("head_loss = {:.6f} (mean of the first {} steps)\n", r.trace.head_mean(window), window);
  fmt::print("tail_loss = {:.6f} (mean of the last {} steps)\n", r.trace.tail_mean(window), window);
  fmt::print("scales = {} ({} values)\n", a.out.string(), r.scales.total_count());
  return kOk;
}

// ---------------------------------------------------------------- quantize

struct QuantizeArgs {
  fs::path model;
  fs::path scales;
  fs::path out;
  std::string method = "rtn";
  int bits = 4;
  int group_size = -1;
};

void add_quantize(CLI::App& app, QuantizeArgs& a) {
  app.add_option("--model", a.model, "Float checkpoint")->required()->check(CLI::ExistingFile);
  app.add_option("--method", a.method, "rtn or teq")->capture_default_str()->check(CLI::IsMember({"rtn", "teq"}));
  app.add_option("--scales", a.scales, "Scales file (required for --method teq)")->check(CLI::ExistingFile);
  app.add_option("--out", a.out, "Output quantized checkpoint")->required();
  app.add_option("--bits", a.bits)->capture_default_str();
  app.add_option("--group-size", a.group_size)->capture_default_str();
}

int run_quantize(QuantizeArgs& a) {
  const teq::QuantSpec spec{a.bits, a.group_size, 0};
  spec.validate();
  if (a.method == "teq" && a.scales.empty()) throw teq::UsageError("--method teq needs --scales");
  if (a.method == "rtn" && !a.scales.empty()) throw teq::UsageError("--scales only applies to --method teq");
  teq::ModelGraph model = load_float_model(a.model);
  if (a.method == "teq") model = teq::fuse_scales(model, teq::load_scales(a.scales));
  const teq::QuantizedModel qm = teq::quantize_model(model, spec);
  teq::save_checkpoint(qm, a.out);

  double total = 0.0;
  fmt::print("layer,weight_mse\n");
  for (const auto& [name, qt] : qm.weights) {
    const teq::Tensor& src = model.param(name);
    const teq::Tensor& deq = qm.model.param(name);
    double acc = 0.0;
    for (std::size_t i = 0; i < src.numel(); ++i) {
      const double d = double(src[i]) - double(deq[i]);
      acc += d * d;
    }
    const double mse = acc / double(src.numel());
    total += mse;
    fmt::print("{},{:.9g}\n", name, mse);
  }
  fmt::print("total,{:.9g}\n", total);
  return kOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  fs::path model;
  fs::path corpus;
  fs::path out;
  fs::path reference;
  fs::path scales;
  std::size_t seq_len = 128;
  std::size_t probe_windows = 4;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  app.add_option("--model", a.model, "Float or quantized checkpoint")->required()->check(CLI::ExistingFile);
  app.add_option("--corpus", a.corpus, "Evaluation text")->required()->check(CLI::ExistingFile);
  app.add_option("--out", a.out, "Report file")->required();
  app.add_option("--reference", a.reference, "Float checkpoint for per-layer output MSE")->check(CLI::ExistingFile);
  app.add_option("--scales", a.scales, "Scales file whose hash is echoed")->check(CLI::ExistingFile);
  app.add_option("--seq-len", a.seq_len)->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--probe-windows", a.probe_windows, "Corpus windows used as MSE probes")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
}

int run_eval(EvalArgs& a) {
  const teq::LoadedCheckpoint ckpt = teq::load_checkpoint(a.model);
  if (a.seq_len > ckpt.model.config.max_seq_len) {
    throw teq::UsageError(
        fmt::format("--seq-len {} exceeds the model's max_seq_len {}", a.seq_len, ckpt.model.config.max_seq_len));
  }
  const std::vector<std::int32_t> tokens = teq::load_text_tokens(a.corpus);

  teq::EvalReport report;
  report.echo.emplace_back("model_hash", teq::file_hash(a.model));
  report.echo.emplace_back("corpus_hash", teq::file_hash(a.corpus));
  report.echo.emplace_back("reference_hash", a.reference.empty() ? "none" : teq::file_hash(a.reference));
  report.echo.emplace_back("scales_hash", a.scales.empty() ? "none" : teq::file_hash(a.scales));
  report.echo.emplace_back("quant",
                           ckpt.is_quantized() ? quant_echo(ckpt.quantized.begin()->second.spec) : "none");
  report.echo.emplace_back("seq_len", std::to_string(a.seq_len));
  report.echo.emplace_back("stride", std::to_string(a.seq_len));
  report.echo.emplace_back("probe_windows", a.reference.empty() ? "0" : std::to_string(a.probe_windows));
  std::string echo_text;
  for (const auto& [k, v] : report.echo) echo_text += k + "=" + v + "\n";
  report.echo.emplace_back("config_hash", teq::hex64(teq::fnv1a64(echo_text.data(), echo_text.size())));

  if (!a.reference.empty()) {
    const teq::ModelGraph reference = load_float_model(a.reference);
    if (!(reference.config == ckpt.model.config)) throw teq::UsageError("--reference has a different model config");
    const std::size_t available = teq::window_count(tokens.size(), a.seq_len);
    if (available < a.probe_windows) {
      throw teq::DataError(
          fmt::format("corpus has {} windows; --probe-windows asks for {}", available, a.probe_windows));
    }
    std::vector<std::size_t> windows(a.probe_windows);
    for (std::size_t i = 0; i < windows.size(); ++i) windows[i] = i;
    const teq::WindowBatch probes = teq::make_window_batch(tokens, windows, a.seq_len);
    report.per_layer_mse = teq::layer_quant_loss(reference, ckpt.model, probes.inputs);
  }
  report.ppl = teq::perplexity(ckpt.model, tokens, a.seq_len);
  write_text(a.out, report.to_text());
  fmt::print("perplexity = {:.6f}\n", report.ppl.perplexity);
  if (!report.per_layer_mse.empty()) fmt::print("mse_total = {:.9g}\n", teq::total_mse(report.per_layer_mse));
  return kOk;
}

// ---------------------------------------------------------------- inspect

struct InspectArgs {
  fs::path model;
  fs::path scales;
  fs::path out_dir;
  std::size_t bins = 50;
  double lo = 0.0;
  double hi = 2.0;
};

void add_inspect(CLI::App& app, InspectArgs& a) {
  app.add_option("--model", a.model, "Float checkpoint")->required()->check(CLI::ExistingFile);
  app.add_option("--scales", a.scales, "Scales file to histogram")->check(CLI::ExistingFile);
  app.add_option("--out-dir", a.out_dir, "Directory for the CSV exports")->required();
  app.add_option("--bins", a.bins)->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--lo", a.lo)->capture_default_str();
  app.add_option("--hi", a.hi)->capture_default_str();
}

int run_inspect(InspectArgs& a) {
  if (!(a.hi > a.lo)) throw teq::UsageError("--hi must exceed --lo");
  const teq::ModelGraph model = load_float_model(a.model);
  const std::vector<teq::FusionSite> sites = teq::find_fusion_sites(model);
  std::optional<teq::ScaleSet> scales;
  if (!a.scales.empty()) scales = teq::load_scales(a.scales);

  std::error_code ec;
  fs::create_directories(a.out_dir, ec);
  if (ec) throw teq::DataError(fmt::format("cannot create '{}': {}", a.out_dir.string(), ec.message()));

  std::vector<std::pair<teq::ParamAccounting, std::string>> rows;
  rows.emplace_back(teq::param_accounting(model, sites), "computed");
  for (const teq::ParamAccounting& p : teq::published_accounting()) rows.emplace_back(p, "published");
  write_text(a.out_dir / "param_accounting.csv", teq::accounting_csv(rows));
  const teq::ParamAccounting& mine = rows.front().first;
  fmt::print("teq_params = {} of {} ({:.5f}%)\n", mine.teq_params, mine.total_params, mine.ratio * 100.0);

  if (scales) {
    const teq::ScaleHistogram h = teq::scale_histogram(*scales, sites, a.bins, a.lo, a.hi);
    write_text(a.out_dir / "scale_histogram.csv", h.to_csv());
    write_text(a.out_dir / "scale_stats.csv", h.stats_csv());
    fmt::print("fraction_in_0.75_1.25 = {:.6f}\n", h.fraction_near_one());
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weight-only quantization with trained per-channel scales"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML file of option = value lines for the chosen subcommand; flags take precedence");
  app.config_formatter(std::make_shared<SubcommandConfig>(app));
  app.allow_config_extras(CLI::config_extras_mode::error);

  CorpusArgs corpus;
  PretrainArgs pretrain;
  TeqArgs teq_args;
  QuantizeArgs quantize;
  EvalArgs eval;
  InspectArgs inspect;

  struct Command {
    CLI::App* app;
    std::function<int()> run;
  };
  std::vector<Command> commands;
  auto add = [&](const char* name, const char* help, auto& args, auto adder, auto runner) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->fallthrough();
    adder(*sub, args);
    commands.push_back({sub, [&args, runner] { return runner(args); }});
  };
  add("corpus", "Write a synthetic English-like text corpus", corpus, add_corpus, run_corpus);
  add("pretrain", "Train the float language model", pretrain, add_pretrain, run_pretrain);
  add("teq", "Train per-channel scales through fake quantization", teq_args, add_teq, run_teq);
  add("quantize", "Quantize with plain RTN or fuse scales first", quantize, add_quantize, run_quantize);
  add("eval", "Perplexity and per-layer output MSE report", eval, add_eval, run_eval);
  add("inspect", "Scale histograms and parameter accounting", inspect, add_inspect, run_inspect);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    for (const Command& c : commands) {
      if (c.app->parsed()) return c.run();
    }
    return kUsage;
  } catch (const teq::TrainingDivergenceError& e) {
    fmt::print(stderr, "error: training diverged at step {}: {}\n", e.step(), e.what());
    return kDivergence;
  } catch (const teq::UsageError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kUsage;
  } catch (const teq::ContractError& e) {
    fmt::print(stderr, "error: invalid configuration: {}\n", e.what());
    return kUsage;
  } catch (const teq::DimensionError& e) {
    fmt::print(stderr, "error: shape mismatch: {}\n", e.what());
    return kUsage;
  } catch (const teq::FormatError& e) {
    fmt::print(stderr, "error: bad file format: {}\n", e.what());
    return kData;
  } catch (const teq::DataError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kData;
  } catch (const teq::Error& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kData;
  } catch (const std::exception& e) {
    fmt::print(stderr, "internal error: {}\n", e.what());
    return kInternal;
  }
}
