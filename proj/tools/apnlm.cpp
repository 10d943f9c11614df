#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "apn/checkpoint.hpp"
#include "apn/config.hpp"
#include "apn/continual.hpp"
#include "apn/monitor.hpp"

namespace fs = std::filesystem;

namespace {

// Exit codes: 0 success, 1 runtime failure, 2 config/data error.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonArgs {
  std::string config_path;
  std::string out_dir = "out";
  std::optional<long> seed;
  int precision = 32;
};

struct DataSetup {
  apn::CharVocab vocab;
  apn::DomainSplit domain_a;
  std::string source;
};

DataSetup load_domain_a(apn::ConfigReader& r) {
  const std::string corpus = r.get_string("data", "corpus", "");
  const double val_fraction = r.get_double("data", "val_fraction", 0.1);
  std::string text, source;
  if (corpus.empty()) {
    const long chars = r.get_long("data", "builtin_chars", 1000000);
    const long seed = r.get_long("data", "builtin_seed", 1);
    text = apn::synthesize_domain_a_text(std::uint64_t(seed), std::size_t(chars));
    source = "builtin domain A (seed " + std::to_string(seed) + ")";
  } else {
    std::ifstream is(corpus, std::ios::binary);
    if (!is) throw ConfigError("[data] corpus: cannot open file '" + corpus + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    text = ss.str();
    if (text.empty()) throw ConfigError("[data] corpus: file '" + corpus + "' is empty");
    source = corpus;
  }
  auto [vocab, split] = apn::ingest(text, val_fraction, source);
  return {std::move(vocab), std::move(split), source};
}

apn::DomainSplit load_domain_b(apn::ConfigReader& r, const apn::CharVocab& vocab) {
  const long seed = r.get_long("data", "domain_b_seed", 3);
  const long chars = r.get_long("data", "domain_b_chars", 400000);
  return apn::synthesize_domain_b(vocab, std::uint64_t(seed), std::size_t(chars));
}

apn::TrainConfig train_config_from(apn::ConfigReader& r, const CommonArgs& args) {
  apn::TrainConfig cfg;
  cfg.max_iters = r.get_long("train", "iters", cfg.max_iters);
  cfg.batch = static_cast<int>(r.get_long("train", "batch", cfg.batch));
  cfg.context = static_cast<int>(r.get_long("train", "context", cfg.context));
  cfg.peak_lr = r.get_double("train", "lr", cfg.peak_lr);
  cfg.warmup = r.get_long("train", "warmup", cfg.warmup);
  cfg.weight_decay = r.get_double("train", "weight_decay", cfg.weight_decay);
  cfg.grad_clip = r.get_double("train", "grad_clip", cfg.grad_clip);
  cfg.eval_interval = r.get_long("train", "eval_interval", cfg.eval_interval);
  cfg.eval_batches = static_cast<int>(r.get_long("train", "eval_batches", cfg.eval_batches));
  cfg.seed = std::uint64_t(r.get_long("train", "seed", 1));
  if (args.seed) cfg.seed = std::uint64_t(*args.seed);
  return cfg;
}

apn::AdaptConfig adapt_config_from(apn::ConfigReader& r, const CommonArgs& args) {
  apn::AdaptConfig cfg;
  cfg.adapt_iters = r.get_long("adapt", "iters", cfg.adapt_iters);
  cfg.adapt_lr = r.get_double("adapt", "lr", cfg.adapt_lr);
  cfg.adapt_batch = static_cast<int>(r.get_long("adapt", "batch", cfg.adapt_batch));
  cfg.context = static_cast<int>(r.get_long("adapt", "context", cfg.context));
  const std::string rule = r.get_string("adapt", "rule", "patch-local");
  if (rule == "patch-local")
    cfg.rule = apn::UpdateRule::PatchLocal;
  else if (rule == "global")
    cfg.rule = apn::UpdateRule::Global;
  else
    throw ConfigError("[adapt] rule must be patch-local|global, got '" + rule + "'");
  cfg.update_budget = r.get_long("adapt", "budget", cfg.update_budget);
  cfg.update_gain = r.get_double("adapt", "gain", cfg.update_gain);
  cfg.norm_cap = r.get_double("adapt", "norm_cap", cfg.norm_cap);
  if (r.has("adapt", "confidence_threshold"))
    cfg.confidence_threshold = r.get_double("adapt", "confidence_threshold", 0.0);
  if (r.has("adapt", "entropy_low") || r.has("adapt", "entropy_high"))
    cfg.entropy_band = {r.get_double("adapt", "entropy_low", 0.0),
                        r.get_double("adapt", "entropy_high", 1e9)};
  cfg.proto_ema = r.get_double("adapt", "proto_ema", cfg.proto_ema);
  cfg.allocation = r.get_bool("adapt", "allocation", cfg.allocation);
  cfg.novelty_threshold = r.get_double("adapt", "novelty_threshold", cfg.novelty_threshold);
  cfg.novelty_window =
      static_cast<int>(r.get_long("adapt", "novelty_window", cfg.novelty_window));
  cfg.usage_ema_rate = r.get_double("adapt", "usage_ema", cfg.usage_ema_rate);
  cfg.cooldown = r.get_long("adapt", "cooldown", cfg.cooldown);
  cfg.grad_clip = r.get_double("adapt", "grad_clip", cfg.grad_clip);
  cfg.weight_decay = r.get_double("adapt", "weight_decay", cfg.weight_decay);
  cfg.seed = std::uint64_t(r.get_long("adapt", "seed", 1));
  if (args.seed) cfg.seed = std::uint64_t(*args.seed);
  return cfg;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << content;
}

void write_config_echo(const CommonArgs& args, const apn::ConfigFile& cfg,
                       const std::string& command) {
  apn::ConfigFile echo = cfg;
  echo.sections["run"]["command"] = command;
  echo.sections["run"]["precision"] = std::to_string(args.precision);
  if (args.seed) echo.sections["run"]["seed_override"] = std::to_string(*args.seed);
  write_file(fs::path(args.out_dir) / "config_echo.txt", echo.serialize());
}

std::string history_csv(const std::vector<apn::HistoryRecord>& history) {
  std::ostringstream os;
  os.precision(10);
  os << "step,train_loss,lr,val_ppl\n";
  for (const auto& h : history) {
    os << h.step << "," << h.train_loss << "," << h.lr << ",";
    if (h.has_val) os << h.val_ppl;
    os << "\n";
  }
  return os.str();
}

template <class S>
int cmd_train(const CommonArgs& args, apn::ConfigReader& r, const apn::ConfigFile& raw) {
  auto data = load_domain_a(r);
  auto mcfg = apn::model_config_from_reader(r);
  mcfg.vocab_size = data.vocab.size();
  auto tcfg = train_config_from(r, args);
  r.finish();
  mcfg.validate();
  tcfg.validate();
  write_config_echo(args, raw, "train");

  auto model = apn::ModelState<S>::init(mcfg, tcfg.seed);
  auto res = apn::train_offline(model, data.domain_a, tcfg);
  apn::save_checkpoint(fs::path(args.out_dir) / "last.ckpt", model, data.vocab);
  if (res.best_step >= 0) {
    auto best = apn::ModelState<S>::init(mcfg, tcfg.seed);
    apn::restore_weights(best, res.best_weights);
    best.step = res.best_step + 1;
    apn::save_checkpoint(fs::path(args.out_dir) / "best.ckpt", best, data.vocab);
  }
  write_file(fs::path(args.out_dir) / "metrics.csv", history_csv(res.history));
  std::ostringstream log;
  log.precision(10);
  for (const auto& h : res.history) {
    log << "step " << h.step << " loss " << h.train_loss << " lr " << h.lr;
    if (h.has_val) log << " val_ppl " << h.val_ppl;
    log << "\n";
  }
  log << "best_step " << res.best_step << " best_val_ppl " << res.best_val_ppl << "\n";
  write_file(fs::path(args.out_dir) / "train_log.txt", log.str());
  std::cout << "trained " << tcfg.max_iters << " iters; best val PPL " << res.best_val_ppl
            << " at step " << res.best_step << "\n";
  return 0;
}

template <class S>
int cmd_adapt(const CommonArgs& args, apn::ConfigReader& r, const apn::ConfigFile& raw) {
  const std::string ckpt = r.require_string("adapt", "checkpoint");
  auto acfg = adapt_config_from(r, args);
  const long eval_batches = r.get_long("adapt", "eval_batches", 8);
  auto loaded = apn::load_checkpoint<S>(ckpt);
  auto b = load_domain_b(r, loaded.vocab);
  r.finish();
  write_config_echo(args, raw, "adapt");

  auto trace = apn::adapt_online(loaded.model, b, acfg);
  apn::save_checkpoint(fs::path(args.out_dir) / "adapted.ckpt", loaded.model, loaded.vocab);
  std::ostringstream log;
  log.precision(10);
  for (const auto& rec : trace.records) {
    log << "step " << rec.step << " loss " << rec.loss << " applied " << rec.applied;
    if (!rec.note.empty()) log << " note " << rec.note;
    log << "\n";
  }
  log << "updates_applied " << trace.updates_applied << " gated " << trace.updates_gated
      << " skipped " << trace.skipped_nonfinite << " updated_params "
      << trace.updated_param_count << "\n";
  write_file(fs::path(args.out_dir) / "adapt_log.txt", log.str());
  const double b_ppl = apn::evaluate_ppl(loaded.model, b.val, int(eval_batches),
                                         acfg.adapt_batch, acfg.context, acfg.seed + 7);
  std::cout << "adapted " << acfg.adapt_iters << " iters; applied " << trace.updates_applied
            << " updates; Domain B val PPL " << b_ppl << "\n";
  return 0;
}

template <class S>
int cmd_eval(const CommonArgs& args, apn::ConfigReader& r, const apn::ConfigFile& raw) {
  const std::string ckpt = r.require_string("eval", "checkpoint");
  const std::string split_name = r.get_string("eval", "split", "a_val");
  const int batches = static_cast<int>(r.get_long("eval", "batches", 8));
  const int batch = static_cast<int>(r.get_long("eval", "batch", 32));
  int context = static_cast<int>(r.get_long("eval", "context", 128));
  const long seed = r.get_long("eval", "seed", 99);
  auto data_reader = r;  // keys in [data] are shared with train
  auto loaded = apn::load_checkpoint<S>(ckpt);

  std::vector<std::uint16_t> tokens;
  if (split_name == "a_val" || split_name == "a_train") {
    auto data = load_domain_a(r);
    if (data.vocab.symbols != loaded.vocab.symbols)
      throw ConfigError("[eval] split: corpus vocabulary differs from the checkpoint's");
    tokens = split_name == "a_val" ? data.domain_a.val : data.domain_a.train;
  } else if (split_name == "b_val" || split_name == "b_train") {
    auto b = load_domain_b(r, loaded.vocab);
    tokens = split_name == "b_val" ? b.val : b.train;
  } else {
    throw ConfigError("[eval] split must be a_val|a_train|b_val|b_train");
  }
  r.finish();
  write_config_echo(args, raw, "eval");
  context = std::min(context, loaded.model.cfg.context_len);
  const double ppl =
      apn::evaluate_ppl(loaded.model, tokens, batches, batch, context, std::uint64_t(seed));
  std::ostringstream os;
  os.precision(10);
  os << "split,ppl\n" << split_name << "," << ppl << "\n";
  write_file(fs::path(args.out_dir) / "eval.csv", os.str());
  std::cout << "PPL(" << split_name << ") = " << ppl << "\n";
  return 0;
}

template <class S>
int cmd_protocol(const CommonArgs& args, apn::ConfigReader& r, const apn::ConfigFile& raw) {
  auto data = load_domain_a(r);
  auto b = load_domain_b(r, data.vocab);
  auto base = apn::model_config_from_reader(r);
  base.vocab_size = data.vocab.size();
  auto tcfg = train_config_from(r, args);
  auto acfg = adapt_config_from(r, args);
  const int eval_batches = static_cast<int>(r.get_long("protocol", "eval_batches", 8));
  r.finish();
  write_config_echo(args, raw, "protocol");

  apn::ModelConfig dense_cfg = base;
  dense_cfg.ffn_kind = apn::FfnKind::Dense;
  apn::ModelConfig apn_cfg = base;
  apn_cfg.ffn_kind = apn::FfnKind::Apn;
  apn::AdaptConfig dense_adapt = acfg;
  dense_adapt.rule = apn::UpdateRule::Global;
  apn::AdaptConfig apn_adapt = acfg;
  apn_adapt.rule = apn::UpdateRule::PatchLocal;

  apn::ProtocolArm<S> dense_arm{"dense", dense_cfg, dense_adapt};
  apn::ProtocolArm<S> apn_arm{"apn", apn_cfg, apn_adapt};
  auto rep = apn::run_protocol<S>(data.domain_a, b, dense_arm, apn_arm, tcfg, eval_batches);

  std::ostringstream os;
  os.precision(10);
  os << "model,update_rule,pre_a_ppl,pre_b_ppl,retention_ppl,adaptation_ppl,updated_params,"
        "total_params\n";
  for (const auto* arm : {&rep.dense, &rep.apn}) {
    os << arm->name << "," << apn::update_rule_name(arm->rule) << "," << arm->pre_a_ppl
       << "," << arm->pre_b_ppl << "," << arm->retention_ppl << "," << arm->adaptation_ppl
       << "," << arm->updated_params << "," << arm->total_params << "\n";
  }
  write_file(fs::path(args.out_dir) / "protocol.csv", os.str());
  std::ostringstream ov;
  ov.precision(10);
  ov << "metric,value\n";
  ov << "overlap_mean_normalized," << rep.overlap_normalized.mean << "\n";
  ov << "overlap_mean_raw," << rep.overlap_raw.mean << "\n";
  ov << "overlap_pairs," << rep.overlap_raw.pairs << "\n";
  write_file(fs::path(args.out_dir) / "overlap.csv", ov.str());
  std::cout << os.str();
  return 0;
}

template <class S>
int cmd_monitor(const CommonArgs& args, apn::ConfigReader& r, const apn::ConfigFile& raw) {
  const std::string ckpt = r.require_string("monitor", "checkpoint");
  const int batches = static_cast<int>(r.get_long("monitor", "batches", 4));
  const int batch = static_cast<int>(r.get_long("monitor", "batch", 16));
  const long seed = r.get_long("monitor", "seed", 55);
  auto loaded = apn::load_checkpoint<S>(ckpt);
  int context = static_cast<int>(
      r.get_long("monitor", "context", loaded.model.cfg.context_len));
  const std::string split_name = r.get_string("monitor", "split", "a_val");
  std::vector<std::uint16_t> tokens;
  if (split_name == "b_val") {
    tokens = load_domain_b(r, loaded.vocab).val;
  } else {
    auto data = load_domain_a(r);
    tokens = data.domain_a.val;
  }
  r.finish();
  write_config_echo(args, raw, "monitor");

  context = std::min(context, loaded.model.cfg.context_len);
  auto rep = apn::monitor_model(loaded.model, tokens, batches, batch, context,
                                std::uint64_t(seed));
  std::ostringstream os;
  os.precision(10);
  os << "layer,usage_entropy,conf_mean,conf_min,conf_p5,conf_p50,conf_p95,"
        "delta_norm_p50,delta_norm_p95,ratio_p50,ratio_p95,spikes\n";
  for (std::size_t l = 0; l < rep.layers.size(); ++l) {
    const auto& lm = rep.layers[l];
    os << l << "," << lm.usage.entropy << "," << lm.confidence.mean << ","
       << lm.confidence.min << "," << lm.confidence.p5 << "," << lm.confidence.p50 << ","
       << lm.confidence.p95 << "," << lm.residual.norm_p50 << "," << lm.residual.norm_p95
       << "," << lm.residual.ratio_p50 << "," << lm.residual.ratio_p95 << ","
       << lm.residual.spike_tokens.size() << "\n";
  }
  write_file(fs::path(args.out_dir) / "monitor.csv", os.str());

  std::ostringstream dec;
  dec.precision(10);
  dec << "patch,probability,conditional_loss,count\n";
  for (std::size_t i = 0; i < rep.decomposition.per_patch.size(); ++i) {
    const auto& p = rep.decomposition.per_patch[i];
    dec << i << "," << p.probability << "," << p.mean_loss << "," << p.count << "\n";
  }
  dec << "overall,," << rep.decomposition.overall_loss << ",\n";
  write_file(fs::path(args.out_dir) / "decomposition.csv", dec.str());
  std::cout << os.str();
  std::cout << "ppl " << rep.ppl << "\n";
  return 0;
}

template <class S>
int cmd_bench(const CommonArgs& args, apn::ConfigReader& r, const apn::ConfigFile& raw) {
  auto data = load_domain_a(r);
  auto base = apn::model_config_from_reader(r);
  base.vocab_size = data.vocab.size();
  auto tcfg = train_config_from(r, args);
  r.finish();
  write_config_echo(args, raw, "bench");

  std::ostringstream os;
  os.precision(10);
  os << "model,total_params,sublayer_params_per_layer,best_val_ppl\n";
  for (const auto kind : {apn::FfnKind::Dense, apn::FfnKind::Apn}) {
    apn::ModelConfig cfg = base;
    cfg.ffn_kind = kind;
    auto model = apn::ModelState<S>::init(cfg, tcfg.seed);
    auto res = apn::train_offline(model, data.domain_a, tcfg);
    os << apn::ffn_kind_name(kind) << "," << model.param_count() << ","
       << apn::sublayer_param_count(cfg) << "," << res.best_val_ppl << "\n";
  }
  write_file(fs::path(args.out_dir) / "bench.csv", os.str());
  std::cout << os.str();
  return 0;
}

int cmd_synth_domain_b(const CommonArgs& args, apn::ConfigReader& r,
                       const apn::ConfigFile& raw) {
  auto data = load_domain_a(r);
  auto b = load_domain_b(r, data.vocab);
  r.finish();
  write_config_echo(args, raw, "synth-domain-b");
  apn::save_split((fs::path(args.out_dir) / "domain_b.bin").string(), data.vocab, b);
  const auto sample = std::vector<std::uint16_t>(
      b.train.begin(), b.train.begin() + std::min<std::size_t>(b.train.size(), 2000));
  write_file(fs::path(args.out_dir) / "domain_b_sample.txt", data.vocab.decode(sample));
  std::cout << "wrote " << (b.train.size() + b.val.size()) << " Domain B tokens\n";
  return 0;
}

template <class S>
int dispatch(const std::string& verb, const CommonArgs& args) {
  apn::ConfigFile raw;
  if (!args.config_path.empty()) raw = apn::ConfigFile::load(args.config_path);
  apn::ConfigReader reader(raw);
  if (verb == "train") return cmd_train<S>(args, reader, raw);
  if (verb == "adapt") return cmd_adapt<S>(args, reader, raw);
  if (verb == "eval") return cmd_eval<S>(args, reader, raw);
  if (verb == "protocol") return cmd_protocol<S>(args, reader, raw);
  if (verb == "monitor") return cmd_monitor<S>(args, reader, raw);
  if (verb == "bench") return cmd_bench<S>(args, reader, raw);
  if (verb == "synth-domain-b") return cmd_synth_domain_b(args, reader, raw);
  throw ConfigError("unknown command: " + verb);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attractor patch network language model"};
  app.require_subcommand(1);

  CommonArgs args;
  std::vector<CLI::App*> subs;
  for (const char* verb :
       {"train", "adapt", "eval", "protocol", "monitor", "bench", "synth-domain-b"}) {
    auto* sub = app.add_subcommand(verb);
    sub->add_option("--config", args.config_path, "configuration file path");
    sub->add_option("--seed", args.seed, "seed override");
    sub->add_option("--out", args.out_dir, "output directory");
    sub->add_option("--precision", args.precision, "float width")
        ->check(CLI::IsMember({32, 64}));
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  const std::string verb = app.get_subcommands().front()->get_name();
  try {
    fs::create_directories(args.out_dir);
    if (args.precision == 64) return dispatch<double>(verb, args);
    return dispatch<float>(verb, args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    // Config and data shape problems exit 2; anything else is a runtime
    // failure.
    const std::string msg = e.what();
    std::cerr << "error: " << msg << "\n";
    if (msg.rfind("config", 0) == 0 || msg.find("Config") != std::string::npos ||
        msg.find("cannot open") != std::string::npos ||
        msg.find("vocabulary") != std::string::npos)
      return 2;
    return 1;
  }
}
