#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <unistd.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "deepstack/cost.hpp"
#include "deepstack/data.hpp"
#include "deepstack/error.hpp"
#include "deepstack/eval.hpp"
#include "deepstack/model.hpp"
#include "deepstack/rng.hpp"
#include "deepstack/serialize.hpp"
#include "deepstack/tokenizer.hpp"
#include "deepstack/toy.hpp"
#include "deepstack/train.hpp"
#include "manifest.hpp"

#ifndef DEEPSTACK_VERSION
#define DEEPSTACK_VERSION "0.0.0"
#endif

namespace deepstack::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::uint64_t seed = 0;
  std::string config;
  std::string out;
  bool toy = false;
};

struct TokenizeOptions {
  std::string corpus;
  std::size_t vocab_size = 512;
  std::string mode = "reversible";
  bool byte_fallback = false;
};

struct PretrainOptions {
  std::string corpus;
  std::string vocab;
  std::size_t steps = 200;
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t shards = 1;
  bool recompute = false;
  bool loss_scaling = false;
  std::string resume;
  std::optional<double> lr;
  std::optional<std::uint64_t> warmup;
};

struct FinetuneOptions {
  std::string checkpoint;
  std::string vocab;
  std::string train;
  std::string dev;
  std::size_t synthetic = 0;
  double lr = 2e-5;
  std::size_t epochs = 3;
  std::optional<std::size_t> steps;
  std::size_t batch = 16;
};

struct EvalOptions {
  std::string checkpoint;
  std::string vocab;
  std::string data;
  std::string labels;
};

struct SweepOptions {
  std::string depths = "50,60,70,80,90";
  std::string train;
  std::string dev;
  std::size_t synthetic = 0;
  std::size_t steps = 20;
  std::size_t batch = 16;
  double lr = 1e-3;
};

struct CostOptions {
  std::string table;
  std::string configs;
  bool csv = false;
};

struct CountOptions {
  std::string all;
};

/// Owns a run directory and its manifest; finish() writes the manifest.
class Run {
 public:
  Run(const std::string& command, const Common& common, const std::vector<std::string>& argv)
      : dir_(resolve_dir(command, common.out)) {
    fs::create_directories(dir_);
    manifest_.command = command;
    manifest_.argv = argv;
    manifest_.seed = common.seed;
    manifest_.version = DEEPSTACK_VERSION;
    manifest_.started = utc_now();
  }

  const fs::path& dir() const { return dir_; }
  RunManifest& manifest() { return manifest_; }
  fs::path path(const std::string& name) const { return dir_ / name; }

  void finish(int exit_code) {
    manifest_.finished = utc_now();
    manifest_.exit_code = exit_code;
    manifest_.write(dir_);
  }

 private:
  static fs::path resolve_dir(const std::string& command, const std::string& out) {
    if (!out.empty()) return fs::path(out);
    const char* env = std::getenv(kOutputRootEnv);
    const fs::path root = env != nullptr && *env != '\0' ? fs::path(env) : fs::path("runs");
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
    return root / (command + "-" + stamp + "-" + std::to_string(::getpid()));
  }

  fs::path dir_;
  RunManifest manifest_;
};

ModelConfig load_config(const Common& common) {
  if (common.config.empty()) throw ConfigError("--config is required for this command");
  ModelConfig c = load_model_config(common.config);
  if (common.toy) c = ToyProfile{}.apply(c);
  return c;
}

std::string join(const std::vector<std::string>& docs, char sep) {
  std::string out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (i) out.push_back(sep);
    out += docs[i];
  }
  return out;
}

void report_warnings(const ModelConfig& c, std::ostream& err) {
  for (const auto& w : validate(c)) err << "warning: " << c.name << ": " << w << '\n';
}

int cmd_tokenize(const Common& common, const TokenizeOptions& o, Run& run, std::ostream& out) {
  run.manifest().add_input(o.corpus);
  const auto docs = read_documents(fs::path(o.corpus));
  BpeTrainOptions opts;
  opts.mode = parse_split_mode(o.mode);
  opts.byte_fallback = o.byte_fallback;
  const TokenizerVocab vocab = train_bpe(join(docs, '\n'), o.vocab_size, opts);
  vocab.save(run.path("vocab.txt").string());
  std::vector<std::vector<std::int32_t>> encoded;
  std::size_t tokens = 0;
  for (const auto& d : docs) {
    encoded.push_back(vocab.encode(d));
    tokens += encoded.back().size();
  }
  write_token_cache(run.path("tokens"), encoded);
  nlohmann::json summary{{"vocab_size", vocab.size()},
                         {"merges", vocab.merges().size()},
                         {"documents", docs.size()},
                         {"tokens", tokens},
                         {"mode", to_string(vocab.mode())}};
  std::ofstream(run.path("metrics.jsonl")) << summary.dump() << '\n';
  run.manifest().config = {{"vocab_size", o.vocab_size}, {"mode", o.mode},
                           {"byte_fallback", o.byte_fallback}, {"seed", common.seed}};
  out << "vocabulary: " << vocab.size() << " symbols, " << vocab.merges().size()
      << " merges, " << tokens << " tokens over " << docs.size() << " documents\n"
      << "wrote " << run.path("vocab.txt").string() << '\n';
  return kExitOk;
}

int cmd_pretrain(const Common& common, const PretrainOptions& o, Run& run, std::ostream& out,
                 std::ostream& err) {
  if (o.corpus.empty()) throw ConfigError("--corpus is required");
  std::optional<LoadedCheckpoint> resumed;
  ModelConfig config;
  if (!o.resume.empty()) {
    run.manifest().add_input(o.resume);
    resumed.emplace(load_checkpoint(fs::path(o.resume)));
    config = resumed->model.config();
  } else {
    run.manifest().add_input(common.config);
    config = load_config(common);
  }
  report_warnings(config, err);
  run.manifest().add_input(o.corpus);
  const auto docs = read_documents(fs::path(o.corpus));

  TokenizerVocab vocab;
  if (!o.vocab.empty()) {
    run.manifest().add_input(o.vocab);
    vocab = TokenizerVocab::load(o.vocab);
  } else {
    vocab = train_bpe(join(docs, '\n'), config.vocab_size, BpeTrainOptions{});
  }
  vocab.save(run.path("vocab.txt").string());
  if (vocab.size() > config.vocab_size) {
    throw ConfigError("tokenizer has " + std::to_string(vocab.size()) +
                      " symbols, model vocabulary is " + std::to_string(config.vocab_size));
  }

  std::vector<std::vector<std::int32_t>> encoded;
  for (const auto& d : docs) encoded.push_back(vocab.encode(d));
  write_token_cache(run.path("tokens"), encoded);
  const std::size_t seq_len = o.seq_len != 0 ? o.seq_len : config.max_seq_len;
  const PackedSequences packed =
      pack_documents(encoded, seq_len, vocab.specials().eod, vocab.specials().pad);

  EngineConfig engine;
  const Objective objective = objective_for(config.family);
  engine.schedule =
      objective == Objective::masked_lm ? TrainSchedule::bert() : TrainSchedule::gpt();
  if (common.toy) engine.schedule = ToyProfile{}.apply(engine.schedule);
  if (o.lr) engine.schedule.peak_lr = *o.lr;
  if (o.warmup) engine.schedule.warmup_steps = *o.warmup;
  engine.schedule.min_lr = std::min(engine.schedule.min_lr, engine.schedule.peak_lr);
  engine.schedule.warmup_steps = std::min(engine.schedule.warmup_steps, engine.schedule.total_steps);
  engine.recompute = o.recompute;
  engine.use_loss_scaler = o.loss_scaling;
  engine.seed = common.seed;
  const std::size_t batch_size =
      o.batch != 0 ? o.batch : (common.toy ? ToyProfile{}.batch_size : 8);

  TransformerModel<float> model =
      resumed ? std::move(resumed->model) : build_model<float>(config, common.seed);
  Trainer trainer(model, engine);
  if (resumed && resumed->trainer) trainer.restore(*resumed->trainer);

  run.manifest().config = {
      {"model", model_config_text(config)},
      {"objective", to_string(objective)},
      {"steps", o.steps},
      {"batch", batch_size},
      {"seq_len", seq_len},
      {"shards", o.shards},
      {"recompute", o.recompute},
      {"loss_scaling", o.loss_scaling},
      {"schedule",
       {{"peak_lr", engine.schedule.peak_lr},
        {"min_lr", engine.schedule.min_lr},
        {"warmup_steps", engine.schedule.warmup_steps},
        {"total_steps", engine.schedule.total_steps},
        {"decay", to_string(engine.schedule.decay)}}}};

  std::ofstream metrics_file(run.path("metrics.jsonl"), std::ios::app);
  MetricsWriter metrics(metrics_file);
  const MaskingPolicy policy;
  std::optional<double> first_loss;
  double last_loss = 0.0;
  while (trainer.step() < o.steps) {
    const std::uint64_t k = trainer.step();
    const std::size_t first = static_cast<std::size_t>(k) * batch_size;
    TrainBatch batch;
    switch (objective) {
      case Objective::causal_lm: batch = make_lm_batch(packed, first, batch_size); break;
      case Objective::masked_lm:
        batch = make_mlm_batch(packed, first, batch_size, vocab, policy, mix_keys(common.seed, k));
        break;
      case Objective::seq2seq:
        batch = make_seq2seq_batch(packed, first, batch_size, vocab.specials().eod);
        break;
    }
    const StepMetrics m = trainer.data_parallel_step(batch, o.shards);
    metrics.write(m);
    if (!first_loss) first_loss = m.loss;
    last_loss = m.loss;
  }
  const TrainerState state = trainer.state();
  save_checkpoint(run.path("checkpoint.bin"), model, &state);
  out << config.name << " (" << to_string(config.family) << ", " << config.n_layers
      << " layers, " << model.params().element_count() << " parameters): "
      << trainer.step() << " steps";
  if (first_loss) out << ", loss " << *first_loss << " -> " << last_loss;
  out << "\nwrote " << run.path("checkpoint.bin").string() << '\n';
  return kExitOk;
}

std::vector<std::string> read_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open labels file " + path);
  std::vector<std::string> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) labels.push_back(line);
  }
  return labels;
}

void write_labels(const fs::path& path, const std::vector<std::string>& labels) {
  std::ofstream out(path);
  for (const auto& l : labels) out << l << '\n';
}

TokenizerVocab vocab_for_task(const ClassificationDataset& data, std::size_t target) {
  std::string text;
  for (const auto& e : data.examples) {
    text += e.text_a;
    text += '\n';
    if (e.text_b) {
      text += *e.text_b;
      text += '\n';
    }
  }
  BpeTrainOptions opts;
  opts.byte_fallback = true;
  return train_bpe(text, std::max<std::size_t>(target, 262), opts);
}

nlohmann::json metrics_json(const EvalMetrics& m) {
  nlohmann::json j{{"accuracy", m.accuracy}, {"total", m.total}, {"correct", m.correct}};
  if (m.binary) {
    j["precision"] = m.precision;
    j["recall"] = m.recall;
    j["f1"] = m.f1;
    j["confusion"] = {{"tp", m.tp}, {"fp", m.fp}, {"fn", m.fn}, {"tn", m.tn}};
  }
  return j;
}

void print_metrics(std::ostream& out, const std::string& name, const EvalMetrics& m) {
  out << "model,precision,recall,f1,acc\n" << name << ',';
  if (m.binary) out << m.precision << ',' << m.recall << ',' << m.f1;
  else out << ",,";
  out << ',' << m.accuracy << '\n';
}

int cmd_finetune(const Common& common, const FinetuneOptions& o, Run& run, std::ostream& out,
                 std::ostream& err) {
  ClassificationDataset train;
  if (o.synthetic > 0) {
    train = make_synthetic_pair_task(o.synthetic, common.seed);
  } else if (!o.train.empty()) {
    run.manifest().add_input(o.train);
    train = read_tsv_dataset(fs::path(o.train), "train");
  } else {
    throw ConfigError("finetune needs --train or --synthetic");
  }

  std::optional<TransformerModel<float>> model;
  if (!o.checkpoint.empty()) {
    run.manifest().add_input(o.checkpoint);
    model.emplace(load_checkpoint(fs::path(o.checkpoint)).model);
  } else {
    run.manifest().add_input(common.config);
    err << "note: no --checkpoint given, fine-tuning from random initialisation\n";
    model.emplace(build_model<float>(load_config(common), common.seed));
  }
  report_warnings(model->config(), err);
  TokenizerVocab vocab;
  if (!o.vocab.empty()) {
    run.manifest().add_input(o.vocab);
    vocab = TokenizerVocab::load(o.vocab);
  } else {
    vocab = vocab_for_task(train, model->config().vocab_size);
  }
  vocab.save(run.path("vocab.txt").string());
  write_labels(run.path("labels.txt"), train.labels);

  FinetuneConfig fc;
  fc.lr = o.lr;
  fc.epochs = o.epochs;
  fc.max_steps = o.steps;
  fc.batch_size = o.batch;
  fc.seed = common.seed;
  run.manifest().config = {{"model", model_config_text(model->config())},
                           {"lr", fc.lr},
                           {"epochs", fc.epochs},
                           {"batch", fc.batch_size},
                           {"examples", train.size()}};
  if (fc.max_steps) run.manifest().config["steps"] = *fc.max_steps;

  std::ofstream metrics_file(run.path("metrics.jsonl"));
  MetricsWriter metrics(metrics_file);
  const FinetuneResult r = finetune(*model, vocab, train, fc, &metrics);
  save_checkpoint(run.path("checkpoint.bin"), *model);
  out << "fine-tuned " << r.steps << " steps, loss " << r.first_loss << " -> " << r.last_loss
      << '\n';
  const EvalMetrics train_metrics = evaluate(*model, vocab, train);
  out << "train accuracy " << train_metrics.accuracy << '\n';
  nlohmann::json report{{"train", metrics_json(train_metrics)}};
  if (!o.dev.empty()) {
    run.manifest().add_input(o.dev);
    const ClassificationDataset dev = read_tsv_dataset(fs::path(o.dev), "dev", &train.labels);
    const EvalMetrics m = evaluate(*model, vocab, dev);
    report["dev"] = metrics_json(m);
    print_metrics(out, model->config().name, m);
  }
  std::ofstream(run.path("eval.json")) << report.dump(2) << '\n';
  return kExitOk;
}

int cmd_eval(const Common&, const EvalOptions& o, Run& run, std::ostream& out) {
  if (o.checkpoint.empty() || o.vocab.empty() || o.data.empty()) {
    throw ConfigError("eval needs --checkpoint, --vocab and --data");
  }
  run.manifest().add_input(o.checkpoint);
  run.manifest().add_input(o.vocab);
  run.manifest().add_input(o.data);
  const LoadedCheckpoint ckpt = load_checkpoint(fs::path(o.checkpoint));
  const TokenizerVocab vocab = TokenizerVocab::load(o.vocab);
  std::vector<std::string> labels;
  if (!o.labels.empty()) {
    run.manifest().add_input(o.labels);
    labels = read_labels(o.labels);
  }
  const ClassificationDataset data =
      read_tsv_dataset(fs::path(o.data), "eval", labels.empty() ? nullptr : &labels);
  const EvalMetrics m = evaluate(ckpt.model, vocab, data);
  std::ofstream(run.path("eval.json")) << metrics_json(m).dump(2) << '\n';
  std::ofstream(run.path("metrics.jsonl")) << metrics_json(m).dump() << '\n';
  print_metrics(out, ckpt.model.config().name, m);
  return kExitOk;
}

std::vector<std::size_t> parse_depths(const std::string& text) {
  std::vector<std::size_t> depths;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      const auto v = std::stoull(item, &pos);
      if (pos != item.size()) throw std::invalid_argument(item);
      depths.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw ConfigError("bad depth '" + item + "' in --depths");
    }
  }
  return depths;
}

int cmd_sweep(const Common& common, const SweepOptions& o, Run& run, std::ostream& out,
              std::ostream& err) {
  ModelConfig base;
  if (!common.config.empty()) {
    run.manifest().add_input(common.config);
    base = load_config(common);
  } else {
    base.name = "toy-encoder";
    base.family = Family::encoder_only;
    base = ToyProfile{}.apply(base);
  }
  ClassificationDataset train;
  ClassificationDataset dev;
  if (o.synthetic > 0) {
    train = make_synthetic_pair_task(o.synthetic, common.seed, "train");
    dev = make_synthetic_pair_task(std::max<std::size_t>(o.synthetic / 2, 1),
                                   mix_keys(common.seed, 1), "dev");
  } else if (!o.train.empty() && !o.dev.empty()) {
    run.manifest().add_input(o.train);
    run.manifest().add_input(o.dev);
    train = read_tsv_dataset(fs::path(o.train), "train");
    dev = read_tsv_dataset(fs::path(o.dev), "dev", &train.labels);
  } else {
    throw ConfigError("sweep needs --train and --dev, or --synthetic");
  }
  const TokenizerVocab vocab = vocab_for_task(train, base.vocab_size);
  if (vocab.size() > base.vocab_size) base.vocab_size = vocab.size();

  SweepConfig sc;
  sc.base = base;
  sc.depths = parse_depths(o.depths);
  sc.budget.lr = o.lr;
  sc.budget.max_steps = o.steps;
  sc.budget.batch_size = o.batch;
  sc.seed = common.seed;
  run.manifest().config = {{"model", model_config_text(base)},
                           {"depths", sc.depths},
                           {"steps", o.steps},
                           {"batch", o.batch},
                           {"lr", o.lr}};
  try {
    const SweepResult result = depth_sweep(sc, vocab, train, dev);
    std::ofstream csv(run.path("sweep.csv"));
    write_sweep_csv(csv, result.rows);
    write_sweep_csv(out, result.rows);
    out << "best depth: " << result.best_depth << " (highest dev accuracy, ties to fewer layers)\n";
    std::ofstream(run.path("metrics.jsonl"))
        << nlohmann::json{{"best_depth", result.best_depth}}.dump() << '\n';
  } catch (const SweepAborted& e) {
    std::ofstream csv(run.path("sweep.csv"));
    write_sweep_csv(csv, e.partial());
    err << "error: sweep aborted: " << e.what() << "\npartial results in "
        << run.path("sweep.csv").string() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}

std::vector<ModelConfig> load_config_dir(const std::string& dir) {
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".cfg") paths.push_back(entry.path());
  }
  std::sort(paths.begin(), paths.end());
  std::vector<ModelConfig> configs;
  for (const auto& p : paths) configs.push_back(load_model_config(p.string()));
  return configs;
}

int cmd_cost(const Common&, const CostOptions& o, Run& run, std::ostream& out) {
  if (o.table.empty()) throw ConfigError("cost needs --table");
  run.manifest().add_input(o.table);
  const auto records = read_cost_records(o.table);
  std::vector<ModelConfig> configs;
  if (!o.configs.empty()) configs = load_config_dir(o.configs);
  const auto rows = cost_table(records, configs);
  std::ofstream text(run.path("report.txt"));
  write_cost_text(text, rows);
  std::ofstream csv(run.path("report.csv"));
  write_cost_csv(csv, rows);
  if (o.csv) write_cost_csv(out, rows);
  else write_cost_text(out, rows);
  run.manifest().config = {{"table", o.table}, {"configs", o.configs}, {"peak_rate", kDefaultPeakRate}};
  return kExitOk;
}

void print_count(std::ostream& out, const ModelConfig& c) {
  const std::uint64_t total = count_params(c);
  out << c.name << ": " << total << " parameters (" << format_magnitude(static_cast<double>(total))
      << "), blocks " << count_block_params(c);
  if (c.reported_params) {
    const double dev = std::abs(static_cast<double>(total) - *c.reported_params) / *c.reported_params;
    std::ostringstream pct;
    pct.precision(3);
    pct << dev * 100.0;
    out << ", reported " << format_magnitude(*c.reported_params) << ", deviation " << pct.str()
        << '%';
  }
  out << '\n';
}

int cmd_count(const Common& common, const CountOptions& o, Run& run, std::ostream& out,
              std::ostream& err) {
  std::vector<ModelConfig> configs;
  if (!o.all.empty()) {
    configs = load_config_dir(o.all);
    if (common.toy) {
      for (auto& c : configs) c = ToyProfile{}.apply(c);
    }
  } else {
    run.manifest().add_input(common.config);
    configs.push_back(load_config(common));
  }
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& c : configs) {
    report_warnings(c, err);
    print_count(out, c);
    counts[c.name] = count_params(c);
  }
  std::ofstream(run.path("metrics.jsonl")) << counts.dump() << '\n';
  return kExitOk;
}

void add_common(CLI::App* sub, Common& common) {
  sub->add_option("--seed", common.seed, "Random seed");
  sub->add_option("--config", common.config, "Model config file (key = value)");
  sub->add_option("--out", common.out,
                  std::string("Run directory (default: $") + kOutputRootEnv + "/<command>-<time>)");
  sub->add_flag("--toy", common.toy, "Apply the desk-scale toy profile");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Depth-scaled transformer pretraining and evaluation toolkit", "deepstack"};
  app.require_subcommand(1);
  app.set_version_flag("--version", DEEPSTACK_VERSION);

  Common common;
  TokenizeOptions tok;
  PretrainOptions pre;
  FinetuneOptions fin;
  EvalOptions ev;
  SweepOptions sw;
  CostOptions cost;
  CountOptions count;

  auto* tokenize = app.add_subcommand("tokenize-train", "Train a BPE vocabulary on a corpus");
  add_common(tokenize, common);
  tokenize->add_option("--corpus", tok.corpus, "Blank-line separated documents")->required();
  tokenize->add_option("--vocab-size", tok.vocab_size, "Target vocabulary size");
  tokenize->add_option("--mode", tok.mode, "reversible | space-marked");
  tokenize->add_flag("--byte-fallback", tok.byte_fallback, "Include all 256 bytes");

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain a model on a corpus");
  add_common(pretrain, common);
  pretrain->add_option("--corpus", pre.corpus, "Blank-line separated documents");
  pretrain->add_option("--vocab", pre.vocab, "Vocabulary file (trained on the corpus if absent)");
  pretrain->add_option("--steps", pre.steps, "Total optimizer steps");
  pretrain->add_option("--batch", pre.batch, "Sequences per step");
  pretrain->add_option("--seq-len", pre.seq_len, "Packed sequence length");
  pretrain->add_option("--shards", pre.shards, "Simulated data-parallel replicas");
  pretrain->add_flag("--recompute", pre.recompute, "Recompute block activations in backward");
  pretrain->add_flag("--loss-scaling", pre.loss_scaling, "Dynamic loss scaling");
  pretrain->add_option("--resume", pre.resume, "Continue from a checkpoint");
  pretrain->add_option("--lr", pre.lr, "Override peak learning rate");
  pretrain->add_option("--warmup", pre.warmup, "Override warmup steps");

  auto* finetune_cmd = app.add_subcommand("finetune", "Fine-tune a classifier head");
  add_common(finetune_cmd, common);
  finetune_cmd->add_option("--checkpoint", fin.checkpoint, "Pretrained encoder checkpoint");
  finetune_cmd->add_option("--vocab", fin.vocab, "Vocabulary file");
  finetune_cmd->add_option("--train", fin.train, "Training TSV");
  finetune_cmd->add_option("--dev", fin.dev, "Dev TSV to evaluate after training");
  finetune_cmd->add_option("--synthetic", fin.synthetic, "Use N synthetic pair examples");
  finetune_cmd->add_option("--lr", fin.lr, "Peak learning rate");
  finetune_cmd->add_option("--epochs", fin.epochs, "Epochs");
  finetune_cmd->add_option("--steps", fin.steps, "Fixed step budget (overrides epochs)");
  finetune_cmd->add_option("--batch", fin.batch, "Examples per step");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a fine-tuned checkpoint");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Fine-tuned checkpoint");
  eval_cmd->add_option("--vocab", ev.vocab, "Vocabulary file");
  eval_cmd->add_option("--data", ev.data, "TSV split to evaluate");
  eval_cmd->add_option("--labels", ev.labels, "Label list written by finetune");

  auto* sweep = app.add_subcommand("sweep", "Depth sweep on a classification task");
  add_common(sweep, common);
  sweep->add_option("--depths", sw.depths, "Comma-separated layer counts");
  sweep->add_option("--train", sw.train, "Training TSV");
  sweep->add_option("--dev", sw.dev, "Dev TSV");
  sweep->add_option("--synthetic", sw.synthetic, "Use N synthetic pair examples");
  sweep->add_option("--steps", sw.steps, "Fine-tuning steps per depth");
  sweep->add_option("--batch", sw.batch, "Examples per step");
  sweep->add_option("--lr", sw.lr, "Peak learning rate");

  auto* cost_cmd = app.add_subcommand("cost", "Training cost report");
  add_common(cost_cmd, common);
  cost_cmd->add_option("--table", cost.table, "CSV: model,time,steps,gpus,eflops");
  cost_cmd->add_option("--configs", cost.configs, "Directory of .cfg files for parameter columns");
  cost_cmd->add_flag("--csv", cost.csv, "Print CSV instead of aligned text");

  auto* count_cmd = app.add_subcommand("count-params", "Exact parameter counts");
  add_common(count_cmd, common);
  count_cmd->add_option("--all", count.all, "Count every .cfg file in a directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << DEEPSTACK_VERSION << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string command = chosen->get_name();
  std::optional<Run> run;
  try {
    run.emplace(command, common, args);
    int code = kExitOk;
    if (chosen == tokenize) code = cmd_tokenize(common, tok, *run, out);
    else if (chosen == pretrain) code = cmd_pretrain(common, pre, *run, out, err);
    else if (chosen == finetune_cmd) code = cmd_finetune(common, fin, *run, out, err);
    else if (chosen == eval_cmd) code = cmd_eval(common, ev, *run, out);
    else if (chosen == sweep) code = cmd_sweep(common, sw, *run, out, err);
    else if (chosen == cost_cmd) code = cmd_cost(common, cost, *run, out);
    else if (chosen == count_cmd) code = cmd_count(common, count, *run, out, err);
    run->finish(code);
    return code;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    if (run) {
      try {
        run->finish(kExitFailure);
      } catch (const std::exception&) {
      }
    }
    return kExitFailure;
  }
}

}  // namespace deepstack::cli
