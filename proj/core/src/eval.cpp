#include "deepstack/eval.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <istream>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "deepstack/ops.hpp"
#include "deepstack/rng.hpp"

namespace deepstack {

bool ClassificationDataset::is_pair() const {
  return std::any_of(examples.begin(), examples.end(),
                     [](const ClassificationExample& e) { return e.text_b.has_value(); });
}

std::size_t ClassificationDataset::label_index(const std::string& label) const {
  const auto it = std::lower_bound(labels.begin(), labels.end(), label);
  if (it == labels.end() || *it != label) {
    throw InputError("label '" + label + "' is not in the label vocabulary");
  }
  return static_cast<std::size_t>(it - labels.begin());
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

}  // namespace

ClassificationDataset read_tsv_dataset(std::istream& in, std::string split,
                                       const std::vector<std::string>* label_vocab) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("dataset has no header line");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_tabs(line);
  const auto column = [&](const std::string& name) -> std::optional<std::size_t> {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto col_a = column("text_a");
  const auto col_b = column("text_b");
  const auto col_label = column("label");
  if (!col_a || !col_label) throw InputError("dataset header needs text_a and label columns");

  ClassificationDataset data;
  data.split = std::move(split);
  std::set<std::string> seen;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_tabs(line);
    const std::size_t need = std::max({*col_a, *col_label, col_b.value_or(0)}) + 1;
    if (cells.size() < need) {
      throw InputError("dataset line " + std::to_string(lineno) + ": expected " +
                       std::to_string(need) + " columns, got " + std::to_string(cells.size()));
    }
    ClassificationExample ex;
    ex.text_a = cells[*col_a];
    if (col_b) ex.text_b = cells[*col_b];
    ex.label = cells[*col_label];
    seen.insert(ex.label);
    data.examples.push_back(std::move(ex));
  }
  if (label_vocab != nullptr) {
    data.labels = *label_vocab;
    std::sort(data.labels.begin(), data.labels.end());
    for (const auto& l : seen) data.label_index(l);
  } else {
    data.labels.assign(seen.begin(), seen.end());
  }
  return data;
}

ClassificationDataset read_tsv_dataset(const std::filesystem::path& path, std::string split,
                                       const std::vector<std::string>* label_vocab) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset " + path.string());
  return read_tsv_dataset(in, std::move(split), label_vocab);
}

void write_tsv_dataset(std::ostream& out, const ClassificationDataset& data) {
  const bool pair = data.is_pair();
  out << "text_a" << (pair ? "\ttext_b" : "") << "\tlabel\n";
  for (const auto& e : data.examples) {
    out << e.text_a;
    if (pair) out << '\t' << e.text_b.value_or("");
    out << '\t' << e.label << '\n';
  }
}

void check_disjoint(const ClassificationDataset& a, const ClassificationDataset& b) {
  std::set<std::pair<std::string, std::string>> keys;
  for (const auto& e : a.examples) keys.emplace(e.text_a, e.text_b.value_or(""));
  for (const auto& e : b.examples) {
    if (keys.count({e.text_a, e.text_b.value_or("")})) {
      throw InputError("splits '" + a.split + "' and '" + b.split + "' share example '" +
                       e.text_a + "'");
    }
  }
}

EvalMetrics EvalMetrics::from_confusion(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn,
                                        std::uint64_t tn) {
  EvalMetrics m;
  m.tp = tp;
  m.fp = fp;
  m.fn = fn;
  m.tn = tn;
  m.total = tp + fp + fn + tn;
  m.correct = tp + tn;
  m.binary = true;
  m.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = m.precision + m.recall > 0.0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  m.accuracy = m.total > 0 ? static_cast<double>(m.correct) / static_cast<double>(m.total) : 0.0;
  return m;
}

EvalMetrics EvalMetrics::from_counts(std::uint64_t correct, std::uint64_t total) {
  EvalMetrics m;
  m.binary = false;
  m.correct = correct;
  m.total = total;
  m.accuracy = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return m;
}

EncodedExample encode_example(const TokenizerVocab& vocab, const ClassificationExample& ex,
                              std::size_t label, std::size_t max_len) {
  const std::int32_t sep = vocab.specials().eod;
  EncodedExample out;
  out.label = static_cast<std::int32_t>(label);
  out.ids.push_back(sep);
  const auto a = vocab.encode(ex.text_a);
  out.ids.insert(out.ids.end(), a.begin(), a.end());
  std::size_t first_segment = out.ids.size();
  if (ex.text_b) {
    out.ids.push_back(sep);
    first_segment = out.ids.size();
    const auto b = vocab.encode(*ex.text_b);
    out.ids.insert(out.ids.end(), b.begin(), b.end());
  }
  out.segments.assign(out.ids.size(), 0);
  std::fill(out.segments.begin() + static_cast<std::ptrdiff_t>(first_segment),
            out.segments.end(), 1);
  if (out.ids.size() > max_len) {
    out.ids.resize(max_len);
    out.segments.resize(max_len);
  }
  return out;
}

ModelInputs make_classification_inputs(std::span<const EncodedExample> examples,
                                       std::size_t pad_id) {
  ModelInputs in;
  in.batch = examples.size();
  for (const auto& e : examples) in.seq_len = std::max(in.seq_len, e.ids.size());
  for (const auto& e : examples) {
    const std::size_t pad = in.seq_len - e.ids.size();
    in.ids.insert(in.ids.end(), e.ids.begin(), e.ids.end());
    in.ids.insert(in.ids.end(), pad, static_cast<std::int32_t>(pad_id));
    in.segments.insert(in.segments.end(), e.segments.begin(), e.segments.end());
    in.segments.insert(in.segments.end(), pad, 0);
    in.attend.insert(in.attend.end(), e.ids.size(), 1);
    in.attend.insert(in.attend.end(), pad, 0);
  }
  return in;
}

void ensure_classifier_head(TransformerModel<float>& model, std::size_t classes,
                            std::uint64_t seed) {
  auto& params = model.params();
  if (params.contains("head.cls.weight")) {
    if (params.at("head.cls.weight").dim(1) != classes) {
      throw ConfigError("classifier head has " +
                        std::to_string(params.at("head.cls.weight").dim(1)) +
                        " classes, dataset has " + std::to_string(classes));
    }
    return;
  }
  const std::size_t d = model.config().d_layer;
  const ParamSpec weight{"head.cls.weight", {d, classes}, InitKind::normal, true};
  const ParamSpec bias{"head.cls.bias", {classes}, InitKind::zeros, false};
  std::mt19937_64 rng(mix_keys(seed, 0xC1A55));
  params.add(weight, init_parameter<float>(weight, model.config(), rng));
  params.add(bias, init_parameter<float>(bias, model.config(), rng));
}

template <typename T>
Tensor<T> classifier_logits(Tape<T>& tape, const TransformerModel<T>& model,
                            const ModelInputs& inputs, const ForwardContext& ctx) {
  ForwardContext c = ctx;
  c.lm_logits = false;
  const ModelOutputs<T> out = model.forward(tape, inputs, c);
  return add(tape, matmul(tape, out.pooled, model.params().at("head.cls.weight")),
             model.params().at("head.cls.bias"));
}

template Tensor<float> classifier_logits(Tape<float>&, const TransformerModel<float>&,
                                         const ModelInputs&, const ForwardContext&);
template Tensor<double> classifier_logits(Tape<double>&, const TransformerModel<double>&,
                                          const ModelInputs&, const ForwardContext&);

namespace {

std::vector<EncodedExample> encode_all(const TokenizerVocab& vocab,
                                       const ClassificationDataset& data,
                                       const std::vector<std::string>& labels,
                                       std::size_t max_len) {
  ClassificationDataset lookup;
  lookup.labels = labels;
  std::vector<EncodedExample> out;
  out.reserve(data.size());
  for (const auto& e : data.examples) {
    out.push_back(encode_example(vocab, e, lookup.label_index(e.label), max_len));
  }
  return out;
}

void check_compatible(const TransformerModel<float>& model, const TokenizerVocab& vocab) {
  if (model.config().family != Family::encoder_only) {
    throw ConfigError("classification fine-tuning needs an encoder-only model, got " +
                      std::string(to_string(model.config().family)));
  }
  if (vocab.size() > model.config().vocab_size) {
    throw ConfigError("tokenizer has " + std::to_string(vocab.size()) +
                      " symbols but the model vocabulary is " +
                      std::to_string(model.config().vocab_size));
  }
}

}  // namespace

FinetuneResult finetune(TransformerModel<float>& model, const TokenizerVocab& vocab,
                        const ClassificationDataset& train, const FinetuneConfig& config,
                        MetricsWriter* metrics) {
  check_compatible(model, vocab);
  if (train.size() == 0) throw InputError("fine-tuning split is empty");
  if (config.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(config.warmup_fraction >= 0.0 && config.warmup_fraction <= 1.0)) {
    throw ConfigError("warmup_fraction must lie in [0, 1]");
  }
  ensure_classifier_head(model, train.labels.size(), config.seed);
  const auto encoded = encode_all(vocab, train, train.labels, model.config().max_seq_len);

  const std::size_t per_epoch = (encoded.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t steps = config.max_steps.value_or(config.epochs * per_epoch);
  FinetuneResult result;
  result.steps = steps;
  if (steps == 0) return result;

  EngineConfig engine;
  engine.schedule.peak_lr = config.lr;
  engine.schedule.min_lr = 0.0;
  engine.schedule.warmup_steps =
      static_cast<std::uint64_t>(config.warmup_fraction * static_cast<double>(steps));
  engine.schedule.total_steps = steps;
  engine.schedule.decay = DecayShape::linear;
  engine.adam.weight_decay = config.weight_decay;
  engine.seed = config.seed;
  Trainer trainer(model, engine);

  std::vector<std::size_t> order(encoded.size());
  std::vector<EncodedExample> chunk;
  for (std::size_t step = 0; step < steps; ++step) {
    const std::size_t epoch = step / per_epoch;
    const std::size_t within = step % per_epoch;
    if (within == 0) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::mt19937_64 rng(mix_keys(config.seed, epoch));
      std::shuffle(order.begin(), order.end(), rng);
    }
    chunk.clear();
    const std::size_t begin = within * config.batch_size;
    const std::size_t end = std::min(begin + config.batch_size, encoded.size());
    for (std::size_t i = begin; i < end; ++i) chunk.push_back(encoded[order[i]]);
    const ModelInputs inputs = make_classification_inputs(chunk, vocab.specials().pad);
    std::vector<std::int32_t> targets;
    for (const auto& e : chunk) targets.push_back(e.label);
    const std::vector<float> weights(targets.size(), 1.0f);

    const StepMetrics m = trainer.custom_step(
        [&](Tape<float>& tape, const ForwardContext& ctx, LossStats&) {
          const Tensor<float> logits = classifier_logits(tape, model, inputs, ctx);
          return softmax_cross_entropy<float>(tape, logits, targets, weights);
        });
    if (step == 0) result.first_loss = m.loss;
    result.last_loss = m.loss;
    if (metrics != nullptr) metrics->write(m);
  }
  return result;
}

EvalMetrics evaluate(const TransformerModel<float>& model, const TokenizerVocab& vocab,
                     const ClassificationDataset& split, std::size_t batch_size) {
  if (split.size() == 0) throw InputError("evaluation split '" + split.split + "' is empty");
  check_compatible(model, vocab);
  if (!model.params().contains("head.cls.weight")) {
    throw ConfigError("model has no classifier head; fine-tune it first");
  }
  const std::size_t classes = model.params().at("head.cls.weight").dim(1);
  if (split.labels.size() > classes) {
    throw ConfigError("split has " + std::to_string(split.labels.size()) +
                      " labels, classifier has " + std::to_string(classes));
  }
  const auto encoded = encode_all(vocab, split, split.labels, model.config().max_seq_len);
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0, correct = 0;
  for (std::size_t begin = 0; begin < encoded.size(); begin += batch_size) {
    const std::size_t n = std::min(batch_size, encoded.size() - begin);
    const ModelInputs inputs = make_classification_inputs(
        std::span<const EncodedExample>(encoded).subspan(begin, n), vocab.specials().pad);
    Tape<float> tape(/*recording=*/false);
    const Tensor<float> logits = classifier_logits(tape, model, inputs, ForwardContext{});
    const auto values = logits.data();
    for (std::size_t r = 0; r < n; ++r) {
      const auto row = values.subspan(r * classes, classes);
      const auto pred = static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
      const std::int32_t truth = encoded[begin + r].label;
      correct += pred == truth ? 1 : 0;
      if (pred == 1 && truth == 1) ++tp;
      else if (pred == 1) ++fp;
      else if (truth == 1) ++fn;
      else ++tn;
    }
  }
  if (classes == 2) return EvalMetrics::from_confusion(tp, fp, fn, tn);
  return EvalMetrics::from_counts(correct, encoded.size());
}

ClassificationDataset make_synthetic_pair_task(std::size_t n, std::uint64_t seed,
                                               std::string split) {
  static const std::vector<std::string> kWords = {
      "red", "blue", "green", "gold", "gray", "pink",
      "cat", "dog", "owl", "fox", "elk", "bee"};
  constexpr std::size_t kLen = 3;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> word(0, kWords.size() - 1);
  const auto draw = [&] {
    std::vector<std::size_t> w(kLen);
    for (auto& x : w) x = word(rng);
    return w;
  };
  const auto join = [&](const std::vector<std::size_t>& w) {
    std::string s;
    for (std::size_t i = 0; i < w.size(); ++i) s += (i ? " " : "") + kWords[w[i]];
    return s;
  };
  const auto overlaps = [](const std::vector<std::size_t>& x, const std::vector<std::size_t>& y) {
    return std::any_of(x.begin(), x.end(),
                       [&](std::size_t w) { return std::find(y.begin(), y.end(), w) != y.end(); });
  };

  ClassificationDataset data;
  data.split = std::move(split);
  data.labels = {"0", "1"};
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = draw();
    std::vector<std::size_t> b;
    const bool positive = (rng() & 1u) != 0;
    if (positive) {
      b = a;
      std::shuffle(b.begin(), b.end(), rng);
    } else {
      do {
        b = draw();
      } while (overlaps(a, b));
    }
    data.examples.push_back({join(a), join(b), positive ? "1" : "0"});
  }
  return data;
}

std::size_t select_depth(std::span<const SweepRow> rows,
                         const std::function<double(const EvalMetrics&)>& score) {
  if (rows.empty()) throw InputError("no sweep rows to select from");
  std::size_t best = 0;
  double best_score = score(rows[0].metrics);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double s = score(rows[i].metrics);
    if (s > best_score || (s == best_score && rows[i].depth < rows[best].depth)) {
      best = i;
      best_score = s;
    }
  }
  return rows[best].depth;
}

SweepResult depth_sweep(const SweepConfig& config, const TokenizerVocab& vocab,
                        const ClassificationDataset& train,
                        const ClassificationDataset& dev) {
  if (config.depths.size() < 2) throw ConfigError("a depth sweep needs at least two depths");
  SweepResult result;
  for (const std::size_t depth : config.depths) {
    try {
      ModelConfig c = config.base;
      c.n_layers = depth;
      validate(c);
      TransformerModel<float> model = build_model<float>(c, config.seed);
      FinetuneConfig budget = config.budget;
      budget.seed = config.seed;
      finetune(model, vocab, train, budget);
      result.rows.push_back({c.name, depth, evaluate(model, vocab, dev)});
    } catch (const Error& e) {
      throw SweepAborted("depth " + std::to_string(depth) + " failed: " + e.what(),
                         result.rows);
    }
  }
  const std::size_t best =
      select_depth(result.rows, [](const EvalMetrics& m) { return m.accuracy; });
  result.best_depth = best;
  return result;
}

void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows) {
  out << "model,depth,precision,recall,f1,acc\n";
  const auto num = [](double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6) << v;
    return os.str();
  };
  for (const auto& r : rows) {
    out << r.model << ',' << r.depth << ','
        << (r.metrics.binary ? num(r.metrics.precision) : "") << ','
        << (r.metrics.binary ? num(r.metrics.recall) : "") << ','
        << (r.metrics.binary ? num(r.metrics.f1) : "") << ',' << num(r.metrics.accuracy)
        << '\n';
  }
}

}  // namespace deepstack
