#include "support.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <string>

#include "deepstack/error.hpp"
#include "deepstack/ops.hpp"
#include "deepstack/tokenizer.hpp"
#include "deepstack/toy.hpp"
#include "deepstack/train.hpp"

#ifndef DEEPSTACK_SOURCE_DIR
#error "DEEPSTACK_SOURCE_DIR must point at the repository root"
#endif

namespace deepstack::testkit {

std::filesystem::path source_dir() { return std::filesystem::path(DEEPSTACK_SOURCE_DIR); }

std::filesystem::path data_path(const std::string& relative) { return source_dir() / relative; }

std::size_t Gen::size(std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
}

double Gen::real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }

bool Gen::coin(double p) { return std::bernoulli_distribution(p)(rng_); }

std::vector<double> Gen::values(std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = real(lo, hi);
  return v;
}

Tensor<double> Gen::tensor(const Shape& shape, bool requires_grad, double spread) {
  return Tensor<double>(shape, values(numel(shape), -spread, spread), requires_grad);
}

std::vector<std::int32_t> Gen::ids(std::size_t n, std::int32_t lo, std::int32_t hi) {
  std::uniform_int_distribution<std::int32_t> d(lo, hi);
  std::vector<std::int32_t> v(n);
  for (auto& x : v) x = d(rng_);
  return v;
}

std::string Gen::bytes(std::size_t n) {
  std::uniform_int_distribution<int> d(0, 255);
  std::string s(n, '\0');
  for (auto& c : s) c = static_cast<char>(d(rng_));
  return s;
}

namespace {

double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double rel_error(const std::vector<double>& a, const std::vector<double>& n) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - n[i];
  const double denom = std::max(norm2(a), norm2(n));
  return denom == 0.0 ? 0.0 : norm2(d) / denom;
}

// Evaluates sum_i w_i * out_i without recording.
double probe(const DoubleFn& fn, const std::vector<Tensor<double>>& inputs,
             const std::vector<double>& w) {
  Tape<double> tape(false);
  const Tensor<double> out = fn(tape, inputs);
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out.data()[i];
  return s;
}

// Truncation error of the fourth-order stencil is O(h^4) while roundoff
// grows like eps * |f| / h. Tensors whose gradient is tiny next to the
// function value need the larger steps, smooth ones the smaller.
constexpr std::array<double, 3> kSteps{1e-3, 1e-4, 1e-5};

double stencil(Tensor<double>& t, std::size_t i, double h, const std::function<double()>& value) {
  const double keep = t.data()[i];
  const auto at = [&](double dx) {
    t.data()[i] = keep + dx;
    return value();
  };
  const double d = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
  t.data()[i] = keep;
  return d;
}

// Smallest relative error over the step ladder. A wrong backward disagrees
// at every step; roundoff or truncation only at some.
double tensor_error(Tensor<double> t, const std::vector<double>& analytic,
                    const std::function<double()>& value) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> numeric(t.size());
  for (double h : kSteps) {
    for (std::size_t i = 0; i < t.size(); ++i) numeric[i] = stencil(t, i, h, value);
    best = std::min(best, rel_error(analytic, numeric));
  }
  return best;
}

}  // namespace

GradCheck check_gradients(const DoubleFn& fn, const std::vector<Tensor<double>>& inputs,
                          std::uint64_t seed) {
  std::vector<double> w;
  {
    Tape<double> tape(false);
    const Tensor<double> out = fn(tape, inputs);
    Gen gen(seed);
    w = gen.values(out.size(), 0.5, 1.5);
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (gen.coin()) w[i] = -w[i];
    }
  }
  for (const auto& x : inputs) x.zero_grad();
  {
    Tape<double> tape;
    const Tensor<double> out = fn(tape, inputs);
    const Tensor<double> loss = weighted_sum(tape, out, std::span<const double>(w));
    tape.backward(loss);
  }
  GradCheck result;
  for (const auto& x : inputs) {
    if (!x.requires_grad()) continue;
    std::vector<double> analytic(x.size(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    const double err = tensor_error(x, analytic, [&] { return probe(fn, inputs, w); });
    result.max_rel_error = std::max(result.max_rel_error, err);
    result.checked += x.size();
  }
  return result;
}

GradCheck check_model_gradients(TransformerModel<double>& model,
                                const std::function<Tensor<double>(Tape<double>&)>& loss) {
  model.params().zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss(tape));
  }
  const auto grads = model.params().gradients();
  const auto value = [&] {
    Tape<double> tape(false);
    return loss(tape).data()[0];
  };
  GradCheck result;
  for (std::size_t e = 0; e < model.params().size(); ++e) {
    const Tensor<double>& p = model.params().entries()[e].tensor;
    result.max_rel_error = std::max(result.max_rel_error, tensor_error(p, grads[e], value));
    result.checked += p.size();
  }
  return result;
}

ModelConfig tiny_config(Family family, Gen& gen, std::size_t max_layers) {
  ModelConfig c;
  c.name = "tiny";
  c.family = family;
  c.n_heads = gen.size(1, 2);
  c.d_head = gen.size(2, 4);
  c.d_layer = c.n_heads * c.d_head;
  c.d_ff = gen.size(4, 12);
  c.vocab_size = gen.size(8, 14);
  c.max_seq_len = 8;
  c.n_layers = family == Family::encoder_decoder ? 2 : gen.size(1, max_layers);
  if (family == Family::encoder_decoder && max_layers >= 4 && gen.coin()) c.n_layers = 4;
  c.tie_embeddings = gen.coin(0.7);
  c.dropout_p = gen.coin() ? 0.1 : 0.0;
  c.init_std = 0.3;
  return c;
}

TrainBatch random_batch(const ModelConfig& config, Gen& gen, std::size_t batch,
                        std::size_t seq_len) {
  const auto vocab = static_cast<std::int32_t>(config.vocab_size) - 1;
  TrainBatch b;
  b.objective = objective_for(config.family);
  b.batch = batch;
  b.seq_len = seq_len;
  b.ids = gen.ids(batch * seq_len, 4, vocab);
  b.real.assign(batch * seq_len, 1);
  // Trailing padding on some rows.
  for (std::size_t r = 0; r < batch; ++r) {
    const std::size_t pad = gen.coin(0.4) ? gen.size(1, seq_len / 2) : 0;
    for (std::size_t t = seq_len - pad; t < seq_len; ++t) {
      b.real[r * seq_len + t] = 0;
      b.ids[r * seq_len + t] = 0;
    }
  }
  switch (b.objective) {
    case Objective::causal_lm: break;
    case Objective::masked_lm:
      b.segments.resize(batch * seq_len);
      for (std::size_t r = 0; r < batch; ++r) {
        for (std::size_t t = 0; t < seq_len; ++t) b.segments[r * seq_len + t] = t >= seq_len / 2;
      }
      b.labels = b.ids;
      b.loss_mask.assign(batch * seq_len, 0);
      for (std::size_t i = 0; i < b.ids.size(); ++i) {
        if (b.real[i] && gen.coin(0.3)) {
          b.loss_mask[i] = 1;
          b.ids[i] = 3;
        }
      }
      b.loss_mask[0] = 1;
      for (std::size_t r = 0; r < batch; ++r) b.sop_labels.push_back(gen.coin() ? 1 : 0);
      break;
    case Objective::seq2seq:
      b.target_len = seq_len;
      b.labels = gen.ids(batch * seq_len, 4, vocab);
      b.target_ids.resize(batch * seq_len);
      for (std::size_t r = 0; r < batch; ++r) {
        b.target_ids[r * seq_len] = 2;
        for (std::size_t t = 1; t < seq_len; ++t) {
          b.target_ids[r * seq_len + t] = b.labels[r * seq_len + t - 1];
        }
      }
      b.loss_mask.assign(batch * seq_len, 1);
      break;
  }
  return b;
}

double relative_distance(const std::vector<float>& a, const std::vector<float>& b) {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    num += d * d;
    den += static_cast<double>(b[i]) * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-30);
}

ToyRun toy_decoder_run(std::uint64_t seed, std::size_t steps) {
  const ToyProfile toy;
  const ModelConfig config = toy.apply(load_model_config(data_path("configs/cpm-x-s.cfg").string()));
  const auto docs = read_documents(data_path("data/toy_corpus.txt"));
  std::string corpus;
  for (const auto& d : docs) corpus += d + "\n";
  const TokenizerVocab vocab = train_bpe(corpus, config.vocab_size);
  std::vector<std::vector<std::int32_t>> encoded;
  for (const auto& d : docs) encoded.push_back(vocab.encode(d));
  const PackedSequences packed =
      pack_documents(encoded, config.max_seq_len, vocab.specials().eod, vocab.specials().pad);

  EngineConfig engine;
  engine.schedule = toy.apply(TrainSchedule::gpt());
  engine.seed = seed;
  TransformerModel<float> model = build_model<float>(config, seed);
  Trainer trainer(model, engine);
  ToyRun run;
  run.vocab_log = std::log(static_cast<double>(config.vocab_size));
  for (std::size_t k = 0; k < steps; ++k) {
    run.losses.push_back(trainer.train_step(make_lm_batch(packed, k * toy.batch_size, toy.batch_size)).loss);
  }
  return run;
}

std::vector<double> char_lm_run(std::uint64_t seed, std::size_t steps) {
  std::string text;
  for (int i = 0; i < 40; ++i) text += "the cat sat on the mat and the dog sat on the log. ";
  // ids 0 and 1 are pad and eod; characters follow in first-seen order
  std::map<char, std::int32_t> ids;
  std::vector<std::int32_t> doc;
  for (char ch : text) {
    auto it = ids.try_emplace(ch, static_cast<std::int32_t>(ids.size()) + 2).first;
    doc.push_back(it->second);
  }
  ModelConfig config;
  config.name = "char-lm";
  config.family = Family::decoder_only;
  config = ToyProfile{}.apply(config);
  config.n_layers = 2;
  config.vocab_size = ids.size() + 2;
  config.dropout_p = 0.0;
  const std::vector<std::vector<std::int32_t>> docs{doc};
  const PackedSequences packed = pack_documents(docs, config.max_seq_len, 1, 0);

  EngineConfig engine;
  engine.schedule.peak_lr = 1e-3;
  engine.schedule.min_lr = 1e-4;
  engine.schedule.warmup_steps = 20;
  engine.schedule.total_steps = steps;
  engine.seed = seed;
  TransformerModel<float> model = build_model<float>(config, seed);
  Trainer trainer(model, engine);
  std::vector<double> losses;
  for (std::size_t k = 0; k < steps; ++k) {
    losses.push_back(trainer.train_step(make_lm_batch(packed, k * 4, 4)).loss);
  }
  return losses;
}

FinetuneRun pair_finetune_run(std::uint64_t seed, std::size_t examples, std::size_t steps) {
  const ClassificationDataset train = make_synthetic_pair_task(examples, seed);
  std::string text;
  for (const auto& e : train.examples) text += e.text_a + "\n" + *e.text_b + "\n";
  const TokenizerVocab vocab = train_bpe(text, 512);

  ModelConfig config;
  config.name = "toy-encoder";
  config.family = Family::encoder_only;
  config = ToyProfile{}.apply(config);
  config.n_layers = 2;
  config.vocab_size = std::max<std::size_t>(vocab.size(), 1);
  TransformerModel<float> model = build_model<float>(config, seed);

  FinetuneConfig fc;
  fc.lr = 1e-3;
  fc.max_steps = steps;
  fc.seed = seed;
  const FinetuneResult r = finetune(model, vocab, train, fc);
  return {r.first_loss, r.last_loss, evaluate(model, vocab, train).accuracy};
}

bool regenerating_fixtures() {
  const char* v = std::getenv("DEEPSTACK_REGENERATE_FIXTURES");
  return v != nullptr && std::string(v) == "1";
}

std::vector<double> read_fixture(const std::string& name) {
  std::ifstream in(data_path("tests/fixtures/" + name));
  if (!in) throw InputError("missing fixture " + name);
  std::vector<double> values;
  for (double v; in >> v;) values.push_back(v);
  return values;
}

void write_fixture(const std::string& name, const std::vector<double>& values) {
  std::ofstream out(data_path("tests/fixtures/" + name));
  if (!out) throw InputError("cannot write fixture " + name);
  char buf[32];
  for (double v : values) {
    std::snprintf(buf, sizeof buf, "%.17g\n", v);
    out << buf;
  }
}

}  // namespace deepstack::testkit
